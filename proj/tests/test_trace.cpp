#include <gtest/gtest.h>

#include <cmath>

#include "pvp/acceptance.hpp"
#include "pvp/trace.hpp"
#include "test_support.hpp"

using namespace pvp;
using pvp_test::default_dataset;

namespace {

// Independent logit lens: layer norm and unembedding in double, straight from the layout.
std::vector<double> oracle_decode(const Params<float>& p, std::span<const float> h) {
    const auto d = static_cast<std::size_t>(p.config.d_model);
    double mean = 0, var = 0;
    for (float x : h) {
        mean += x;
    }
    mean /= static_cast<double>(d);
    for (float x : h) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<double>(d);
    std::vector<double> z(d);
    for (std::size_t i = 0; i < d; ++i) {
        z[i] = (h[i] - mean) / std::sqrt(var + kLayerNormEps) * p.data[p.layout.lnf_g + i] + p.data[p.layout.lnf_b + i];
    }
    std::vector<double> logits(static_cast<std::size_t>(p.config.vocab_size));
    double mx = -1e300;
    for (std::size_t t = 0; t < logits.size(); ++t) {
        double s = 0;
        for (std::size_t i = 0; i < d; ++i) {
            s += p.data[p.layout.unembed + t * d + i] * z[i];
        }
        logits[t] = s;
        mx = std::max(mx, s);
    }
    double total = 0;
    for (double& x : logits) {
        x = std::exp(x - mx);
        total += x;
    }
    for (double& x : logits) {
        x /= total;
    }
    return logits;
}

const Sample& find(const std::vector<Sample>& split, PromptKind k, Variant v, int skip = 0) {
    for (const auto& s : split) {
        if (s.task == Task::color && s.prompt_kind == k && s.variant == v && skip-- == 0) {
            return s;
        }
    }
    throw std::runtime_error("no sample");
}

}  // namespace

TEST(EarlyDecode, LastLayerIsTheFinalDistribution) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 31);
    const Sample& s = find(d.eval, PromptKind::most, Variant::cf);
    const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
    EXPECT_EQ(early_decode(p, tr, c.n_layers - 1, tr.last()), softmax<float>(tr.logits));
    for (int l = 0; l < c.n_layers; ++l) {
        double sum = 0;
        for (double x : early_decode(p, tr, l, tr.last())) {
            EXPECT_GE(x, 0.0);
            EXPECT_LE(x, 1.0);
            sum += x;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    EXPECT_THROW(early_decode(p, tr, c.n_layers, tr.last()), Error);
    EXPECT_THROW(early_decode(p, tr, -1, tr.last()), Error);
    EXPECT_THROW(early_decode(p, tr, 0, tr.seq), Error);
}

TEST(EarlyDecode, MatchesIndependentReimplementation) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 4);
    const auto p = pvp_test::random_params<float>(c, 32);
    Rng r(33);
    for (int probe = 0; probe < 10; ++probe) {
        const Sample& s = d.eval[r.below(d.eval.size())];
        const int layer = static_cast<int>(r.below(static_cast<std::uint64_t>(c.n_layers)));
        const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
        const int pos = tr.n_prefix + static_cast<int>(r.below(s.tokens.size()));
        const auto got = early_decode(p, tr, layer, pos);
        const auto want = oracle_decode(p, tr.state(layer, pos));
        for (std::size_t t = 0; t < got.size(); ++t) {
            EXPECT_NEAR(got[t], want[t], 1e-5) << "probe " << probe << " token " << t;
        }
    }
}

TEST(AnswerTrace, EndpointsAndErrors) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 34);
    const Sample& s = find(d.eval, PromptKind::this_, Variant::cf);
    const auto t = answer_trace(p, d, s);
    ASSERT_EQ(t.p_wk.size(), 3u);
    const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
    const auto probs = softmax<float>(tr.logits);
    EXPECT_EQ(t.p_wk.back(), probs[static_cast<std::size_t>(s.wk_answer)]);
    EXPECT_EQ(t.p_cf.back(), probs[static_cast<std::size_t>(*s.cf_answer)]);
    for (std::size_t l = 0; l < t.p_wk.size(); ++l) {
        EXPECT_EQ(t.choice[l], restricted_choice(t.p_wk[l], t.p_cf[l]));
    }
    const auto again = answer_trace(p, d, s);
    EXPECT_EQ(again.p_wk, t.p_wk);
    EXPECT_EQ(again.p_cf, t.p_cf);
    EXPECT_THROW(answer_trace(p, d, find(d.eval, PromptKind::this_, Variant::wk)), Error);
}

TEST(AnswerTrace, TieRule) {
    EXPECT_EQ(restricted_choice(0.5, 0.5), Choice::tie);
    EXPECT_EQ(restricted_choice(0.5, 0.5 + 1e-9), Choice::tie);
    EXPECT_EQ(restricted_choice(0.5, 0.5 + 1e-8), Choice::cf);
    EXPECT_EQ(restricted_choice(0.3, 0.1), Choice::wk);
}

TEST(CountFlips, DefinitionExamples) {
    using C = Choice;
    const std::vector<C> mono{C::wk, C::wk, C::wk};
    EXPECT_EQ(count_flips(mono), (FlipStats{false, 0, 0, std::nullopt}));
    const std::vector<C> zigzag{C::wk, C::wk, C::cf, C::wk, C::cf};
    const auto z = count_flips(zigzag);
    EXPECT_EQ(z.n_wk_to_cf, 2);
    EXPECT_EQ(z.n_cf_to_wk, 1);
    EXPECT_EQ(z.first_flip_layer, 2);
    const std::vector<C> ties{C::tie, C::wk, C::tie, C::cf};
    EXPECT_EQ(count_flips(ties), (FlipStats{true, 1, 0, 3}));
    for (const auto& o : acceptance::flip_oracles()) {
        EXPECT_EQ(count_flips(o.choices), o.expected);
    }
    const std::vector<C> one{C::wk};
    EXPECT_THROW(count_flips(one), Error);
}

TEST(CountFlips, AgreesWithRecountOnRandomSequences) {
    Rng r(35);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<Choice> seq(2 + r.below(10));
        for (auto& c : seq) {
            c = static_cast<Choice>(r.below(3));
        }
        const auto f = count_flips(seq);
        const auto [to_cf, to_wk] = acceptance::recount_transitions(seq);
        EXPECT_EQ(f.n_wk_to_cf, to_cf);
        EXPECT_EQ(f.n_cf_to_wk, to_wk);
        EXPECT_EQ(f.flipped, to_cf + to_wk >= 1);
        EXPECT_EQ(f.first_flip_layer.has_value(), f.flipped);
    }
}

TEST(CountFlips, InvariantUnderMonotoneMaps) {
    Rng r(36);
    for (int trial = 0; trial < 500; ++trial) {
        const int L = 2 + static_cast<int>(r.below(8));
        std::vector<double> pw(static_cast<std::size_t>(L)), pc(static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) {
            pw[static_cast<std::size_t>(l)] = r.uniform(0.01, 1.0);
            pc[static_cast<std::size_t>(l)] = r.uniform(0.01, 1.0);
        }
        // A random strictly increasing map applied to both probabilities.
        const double a = r.uniform(0.5, 3.0), b = r.uniform(-1.0, 1.0);
        const auto map = [&](double x) { return a * std::pow(x, 1.5) + b; };
        std::vector<Choice> before, after;
        for (int l = 0; l < L; ++l) {
            const auto i = static_cast<std::size_t>(l);
            before.push_back(restricted_choice(pw[i], pc[i]));
            after.push_back(restricted_choice(map(pw[i]), map(pc[i])));
        }
        EXPECT_EQ(count_flips(before), count_flips(after));
    }
}

TEST(AggregateFlips, ConventionsAndArithmetic) {
    const std::vector<FlipStats> none{{false, 0, 0, std::nullopt}, {false, 0, 0, std::nullopt}};
    const auto a = aggregate_flip_stats(none);
    EXPECT_EQ(a.pct_without_flip, 100.0);
    EXPECT_FALSE(a.avg_wk_to_cf.has_value());
    EXPECT_TRUE(to_json(a).at("avg_wk_to_cf").is_null());
    const std::vector<FlipStats> two{{true, 2, 1, 1}, {false, 0, 0, std::nullopt}};
    const auto b = aggregate_flip_stats(two);
    EXPECT_EQ(b.pct_with_flip, 50.0);
    EXPECT_EQ(b.pct_without_flip, 50.0);
    EXPECT_EQ(b.avg_wk_to_cf, 2.0);
    EXPECT_EQ(b.avg_cf_to_wk, 1.0);
    EXPECT_THROW(aggregate_flip_stats(std::span<const FlipStats>{}), Error);
}

TEST(AttentionMass, PartitionAndNoImage) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 37);
    const Sample& s = find(d.eval, PromptKind::most, Variant::cf);
    const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
    const auto m = attention_mass(tr);
    for (int l = 0; l < c.n_layers; ++l) {
        const auto i = static_cast<std::size_t>(l);
        EXPECT_GE(m.image_mass[i], 0.0);
        EXPECT_GE(m.text_mass[i], 0.0);
        EXPECT_NEAR(m.image_mass[i] + m.text_mass[i] + m.other_mass[i], 1.0, 1e-6);
        EXPECT_NEAR(m.other_mass[i], 0.0, 1e-12);
    }
    const auto blank = forward(p, ModelInput{nullptr, s.tokens});
    const auto mb = attention_mass(blank);
    for (double x : mb.image_mass) {
        EXPECT_EQ(x, 0.0);
    }
    const std::vector<int> img{0, 1}, txt{1, 2};
    EXPECT_THROW(attention_mass(tr, img, txt), Error);
}

TEST(AttentionMass, UniformHandBuiltTrace) {
    ForwardTrace<float> tr;
    tr.n_layers = 1;
    tr.n_heads = 2;
    tr.seq = 2;
    tr.n_prefix = 1;
    tr.has_image = true;
    tr.attention = {1.0F, 0.0F, 0.5F, 0.5F,   // head 0
                    1.0F, 0.0F, 0.5F, 0.5F};  // head 1
    const auto m = attention_mass(tr);
    EXPECT_DOUBLE_EQ(m.image_mass[0], 0.5);
    EXPECT_DOUBLE_EQ(m.text_mass[0], 0.5);
    EXPECT_DOUBLE_EQ(m.other_mass[0], 0.0);
}
