#include <gtest/gtest.h>

#include <numeric>

#include "pvp/steering.hpp"
#include "test_support.hpp"

using namespace pvp;
using pvp_test::default_dataset;

namespace {

std::vector<Sample> color_steerfit(const Dataset& d) { return select(d.steerfit, Task::color); }

// Most+CF samples relabelled so the random model's own answer counts as the
// prior: gives non-empty target sets without a trained model.
std::vector<Sample> relabelled_most_cf(const Params<float>& p, const Dataset& d, std::size_t n) {
    std::vector<Sample> out;
    for (const auto& s : select(d.eval, Task::color, PromptKind::most, Variant::cf)) {
        const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
        const auto probs = softmax<float>(tr.logits);
        std::vector<int> order(probs.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
        });
        Sample t = s;
        t.wk_answer = order[0];
        t.cf_answer = order[1];
        out.push_back(t);
        if (out.size() == n) {
            break;
        }
    }
    return out;
}

}  // namespace

TEST(ComputePvp, IdenticalPromptsGiveZeroVectors) {
    const auto& d = default_dataset();
    const auto p = pvp_test::random_params<float>(pvp_test::tiny_model(d, 3), 51);
    auto fit = color_steerfit(d);
    std::map<int, std::vector<int>> this_tokens;
    for (const auto& s : fit) {
        if (s.prompt_kind == PromptKind::this_) {
            this_tokens[*s.image_id] = s.tokens;
        }
    }
    for (auto& s : fit) {
        s.tokens = this_tokens.at(*s.image_id);
    }
    const auto v = compute_pvp(p, d, fit, Task::color);
    EXPECT_GT(v.n_pairs, 0);
    for (float x : v.s_cf) {
        EXPECT_EQ(x, 0.0F);
    }
}

TEST(ComputePvp, TwoPairMeanMatchesHandComputation) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 52);
    const auto fit = color_steerfit(d);
    // The first two images with both prompts.
    std::map<int, std::array<const Sample*, 2>> by_image;
    for (const auto& s : fit) {
        by_image[*s.image_id][s.prompt_kind == PromptKind::this_ ? 0 : 1] = &s;
    }
    std::vector<Sample> two;
    std::vector<std::array<const Sample*, 2>> pairs;
    for (const auto& [img, pr] : by_image) {
        two.push_back(*pr[0]);
        two.push_back(*pr[1]);
        pairs.push_back(pr);
        if (pairs.size() == 2) {
            break;
        }
    }
    const auto v = compute_pvp(p, d, two, Task::color);
    EXPECT_EQ(v.n_pairs, 2);
    EXPECT_EQ(v.config_digest, config_digest(c));
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<double> want(static_cast<std::size_t>(c.d_model), 0.0);
        for (const auto& pr : pairs) {
            const auto a = forward(p, ModelInput{d.image_of(*pr[0]), pr[0]->tokens});
            const auto b = forward(p, ModelInput{d.image_of(*pr[1]), pr[1]->tokens});
            for (std::size_t i = 0; i < want.size(); ++i) {
                want[i] += (static_cast<double>(a.state(l, a.last())[i]) - b.state(l, b.last())[i]) / 2.0;
            }
        }
        const auto got = v.cf(l);
        const auto wk = v.wk(l);
        for (std::size_t i = 0; i < want.size(); ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-6 * (1 + std::abs(want[i])));
            EXPECT_EQ(wk[i] + got[i], 0.0F);
        }
    }
    // Fitting is deterministic.
    EXPECT_EQ(compute_pvp(p, d, two, Task::color).s_cf, v.s_cf);
}

TEST(ComputePvp, Errors) {
    const auto& d = default_dataset();
    const auto p = init_params<float>(pvp_test::tiny_model(d), 1);
    EXPECT_THROW(compute_pvp(p, d, std::span<const Sample>{}, Task::color), Error);
    EXPECT_THROW(compute_pvp(p, d, d.steerfit, Task::color), Error);  // mixes tasks
    auto fit = color_steerfit(d);
    fit.push_back(fit.front());  // same image, same prompt kind twice
    EXPECT_THROW(compute_pvp(p, d, fit, Task::color), Error);
    const auto wk = select(d.eval, Task::color, std::nullopt, Variant::wk);
    EXPECT_THROW(compute_pvp(p, d, wk, Task::color), Error);
}

TEST(FlipRate, ZeroScaleIsZeroAndLedgerRecounts) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 53);
    const auto v = compute_pvp(p, d, color_steerfit(d), Task::color);
    const auto val = relabelled_most_cf(p, d, 40);
    const auto zero = eval_flip_rate(p, d, v, InterventionSpec{Direction::to_cf, 0, 2, 0.0}, val);
    EXPECT_EQ(zero.n, 40);
    EXPECT_EQ(zero.flip_rate, 0.0);
    for (const auto& row : zero.ledger) {
        EXPECT_EQ(row.before, row.after);
    }
    for (double alpha : {1.0, 4.0, 16.0}) {
        const auto r = eval_flip_rate(p, d, v, InterventionSpec{Direction::to_cf, 0, 2, alpha}, val);
        int flips = 0;
        for (const auto& row : r.ledger) {
            const Sample& s = *std::find_if(val.begin(), val.end(), [&](const Sample& x) { return x.id == row.sample_id; });
            EXPECT_EQ(row.before, s.wk_answer);
            EXPECT_EQ(row.goal, *s.cf_answer);
            EXPECT_EQ(row.after, steer_predict(p, d, s, v, r.spec).token);
            EXPECT_EQ(row.flipped, row.after == row.goal);
            flips += row.flipped ? 1 : 0;
        }
        EXPECT_EQ(r.flip_rate, 100.0 * flips / r.n);
        EXPECT_GE(r.flip_rate, 0.0);
        EXPECT_LE(r.flip_rate, 100.0);
    }
    // Cancellation through the prediction path.
    const Sample& s = val.front();
    const Steering both{&v, {{Direction::to_cf, 1, 1, 2.0}, {Direction::to_wk, 1, 1, 2.0}}};
    EXPECT_EQ(predict_answer(p, d, s, {}, &both).probability, predict_answer(p, d, s).probability);
}

TEST(FlipRate, EmptyTargetSetIsReported) {
    const auto& d = default_dataset();
    const auto p = init_params<float>(pvp_test::tiny_model(d), 1);
    const auto v = compute_pvp(p, d, color_steerfit(d), Task::color);
    const auto wk_only = select(d.eval, Task::color, std::nullopt, Variant::wk);
    try {
        (void)eval_flip_rate(p, d, v, InterventionSpec{}, wk_only);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::evaluation);
    }
}

TEST(WindowSearch, TieRuleAndGrid) {
    EXPECT_TRUE(better_window({3, 2, 1.0, 50.0, 10}, {2, 3, 1.0, 50.0, 10}));
    EXPECT_FALSE(better_window({2, 3, 1.0, 50.0, 10}, {3, 2, 1.0, 50.0, 10}));
    EXPECT_TRUE(better_window({5, 5, 1.0, 60.0, 10}, {0, 0, 1.0, 50.0, 10}));
    EXPECT_TRUE(better_window({1, 2, 1.0, 50.0, 10}, {2, 2, 1.0, 50.0, 10}));
    ModelConfig c;
    c.n_layers = 4;
    EXPECT_EQ(window_grid(c, {}).size(), 10u);  // 4 + 3 + 2 + 1
    EXPECT_EQ(window_grid(c, {2, 2, 0}).size(), 1u);
    EXPECT_THROW(window_grid(c, {0, 4, 0}), Error);
    EXPECT_THROW(window_grid(c, {3, 2, 0}), Error);
}

TEST(WindowSearch, ReturnsTheTableMaximum) {
    const auto& d = default_dataset();
    const auto c = pvp_test::tiny_model(d, 3);
    const auto p = pvp_test::random_params<float>(c, 54);
    const auto v = compute_pvp(p, d, color_steerfit(d), Task::color);
    const auto val = relabelled_most_cf(p, d, 30);
    const auto r = search_window(p, d, v, Direction::to_cf, val, {}, 8.0);
    ASSERT_EQ(r.table.size(), 6u);
    double mx = 0;
    for (const auto& row : r.table) {
        mx = std::max(mx, row.flip_rate);
        EXPECT_EQ(row.flip_rate, eval_flip_rate(p, d, v, InterventionSpec{Direction::to_cf, row.start_layer, row.window, 8.0}, val).flip_rate);
    }
    EXPECT_EQ(r.best_rate, mx);
    EXPECT_EQ(r.best.alpha, 8.0);
    const auto one = search_window(p, d, v, Direction::to_cf, val, {1, 1, 0}, 8.0);
    EXPECT_EQ(one.best.start_layer, 1);
    EXPECT_EQ(one.best.window, 0);
    EXPECT_EQ(search_table_csv(r).substr(0, 32), "start_layer,w,alpha,flip_rate,n\n");
}

TEST(VectorsIo, RoundTripAndCorruption) {
    const auto& d = default_dataset();
    const auto p = pvp_test::random_params<float>(pvp_test::tiny_model(d, 3), 55);
    const auto v = compute_pvp(p, d, color_steerfit(d), Task::color);
    pvp_test::TempDir dir("vectors");
    vectors_save(v, dir.path() / "v.bin");
    const auto back = vectors_load(dir.path() / "v.bin");
    EXPECT_EQ(back.s_cf, v.s_cf);
    EXPECT_EQ(back.split_digest, v.split_digest);
    EXPECT_EQ(back.config_digest, v.config_digest);
    EXPECT_EQ(back.n_pairs, v.n_pairs);
    const std::string bytes = vectors_bytes(v);
    try {
        (void)vectors_from_bytes(bytes.substr(0, bytes.size() - 3), "v");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::load);
    }
    EXPECT_THROW((void)vectors_from_bytes("garbage!", "v"), Error);
}
