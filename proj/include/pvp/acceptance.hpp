#pragma once

// Acceptance property checks shared by `pvp verify` and the acceptance test
// binary. Each check yields one or more CriterionResult rows.

#include <chrono>
#include <cstring>

#include "pvp/backprop.hpp"
#include "pvp/report.hpp"

namespace pvp::acceptance {

namespace detail {

template <class T>
bool bit_equal(std::span<const T> a, std::span<const T> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline CriterionResult boolean(std::string id, bool ok, std::string note = {}) {
    return criterion(std::move(id), ok ? 1.0 : 0.0, 1.0, false, std::move(note));
}

}  // namespace detail

inline constexpr double kMechanicsBudgetSeconds = 60.0;

/// Bit-level identities on a trained model: early decode at the last layer,
/// zero-scale steering, negation, cancellation; plus hue_remap S/V and
/// off-mask preservation on dataset images.
inline std::vector<CriterionResult> mechanical_checks(const Params<float>& p, const Dataset& data,
                                                      const SteeringVectors& v, int max_samples = 64) {
    const auto t0 = std::chrono::steady_clock::now();
    const int L = p.config.n_layers;
    bool decode_ok = true, alpha0_ok = true, cancel_ok = true;
    int checked = 0;
    for (const auto& s : data.eval) {
        if (checked >= max_samples) {
            break;
        }
        if (s.task != v.task) {
            continue;
        }
        ++checked;
        const ModelInput in{data.image_of(s), s.tokens};
        const auto base = forward(p, in);
        const auto lens = decode_logits<float>(p, base.state(L - 1, base.last()));
        decode_ok = decode_ok && detail::bit_equal<float>(lens, base.logits);
        const InterventionSpec zero{Direction::to_cf, 0, L - 1, 0.0};
        const Steering st0{&v, {zero}};
        const auto z = forward(p, in, &st0);
        alpha0_ok = alpha0_ok && detail::bit_equal<float>(z.hidden, base.hidden) &&
                    detail::bit_equal<float>(z.logits, base.logits);
        const int start = checked % L;
        const int w = (L - 1 - start) / 2;
        const Steering both{&v, {{Direction::to_cf, start, w, 1.0}, {Direction::to_wk, start, w, 1.0}}};
        const auto c = forward(p, in, &both);
        cancel_ok = cancel_ok && detail::bit_equal<float>(c.hidden, base.hidden) &&
                    detail::bit_equal<float>(c.logits, base.logits);
    }
    bool negation_ok = true;
    for (int l = 0; l < v.n_layers; ++l) {
        const auto cf = v.cf(l);
        const auto wk = v.wk(l);
        for (std::size_t i = 0; i < cf.size(); ++i) {
            negation_ok = negation_ok && wk[i] == -cf[i];
        }
    }

    double max_sv_err = 0;
    bool off_mask_ok = true;
    int remapped = 0;
    for (const auto& s : data.eval) {
        if (remapped >= 16 || s.task != Task::color || s.variant != Variant::wk || !s.image_id) {
            continue;
        }
        const CellImage& img = *data.image_of(s);
        const auto& mask = img.mask_of(s.object_ids.front()).bits;
        for (const auto& target : data.config.palette) {
            const CellImage out = hue_remap(img, mask, target);
            for (std::size_t px = 0; px < img.n_pixels(); ++px) {
                if (mask[px] == 0) {
                    const auto a = img.rgb(px);
                    const auto b = out.rgb(px);
                    off_mask_ok = off_mask_ok && a.r == b.r && a.g == b.g && a.b == b.b;
                    continue;
                }
                const auto a = rgb_to_hsv(img.rgb(px));
                const auto b = rgb_to_hsv(out.rgb(px));
                max_sv_err = std::max({max_sv_err, std::abs(a.s - b.s), std::abs(a.v - b.v)});
            }
        }
        ++remapped;
    }
    const double elapsed = detail::seconds_since(t0);
    std::vector<CriterionResult> out;
    out.push_back(detail::boolean("1.early_decode_last_layer_bit_exact", decode_ok && checked > 0,
                                  std::to_string(checked) + " samples"));
    out.push_back(detail::boolean("1.alpha_zero_bit_exact", alpha0_ok && checked > 0));
    out.push_back(detail::boolean("1.wk_is_negated_cf", negation_ok));
    out.push_back(detail::boolean("1.to_cf_plus_to_wk_cancels", cancel_ok && checked > 0));
    out.push_back(criterion("1.hue_remap_sv_error", -max_sv_err, -1e-6, false, "negated max |dS|,|dV|"));
    out.push_back(detail::boolean("1.hue_remap_off_mask_bit_exact", off_mask_ok && remapped > 0));
    out.push_back(criterion("1.runtime_budget", kMechanicsBudgetSeconds - elapsed, 0.0, false,
                            "seconds left of a 60 s budget"));
    return out;
}

struct GradientCheck {
    double max_rel_error = 0;
    std::vector<std::size_t> coordinates;
    double seconds = 0;
};

/// Central differences on a d_model=16, two-layer model in double precision
/// against the hand-written backward pass.
inline GradientCheck gradient_check(const Dataset& data, std::uint64_t seed, int n_coords = 20, double eps = 1e-4) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.mlp_hidden = 32;
    c.vocab_size = data.vocabulary().size();
    c.canvas_px = data.config.canvas_px;
    auto p = init_params<double>(c, seed);
    Rng rng(mix_seed(seed, 77));
    // Larger weights than the default init make every term matter.
    for (double& x : p.data) {
        x += 0.2 * rng.normal();
    }
    std::vector<Example> batch;
    for (std::size_t i = 0; i < data.train.size() && batch.size() < 4; i += data.train.size() / 4) {
        batch.push_back({data.image_of(data.train[i]), data.train[i].tokens, data.train[i].target()});
    }
    const auto analytic = loss_and_grads(p, batch);
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < analytic.grads.data.size(); ++i) {
        if (analytic.grads.data[i] != 0.0) {
            candidates.push_back(i);
        }
    }
    GradientCheck g;
    for (int k = 0; k < n_coords && !candidates.empty(); ++k) {
        const std::size_t i = candidates[rng.below(candidates.size())];
        const double orig = p.data[i];
        p.data[i] = orig + eps;
        const double lp = loss_and_grads(p, batch).loss;
        p.data[i] = orig - eps;
        const double lm = loss_and_grads(p, batch).loss;
        p.data[i] = orig;
        const double fd = (lp - lm) / (2 * eps);
        const double an = analytic.grads.data[i];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
        g.max_rel_error = std::max(g.max_rel_error, rel);
        g.coordinates.push_back(i);
    }
    g.seconds = detail::seconds_since(t0);
    return g;
}

inline std::vector<CriterionResult> gradient_criteria(const Dataset& data, std::uint64_t seed) {
    const auto g = gradient_check(data, seed);
    return {criterion("2.max_relative_error", -g.max_rel_error, -1e-3, true,
                      "negated max relative error over " + std::to_string(g.coordinates.size()) + " coordinates"),
            criterion("2.runtime_budget", kMechanicsBudgetSeconds - g.seconds, 0.0, false,
                      "seconds left of a 60 s budget")};
}

// ----------------------------- flip machinery -----------------------------

struct FlipOracle {
    std::vector<Choice> choices;
    FlipStats expected;
};

/// Hand-worked sequences, including ties that must be skipped.
inline std::vector<FlipOracle> flip_oracles() {
    using C = Choice;
    return {
        {{C::wk, C::wk, C::wk, C::wk}, {false, 0, 0, std::nullopt}},
        {{C::wk, C::wk, C::cf, C::cf}, {true, 1, 0, 2}},
        {{C::cf, C::wk, C::cf, C::wk}, {true, 1, 2, 1}},
        {{C::wk, C::tie, C::wk, C::cf}, {true, 1, 0, 3}},
        {{C::wk, C::tie, C::cf, C::cf}, {true, 1, 0, 2}},
        {{C::tie, C::tie, C::cf, C::wk}, {true, 0, 1, 3}},
        {{C::tie, C::tie, C::tie}, {false, 0, 0, std::nullopt}},
        {{C::cf, C::tie, C::tie, C::cf}, {false, 0, 0, std::nullopt}},
        {{C::wk, C::cf, C::tie, C::wk, C::tie, C::cf}, {true, 2, 1, 1}},
    };
}

/// Independent recount: transitions between consecutive non-tie choices.
inline std::pair<int, int> recount_transitions(const std::vector<Choice>& choices) {
    std::vector<Choice> kept;
    std::copy_if(choices.begin(), choices.end(), std::back_inserter(kept), [](Choice c) { return c != Choice::tie; });
    int to_cf = 0, to_wk = 0;
    for (std::size_t i = 1; i < kept.size(); ++i) {
        to_cf += kept[i - 1] == Choice::wk && kept[i] == Choice::cf ? 1 : 0;
        to_wk += kept[i - 1] == Choice::cf && kept[i] == Choice::wk ? 1 : 0;
    }
    return {to_cf, to_wk};
}

inline std::vector<CriterionResult> flip_machinery(const TraceReport& traces) {
    bool oracles_ok = true;
    for (const auto& o : flip_oracles()) {
        oracles_ok = oracles_ok && count_flips(o.choices) == o.expected;
    }
    bool recount_ok = true;
    bool distribution_ok = false;
    for (const auto& g : traces.groups) {
        long to_cf = 0, to_wk = 0;
        int flipped = 0;
        for (const auto& s : g.samples) {
            const auto [a, b] = recount_transitions(s.trace.choice);
            if (a + b > 0) {
                ++flipped;
                to_cf += a;
                to_wk += b;
            }
        }
        recount_ok = recount_ok && flipped == g.summary.n_flipped;
        if (flipped > 0) {
            recount_ok = recount_ok && g.summary.avg_wk_to_cf == static_cast<double>(to_cf) / flipped &&
                         g.summary.avg_cf_to_wk == static_cast<double>(to_wk) / flipped;
        } else {
            recount_ok = recount_ok && !g.summary.avg_wk_to_cf && !g.summary.avg_cf_to_wk;
        }
        if (g.task == Task::color && g.kind == PromptKind::most) {
            int total = g.no_flip;
            for (int c : g.first_flip_counts) {
                total += c;
            }
            distribution_ok = static_cast<int>(g.first_flip_counts.size()) == traces.n_layers &&
                              total == static_cast<int>(g.samples.size());
        }
    }
    return {detail::boolean("6.flip_oracles", oracles_ok, std::to_string(flip_oracles().size()) + " sequences"),
            detail::boolean("6.aggregate_recount", recount_ok),
            detail::boolean("6.first_flip_distribution", distribution_ok, "color most+cf")};
}

}  // namespace pvp::acceptance
