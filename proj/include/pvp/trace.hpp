#pragma once

// Layer-wise introspection: logit-lens decoding, answer traces, flip
// statistics and attention mass.

#include <algorithm>
#include <optional>
#include <set>
#include <vector>

#include "pvp/dataset.hpp"
#include "pvp/model.hpp"

namespace pvp {

/// Distribution over the vocabulary from decoding layer `layer`'s post-block
/// state at `position` through the final norm and unembedding.
template <class T>
std::vector<double> early_decode(const Params<T>& p, const ForwardTrace<T>& trace, int layer, int position) {
    require(layer >= 0 && layer < trace.n_layers, ErrorKind::argument,
            "layer " + std::to_string(layer) + " out of range [0, " + std::to_string(trace.n_layers) + ")");
    require(position >= 0 && position < trace.seq, ErrorKind::argument, "position out of range");
    const auto logits = decode_logits<T>(p, trace.state(layer, position));
    return softmax<T>(logits);
}

enum class Choice { wk, cf, tie };

inline std::string_view to_string(Choice c) {
    switch (c) {
        case Choice::wk: return "WK";
        case Choice::cf: return "CF";
        case Choice::tie: return "tie";
    }
    return "?";
}

inline constexpr double kTieTolerance = 1e-9;

struct DecodeTrace {
    std::vector<double> p_wk, p_cf;
    std::vector<Choice> choice;
    std::vector<int> rank_wk, rank_cf;  // 0 = top of the full vocabulary

    [[nodiscard]] int n_layers() const { return static_cast<int>(choice.size()); }
};

inline Choice restricted_choice(double p_wk, double p_cf) {
    if (std::abs(p_wk - p_cf) <= kTieTolerance) {
        return Choice::tie;
    }
    return p_wk > p_cf ? Choice::wk : Choice::cf;
}

namespace detail {

inline int vocab_rank(const std::vector<double>& probs, int token) {
    const double pt = probs[static_cast<std::size_t>(token)];
    int rank = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] > pt || (probs[i] == pt && static_cast<int>(i) < token)) {
            ++rank;
        }
    }
    return rank;
}

}  // namespace detail

template <class T>
DecodeTrace answer_trace(const Params<T>& p, const Dataset& data, const Sample& s, const Steering* steering = nullptr) {
    require(s.cf_answer.has_value(), ErrorKind::argument,
            "answer_trace needs a counterfactual sample; sample " + std::to_string(s.id) + " has no cf_answer");
    const auto tr = forward(p, ModelInput{data.image_of(s), s.tokens}, steering);
    DecodeTrace out;
    for (int l = 0; l < tr.n_layers; ++l) {
        const auto probs = early_decode(p, tr, l, tr.last());
        const double pw = probs[static_cast<std::size_t>(s.wk_answer)];
        const double pc = probs[static_cast<std::size_t>(*s.cf_answer)];
        out.p_wk.push_back(pw);
        out.p_cf.push_back(pc);
        out.choice.push_back(restricted_choice(pw, pc));
        out.rank_wk.push_back(detail::vocab_rank(probs, s.wk_answer));
        out.rank_cf.push_back(detail::vocab_rank(probs, *s.cf_answer));
    }
    return out;
}

struct FlipStats {
    bool flipped = false;
    int n_wk_to_cf = 0;
    int n_cf_to_wk = 0;
    std::optional<int> first_flip_layer;

    bool operator==(const FlipStats&) const = default;
};

/// Ties are dropped, then adjacent changes of the restricted argmax are
/// counted. The first flip layer is where the new answer first takes over.
inline FlipStats count_flips(std::span<const Choice> choices) {
    require(choices.size() >= 2, ErrorKind::argument, "flip counting needs at least two layers");
    FlipStats f;
    std::optional<Choice> prev;
    for (std::size_t l = 0; l < choices.size(); ++l) {
        const Choice c = choices[l];
        if (c == Choice::tie) {
            continue;
        }
        if (prev && *prev != c) {
            if (c == Choice::cf) {
                ++f.n_wk_to_cf;
            } else {
                ++f.n_cf_to_wk;
            }
            if (!f.first_flip_layer) {
                f.first_flip_layer = static_cast<int>(l);
            }
        }
        prev = c;
    }
    f.flipped = f.n_wk_to_cf + f.n_cf_to_wk >= 1;
    return f;
}

inline FlipStats count_flips(const DecodeTrace& t) { return count_flips(std::span<const Choice>(t.choice)); }

struct FlipSummary {
    int n = 0;
    int n_flipped = 0;
    double pct_with_flip = 0;
    double pct_without_flip = 0;
    std::optional<double> avg_wk_to_cf;  // over flipped samples only; empty when none flipped
    std::optional<double> avg_cf_to_wk;
    long total_wk_to_cf = 0;
    long total_cf_to_wk = 0;
};

inline FlipSummary aggregate_flip_stats(std::span<const FlipStats> stats) {
    require(!stats.empty(), ErrorKind::argument, "cannot aggregate an empty list of flip statistics");
    FlipSummary s;
    s.n = static_cast<int>(stats.size());
    long wk_cf_flipped = 0;
    long cf_wk_flipped = 0;
    for (const auto& f : stats) {
        s.total_wk_to_cf += f.n_wk_to_cf;
        s.total_cf_to_wk += f.n_cf_to_wk;
        if (f.flipped) {
            ++s.n_flipped;
            wk_cf_flipped += f.n_wk_to_cf;
            cf_wk_flipped += f.n_cf_to_wk;
        }
    }
    s.pct_with_flip = 100.0 * s.n_flipped / s.n;
    s.pct_without_flip = 100.0 * (s.n - s.n_flipped) / s.n;
    if (s.n_flipped > 0) {
        s.avg_wk_to_cf = static_cast<double>(wk_cf_flipped) / s.n_flipped;
        s.avg_cf_to_wk = static_cast<double>(cf_wk_flipped) / s.n_flipped;
    }
    return s;
}

inline json to_json(const FlipSummary& s) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"n", s.n},
                {"n_flipped", s.n_flipped},
                {"pct_with_flip", s.pct_with_flip},
                {"pct_without_flip", s.pct_without_flip},
                {"avg_wk_to_cf", opt(s.avg_wk_to_cf)},
                {"avg_cf_to_wk", opt(s.avg_cf_to_wk)},
                {"total_wk_to_cf", s.total_wk_to_cf},
                {"total_cf_to_wk", s.total_cf_to_wk}};
}

// ----------------------------- attention mass -----------------------------

struct AttentionMassProfile {
    std::vector<double> image_mass, text_mass, other_mass;  // one entry per layer
};

/// Head-averaged attention from the last text position, summed over the two
/// key sets. Positions in neither set (e.g. the blank-image token) are "other".
template <class T>
AttentionMassProfile attention_mass(const ForwardTrace<T>& trace, std::span<const int> image_positions,
                                    std::span<const int> text_positions) {
    const std::set<int> img(image_positions.begin(), image_positions.end());
    const std::set<int> txt(text_positions.begin(), text_positions.end());
    for (int pos : img) {
        require(!txt.contains(pos), ErrorKind::argument,
                "position " + std::to_string(pos) + " is in both the image and text sets");
    }
    AttentionMassProfile out;
    const int q = trace.last();
    for (int l = 0; l < trace.n_layers; ++l) {
        double im = 0, tx = 0, ot = 0;
        for (int h = 0; h < trace.n_heads; ++h) {
            const auto row = trace.attention_row(l, h, q);
            for (int j = 0; j < trace.seq; ++j) {
                const double a = static_cast<double>(row[static_cast<std::size_t>(j)]);
                if (img.contains(j)) {
                    im += a;
                } else if (txt.contains(j)) {
                    tx += a;
                } else {
                    ot += a;
                }
            }
        }
        out.image_mass.push_back(im / trace.n_heads);
        out.text_mass.push_back(tx / trace.n_heads);
        out.other_mass.push_back(ot / trace.n_heads);
    }
    return out;
}

/// Image tokens (none for blank-image runs) and all text positions.
template <class T>
std::pair<std::vector<int>, std::vector<int>> default_position_sets(const ForwardTrace<T>& trace) {
    std::vector<int> img, txt;
    if (trace.has_image) {
        for (int i = 0; i < trace.n_prefix; ++i) {
            img.push_back(i);
        }
    }
    for (int i = trace.n_prefix; i < trace.seq; ++i) {
        txt.push_back(i);
    }
    return {img, txt};
}

template <class T>
AttentionMassProfile attention_mass(const ForwardTrace<T>& trace) {
    const auto [img, txt] = default_position_sets(trace);
    return attention_mass(trace, img, txt);
}

}  // namespace pvp
