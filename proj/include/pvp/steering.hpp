#pragma once

// Prompt-vs-prompt steering vectors: fitting, windowed interventions,
// flip-rate evaluation and key-layer search.

#include <filesystem>
#include <map>
#include <sstream>
#include <vector>

#include "pvp/predict.hpp"

namespace pvp {

/// Mean over image pairs of (state under "this" - state under "most") at the
/// last text position after every block, counterfactual images only.
template <class T>
SteeringVectors compute_pvp(const Params<T>& p, const Dataset& data, std::span<const Sample> split, Task task) {
    require(!split.empty(), ErrorKind::argument, "cannot fit steering vectors on an empty split");
    std::map<int, std::pair<const Sample*, const Sample*>> pairs;  // image id -> (this, most)
    for (const auto& s : split) {
        require(s.task == task, ErrorKind::argument,
                "steer-fit split mixes tasks: expected " + std::string(to_string(task)) + ", sample " +
                    std::to_string(s.id) + " is " + std::string(to_string(s.task)));
        require(s.variant == Variant::cf && s.image_id.has_value(), ErrorKind::argument,
                "steer-fit sample " + std::to_string(s.id) + " is not a counterfactual-image sample");
        auto& slot = pairs[*s.image_id];
        auto& dst = s.prompt_kind == PromptKind::this_ ? slot.first : slot.second;
        require(dst == nullptr, ErrorKind::argument,
                "image " + std::to_string(*s.image_id) + " has two samples with the same prompt kind");
        dst = &s;
    }
    const auto& c = p.config;
    const auto d = static_cast<std::size_t>(c.d_model);
    std::vector<double> acc(static_cast<std::size_t>(c.n_layers) * d, 0.0);
    int n_pairs = 0;
    for (const auto& [img, pr] : pairs) {
        require(pr.first != nullptr && pr.second != nullptr, ErrorKind::argument,
                "image " + std::to_string(img) + " lacks a this/most prompt pair");
        const auto a = forward(p, ModelInput{data.image_of(*pr.first), pr.first->tokens});
        const auto b = forward(p, ModelInput{data.image_of(*pr.second), pr.second->tokens});
        for (int l = 0; l < c.n_layers; ++l) {
            const auto ha = a.state(l, a.last());
            const auto hb = b.state(l, b.last());
            double* dst = acc.data() + static_cast<std::size_t>(l) * d;
            for (std::size_t i = 0; i < d; ++i) {
                dst[i] += static_cast<double>(ha[i]) - static_cast<double>(hb[i]);
            }
        }
        ++n_pairs;
    }
    SteeringVectors v;
    v.task = task;
    v.n_layers = c.n_layers;
    v.d_model = c.d_model;
    v.n_pairs = n_pairs;
    v.split_digest = sha256_hex(split_to_jsonl(std::vector<Sample>(split.begin(), split.end())));
    v.config_digest = config_digest(c);
    v.s_cf.resize(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        v.s_cf[i] = static_cast<float>(acc[i] / n_pairs);
    }
    return v;
}

template <class T>
Prediction steer_predict(const Params<T>& p, const Dataset& data, const Sample& s, const SteeringVectors& v,
                         const InterventionSpec& spec) {
    const Steering st{&v, {spec}};
    return predict_answer(p, data, s, {}, &st);
}

// ----------------------------- flip rate -----------------------------

struct FlipLedgerRow {
    int sample_id = 0;
    int before = 0;
    int after = 0;
    int goal = 0;  // token that counts as a flip
    bool flipped = false;
};

struct FlipRateResult {
    Direction direction = Direction::to_cf;
    InterventionSpec spec;
    double flip_rate = 0;  // percent
    int n = 0;
    std::vector<FlipLedgerRow> ledger;
};

/// Originally-incorrect set for a direction: "most" prompts on counterfactual
/// images still answered with the prior (ToCF), or "this" prompts on
/// counterfactual images answered from the pixels (ToWK).
struct TargetSet {
    std::vector<const Sample*> samples;
    std::vector<int> before;
};

template <class T>
TargetSet target_set(const Params<T>& p, const Dataset& data, std::span<const Sample> split, Direction dir,
                     Task task) {
    TargetSet ts;
    const PromptKind kind = dir == Direction::to_cf ? PromptKind::most : PromptKind::this_;
    for (const auto& s : split) {
        if (s.task != task || s.variant != Variant::cf || s.prompt_kind != kind || !s.cf_answer) {
            continue;
        }
        const int tok = predict_answer(p, data, s).token;
        const int wrong = dir == Direction::to_cf ? s.wk_answer : *s.cf_answer;
        if (tok == wrong) {
            ts.samples.push_back(&s);
            ts.before.push_back(tok);
        }
    }
    return ts;
}

template <class T>
FlipRateResult eval_flip_rate(const Params<T>& p, const Dataset& data, const SteeringVectors& v,
                              const InterventionSpec& spec, const TargetSet& ts) {
    require(!ts.samples.empty(), ErrorKind::evaluation,
            std::string("no originally-incorrect samples for ") + std::string(to_string(spec.direction)));
    FlipRateResult r;
    r.direction = spec.direction;
    r.spec = spec;
    r.n = static_cast<int>(ts.samples.size());
    int flips = 0;
    for (std::size_t i = 0; i < ts.samples.size(); ++i) {
        const Sample& s = *ts.samples[i];
        const int goal = spec.direction == Direction::to_cf ? *s.cf_answer : s.wk_answer;
        const int after = steer_predict(p, data, s, v, spec).token;
        const bool flipped = after == goal;
        flips += flipped ? 1 : 0;
        r.ledger.push_back({s.id, ts.before[i], after, goal, flipped});
    }
    r.flip_rate = 100.0 * flips / r.n;
    return r;
}

template <class T>
FlipRateResult eval_flip_rate(const Params<T>& p, const Dataset& data, const SteeringVectors& v,
                              const InterventionSpec& spec, std::span<const Sample> split) {
    return eval_flip_rate(p, data, v, spec, target_set(p, data, split, spec.direction, v.task));
}

// ----------------------------- window search -----------------------------

struct WindowBounds {
    int first_layer = 0;
    int last_layer = -1;  // -1: L - 1
    int max_window = -1;  // -1: L - 1
};

struct WindowScore {
    int start_layer = 0;
    int window = 0;
    double alpha = 1.0;
    double flip_rate = 0;
    int n = 0;
};

struct WindowSearchResult {
    InterventionSpec best;
    double best_rate = 0;
    std::vector<WindowScore> table;  // start-major, then window
};

/// Best of `a` and `b` under the search order: higher rate, then smaller
/// window, then smaller start layer.
inline bool better_window(const WindowScore& a, const WindowScore& b) {
    if (a.flip_rate != b.flip_rate) {
        return a.flip_rate > b.flip_rate;
    }
    if (a.window != b.window) {
        return a.window < b.window;
    }
    return a.start_layer < b.start_layer;
}

inline std::vector<std::pair<int, int>> window_grid(const ModelConfig& c, const WindowBounds& b) {
    const int L = c.n_layers;
    const int last = b.last_layer < 0 ? L - 1 : b.last_layer;
    const int maxw = b.max_window < 0 ? L - 1 : b.max_window;
    require(b.first_layer >= 0 && last <= L - 1, ErrorKind::argument,
            "window bounds [" + std::to_string(b.first_layer) + ", " + std::to_string(last) + "] outside [0, " +
                std::to_string(L - 1) + "]");
    std::vector<std::pair<int, int>> grid;
    for (int l = b.first_layer; l <= last; ++l) {
        for (int w = 0; w <= maxw && l + w <= L - 1; ++w) {
            grid.emplace_back(l, w);
        }
    }
    require(!grid.empty(), ErrorKind::argument, "window search grid is empty");
    return grid;
}

template <class T>
WindowSearchResult search_window(const Params<T>& p, const Dataset& data, const SteeringVectors& v, Direction dir,
                                 std::span<const Sample> validation, const WindowBounds& bounds, double alpha = 1.0) {
    const auto grid = window_grid(p.config, bounds);
    const TargetSet ts = target_set(p, data, validation, dir, v.task);
    WindowSearchResult out;
    for (const auto& [l, w] : grid) {
        const auto r = eval_flip_rate(p, data, v, InterventionSpec{dir, l, w, alpha}, ts);
        out.table.push_back({l, w, alpha, r.flip_rate, r.n});
    }
    const WindowScore* best = &out.table.front();
    for (const auto& row : out.table) {
        if (better_window(row, *best)) {
            best = &row;
        }
    }
    out.best = InterventionSpec{dir, best->start_layer, best->window, alpha};
    out.best_rate = best->flip_rate;
    return out;
}

inline std::string search_table_csv(const WindowSearchResult& r) {
    std::ostringstream os;
    os << "start_layer,w,alpha,flip_rate,n\n";
    os.precision(17);
    for (const auto& row : r.table) {
        os << row.start_layer << ',' << row.window << ',' << row.alpha << ',' << row.flip_rate << ',' << row.n << '\n';
    }
    return os.str();
}

// ----------------------------- vectors file -----------------------------

inline constexpr std::string_view kVectorsMagic{"PVPVECS\0", 8};
inline constexpr int kVectorsVersion = 1;

inline std::string vectors_bytes(const SteeringVectors& v) {
    const json header{{"format_version", kVectorsVersion}, {"task", to_string(v.task)},
                      {"n_pairs", v.n_pairs},              {"n_layers", v.n_layers},
                      {"d_model", v.d_model},              {"split_digest", v.split_digest},
                      {"config_digest", v.config_digest}};
    const std::string h = header.dump();
    std::string out(kVectorsMagic);
    put_u32(out, static_cast<std::uint32_t>(h.size()));
    out += h;
    put_f32s(out, v.s_cf);
    return out;
}

inline SteeringVectors vectors_from_bytes(std::string_view bytes, const std::string& what) {
    ByteReader r(bytes, what);
    require(r.take(kVectorsMagic.size()) == kVectorsMagic, ErrorKind::load, what + ": not a steering-vectors file");
    SteeringVectors v;
    try {
        const json h = json::parse(r.take(r.u32()));
        require(h.at("format_version").get<int>() == kVectorsVersion, ErrorKind::load,
                what + ": unsupported vectors version");
        v.task = parse_task(h.at("task").get<std::string>());
        v.n_pairs = h.at("n_pairs").get<int>();
        v.n_layers = h.at("n_layers").get<int>();
        v.d_model = h.at("d_model").get<int>();
        v.split_digest = h.at("split_digest").get<std::string>();
        v.config_digest = h.at("config_digest").get<std::string>();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorKind::load, what + ": bad header: " + e.what());
    }
    require(v.n_layers >= 1 && v.d_model >= 1, ErrorKind::load, what + ": bad dimensions");
    v.s_cf.resize(static_cast<std::size_t>(v.n_layers) * static_cast<std::size_t>(v.d_model));
    require(r.remaining() == v.s_cf.size() * 4, ErrorKind::load, what + ": vector payload has the wrong size");
    r.f32s(v.s_cf);
    return v;
}

inline void vectors_save(const SteeringVectors& v, const std::filesystem::path& path) {
    write_file_atomic(path, vectors_bytes(v));
}

inline SteeringVectors vectors_load(const std::filesystem::path& path) {
    return vectors_from_bytes(read_file(path), path.string());
}

}  // namespace pvp
