#pragma once

// Aggregate analyses and report emission: accuracy matrix, answer traces,
// steering tables, attention deltas, PCA scatter and the summary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "pvp/pca.hpp"
#include "pvp/steering.hpp"
#include "pvp/trace.hpp"

namespace pvp {

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string quadrant_name(PromptKind k, Variant v) {
    return std::string(to_string(k)) + "+" + std::string(to_string(v));
}

}  // namespace detail

// ----------------------------- accuracy -----------------------------

struct AccuracyLedgerRow {
    int sample_id = 0;
    Task task = Task::color;
    PromptKind kind = PromptKind::this_;
    Variant variant = Variant::wk;
    int predicted = 0;
    int target = 0;
    [[nodiscard]] bool correct() const { return predicted == target; }
};

struct AccuracyCell {
    Task task = Task::color;
    PromptKind kind = PromptKind::this_;
    Variant variant = Variant::wk;
    int correct = 0;
    int n = 0;
    [[nodiscard]] double accuracy() const { return n == 0 ? 0.0 : 100.0 * correct / n; }
};

struct AccuracyMatrix {
    std::vector<AccuracyCell> cells;  // task, then This/Most, then WK/CF
    std::vector<AccuracyLedgerRow> ledger;

    [[nodiscard]] const AccuracyCell& cell(Task t, PromptKind k, Variant v) const {
        for (const auto& c : cells) {
            if (c.task == t && c.kind == k && c.variant == v) {
                return c;
            }
        }
        fail(ErrorKind::report, "accuracy matrix has no " + std::string(to_string(t)) + " " +
                                    detail::quadrant_name(k, v) + " cell");
    }
    [[nodiscard]] bool has_task(Task t) const {
        return std::any_of(cells.begin(), cells.end(), [&](const AccuracyCell& c) { return c.task == t; });
    }
};

/// Target for scoring: "this" prompts follow the rendered attribute, "most"
/// prompts the canonical one.
inline int scoring_target(const Sample& s) {
    if (s.prompt_kind == PromptKind::this_ && s.cf_answer) {
        return *s.cf_answer;
    }
    return s.wk_answer;
}

/// Recount cells from a ledger. Every task present must cover the full 2x2 grid.
inline std::vector<AccuracyCell> accuracy_cells(std::span<const AccuracyLedgerRow> ledger) {
    std::vector<AccuracyCell> cells;
    for (Task t : {Task::color, Task::size}) {
        const bool present = std::any_of(ledger.begin(), ledger.end(), [&](const auto& r) { return r.task == t; });
        if (!present) {
            continue;
        }
        for (PromptKind k : {PromptKind::this_, PromptKind::most}) {
            for (Variant v : {Variant::wk, Variant::cf}) {
                AccuracyCell c{t, k, v, 0, 0};
                for (const auto& r : ledger) {
                    if (r.task == t && r.kind == k && r.variant == v) {
                        ++c.n;
                        c.correct += r.correct() ? 1 : 0;
                    }
                }
                require(c.n > 0, ErrorKind::report,
                        "eval split has no " + std::string(to_string(t)) + " " + detail::quadrant_name(k, v) +
                            " samples");
                cells.push_back(c);
            }
        }
    }
    require(!cells.empty(), ErrorKind::report, "eval split has no scorable samples");
    return cells;
}

template <class T>
AccuracyMatrix accuracy_matrix(const Params<T>& p, const Dataset& data, std::span<const Sample> eval) {
    AccuracyMatrix m;
    for (const auto& s : eval) {
        if (s.variant != Variant::wk && s.variant != Variant::cf) {
            continue;
        }
        m.ledger.push_back({s.id, s.task, s.prompt_kind, s.variant, predict_answer(p, data, s).token,
                            scoring_target(s)});
    }
    m.cells = accuracy_cells(m.ledger);
    return m;
}

// ----------------------------- traces -----------------------------

struct SampleTrace {
    int sample_id = 0;
    Task task = Task::color;
    PromptKind kind = PromptKind::most;
    DecodeTrace trace;
    FlipStats flips;
};

struct TraceGroup {
    Task task = Task::color;
    PromptKind kind = PromptKind::most;
    std::vector<SampleTrace> samples;
    FlipSummary summary;
    std::vector<int> first_flip_counts;  // per layer
    int no_flip = 0;
};

struct TraceReport {
    int n_layers = 0;
    std::vector<TraceGroup> groups;
};

inline TraceGroup summarize_traces(Task task, PromptKind kind, std::vector<SampleTrace> samples, int n_layers) {
    TraceGroup g{task, kind, std::move(samples), {}, std::vector<int>(static_cast<std::size_t>(n_layers), 0), 0};
    std::vector<FlipStats> stats;
    for (const auto& s : g.samples) {
        stats.push_back(s.flips);
        if (s.flips.first_flip_layer) {
            ++g.first_flip_counts[static_cast<std::size_t>(*s.flips.first_flip_layer)];
        } else {
            ++g.no_flip;
        }
    }
    g.summary = aggregate_flip_stats(stats);
    return g;
}

/// Layer-wise answer traces for the counterfactual eval samples of each task,
/// grouped by prompt kind.
template <class T>
TraceReport trace_report(const Params<T>& p, const Dataset& data, std::span<const Sample> eval) {
    TraceReport r;
    r.n_layers = p.config.n_layers;
    for (Task t : {Task::color, Task::size}) {
        for (PromptKind k : {PromptKind::most, PromptKind::this_}) {
            std::vector<SampleTrace> samples;
            for (const auto& s : eval) {
                if (s.task == t && s.prompt_kind == k && s.variant == Variant::cf) {
                    auto tr = answer_trace(p, data, s);
                    const auto f = count_flips(tr);
                    samples.push_back({s.id, t, k, std::move(tr), f});
                }
            }
            if (!samples.empty()) {
                r.groups.push_back(summarize_traces(t, k, std::move(samples), r.n_layers));
            }
        }
    }
    require(!r.groups.empty(), ErrorKind::report, "eval split has no counterfactual samples to trace");
    return r;
}

// ----------------------------- steering -----------------------------

struct DirectionResult {
    Direction direction = Direction::to_cf;
    std::optional<WindowSearchResult> search;
    std::optional<FlipRateResult> eval;
    std::string error;  // evaluation error text when a target set was empty
};

struct SteeringReport {
    Task task = Task::color;
    int n_pairs = 0;
    std::vector<DirectionResult> directions;

    [[nodiscard]] const DirectionResult* find(Direction d) const {
        for (const auto& r : directions) {
            if (r.direction == d) {
                return &r;
            }
        }
        return nullptr;
    }
};

// ----------------------------- attention -----------------------------

struct AttentionCurves {
    Direction direction = Direction::to_cf;
    InterventionSpec spec;
    int n_pairs = 0;
    std::vector<double> prompt_image, prompt_text;              // prompt change, unsteered
    std::vector<double> intervention_image, intervention_text;  // steered minus unsteered

    [[nodiscard]] static double max_of(const std::vector<double>& c) { return *std::max_element(c.begin(), c.end()); }
    [[nodiscard]] double max_window(const std::vector<double>& c) const {
        double m = -INFINITY;
        for (int l = spec.start_layer; l <= spec.start_layer + spec.window; ++l) {
            m = std::max(m, c[static_cast<std::size_t>(l)]);
        }
        return m;
    }
};

struct AttentionDeltaReport {
    Task task = Task::color;
    std::vector<AttentionCurves> curves;

    [[nodiscard]] const AttentionCurves* find(Direction d) const {
        for (const auto& c : curves) {
            if (c.direction == d) {
                return &c;
            }
        }
        return nullptr;
    }
};

/// (this, most) sample pairs sharing a counterfactual image, in image order.
inline std::vector<std::pair<const Sample*, const Sample*>> cf_pairs(std::span<const Sample> split, Task task) {
    std::map<int, std::pair<const Sample*, const Sample*>> by_image;
    for (const auto& s : split) {
        if (s.task != task || s.variant != Variant::cf || !s.image_id) {
            continue;
        }
        auto& slot = by_image[*s.image_id];
        (s.prompt_kind == PromptKind::this_ ? slot.first : slot.second) = &s;
    }
    std::vector<std::pair<const Sample*, const Sample*>> out;
    for (const auto& [img, pr] : by_image) {
        if (pr.first != nullptr && pr.second != nullptr) {
            out.push_back(pr);
        }
    }
    return out;
}

/// ToCF: prompt curve = mass(This) - mass(Most); intervention curve =
/// mass(Most, steered) - mass(Most). ToWK mirrors it starting from This.
template <class T>
AttentionCurves attention_curves(const Params<T>& p, const Dataset& data, const SteeringVectors& v,
                                 const InterventionSpec& spec, std::span<const Sample> probe) {
    detail::check_steering(p.config, Steering{&v, {spec}});
    const auto pairs = cf_pairs(probe, v.task);
    require(!pairs.empty(), ErrorKind::argument, "attention probe set has no this/most counterfactual pairs");
    const auto L = static_cast<std::size_t>(p.config.n_layers);
    AttentionCurves c;
    c.direction = spec.direction;
    c.spec = spec;
    c.n_pairs = static_cast<int>(pairs.size());
    c.prompt_image.assign(L, 0.0);
    c.prompt_text.assign(L, 0.0);
    c.intervention_image.assign(L, 0.0);
    c.intervention_text.assign(L, 0.0);
    const Steering st{&v, {spec}};
    for (const auto& [ts, ms] : pairs) {
        const Sample& from = spec.direction == Direction::to_cf ? *ms : *ts;
        const Sample& to = spec.direction == Direction::to_cf ? *ts : *ms;
        const auto a_from = attention_mass(forward(p, ModelInput{data.image_of(from), from.tokens}));
        const auto a_to = attention_mass(forward(p, ModelInput{data.image_of(to), to.tokens}));
        const auto a_st = attention_mass(forward(p, ModelInput{data.image_of(from), from.tokens}, &st));
        for (std::size_t l = 0; l < L; ++l) {
            c.prompt_image[l] += a_to.image_mass[l] - a_from.image_mass[l];
            c.prompt_text[l] += a_to.text_mass[l] - a_from.text_mass[l];
            c.intervention_image[l] += a_st.image_mass[l] - a_from.image_mass[l];
            c.intervention_text[l] += a_st.text_mass[l] - a_from.text_mass[l];
        }
    }
    for (auto* curve : {&c.prompt_image, &c.prompt_text, &c.intervention_image, &c.intervention_text}) {
        for (double& x : *curve) {
            x /= static_cast<double>(pairs.size());
        }
    }
    return c;
}

// ----------------------------- PCA -----------------------------

inline constexpr std::array<const char*, 4> kPcaGroups{"most", "this", "most_to_cf", "this_to_wk"};

struct PcaPoint {
    std::string group;
    int sample_id = 0;
    double pc1 = 0;
    double pc2 = 0;
};

struct PcaReport {
    Task task = Task::color;
    std::array<double, 2> explained{};
    std::vector<PcaPoint> points;

    [[nodiscard]] std::array<double, 2> group_mean(const std::string& g) const {
        std::array<double, 2> m{0, 0};
        int n = 0;
        for (const auto& p : points) {
            if (p.group == g) {
                m[0] += p.pc1;
                m[1] += p.pc2;
                ++n;
            }
        }
        require(n > 0, ErrorKind::report, "PCA report has no '" + g + "' points");
        return {m[0] / n, m[1] / n};
    }

    [[nodiscard]] double group_distance(const std::string& a, const std::string& b) const {
        const auto ma = group_mean(a);
        const auto mb = group_mean(b);
        return std::hypot(ma[0] - mb[0], ma[1] - mb[1]);
    }
};

/// Final-layer last-text-token states of four groups projected on the top two
/// principal components of their union.
template <class T>
PcaReport pca_report(const Params<T>& p, const Dataset& data, std::span<const Sample> probe, const SteeringVectors& v,
                     const InterventionSpec& to_cf, const InterventionSpec& to_wk) {
    const auto pairs = cf_pairs(probe, v.task);
    require(!pairs.empty(), ErrorKind::argument, "PCA probe set has no this/most counterfactual pairs");
    const Steering st_cf{&v, {to_cf}};
    const Steering st_wk{&v, {to_wk}};
    const int last_layer = p.config.n_layers - 1;
    std::vector<std::vector<double>> states;
    std::vector<PcaPoint> points;
    auto add = [&](const char* group, const Sample& s, const Steering* st) {
        const auto tr = forward(p, ModelInput{data.image_of(s), s.tokens}, st);
        const auto h = tr.state(last_layer, tr.last());
        states.emplace_back(h.begin(), h.end());
        points.push_back({group, s.id, 0, 0});
    };
    for (const auto& [ts, ms] : pairs) {
        add(kPcaGroups[0], *ms, nullptr);
    }
    for (const auto& [ts, ms] : pairs) {
        add(kPcaGroups[1], *ts, nullptr);
    }
    for (const auto& [ts, ms] : pairs) {
        add(kPcaGroups[2], *ms, &st_cf);
    }
    for (const auto& [ts, ms] : pairs) {
        add(kPcaGroups[3], *ts, &st_wk);
    }
    const auto pca = pca_project(states);
    PcaReport r;
    r.task = v.task;
    r.explained = pca.explained;
    for (std::size_t i = 0; i < points.size(); ++i) {
        points[i].pc1 = pca.coords[i][0];
        points[i].pc2 = pca.coords[i][1];
    }
    r.points = std::move(points);
    return r;
}

// ----------------------------- JSON forms -----------------------------

inline json to_json(const AccuracyMatrix& m) {
    json cells = json::array();
    for (const auto& c : m.cells) {
        cells.push_back({{"task", to_string(c.task)},
                         {"prompt", to_string(c.kind)},
                         {"variant", to_string(c.variant)},
                         {"correct", c.correct},
                         {"n", c.n},
                         {"accuracy", c.accuracy()}});
    }
    json ledger = json::array();
    for (const auto& r : m.ledger) {
        ledger.push_back({r.sample_id, to_string(r.task), to_string(r.kind), to_string(r.variant), r.predicted,
                          r.target});
    }
    return json{{"cells", cells}, {"ledger", ledger}};
}

inline AccuracyMatrix accuracy_from_json(const json& j) {
    AccuracyMatrix m;
    for (const auto& r : j.at("ledger")) {
        m.ledger.push_back({r.at(0).get<int>(), parse_task(r.at(1).get<std::string>()),
                            parse_prompt_kind(r.at(2).get<std::string>()), parse_variant(r.at(3).get<std::string>()),
                            r.at(4).get<int>(), r.at(5).get<int>()});
    }
    m.cells = accuracy_cells(m.ledger);
    return m;
}

inline json to_json(const DecodeTrace& t) {
    json choice = json::array();
    for (auto c : t.choice) {
        choice.push_back(to_string(c));
    }
    return json{{"p_wk", t.p_wk}, {"p_cf", t.p_cf}, {"choice", choice}, {"rank_wk", t.rank_wk}, {"rank_cf", t.rank_cf}};
}

inline DecodeTrace decode_trace_from_json(const json& j) {
    DecodeTrace t;
    j.at("p_wk").get_to(t.p_wk);
    j.at("p_cf").get_to(t.p_cf);
    j.at("rank_wk").get_to(t.rank_wk);
    j.at("rank_cf").get_to(t.rank_cf);
    for (const auto& c : j.at("choice")) {
        const auto s = c.get<std::string>();
        t.choice.push_back(s == "WK" ? Choice::wk : s == "CF" ? Choice::cf : Choice::tie);
    }
    return t;
}

inline json to_json(const TraceReport& r) {
    json groups = json::array();
    for (const auto& g : r.groups) {
        json samples = json::array();
        for (const auto& s : g.samples) {
            samples.push_back({{"sample_id", s.sample_id}, {"trace", to_json(s.trace)}});
        }
        groups.push_back({{"task", to_string(g.task)}, {"prompt", to_string(g.kind)}, {"samples", samples}});
    }
    return json{{"n_layers", r.n_layers}, {"groups", groups}};
}

/// Flip statistics and summaries are recomputed from the stored traces.
inline TraceReport trace_report_from_json(const json& j) {
    TraceReport r;
    r.n_layers = j.at("n_layers").get<int>();
    for (const auto& g : j.at("groups")) {
        const Task t = parse_task(g.at("task").get<std::string>());
        const PromptKind k = parse_prompt_kind(g.at("prompt").get<std::string>());
        std::vector<SampleTrace> samples;
        for (const auto& s : g.at("samples")) {
            auto tr = decode_trace_from_json(s.at("trace"));
            const auto f = count_flips(tr);
            samples.push_back({s.at("sample_id").get<int>(), t, k, std::move(tr), f});
        }
        r.groups.push_back(summarize_traces(t, k, std::move(samples), r.n_layers));
    }
    return r;
}

inline json to_json(const InterventionSpec& s) {
    return json{{"direction", to_string(s.direction)},
                {"start_layer", s.start_layer},
                {"window", s.window},
                {"alpha", s.alpha}};
}

inline InterventionSpec spec_from_json(const json& j) {
    return {parse_direction(j.at("direction").get<std::string>()), j.at("start_layer").get<int>(),
            j.at("window").get<int>(), j.at("alpha").get<double>()};
}

inline json to_json(const WindowSearchResult& r) {
    json table = json::array();
    for (const auto& row : r.table) {
        table.push_back({row.start_layer, row.window, row.alpha, row.flip_rate, row.n});
    }
    return json{{"best", to_json(r.best)}, {"best_rate", r.best_rate}, {"table", table}};
}

inline WindowSearchResult search_from_json(const json& j) {
    WindowSearchResult r;
    r.best = spec_from_json(j.at("best"));
    r.best_rate = j.at("best_rate").get<double>();
    for (const auto& row : j.at("table")) {
        r.table.push_back({row.at(0).get<int>(), row.at(1).get<int>(), row.at(2).get<double>(),
                           row.at(3).get<double>(), row.at(4).get<int>()});
    }
    return r;
}

inline json to_json(const FlipRateResult& r) {
    json ledger = json::array();
    for (const auto& row : r.ledger) {
        ledger.push_back({row.sample_id, row.before, row.after, row.goal});
    }
    return json{{"spec", to_json(r.spec)}, {"flip_rate", r.flip_rate}, {"n", r.n}, {"ledger", ledger}};
}

/// The rate is recounted from the ledger.
inline FlipRateResult flip_result_from_json(const json& j) {
    FlipRateResult r;
    r.spec = spec_from_json(j.at("spec"));
    r.direction = r.spec.direction;
    int flips = 0;
    for (const auto& row : j.at("ledger")) {
        FlipLedgerRow l{row.at(0).get<int>(), row.at(1).get<int>(), row.at(2).get<int>(), row.at(3).get<int>(), false};
        l.flipped = l.after == l.goal;
        flips += l.flipped ? 1 : 0;
        r.ledger.push_back(l);
    }
    r.n = static_cast<int>(r.ledger.size());
    r.flip_rate = r.n == 0 ? 0.0 : 100.0 * flips / r.n;
    return r;
}

inline json to_json(const SteeringReport& s) {
    json dirs = json::array();
    for (const auto& d : s.directions) {
        dirs.push_back({{"direction", to_string(d.direction)},
                        {"search", d.search ? to_json(*d.search) : json(nullptr)},
                        {"eval", d.eval ? to_json(*d.eval) : json(nullptr)},
                        {"error", d.error}});
    }
    return json{{"task", to_string(s.task)}, {"n_pairs", s.n_pairs}, {"directions", dirs}};
}

inline SteeringReport steering_report_from_json(const json& j) {
    SteeringReport s;
    s.task = parse_task(j.at("task").get<std::string>());
    s.n_pairs = j.at("n_pairs").get<int>();
    for (const auto& d : j.at("directions")) {
        DirectionResult r;
        r.direction = parse_direction(d.at("direction").get<std::string>());
        if (!d.at("search").is_null()) {
            r.search = search_from_json(d.at("search"));
        }
        if (!d.at("eval").is_null()) {
            r.eval = flip_result_from_json(d.at("eval"));
        }
        r.error = d.at("error").get<std::string>();
        s.directions.push_back(std::move(r));
    }
    return s;
}

inline json to_json(const AttentionDeltaReport& a) {
    json curves = json::array();
    for (const auto& c : a.curves) {
        curves.push_back({{"spec", to_json(c.spec)},
                          {"n_pairs", c.n_pairs},
                          {"prompt_image", c.prompt_image},
                          {"prompt_text", c.prompt_text},
                          {"intervention_image", c.intervention_image},
                          {"intervention_text", c.intervention_text}});
    }
    return json{{"task", to_string(a.task)}, {"curves", curves}};
}

inline AttentionDeltaReport attention_from_json(const json& j) {
    AttentionDeltaReport a;
    a.task = parse_task(j.at("task").get<std::string>());
    for (const auto& c : j.at("curves")) {
        AttentionCurves x;
        x.spec = spec_from_json(c.at("spec"));
        x.direction = x.spec.direction;
        x.n_pairs = c.at("n_pairs").get<int>();
        c.at("prompt_image").get_to(x.prompt_image);
        c.at("prompt_text").get_to(x.prompt_text);
        c.at("intervention_image").get_to(x.intervention_image);
        c.at("intervention_text").get_to(x.intervention_text);
        a.curves.push_back(std::move(x));
    }
    return a;
}

inline json to_json(const PcaReport& r) {
    json pts = json::array();
    for (const auto& p : r.points) {
        pts.push_back({p.group, p.sample_id, p.pc1, p.pc2});
    }
    return json{{"task", to_string(r.task)}, {"explained", r.explained}, {"points", pts}};
}

inline PcaReport pca_from_json(const json& j) {
    PcaReport r;
    r.task = parse_task(j.at("task").get<std::string>());
    j.at("explained").get_to(r.explained);
    for (const auto& p : j.at("points")) {
        r.points.push_back({p.at(0).get<std::string>(), p.at(1).get<int>(), p.at(2).get<double>(),
                            p.at(3).get<double>()});
    }
    return r;
}

// ----------------------------- summary -----------------------------

struct CriterionResult {
    std::string id;
    double value = 0;
    double threshold = 0;
    bool strict = false;  // value > threshold instead of >=
    bool pass = false;
    std::string note;
};

inline CriterionResult criterion(std::string id, double value, double threshold, bool strict, std::string note = {}) {
    const bool pass = std::isfinite(value) && (strict ? value > threshold : value >= threshold);
    return {std::move(id), value, threshold, strict, pass, std::move(note)};
}

inline CriterionResult failed_criterion(std::string id, double threshold, bool strict, std::string note) {
    return {std::move(id), NAN, threshold, strict, false, std::move(note)};
}

struct ResultsBundle {
    std::optional<AccuracyMatrix> accuracy;
    std::optional<TraceReport> traces;
    std::vector<SteeringReport> steering;
    std::vector<AttentionDeltaReport> attention;
    std::vector<PcaReport> pca;

    [[nodiscard]] bool empty() const {
        return !accuracy && !traces && steering.empty() && attention.empty() && pca.empty();
    }
};

inline constexpr double kMinAccuracy = 90.0;
inline constexpr double kMinMostCfGap = 20.0;
inline constexpr int kMinEvalSamples = 200;
inline constexpr double kMinToCfRate = 50.0;

/// Directional checks that can be evaluated from the bundle alone (color task).
inline std::vector<CriterionResult> bundle_criteria(const ResultsBundle& b) {
    std::vector<CriterionResult> out;
    if (b.accuracy && b.accuracy->has_task(Task::color)) {
        const auto& m = *b.accuracy;
        const auto& tc = m.cell(Task::color, PromptKind::this_, Variant::cf);
        const auto& tw = m.cell(Task::color, PromptKind::this_, Variant::wk);
        const auto& mw = m.cell(Task::color, PromptKind::most, Variant::wk);
        const auto& mc = m.cell(Task::color, PromptKind::most, Variant::cf);
        out.push_back(criterion("3.this_cf_accuracy", tc.accuracy(), kMinAccuracy, false));
        out.push_back(criterion("3.this_wk_accuracy", tw.accuracy(), kMinAccuracy, false));
        out.push_back(criterion("3.most_wk_accuracy", mw.accuracy(), kMinAccuracy, false));
        out.push_back(criterion("3.most_cf_gap", mw.accuracy() - mc.accuracy(), kMinMostCfGap, false,
                                "most+wk minus most+cf, percentage points"));
        out.push_back(criterion("3.eval_samples", tc.n + tw.n + mw.n + mc.n, kMinEvalSamples, false));
    }
    for (const auto& s : b.steering) {
        if (s.task != Task::color) {
            continue;
        }
        const auto* cf = s.find(Direction::to_cf);
        const auto* wk = s.find(Direction::to_wk);
        if (cf != nullptr && cf->eval) {
            out.push_back(criterion("4.to_cf_flip_rate", cf->eval->flip_rate, kMinToCfRate, false));
        } else {
            out.push_back(failed_criterion("4.to_cf_flip_rate", kMinToCfRate, false,
                                           cf != nullptr ? cf->error : "no ToCF result"));
        }
        if (cf != nullptr && cf->eval && wk != nullptr && wk->eval) {
            out.push_back(criterion("4.to_cf_minus_to_wk", cf->eval->flip_rate - wk->eval->flip_rate, 0.0, true));
        } else {
            out.push_back(failed_criterion("4.to_cf_minus_to_wk", 0.0, true, "missing flip rate"));
        }
    }
    for (const auto& a : b.attention) {
        if (a.task != Task::color) {
            continue;
        }
        if (const auto* c = a.find(Direction::to_cf)) {
            const double m_int = AttentionCurves::max_of(c->intervention_image);
            const double m_prompt = AttentionCurves::max_of(c->prompt_image);
            out.push_back(criterion("5.image_mass_margin", m_int - m_prompt, 0.0, true,
                                    "max intervention delta minus max prompt delta, all layers"));
        }
    }
    for (const auto& p : b.pca) {
        if (p.task != Task::color) {
            continue;
        }
        const double d_before = p.group_distance("most", "this");
        const double d_after = p.group_distance("most_to_cf", "this");
        out.push_back(criterion("8.pca_distance_margin", d_before - d_after, 0.0, true,
                                "dist(most, this) minus dist(most_to_cf, this)"));
    }
    return out;
}

inline json to_json(const CriterionResult& c) {
    return json{{"value", std::isfinite(c.value) ? json(c.value) : json(nullptr)},
                {"threshold", c.threshold},
                {"comparison", c.strict ? ">" : ">="},
                {"pass", c.pass},
                {"note", c.note}};
}

inline json summary_json(std::span<const CriterionResult> cs) {
    json j = json::object();
    for (const auto& c : cs) {
        j[c.id] = to_json(c);
    }
    return j;
}

// ----------------------------- emission -----------------------------

/// Renders every artifact of the bundle, file name to content.
inline std::map<std::string, std::string> render_report(const ResultsBundle& b) {
    require(!b.empty(), ErrorKind::report, "results bundle is empty");
    std::map<std::string, std::string> files;
    const auto& fmt = detail::fmt;

    std::ostringstream t1;
    t1 << "task,prompt,variant,correct,n,accuracy\n";
    if (b.accuracy) {
        for (const auto& c : b.accuracy->cells) {
            t1 << to_string(c.task) << ',' << to_string(c.kind) << ',' << to_string(c.variant) << ',' << c.correct
               << ',' << c.n << ',' << fmt(c.accuracy()) << '\n';
        }
    }
    files["table1_accuracy.csv"] = t1.str();

    std::ostringstream t2;
    std::ostringstream f3;
    t2 << "task,prompt,n,n_flipped,pct_with_flip,pct_without_flip,avg_wk_to_cf,avg_cf_to_wk\n";
    if (b.traces) {
        for (const auto& g : b.traces->groups) {
            const auto& s = g.summary;
            auto opt = [&](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
            t2 << to_string(g.task) << ',' << to_string(g.kind) << ',' << s.n << ',' << s.n_flipped << ','
               << fmt(s.pct_with_flip) << ',' << fmt(s.pct_without_flip) << ',' << opt(s.avg_wk_to_cf) << ','
               << opt(s.avg_cf_to_wk) << '\n';
            const auto L = static_cast<std::size_t>(b.traces->n_layers);
            std::vector<double> mean_wk(L, 0.0), mean_cf(L, 0.0);
            for (const auto& st : g.samples) {
                json rec = to_json(st.trace);
                rec["record"] = "sample";
                rec["task"] = to_string(g.task);
                rec["prompt"] = to_string(g.kind);
                rec["sample_id"] = st.sample_id;
                rec["n_wk_to_cf"] = st.flips.n_wk_to_cf;
                rec["n_cf_to_wk"] = st.flips.n_cf_to_wk;
                rec["first_flip_layer"] = st.flips.first_flip_layer ? json(*st.flips.first_flip_layer) : json(nullptr);
                f3 << rec.dump() << '\n';
                for (std::size_t l = 0; l < L; ++l) {
                    mean_wk[l] += st.trace.p_wk[l] / static_cast<double>(g.samples.size());
                    mean_cf[l] += st.trace.p_cf[l] / static_cast<double>(g.samples.size());
                }
            }
            f3 << json{{"record", "mean"},       {"task", to_string(g.task)}, {"prompt", to_string(g.kind)},
                       {"n", g.samples.size()}, {"p_wk", mean_wk},           {"p_cf", mean_cf}}
                      .dump()
               << '\n';
            f3 << json{{"record", "first_flip_distribution"},
                       {"task", to_string(g.task)},
                       {"prompt", to_string(g.kind)},
                       {"counts", g.first_flip_counts},
                       {"no_flip", g.no_flip}}
                      .dump()
               << '\n';
        }
    }
    files["table2_flips.csv"] = t2.str();
    files["fig3_traces.jsonl"] = f3.str();

    std::ostringstream t3;
    t3 << "task,direction,start_layer,w,alpha,validation_flip_rate,validation_n,flip_rate,n,error\n";
    for (const auto& s : b.steering) {
        for (const auto& d : s.directions) {
            t3 << to_string(s.task) << ',' << to_string(d.direction) << ',';
            if (d.search) {
                t3 << d.search->best.start_layer << ',' << d.search->best.window << ',' << fmt(d.search->best.alpha)
                   << ',' << fmt(d.search->best_rate) << ',' << d.search->table.front().n << ',';
            } else {
                t3 << ",,,,,";
            }
            if (d.eval) {
                t3 << fmt(d.eval->flip_rate) << ',' << d.eval->n << ',';
            } else {
                t3 << ",,";
            }
            std::string err = d.error;
            std::replace(err.begin(), err.end(), ',', ';');
            t3 << err << '\n';
        }
    }
    files["table3_steering.csv"] = t3.str();

    std::ostringstream t5;
    std::ostringstream f4;
    t5 << "task,direction,start_layer,w,alpha,source,max_all,max_window\n";
    f4 << "task,direction,source,mass,layer,delta\n";
    for (const auto& a : b.attention) {
        for (const auto& c : a.curves) {
            for (const auto& [source, curve] : {std::pair{"prompt", &c.prompt_image},
                                                std::pair{"intervention", &c.intervention_image}}) {
                t5 << to_string(a.task) << ',' << to_string(c.direction) << ',' << c.spec.start_layer << ','
                   << c.spec.window << ',' << fmt(c.spec.alpha) << ',' << source << ','
                   << fmt(AttentionCurves::max_of(*curve)) << ',' << fmt(c.max_window(*curve)) << '\n';
            }
            for (const auto& [source, mass, curve] :
                 {std::tuple{"prompt", "image", &c.prompt_image}, std::tuple{"prompt", "text", &c.prompt_text},
                  std::tuple{"intervention", "image", &c.intervention_image},
                  std::tuple{"intervention", "text", &c.intervention_text}}) {
                for (std::size_t l = 0; l < curve->size(); ++l) {
                    f4 << to_string(a.task) << ',' << to_string(c.direction) << ',' << source << ',' << mass << ','
                       << l << ',' << fmt((*curve)[l]) << '\n';
                }
            }
        }
    }
    files["table5_attention.csv"] = t5.str();
    files["fig4_curves.csv"] = f4.str();

    std::ostringstream f5;
    f5 << "task,group,sample_id,pc1,pc2\n";
    for (const auto& r : b.pca) {
        for (const auto& p : r.points) {
            f5 << to_string(r.task) << ',' << p.group << ',' << p.sample_id << ',' << fmt(p.pc1) << ',' << fmt(p.pc2)
               << '\n';
        }
    }
    files["fig5_pca.csv"] = f5.str();

    const auto crit = bundle_criteria(b);
    files["summary.json"] = summary_json(crit).dump(2) + "\n";

    std::ostringstream la;
    la << "sample_id,task,prompt,variant,predicted,target,correct\n";
    if (b.accuracy) {
        for (const auto& r : b.accuracy->ledger) {
            la << r.sample_id << ',' << to_string(r.task) << ',' << to_string(r.kind) << ',' << to_string(r.variant)
               << ',' << r.predicted << ',' << r.target << ',' << (r.correct() ? 1 : 0) << '\n';
        }
    }
    files["ledger_accuracy.csv"] = la.str();
    std::ostringstream lf;
    lf << "task,direction,sample_id,before,after,goal,flipped\n";
    for (const auto& s : b.steering) {
        for (const auto& d : s.directions) {
            if (!d.eval) {
                continue;
            }
            for (const auto& r : d.eval->ledger) {
                lf << to_string(s.task) << ',' << to_string(d.direction) << ',' << r.sample_id << ',' << r.before
                   << ',' << r.after << ',' << r.goal << ',' << (r.flipped ? 1 : 0) << '\n';
            }
        }
    }
    files["ledger_flips.csv"] = lf.str();
    return files;
}

/// Renders everything first, then writes each file atomically.
inline std::vector<std::string> emit_report(const ResultsBundle& b, const std::filesystem::path& dir) {
    const auto files = render_report(b);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create report directory " + dir.string());
    std::vector<std::string> names;
    for (const auto& [name, content] : files) {
        write_file_atomic(dir / name, content);
        names.push_back(name);
    }
    return names;
}

}  // namespace pvp
