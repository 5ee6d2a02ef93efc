#pragma once

// Staged pipeline over an output root. Every stage writes into its own
// directory and leaves a stamp recording the digests of its inputs and its
// output directory; a stage whose stamp still matches is skipped, and a stage
// whose upstream stamp no longer matches refuses to run.
//
//   <root>/dataset  model  eval  trace  steer/{fit,search,eval}  attn  pca
//          report  verify  stamps/<stage>.json  run.json  .lock

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "pvp/acceptance.hpp"
#include "pvp/checkpoint.hpp"
#include "pvp/config.hpp"
#include "pvp/report.hpp"

namespace pvp {

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr std::array<Task, 2> kTasks{Task::color, Task::size};
inline constexpr std::array<Direction, 2> kDirections{Direction::to_cf, Direction::to_wk};

/// sha-256 over the sorted (relative path, file digest) pairs of a directory.
inline std::string dir_digest(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) {
            files.emplace_back(fs::relative(e.path(), dir).generic_string(), sha256_file(e.path()));
        }
    }
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& [name, digest] : files) {
        h.update(name);
        h.update(std::string_view("\0", 1));
        h.update(digest);
    }
    return h.hex();
}

/// Exclusive claim on an output root, released on destruction.
class RootLock {
public:
    explicit RootLock(const std::filesystem::path& root) : path_(root / ".lock") {
        std::error_code ec;
        std::filesystem::create_directories(root, ec);
        require(!ec, ErrorKind::io, "cannot create output root " + root.string());
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        require(f != nullptr, ErrorKind::io,
                "output root " + root.string() + " is locked by another pvp process (remove " + path_.string() +
                    " if none is running)");
        std::fclose(f);
    }
    RootLock(const RootLock&) = delete;
    RootLock& operator=(const RootLock&) = delete;
    ~RootLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }

private:
    std::filesystem::path path_;
};

struct StageInfo {
    const char* name;     // stamp name
    const char* command;  // CLI spelling, for hints
    const char* dir;      // output directory under the root
};

inline const std::vector<StageInfo>& stages() {
    static const std::vector<StageInfo> s{
        {"gen", "gen", "dataset"},
        {"train", "train", "model"},
        {"eval", "eval", "eval"},
        {"trace", "trace", "trace"},
        {"steer-fit", "steer fit", "steer/fit"},
        {"steer-search", "steer search", "steer/search"},
        {"steer-eval", "steer eval", "steer/eval"},
        {"attn", "attn", "attn"},
        {"pca", "pca", "pca"},
        {"report", "report", "report"},
        {"verify", "verify", "verify"},
    };
    return s;
}

inline const StageInfo& stage_info(std::string_view name) {
    for (const auto& s : stages()) {
        if (name == s.name) {
            return s;
        }
    }
    fail(ErrorKind::argument, "unknown stage '" + std::string(name) + "'");
}

class Pipeline {
public:
    Pipeline(RunConfig cfg, std::filesystem::path root, bool quiet = false, std::ostream& log = std::cerr)
        : cfg_(std::move(cfg)), root_(std::move(root)), quiet_(quiet), log_(log) {
        validate(cfg_);
    }

    [[nodiscard]] const RunConfig& config() const { return cfg_; }
    [[nodiscard]] const std::filesystem::path& root() const { return root_; }
    [[nodiscard]] std::filesystem::path dir(std::string_view stage) const { return root_ / stage_info(stage).dir; }

    /// Runs one stage; returns false when it was already up to date.
    bool run(std::string_view stage) {
        if (stage == "gen") return stage_gen();
        if (stage == "train") return stage_train();
        if (stage == "eval") return stage_eval();
        if (stage == "trace") return stage_trace();
        if (stage == "steer-fit") return stage_steer_fit();
        if (stage == "steer-search") return stage_steer_search();
        if (stage == "steer-eval") return stage_steer_eval();
        if (stage == "attn") return stage_attn();
        if (stage == "pca") return stage_pca();
        if (stage == "report") return stage_report();
        if (stage == "verify") return stage_verify();
        fail(ErrorKind::argument, "unknown stage '" + std::string(stage) + "'");
    }

    /// Every stage up to and including report.
    void run_all() {
        for (const auto& s : stages()) {
            if (std::string_view(s.name) != "verify") {
                run(s.name);
            }
        }
    }

    /// Output digest of every stage that has a stamp.
    [[nodiscard]] std::map<std::string, std::string> stage_digests() const {
        std::map<std::string, std::string> out;
        for (const auto& s : stages()) {
            if (const auto st = read_stamp(s.name)) {
                out[s.name] = st->at("output").get<std::string>();
            }
        }
        return out;
    }

    /// Result of the last verify stage.
    [[nodiscard]] std::vector<CriterionResult> verify_results() const { return verify_results_; }

    /// Loads every report-level result from the stage directories.
    [[nodiscard]] ResultsBundle load_bundle() {
        ResultsBundle b;
        b.accuracy = accuracy_from_json(read_json(dir("eval") / "accuracy.json"));
        b.traces = trace_report_from_json(read_json(dir("trace") / "traces.json"));
        for (Task t : kTasks) {
            b.steering.push_back(steering_report_from_json(read_json(steering_file(t))));
            const auto af = dir("attn") / ("attention_" + std::string(to_string(t)) + ".json");
            if (std::filesystem::exists(af)) {
                b.attention.push_back(attention_from_json(read_json(af)));
            }
            const auto pf = dir("pca") / ("pca_" + std::string(to_string(t)) + ".json");
            if (std::filesystem::exists(pf)) {
                b.pca.push_back(pca_from_json(read_json(pf)));
            }
        }
        return b;
    }

private:
    RunConfig cfg_;
    std::filesystem::path root_;
    bool quiet_;
    std::ostream& log_;
    std::map<std::string, std::string> validated_;  // stage -> output digest, checked this process
    std::vector<CriterionResult> verify_results_;

    void say(const std::string& msg) const {
        if (!quiet_) {
            log_ << msg << std::endl;
        }
    }

    static json read_json(const std::filesystem::path& p) {
        try {
            return json::parse(read_file(p));
        } catch (const json::exception& e) {
            fail(ErrorKind::load, p.string() + ": " + e.what());
        }
    }

    static std::string section_digest(const json& j) { return sha256_hex(j.dump()); }

    [[nodiscard]] std::filesystem::path stamp_path(std::string_view stage) const {
        return root_ / "stamps" / (std::string(stage) + ".json");
    }

    [[nodiscard]] std::optional<json> read_stamp(std::string_view stage) const {
        const auto p = stamp_path(stage);
        if (!std::filesystem::exists(p)) {
            return std::nullopt;
        }
        return read_json(p);
    }

    /// Digest of a validated upstream stage output; refuses missing or stale ones.
    std::string upstream(std::string_view stage) {
        const auto key = std::string(stage);
        if (const auto it = validated_.find(key); it != validated_.end()) {
            return it->second;
        }
        const auto& info = stage_info(stage);
        const auto st = read_stamp(stage);
        require(st.has_value() && std::filesystem::exists(dir(stage)), ErrorKind::missing_artifact,
                "missing artifact " + dir(stage).string() + "; run `pvp " + info.command + "` first");
        require(st->at("inputs") == inputs_of(stage), ErrorKind::stale_artifact,
                "artifact " + dir(stage).string() + " is stale: its inputs changed since it was written; rerun `pvp " +
                    info.command + "`");
        const auto out = st->at("output").get<std::string>();
        require(dir_digest(dir(stage)) == out, ErrorKind::stale_artifact,
                "artifact " + dir(stage).string() + " was modified after `pvp " + info.command +
                    "` wrote it; rerun `pvp " + info.command + "`");
        validated_[key] = out;
        return out;
    }

    json inputs_of(std::string_view stage) {
        const json c = to_json(cfg_);
        if (stage == "gen") {
            return {{"config.dataset", section_digest(c.at("dataset"))}, {"seed.data", cfg_.seeds.data}};
        }
        if (stage == "train") {
            return {{"gen", upstream("gen")},
                    {"config.model", section_digest(c.at("model"))},
                    {"config.train", section_digest(c.at("train"))},
                    {"seed.init", cfg_.seeds.init},
                    {"seed.train", cfg_.seeds.train}};
        }
        if (stage == "eval" || stage == "trace" || stage == "steer-fit") {
            return {{"gen", upstream("gen")}, {"train", upstream("train")}};
        }
        if (stage == "steer-search") {
            return {{"gen", upstream("gen")},
                    {"train", upstream("train")},
                    {"steer-fit", upstream("steer-fit")},
                    {"config.steering", section_digest(c.at("steering"))}};
        }
        if (stage == "steer-eval" || stage == "attn" || stage == "pca") {
            return {{"gen", upstream("gen")},
                    {"train", upstream("train")},
                    {"steer-fit", upstream("steer-fit")},
                    {"steer-search", upstream("steer-search")}};
        }
        if (stage == "report") {
            return {{"eval", upstream("eval")},     {"trace", upstream("trace")}, {"steer-eval", upstream("steer-eval")},
                    {"attn", upstream("attn")},     {"pca", upstream("pca")}};
        }
        if (stage == "verify") {
            return {{"gen", upstream("gen")},         {"train", upstream("train")},
                    {"steer-fit", upstream("steer-fit")}, {"report", upstream("report")},
                    {"trace", upstream("trace")},     {"eval", upstream("eval")}};
        }
        fail(ErrorKind::argument, "unknown stage '" + std::string(stage) + "'");
    }

    /// Shared stage protocol: skip when the stamp matches, else rebuild the
    /// output directory from scratch and stamp it.
    template <class Body>
    bool stage(std::string_view name, Body&& body) {
        RootLock lock(root_);
        const json inputs = inputs_of(name);
        const auto out = dir(name);
        if (const auto st = read_stamp(name);
            st && st->at("inputs") == inputs && std::filesystem::exists(out) &&
            dir_digest(out) == st->at("output").get<std::string>()) {
            say(std::string(name) + ": up to date");
            validated_[std::string(name)] = st->at("output").get<std::string>();
            return false;
        }
        std::error_code ec;
        std::filesystem::remove_all(out, ec);
        std::filesystem::create_directories(out, ec);
        require(!ec, ErrorKind::io, "cannot create " + out.string());
        body(out);
        const auto digest = dir_digest(out);
        write_file_atomic(stamp_path(name),
                          json{{"stage", name}, {"inputs", inputs}, {"output", digest}}.dump(2) + "\n");
        validated_[std::string(name)] = digest;
        write_run_record();
        say(std::string(name) + ": done (" + digest.substr(0, 12) + ")");
        return true;
    }

    void write_run_record() const {
        json st = json::object();
        for (const auto& s : stages()) {
            if (const auto stamp = read_stamp(s.name)) {
                st[s.name] = {{"inputs", stamp->at("inputs")}, {"output", stamp->at("output")}};
            }
        }
        const json rec{{"tool", "pvp"},
                       {"tool_version", kToolVersion},
                       {"config", to_json(cfg_)},
                       {"seeds", {{"data", cfg_.seeds.data}, {"init", cfg_.seeds.init}, {"train", cfg_.seeds.train}}},
                       {"stages", st}};
        write_file_atomic(root_ / "run.json", rec.dump(2) + "\n");
    }

    [[nodiscard]] Dataset dataset() { return load_dataset(dir("gen")); }
    [[nodiscard]] Params<float> checkpoint() { return checkpoint_load(dir("train") / "checkpoint.bin"); }
    [[nodiscard]] std::filesystem::path vectors_file(Task t) const {
        return dir("steer-fit") / ("vectors_" + std::string(to_string(t)) + ".bin");
    }
    [[nodiscard]] std::filesystem::path search_file(Task t) const {
        return dir("steer-search") / ("search_" + std::string(to_string(t)) + ".json");
    }
    [[nodiscard]] std::filesystem::path steering_file(Task t) const {
        return dir("steer-eval") / ("steering_" + std::string(to_string(t)) + ".json");
    }

    /// Best spec per direction from the search stage, when the search succeeded.
    std::map<Direction, InterventionSpec> best_specs(Task t) const {
        std::map<Direction, InterventionSpec> out;
        const json searched = read_json(search_file(t));
        for (const auto& d : searched.at("directions")) {
            if (!d.at("search").is_null()) {
                out[parse_direction(d.at("direction").get<std::string>())] =
                    spec_from_json(d.at("search").at("best"));
            }
        }
        return out;
    }

    // ----------------------------- stages -----------------------------

    bool stage_gen() {
        return stage("gen", [&](const std::filesystem::path& out) {
            const Dataset d = generate_dataset(cfg_.dataset, cfg_.seeds.data);
            persist_dataset(d, out);
            say("gen: " + std::to_string(d.images.size()) + " images, train " + std::to_string(d.train.size()) +
                ", steer-fit " + std::to_string(d.steerfit.size()) + ", eval " + std::to_string(d.eval.size()));
        });
    }

    bool stage_train() {
        return stage("train", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            ModelConfig mc = cfg_.model;
            require(mc.vocab_size == d.vocabulary().size(), ErrorKind::compatibility,
                    "model.vocab_size does not match the dataset vocabulary");
            const auto init = init_params<float>(mc, cfg_.seeds.init);
            std::string log_lines;
            auto evaluate = [&](const Params<float>& p) {
                std::map<std::string, std::pair<int, int>> cells;
                for (const auto& s : d.eval) {
                    auto& c = cells[std::string(to_string(s.task)) + "/" +
                                    detail::quadrant_name(s.prompt_kind, s.variant)];
                    c.first += predict_answer(p, d, s).token == scoring_target(s) ? 1 : 0;
                    ++c.second;
                }
                json j = json::object();
                for (const auto& [k, v] : cells) {
                    j[k] = 100.0 * v.first / v.second;
                }
                return j;
            };
            const auto trained = train(init, d, d.train, cfg_.train, cfg_.seeds.train, evaluate, [&](const EpochLog& e) {
                log_lines += to_json(e).dump() + "\n";
                say("train: epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " train acc " +
                    std::to_string(e.train_accuracy) + (e.eval.is_null() ? "" : " eval " + e.eval.dump()));
            });
            checkpoint_save(trained, out / "checkpoint.bin");
            write_file_atomic(out / "train_log.jsonl", log_lines);
        });
    }

    bool stage_eval() {
        return stage("eval", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            const auto m = accuracy_matrix(p, d, d.eval);
            write_file_atomic(out / "accuracy.json", to_json(m).dump() + "\n");
            for (const auto& c : m.cells) {
                say("eval: " + std::string(to_string(c.task)) + " " + detail::quadrant_name(c.kind, c.variant) + " " +
                    detail::fmt(c.accuracy()) + "% (n=" + std::to_string(c.n) + ")");
            }
        });
    }

    bool stage_trace() {
        return stage("trace", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            const auto r = trace_report(checkpoint(), d, d.eval);
            write_file_atomic(out / "traces.json", to_json(r).dump() + "\n");
            for (const auto& g : r.groups) {
                say("trace: " + std::string(to_string(g.task)) + " " + std::string(to_string(g.kind)) +
                    "+cf flipped " + std::to_string(g.summary.n_flipped) + "/" + std::to_string(g.summary.n));
            }
        });
    }

    bool stage_steer_fit() {
        return stage("steer-fit", [&](const std::filesystem::path&) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            for (Task t : kTasks) {
                const auto fit = select(d.steerfit, t);
                const auto v = compute_pvp(p, d, fit, t);
                vectors_save(v, vectors_file(t));
                say("steer fit: " + std::string(to_string(t)) + " from " + std::to_string(v.n_pairs) + " pairs");
            }
        });
    }

    bool stage_steer_search() {
        return stage("steer-search", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            for (Task t : kTasks) {
                const auto v = vectors_load(vectors_file(t));
                const auto val = select(d.steerfit, t);
                json dirs = json::array();
                for (Direction dir : kDirections) {
                    json entry{{"direction", to_string(dir)}, {"search", nullptr}, {"error", ""}};
                    try {
                        const auto r = search_window(p, d, v, dir, val, cfg_.steering.bounds, cfg_.steering.alpha);
                        entry["search"] = to_json(r);
                        write_file_atomic(out / ("search_" + std::string(to_string(t)) + "_" +
                                                 std::string(to_string(dir)) + ".csv"),
                                          search_table_csv(r));
                        say("steer search: " + std::string(to_string(t)) + " " + std::string(to_string(dir)) +
                            " best l=" + std::to_string(r.best.start_layer) + " w=" + std::to_string(r.best.window) +
                            " validation " + detail::fmt(r.best_rate) + "%");
                    } catch (const Error& e) {
                        if (e.kind() != ErrorKind::evaluation) {
                            throw;
                        }
                        entry["error"] = e.what();
                        say("steer search: " + std::string(to_string(t)) + " " + std::string(to_string(dir)) + ": " +
                            e.what());
                    }
                    dirs.push_back(entry);
                }
                write_file_atomic(search_file(t),
                                  json{{"task", to_string(t)}, {"directions", dirs}}.dump() + "\n");
            }
        });
    }

    bool stage_steer_eval() {
        return stage("steer-eval", [&](const std::filesystem::path&) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            for (Task t : kTasks) {
                const auto v = vectors_load(vectors_file(t));
                const auto ev = select(d.eval, t);
                const json searched = read_json(search_file(t));
                SteeringReport rep;
                rep.task = t;
                rep.n_pairs = v.n_pairs;
                for (const auto& entry : searched.at("directions")) {
                    DirectionResult r;
                    r.direction = parse_direction(entry.at("direction").get<std::string>());
                    r.error = entry.at("error").get<std::string>();
                    if (!entry.at("search").is_null()) {
                        r.search = search_from_json(entry.at("search"));
                        try {
                            r.eval = eval_flip_rate(p, d, v, r.search->best, ev);
                            say("steer eval: " + std::string(to_string(t)) + " " +
                                std::string(to_string(r.direction)) + " flip rate " + detail::fmt(r.eval->flip_rate) +
                                "% (n=" + std::to_string(r.eval->n) + ")");
                        } catch (const Error& e) {
                            if (e.kind() != ErrorKind::evaluation) {
                                throw;
                            }
                            r.error = e.what();
                            say("steer eval: " + std::string(to_string(t)) + " " +
                                std::string(to_string(r.direction)) + ": " + e.what());
                        }
                    }
                    rep.directions.push_back(std::move(r));
                }
                write_file_atomic(steering_file(t), to_json(rep).dump() + "\n");
            }
        });
    }

    bool stage_attn() {
        return stage("attn", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            for (Task t : kTasks) {
                const auto v = vectors_load(vectors_file(t));
                const auto probe = select(d.eval, t);
                AttentionDeltaReport rep;
                rep.task = t;
                for (const auto& [dir, spec] : best_specs(t)) {
                    rep.curves.push_back(attention_curves(p, d, v, spec, probe));
                    const auto& c = rep.curves.back();
                    say("attn: " + std::string(to_string(t)) + " " + std::string(to_string(dir)) +
                        " max image-mass delta: intervention " +
                        detail::fmt(AttentionCurves::max_of(c.intervention_image)) + ", prompt " +
                        detail::fmt(AttentionCurves::max_of(c.prompt_image)));
                }
                if (!rep.curves.empty()) {
                    write_file_atomic(out / ("attention_" + std::string(to_string(t)) + ".json"),
                                      to_json(rep).dump() + "\n");
                }
            }
        });
    }

    bool stage_pca() {
        return stage("pca", [&](const std::filesystem::path& out) {
            const Dataset d = dataset();
            const auto p = checkpoint();
            for (Task t : kTasks) {
                const auto specs = best_specs(t);
                if (!specs.contains(Direction::to_cf) || !specs.contains(Direction::to_wk)) {
                    say("pca: " + std::string(to_string(t)) + " skipped, window search incomplete");
                    continue;
                }
                const auto v = vectors_load(vectors_file(t));
                const auto r = pca_report(p, d, select(d.eval, t), v, specs.at(Direction::to_cf),
                                          specs.at(Direction::to_wk));
                write_file_atomic(out / ("pca_" + std::string(to_string(t)) + ".json"), to_json(r).dump() + "\n");
                say("pca: " + std::string(to_string(t)) + " dist(most,this) " +
                    detail::fmt(r.group_distance("most", "this")) + ", dist(most_to_cf,this) " +
                    detail::fmt(r.group_distance("most_to_cf", "this")));
            }
        });
    }

    bool stage_report() {
        return stage("report", [&](const std::filesystem::path& out) {
            const auto files = emit_report(load_bundle(), out);
            say("report: wrote " + std::to_string(files.size()) + " files to " + out.string());
        });
    }

    bool stage_verify() {
        return stage("verify", [&](const std::filesystem::path& out) {
            verify_results_ = evaluate_acceptance();
            json j = summary_json(verify_results_);
            write_file_atomic(out / "verify.json", j.dump(2) + "\n");
        });
    }

public:
    /// Acceptance properties that can be checked from one run's artifacts:
    /// mechanics, gradients, the directional patterns, flip machinery, and
    /// determinism of regeneration, steering fit and evaluation.
    std::vector<CriterionResult> evaluate_acceptance() {
        const Dataset d = dataset();
        const auto p = checkpoint();
        const auto v = vectors_load(vectors_file(Task::color));
        std::vector<CriterionResult> out;
        for (auto& c : acceptance::mechanical_checks(p, d, v)) {
            out.push_back(std::move(c));
        }
        for (auto& c : acceptance::gradient_criteria(d, cfg_.seeds.init)) {
            out.push_back(std::move(c));
        }
        const ResultsBundle bundle = load_bundle();
        for (auto& c : bundle_criteria(bundle)) {
            out.push_back(std::move(c));
        }
        for (auto& c : acceptance::flip_machinery(*bundle.traces)) {
            out.push_back(std::move(c));
        }
        const bool data_same = dataset_digest(generate_dataset(cfg_.dataset, cfg_.seeds.data)) == dataset_digest(d);
        const auto refit = compute_pvp(p, d, select(d.steerfit, Task::color), Task::color);
        const bool vectors_same = vectors_bytes(refit) == read_file(vectors_file(Task::color));
        const bool eval_same = to_json(accuracy_matrix(p, d, d.eval)).dump() + "\n" ==
                               read_file(dir("eval") / "accuracy.json");
        out.push_back(criterion("7.regenerated_dataset_digest", data_same ? 1 : 0, 1, false));
        out.push_back(criterion("7.refit_vectors_identical", vectors_same ? 1 : 0, 1, false));
        out.push_back(criterion("7.reevaluated_accuracy_identical", eval_same ? 1 : 0, 1, false));
        for (const auto& c : out) {
            say(std::string(c.pass ? "PASS " : "FAIL ") + c.id + " value=" +
                (std::isfinite(c.value) ? detail::fmt(c.value) : "n/a") + (c.note.empty() ? "" : " (" + c.note + ")"));
        }
        return out;
    }
};

/// Output root resolution: explicit flag, then config, then PVP_OUT, then "pvp_out".
inline std::filesystem::path resolve_root(const std::optional<std::string>& flag, const RunConfig& cfg) {
    if (flag && !flag->empty()) {
        return *flag;
    }
    if (!cfg.output_root.empty()) {
        return cfg.output_root;
    }
    if (const char* env = std::getenv("PVP_OUT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "pvp_out";
}

}  // namespace pvp
