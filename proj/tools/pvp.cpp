// pvp: command-line driver for the staged pipeline.
//
// Exit status: 0 success, 1 domain error (including failed verification),
// 2 usage error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pvp/pipeline.hpp"

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void apply_seed_override(pvp::RunConfig& cfg, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
        throw UsageError("--seed-override expects <stage>=<n>, got '" + spec + "'");
    }
    const std::string stage = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);
    std::uint64_t n = 0;
    try {
        std::size_t used = 0;
        n = std::stoull(value, &used);
        if (used != value.size() || value.front() == '-') {
            throw std::invalid_argument(value);
        }
    } catch (const std::exception&) {
        throw UsageError("--seed-override value '" + value + "' is not a non-negative integer");
    }
    if (stage == "data" || stage == "gen") {
        cfg.seeds.data = n;
    } else if (stage == "init") {
        cfg.seeds.init = n;
    } else if (stage == "train") {
        cfg.seeds.train = n;
    } else {
        throw UsageError("--seed-override stage must be data, gen, init or train, got '" + stage + "'");
    }
}

int verify_exit(const std::filesystem::path& verify_json, bool quiet) {
    const auto j = pvp::json::parse(pvp::read_file(verify_json));
    int failed = 0;
    for (const auto& [id, c] : j.items()) {
        if (!c.at("pass").get<bool>()) {
            ++failed;
            if (quiet) {
                std::cerr << "FAIL " << id << '\n';
            }
        }
    }
    std::cout << (failed == 0 ? "verify: all " + std::to_string(j.size()) + " checks passed"
                              : "verify: " + std::to_string(failed) + " of " + std::to_string(j.size()) +
                                    " checks failed")
              << '\n';
    return failed == 0 ? 0 : 1;
}

/// Reruns the full pipeline in a scratch root and compares stage digests.
int full_rerun(const pvp::RunConfig& cfg, pvp::Pipeline& original, bool quiet) {
    const auto scratch = std::filesystem::temp_directory_path() /
                         ("pvp-rerun-" + original.stage_digests().at("gen").substr(0, 12));
    std::filesystem::remove_all(scratch);
    pvp::Pipeline again(cfg, scratch, quiet);
    again.run_all();
    auto a = original.stage_digests();
    auto b = again.stage_digests();
    a.erase("verify");
    int mismatches = 0;
    for (const auto& [stage, digest] : a) {
        const bool same = b.contains(stage) && b.at(stage) == digest;
        mismatches += same ? 0 : 1;
        std::cout << (same ? "PASS" : "FAIL") << " 7.rerun_digest." << stage << '\n';
    }
    std::filesystem::remove_all(scratch);
    return mismatches == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pvp: prompt-vs-prompt steering workbench on a toy vision-language transformer"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> out_flag;
    std::vector<std::string> seed_overrides;
    bool quiet = false;
    app.add_option("--config", config_path, "JSON run configuration (defaults when omitted)");
    app.add_option("--out", out_flag, "output root (default: config output_root, then $PVP_OUT, then ./pvp_out)");
    app.add_option("--seed-override", seed_overrides, "override a seed, <stage>=<n> with stage data|init|train");
    app.add_flag("--quiet,-q", quiet, "suppress progress output");

    std::vector<std::string> stages_to_run;
    auto simple = [&](const char* name, const char* stage, const char* help) {
        app.add_subcommand(name, help)->callback([&stages_to_run, stage] { stages_to_run = {stage}; });
    };
    simple("gen", "gen", "generate and persist the dataset");
    simple("train", "train", "train the model and write the checkpoint");
    simple("eval", "eval", "accuracy matrix on the eval split");
    simple("trace", "trace", "layer-wise answer traces and flip statistics");
    auto* steer = app.add_subcommand("steer", "steering vectors: fit, search, eval");
    steer->require_subcommand(1);
    steer->add_subcommand("fit", "fit steering vectors on the steer-fit split")->callback([&] {
        stages_to_run = {"steer-fit"};
    });
    steer->add_subcommand("search", "key-layer window search on the steer-fit split")->callback([&] {
        stages_to_run = {"steer-search"};
    });
    steer->add_subcommand("eval", "flip rates on the eval split at the selected windows")->callback([&] {
        stages_to_run = {"steer-eval"};
    });
    simple("attn", "attn", "attention-mass deltas, prompt change vs intervention");
    simple("pca", "pca", "PCA of final-layer states before and after steering");
    simple("report", "report", "emit tables, figure data and summary");
    bool full = false;
    auto* verify = app.add_subcommand("verify", "run the acceptance property suite");
    verify->add_flag("--full", full, "also rerun the whole pipeline in a scratch root and compare digests");
    verify->callback([&] { stages_to_run = {"verify"}; });
    app.add_subcommand("all", "run every stage through report, then verify")->callback([&] {
        stages_to_run.clear();
        for (const auto& s : pvp::stages()) {
            stages_to_run.emplace_back(s.name);
        }
    });
    bool print_config = false;
    app.add_subcommand("config", "print the resolved configuration")->callback([&] { print_config = true; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        pvp::RunConfig cfg = config_path.empty() ? pvp::default_config() : pvp::load_config(config_path);
        for (const auto& s : seed_overrides) {
            apply_seed_override(cfg, s);
        }
        if (print_config) {
            std::cout << pvp::to_json(cfg).dump(2) << '\n';
            return 0;
        }
        pvp::Pipeline pipeline(cfg, pvp::resolve_root(out_flag, cfg), quiet);
        int status = 0;
        for (const auto& stage : stages_to_run) {
            pipeline.run(stage);
            if (stage == "verify") {
                status = verify_exit(pipeline.dir("verify") / "verify.json", quiet);
                if (full) {
                    status = std::max(status, full_rerun(cfg, pipeline, quiet));
                }
            }
        }
        return status;
    } catch (const UsageError& e) {
        std::cerr << "pvp: " << e.what() << '\n';
        return 2;
    } catch (const pvp::Error& e) {
        std::cerr << "pvp: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "pvp: " << e.what() << '\n';
        return 1;
    }
}
