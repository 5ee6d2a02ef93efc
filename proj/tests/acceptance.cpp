// Acceptance driver: runs the full pipeline twice on the default config and
// prints one PASS/FAIL line per criterion, with the underlying checks below it.
//
// Exit status is 0 once every criterion has been evaluated; --strict makes any
// FAIL line fatal as well.

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pvp/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    fs::path root;
    double train_seconds = 0;
    std::map<std::string, std::string> stages;
    std::map<std::string, std::string> report_files;  // name -> sha256
};

Run run_pipeline(const pvp::RunConfig& cfg, const fs::path& root, bool quiet) {
    fs::remove_all(root);
    pvp::Pipeline p(cfg, root, quiet);
    Run r;
    r.root = root;
    for (const auto& s : pvp::stages()) {
        const std::string_view name = s.name;
        if (name == "verify") {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        p.run(name);
        if (name == "train") {
            r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    }
    r.stages = p.stage_digests();
    for (const auto& e : fs::directory_iterator(p.dir("report"))) {
        r.report_files[e.path().filename().string()] = pvp::sha256_hex(pvp::read_file(e.path()));
    }
    return r;
}

std::string describe(const pvp::CriterionResult& c) {
    std::ostringstream os;
    os << (c.pass ? "ok   " : "miss ") << c.id << " value=";
    if (std::isfinite(c.value)) {
        os << c.value;
    } else {
        os << "n/a";
    }
    os << (c.strict ? " > " : " >= ") << c.threshold;
    if (!c.note.empty()) {
        os << " (" << c.note << ")";
    }
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    bool strict = false;
    bool quiet = true;
    fs::path base = fs::temp_directory_path() / "pvp-acceptance";
    fs::path results;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--strict") == 0) {
            strict = true;
        } else if (std::strcmp(argv[i], "--verbose") == 0) {
            quiet = false;
        } else if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) {
            base = argv[++i];
        } else if (std::strcmp(argv[i], "--results") == 0 && i + 1 < argc) {
            results = argv[++i];
        } else {
            std::cerr << "usage: pvp_acceptance [--strict] [--verbose] [--work DIR] [--results FILE]\n";
            return 2;
        }
    }

    try {
        const pvp::RunConfig cfg = pvp::default_config();
        const auto t0 = std::chrono::steady_clock::now();
        const Run a = run_pipeline(cfg, base / "a", quiet);
        const Run b = run_pipeline(cfg, base / "b", quiet);
        std::cout << "pipeline runs finished in "
                  << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";

        pvp::Pipeline first(cfg, a.root, true);
        auto checks = first.evaluate_acceptance();
        checks.push_back(pvp::criterion("3.train_seconds_within_budget", a.train_seconds <= 600.0 ? 1 : 0, 1, false,
                                        "train stage took " + std::to_string(a.train_seconds) + " s"));
        for (const auto& [stage, digest] : a.stages) {
            const bool same = b.stages.contains(stage) && b.stages.at(stage) == digest;
            checks.push_back(pvp::criterion("7.rerun_digest." + stage, same ? 1 : 0, 1, false));
        }
        const bool files_same = !a.report_files.empty() && a.report_files == b.report_files;
        checks.push_back(pvp::criterion("7.report_files_identical", files_same ? 1 : 0, 1, false,
                                        std::to_string(a.report_files.size()) + " files"));

        std::ostringstream out;
        int failed = 0;
        for (int n = 1; n <= 8; ++n) {
            const std::string prefix = std::to_string(n) + ".";
            std::vector<const pvp::CriterionResult*> mine;
            for (const auto& c : checks) {
                if (c.id.starts_with(prefix)) {
                    mine.push_back(&c);
                }
            }
            const bool pass = !mine.empty() &&
                              std::all_of(mine.begin(), mine.end(), [](const auto* c) { return c->pass; });
            failed += pass ? 0 : 1;
            out << (pass ? "PASS" : "FAIL") << " criterion " << n << '\n';
            for (const auto* c : mine) {
                out << "    " << describe(*c) << '\n';
            }
        }
        out << "acceptance: " << 8 - failed << " of 8 criteria passed\n";
        std::cout << out.str();
        if (!results.empty()) {
            std::ofstream(results) << out.str();
        }
        fs::remove_all(base);
        return strict && failed > 0 ? 1 : 0;
    } catch (const std::exception& e) {
        std::cerr << "acceptance aborted: " << e.what() << '\n';
        return 3;
    }
}
