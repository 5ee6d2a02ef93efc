#include <gtest/gtest.h>

#include <fstream>

#include "pvp/report.hpp"
#include "test_support.hpp"

using namespace pvp;
using pvp_test::default_dataset;

namespace {

struct Fixture {
    const Dataset& d = default_dataset();
    ModelConfig c = pvp_test::tiny_model(d, 3);
    Params<float> p = pvp_test::random_params<float>(c, 61);
    SteeringVectors v = compute_pvp(p, d, select(d.steerfit, Task::color), Task::color);
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string line; std::getline(is, line);) {
        out.push_back(line);
    }
    return out;
}

ResultsBundle small_bundle() {
    auto& f = fixture();
    ResultsBundle b;
    std::vector<Sample> eval;
    for (const auto& s : f.d.eval) {
        if (!s.image_id || *s.image_id % 3 == 0) {
            eval.push_back(s);
        }
    }
    b.accuracy = accuracy_matrix(f.p, f.d, eval);
    b.traces = trace_report(f.p, f.d, eval);
    const InterventionSpec cf{Direction::to_cf, 0, 1, 1.0}, wk{Direction::to_wk, 1, 1, 1.0};
    SteeringReport sr;
    sr.task = Task::color;
    sr.n_pairs = f.v.n_pairs;
    for (const auto& spec : {cf, wk}) {
        DirectionResult r;
        r.direction = spec.direction;
        try {
            r.eval = eval_flip_rate(f.p, f.d, f.v, spec, std::span<const Sample>(eval));
        } catch (const Error& e) {
            r.error = e.what();
        }
        sr.directions.push_back(std::move(r));
    }
    b.steering.push_back(sr);
    AttentionDeltaReport a;
    a.curves.push_back(attention_curves(f.p, f.d, f.v, cf, eval));
    a.curves.push_back(attention_curves(f.p, f.d, f.v, wk, eval));
    b.attention.push_back(a);
    b.pca.push_back(pca_report(f.p, f.d, eval, f.v, cf, wk));
    return b;
}

}  // namespace

TEST(Scoring, RuleOnSyntheticSamples) {
    Sample s;
    s.wk_answer = 10;
    s.prompt_kind = PromptKind::this_;
    EXPECT_EQ(scoring_target(s), 10);
    s.cf_answer = 11;
    EXPECT_EQ(scoring_target(s), 11);
    s.prompt_kind = PromptKind::most;
    EXPECT_EQ(scoring_target(s), 10);
}

TEST(Scoring, CellsRecountSyntheticLedgers) {
    Rng r(62);
    std::vector<AccuracyLedgerRow> ledger;
    std::map<std::tuple<PromptKind, Variant>, std::pair<int, int>> want;
    for (int i = 0; i < 400; ++i) {
        const auto k = r.below(2) == 0 ? PromptKind::this_ : PromptKind::most;
        const auto v = r.below(2) == 0 ? Variant::wk : Variant::cf;
        const int target = static_cast<int>(r.below(5));
        const int predicted = r.below(3) == 0 ? target : static_cast<int>(r.below(5));
        ledger.push_back({i, Task::color, k, v, predicted, target});
        auto& w = want[{k, v}];
        w.first += predicted == target ? 1 : 0;
        w.second += 1;
    }
    const auto cells = accuracy_cells(ledger);
    ASSERT_EQ(cells.size(), 4u);
    for (const auto& c : cells) {
        const auto& w = want.at({c.kind, c.variant});
        EXPECT_EQ(c.correct, w.first);
        EXPECT_EQ(c.n, w.second);
        EXPECT_DOUBLE_EQ(c.accuracy(), 100.0 * w.first / w.second);
    }
}

TEST(Scoring, MissingQuadrantIsAReportError) {
    std::vector<AccuracyLedgerRow> ledger{{0, Task::color, PromptKind::this_, Variant::wk, 1, 1},
                                          {1, Task::color, PromptKind::this_, Variant::cf, 1, 2},
                                          {2, Task::color, PromptKind::most, Variant::wk, 1, 1}};
    try {
        (void)accuracy_cells(ledger);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::report);
        EXPECT_NE(std::string(e.what()).find("most"), std::string::npos);
    }
    EXPECT_THROW((void)accuracy_cells(std::span<const AccuracyLedgerRow>{}), Error);
}

TEST(AccuracyMatrix, UniformModelAndManifestCounts) {
    const auto& d = default_dataset();
    auto p = init_params<float>(pvp_test::tiny_model(d), 1);
    std::fill(p.data.begin(), p.data.end(), 0.0F);  // every logit is zero
    const auto& s = d.eval.front();
    const auto tr = forward(p, ModelInput{d.image_of(s), s.tokens});
    for (double x : softmax<float>(tr.logits)) {
        EXPECT_DOUBLE_EQ(x, 1.0 / p.config.vocab_size);
    }
    const auto m = accuracy_matrix(p, d, d.eval);
    const auto counts = dataset_manifest(d).at("counts");
    for (const auto& c : m.cells) {
        const std::string key = std::string(to_string(c.task)) + "/" + std::string(to_string(c.kind)) + "/" +
                                std::string(to_string(c.variant));
        EXPECT_EQ(c.n, counts.at("eval").at(key).get<int>()) << key;
    }
}

TEST(Attention, ZeroScaleCurveAndShape) {
    auto& f = fixture();
    const auto probe = select(f.d.eval, Task::color);
    const auto c = attention_curves(f.p, f.d, f.v, InterventionSpec{Direction::to_cf, 0, 2, 0.0}, probe);
    ASSERT_EQ(c.intervention_image.size(), 3u);
    ASSERT_EQ(c.prompt_image.size(), 3u);
    for (double x : c.intervention_image) {
        EXPECT_EQ(x, 0.0);
    }
    for (double x : c.intervention_text) {
        EXPECT_EQ(x, 0.0);
    }
    EXPECT_GT(c.n_pairs, 0);
    auto wrong = f.v;
    wrong.d_model = 4;
    try {
        (void)attention_curves(f.p, f.d, wrong, InterventionSpec{}, probe);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::compatibility);
    }
}

TEST(Pca, ReportGroupsAndCentering) {
    auto& f = fixture();
    const auto probe = select(f.d.eval, Task::color);
    const auto r = pca_report(f.p, f.d, probe, f.v, {Direction::to_cf, 0, 1, 1.0}, {Direction::to_wk, 0, 1, 1.0});
    std::set<std::string> groups;
    double s1 = 0, s2 = 0;
    for (const auto& pt : r.points) {
        groups.insert(pt.group);
        s1 += pt.pc1;
        s2 += pt.pc2;
    }
    EXPECT_EQ(groups, (std::set<std::string>{"most", "this", "most_to_cf", "this_to_wk"}));
    EXPECT_NEAR(s1 / static_cast<double>(r.points.size()), 0.0, 1e-9);
    EXPECT_NEAR(s2 / static_cast<double>(r.points.size()), 0.0, 1e-9);
    for (const char* g : kPcaGroups) {
        const auto m = r.group_mean(g);
        EXPECT_TRUE(std::isfinite(m[0]) && std::isfinite(m[1]));
    }
    EXPECT_THROW((void)r.group_mean("nope"), Error);
}

TEST(Bundle, JsonFormsRoundTrip) {
    const auto b = small_bundle();
    const auto acc = accuracy_from_json(to_json(*b.accuracy));
    EXPECT_EQ(to_json(acc), to_json(*b.accuracy));
    const auto tr = trace_report_from_json(to_json(*b.traces));
    ASSERT_EQ(tr.groups.size(), b.traces->groups.size());
    for (std::size_t i = 0; i < tr.groups.size(); ++i) {
        EXPECT_EQ(tr.groups[i].first_flip_counts, b.traces->groups[i].first_flip_counts);
        EXPECT_EQ(tr.groups[i].summary.n_flipped, b.traces->groups[i].summary.n_flipped);
    }
    EXPECT_EQ(to_json(steering_report_from_json(to_json(b.steering.front()))), to_json(b.steering.front()));
    EXPECT_EQ(to_json(attention_from_json(to_json(b.attention.front()))), to_json(b.attention.front()));
    EXPECT_EQ(to_json(pca_from_json(to_json(b.pca.front()))), to_json(b.pca.front()));
}

TEST(Emission, AllArtifactsParseAndAgreeWithLedgers) {
    const auto b = small_bundle();
    pvp_test::TempDir dir("report");
    const auto names = emit_report(b, dir.path());
    for (const char* want : {"table1_accuracy.csv", "table2_flips.csv", "table3_steering.csv", "table5_attention.csv",
                             "fig3_traces.jsonl", "fig4_curves.csv", "fig5_pca.csv", "summary.json"}) {
        EXPECT_TRUE(std::filesystem::exists(dir.path() / want)) << want;
    }
    EXPECT_EQ(names.size(), 10u);

    // Accuracy table rows recount from the shipped accuracy ledger.
    const auto t1 = split_lines(read_file(dir.path() / "table1_accuracy.csv"));
    const auto la = split_lines(read_file(dir.path() / "ledger_accuracy.csv"));
    std::map<std::string, std::pair<int, int>> recount;
    for (std::size_t i = 1; i < la.size(); ++i) {
        std::vector<std::string> f;
        std::istringstream is(la[i]);
        for (std::string x; std::getline(is, x, ',');) {
            f.push_back(x);
        }
        auto& r = recount[f[1] + "," + f[2] + "," + f[3]];
        r.first += f[4] == f[5] ? 1 : 0;
        r.second += 1;
    }
    ASSERT_EQ(t1.size(), 1 + recount.size());
    for (std::size_t i = 1; i < t1.size(); ++i) {
        const auto& line = t1[i];
        int seen = 0;
        for (const auto& [key, r] : recount) {
            if (line.starts_with(key + ",")) {
                EXPECT_TRUE(line.starts_with(key + "," + std::to_string(r.first) + "," + std::to_string(r.second) + ","))
                    << line;
                ++seen;
            }
        }
        EXPECT_EQ(seen, 1) << line;
    }

    // Every JSONL record parses; summary booleans match a re-evaluation.
    for (const auto& line : split_lines(read_file(dir.path() / "fig3_traces.jsonl"))) {
        EXPECT_FALSE(json::parse(line).is_discarded());
    }
    const auto summary = json::parse(read_file(dir.path() / "summary.json"));
    const auto crit = bundle_criteria(b);
    ASSERT_FALSE(crit.empty());
    for (const auto& c : crit) {
        EXPECT_EQ(summary.at(c.id).at("pass").get<bool>(), c.pass) << c.id;
    }
    // The attention table maxima are attained by the emitted curves.
    const auto& curves = b.attention.front().curves.front();
    const double mx = AttentionCurves::max_of(curves.intervention_image);
    EXPECT_NE(std::find(curves.intervention_image.begin(), curves.intervention_image.end(), mx),
              curves.intervention_image.end());
}

TEST(Emission, EmptyBundleWritesNothing) {
    pvp_test::TempDir dir("report-empty");
    const auto out = dir.path() / "r";
    try {
        (void)emit_report(ResultsBundle{}, out);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::report);
    }
    EXPECT_FALSE(std::filesystem::exists(out));
}

TEST(Criteria, ComparisonsAndMissingValues) {
    EXPECT_TRUE(criterion("x", 50.0, 50.0, false).pass);
    EXPECT_FALSE(criterion("x", 50.0, 50.0, true).pass);
    EXPECT_FALSE(criterion("x", NAN, 0.0, false).pass);
    const auto f = failed_criterion("x", 1.0, false, "why");
    EXPECT_FALSE(f.pass);
    EXPECT_TRUE(to_json(f).at("value").is_null());
}
