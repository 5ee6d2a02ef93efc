#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "pvp/dataset.hpp"
#include "test_support.hpp"

using namespace pvp;
using pvp_test::default_dataset;

namespace {

bool is_graded(const Sample& s) { return s.variant == Variant::wk || s.variant == Variant::cf; }

}  // namespace

TEST(Dataset, TrainAndEvalAreDisjointOnHygieneKeys) {
    const auto& d = default_dataset();
    std::set<SampleKey> train_keys;
    for (const auto& s : d.train) {
        train_keys.insert(hygiene_key(s));
    }
    int checked = 0;
    for (const auto& s : d.eval) {
        EXPECT_FALSE(train_keys.contains(hygiene_key(s))) << "eval sample " << s.id << " leaks into train";
        ++checked;
    }
    EXPECT_GT(checked, 200);
}

TEST(Dataset, SteerFitIsDisjointFromEval) {
    const auto& d = default_dataset();
    std::set<SampleKey> eval_keys;
    std::set<int> eval_images;
    for (const auto& s : d.eval) {
        eval_keys.insert(hygiene_key(s));
        if (s.image_id) {
            eval_images.insert(*s.image_id);
        }
    }
    ASSERT_FALSE(d.steerfit.empty());
    for (const auto& s : d.steerfit) {
        EXPECT_FALSE(eval_keys.contains(hygiene_key(s))) << s.id;
        ASSERT_TRUE(s.image_id.has_value());
        EXPECT_FALSE(eval_images.contains(*s.image_id));
        EXPECT_EQ(s.variant, Variant::cf);
    }
}

TEST(Dataset, EvalCoversFullGridForBothTasks) {
    const auto& d = default_dataset();
    std::map<std::tuple<Task, PromptKind, Variant>, int> n;
    for (const auto& s : d.eval) {
        ASSERT_TRUE(is_graded(s));
        n[{s.task, s.prompt_kind, s.variant}]++;
    }
    for (Task t : {Task::color, Task::size}) {
        for (PromptKind k : {PromptKind::this_, PromptKind::most}) {
            for (Variant v : {Variant::wk, Variant::cf}) {
                EXPECT_GT((n[{t, k, v}]), 0) << to_string(t) << " " << to_string(k) << " " << to_string(v);
            }
        }
    }
}

TEST(Dataset, MostPromptsInTrainOnlySeePriorConsistentImages) {
    const auto& d = default_dataset();
    for (const auto& s : d.train) {
        if (s.prompt_kind != PromptKind::most) {
            continue;
        }
        EXPECT_NE(s.variant, Variant::cf) << s.id;
        EXPECT_EQ(s.target(), s.wk_answer);
        if (s.task == Task::color && s.image_id) {
            // Whatever object is pictured is drawn in its own canonical color.
            const int shown = s.object_ids.back();
            EXPECT_EQ(s.attribute, d.universe[static_cast<std::size_t>(shown)].canonical_color) << s.id;
        }
    }
}

TEST(Dataset, AnswersFollowTheScoringRule) {
    const auto& d = default_dataset();
    const auto vocab = d.vocabulary();
    for (const auto* split : {&d.train, &d.steerfit, &d.eval}) {
        for (const auto& s : *split) {
            EXPECT_EQ(s.tokens.back(), vocab.answer_cue());
            if (s.variant == Variant::cf) {
                ASSERT_TRUE(s.cf_answer.has_value());
                EXPECT_NE(*s.cf_answer, s.wk_answer);
                EXPECT_EQ(s.target(), s.prompt_kind == PromptKind::this_ ? *s.cf_answer : s.wk_answer);
            } else {
                EXPECT_FALSE(s.cf_answer.has_value());
                EXPECT_EQ(s.target(), s.wk_answer);
            }
            if (s.task == Task::color) {
                const auto& o = d.universe[static_cast<std::size_t>(s.object_ids.front())];
                EXPECT_EQ(s.wk_answer, vocab.color_token(o.canonical_color));
                if (s.cf_answer) {
                    EXPECT_EQ(*s.cf_answer, vocab.color_token(s.attribute));
                    EXPECT_GE(hue_distance(d.config.palette[static_cast<std::size_t>(s.attribute)].hue_deg,
                                           d.config.palette[static_cast<std::size_t>(o.canonical_color)].hue_deg),
                              kMinCfHueDistance);
                }
            }
        }
    }
}

TEST(Dataset, ImagesCarryMasksOfTheirObjects) {
    const auto& d = default_dataset();
    for (const auto& s : d.eval) {
        const CellImage* img = d.image_of(s);
        ASSERT_NE(img, nullptr);
        for (int oid : s.object_ids) {
            EXPECT_GT(mask_area(img->mask_of(oid)), 0u);
        }
        if (s.task == Task::size) {
            EXPECT_TRUE(img->baseline_row.has_value());
        }
    }
}

TEST(Dataset, SteerFitColorsAreBalanced) {
    // Rendered colors over steer-fit pairs form the same multiset as the priors.
    const auto& d = default_dataset();
    std::map<int, int> rendered, prior;
    for (const auto& s : d.steerfit) {
        if (s.task == Task::color && s.prompt_kind == PromptKind::this_) {
            rendered[*s.cf_answer]++;
            prior[s.wk_answer]++;
        }
    }
    ASSERT_FALSE(rendered.empty());
    EXPECT_EQ(rendered, prior);
}

TEST(Dataset, IdsAreUniqueAndSequential) {
    const auto& d = default_dataset();
    int next = 0;
    for (const auto* split : {&d.train, &d.steerfit, &d.eval}) {
        for (const auto& s : *split) {
            EXPECT_EQ(s.id, next++);
        }
    }
}

TEST(Dataset, DeterministicPerSeed) {
    const DatasetConfig c;
    const auto& a = default_dataset();
    const Dataset b = generate_dataset(c, 7);
    EXPECT_EQ(dataset_digest(a), dataset_digest(b));
    const Dataset other = generate_dataset(c, 8);
    EXPECT_NE(dataset_digest(a), dataset_digest(other));
}

TEST(Dataset, RejectsBadConfig) {
    DatasetConfig c;
    c.distractor_repeats = -1;
    EXPECT_THROW(generate_dataset(c, 1), Error);
    DatasetConfig c2;
    c2.eval_cf_colors = 7;  // more than any object admits alongside a steer color
    try {
        generate_dataset(c2, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
}

TEST(DatasetIo, PersistLoadRoundTrip) {
    pvp_test::TempDir dir("dataset");
    const auto& d = default_dataset();
    persist_dataset(d, dir.path());
    const Dataset back = load_dataset(dir.path());
    EXPECT_EQ(dataset_digest(back), dataset_digest(d));
    EXPECT_EQ(back.train, d.train);
    EXPECT_EQ(back.eval, d.eval);
    EXPECT_EQ(back.images.size(), d.images.size());
    EXPECT_EQ(back.images.front(), d.images.front());
    EXPECT_EQ(back.config, d.config);
    EXPECT_EQ(back.universe, d.universe);
    // Manifest records the counts per split.
    const auto m = json::parse(read_file(dir.path() / "manifest.json"));
    EXPECT_EQ(m.at("seed").get<std::uint64_t>(), 7u);
    EXPECT_EQ(m.at("digests").at("dataset").get<std::string>(), dataset_digest(d));
}

TEST(DatasetIo, CorruptImageIsAnIntegrityError) {
    pvp_test::TempDir dir("dataset-corrupt");
    const auto& d = default_dataset();
    persist_dataset(d, dir.path());
    const auto img = dir.path() / "images" / "3.bin";
    std::string bytes = read_file(img);
    bytes[20] = static_cast<char>(bytes[20] ^ 0x40);
    write_file_atomic(img, bytes);
    try {
        load_dataset(dir.path());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::integrity);
    }
}

TEST(DatasetIo, TruncatedSplitIsALoadError) {
    pvp_test::TempDir dir("dataset-trunc");
    const auto& d = default_dataset();
    persist_dataset(d, dir.path());
    const auto p = dir.path() / "eval.jsonl";
    std::string text = read_file(p);
    text.resize(text.size() - 10);
    write_file_atomic(p, text);
    try {
        load_dataset(dir.path());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::load);
        EXPECT_NE(std::string(e.what()).find("eval.jsonl"), std::string::npos);
    }
}

TEST(DatasetIo, MissingManifestIsALoadError) {
    pvp_test::TempDir dir("dataset-empty");
    try {
        load_dataset(dir.path());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::load);
    }
}

TEST(DatasetIo, ImageBlobRoundTripAndBadHeader) {
    const auto& d = default_dataset();
    const auto& size_img = *d.image_of(d.eval.back());
    const CellImage back = image_from_bytes(image_bytes(size_img), mask_bytes(size_img), "x");
    EXPECT_EQ(back, size_img);
    std::string bad = image_bytes(size_img);
    bad.pop_back();
    EXPECT_THROW(image_from_bytes(bad, mask_bytes(size_img), "x"), Error);
}
