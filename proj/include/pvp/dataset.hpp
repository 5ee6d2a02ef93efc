#pragma once

// Train / steer-fit / eval split generation, manifest and on-disk format.
//
// Directory layout:
//   manifest.json   seed, config echo, counts, split assignment, sha-256 digests
//   universe.json   palette, objects, size relations
//   train.jsonl, steerfit.jsonl, eval.jsonl   one sample per line
//   images/<id>.bin u32 width, u32 height, then float32 RGB row-major
//   masks/<id>.bin  u32 width, u32 height, u32 n_masks, i32 baseline_row (-1 if none),
//                   then per mask: u32 object id + ceil(w*h/8) bytes, LSB-first bitset

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "pvp/corpus.hpp"

namespace pvp {

using json = nlohmann::json;

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetConfig {
    int n_objects = 32;
    std::vector<ColorSpec> palette = default_palette();
    int canvas_px = 32;

    // color task
    double eval_object_fraction = 0.5;
    int eval_cf_colors = 2;
    int steer_cf_colors = 1;
    int train_renders = 4;
    int train_most_renders = 8;
    int text_prior_repeats = 4;
    int distractor_repeats = 2;  // "most" questions shown another object's picture
    int eval_renders = 4;
    int steer_renders = 4;

    // size task
    double size_eval_fraction = 0.4;
    double size_steer_fraction = 0.2;
    int size_train_renders = 4;
    int size_eval_renders = 4;
    int size_steer_renders = 4;
    int size_text_prior_repeats = 2;

    bool operator==(const DatasetConfig&) const = default;
};

inline void to_json(json& j, const ColorSpec& c) {
    j = json{{"name", c.name}, {"hue_deg", c.hue_deg}, {"sat", c.sat}, {"val", c.val}};
}
inline void from_json(const json& j, ColorSpec& c) {
    j.at("name").get_to(c.name);
    j.at("hue_deg").get_to(c.hue_deg);
    j.at("sat").get_to(c.sat);
    j.at("val").get_to(c.val);
}

inline void to_json(json& j, const DatasetConfig& c) {
    j = json{{"n_objects", c.n_objects},
             {"palette", c.palette},
             {"canvas_px", c.canvas_px},
             {"eval_object_fraction", c.eval_object_fraction},
             {"eval_cf_colors", c.eval_cf_colors},
             {"steer_cf_colors", c.steer_cf_colors},
             {"train_renders", c.train_renders},
             {"train_most_renders", c.train_most_renders},
             {"text_prior_repeats", c.text_prior_repeats},
             {"distractor_repeats", c.distractor_repeats},
             {"eval_renders", c.eval_renders},
             {"steer_renders", c.steer_renders},
             {"size_eval_fraction", c.size_eval_fraction},
             {"size_steer_fraction", c.size_steer_fraction},
             {"size_train_renders", c.size_train_renders},
             {"size_eval_renders", c.size_eval_renders},
             {"size_steer_renders", c.size_steer_renders},
             {"size_text_prior_repeats", c.size_text_prior_repeats}};
}

inline void from_json(const json& j, DatasetConfig& c) {
    j.at("n_objects").get_to(c.n_objects);
    j.at("palette").get_to(c.palette);
    j.at("canvas_px").get_to(c.canvas_px);
    j.at("eval_object_fraction").get_to(c.eval_object_fraction);
    j.at("eval_cf_colors").get_to(c.eval_cf_colors);
    j.at("steer_cf_colors").get_to(c.steer_cf_colors);
    j.at("train_renders").get_to(c.train_renders);
    j.at("train_most_renders").get_to(c.train_most_renders);
    j.at("text_prior_repeats").get_to(c.text_prior_repeats);
    j.at("distractor_repeats").get_to(c.distractor_repeats);
    j.at("eval_renders").get_to(c.eval_renders);
    j.at("steer_renders").get_to(c.steer_renders);
    j.at("size_eval_fraction").get_to(c.size_eval_fraction);
    j.at("size_steer_fraction").get_to(c.size_steer_fraction);
    j.at("size_train_renders").get_to(c.size_train_renders);
    j.at("size_eval_renders").get_to(c.size_eval_renders);
    j.at("size_steer_renders").get_to(c.size_steer_renders);
    j.at("size_text_prior_repeats").get_to(c.size_text_prior_repeats);
}

inline void validate(const DatasetConfig& c) {
    validate_palette(c.palette);
    require(c.palette.size() >= 4, ErrorKind::config, "dataset.palette needs at least 4 colors");
    require(c.n_objects >= 4, ErrorKind::config, "dataset.n_objects must be at least 4");
    require(c.canvas_px >= 13, ErrorKind::config, "dataset.canvas_px must be at least 13");
    require(c.eval_object_fraction > 0.0 && c.eval_object_fraction < 1.0, ErrorKind::config,
            "dataset.eval_object_fraction must be in (0, 1)");
    require(c.size_eval_fraction > 0.0 && c.size_steer_fraction > 0.0 &&
                c.size_eval_fraction + c.size_steer_fraction < 1.0,
            ErrorKind::config, "dataset.size_eval_fraction + size_steer_fraction must be in (0, 1)");
    for (auto [name, v] : std::array<std::pair<const char*, int>, 12>{{{"eval_cf_colors", c.eval_cf_colors},
                                                                        {"steer_cf_colors", c.steer_cf_colors},
                                                                        {"train_renders", c.train_renders},
                                                                        {"train_most_renders", c.train_most_renders},
                                                                        {"text_prior_repeats", c.text_prior_repeats},
                                                                        {"eval_renders", c.eval_renders},
                                                                        {"steer_renders", c.steer_renders},
                                                                        {"size_train_renders", c.size_train_renders},
                                                                        {"size_eval_renders", c.size_eval_renders},
                                                                        {"size_steer_renders", c.size_steer_renders},
                                                                        {"size_text_prior_repeats",
                                                                         c.size_text_prior_repeats},
                                                                        {"n_objects", c.n_objects}}}) {
        require(v >= 1, ErrorKind::config, std::string("dataset.") + name + " must be at least 1");
    }
    require(c.distractor_repeats >= 0, ErrorKind::config, "dataset.distractor_repeats must be non-negative");
}

// ----------------------------- samples -----------------------------

struct Sample {
    int id = 0;
    Task task = Task::color;
    PromptKind prompt_kind = PromptKind::this_;
    Variant variant = Variant::wk;
    std::optional<int> image_id;
    std::vector<int> tokens;
    int wk_answer = 0;
    std::optional<int> cf_answer;
    std::vector<int> object_ids;
    /// Rendered attribute: palette index (color) or id of the object drawn bigger (size).
    int attribute = 0;

    /// Supervised answer: "this" follows the pixels, "most" follows the prior.
    [[nodiscard]] int target() const {
        if (prompt_kind == PromptKind::this_ && variant == Variant::cf) {
            return *cf_answer;
        }
        return wk_answer;
    }

    bool operator==(const Sample&) const = default;
};

using SampleKey = std::tuple<Task, std::vector<int>, int, PromptKind, Variant>;

/// (task, objects, attribute, prompt kind, variant); size pairs are keyed order-free.
inline SampleKey hygiene_key(const Sample& s) {
    auto objs = s.object_ids;
    std::sort(objs.begin(), objs.end());
    return {s.task, objs, s.attribute, s.prompt_kind, s.variant};
}

struct Dataset {
    std::uint64_t seed = 0;
    DatasetConfig config;
    std::vector<ObjectSpec> universe;
    std::vector<SizeRelation> relations;
    std::vector<CellImage> images;  // indexed by image id
    std::vector<Sample> train;
    std::vector<Sample> steerfit;
    std::vector<Sample> eval;
    json assignment;  // which objects / colors / relations went where

    [[nodiscard]] Vocabulary vocabulary() const { return Vocabulary(config.palette, universe); }

    [[nodiscard]] const CellImage* image_of(const Sample& s) const {
        if (!s.image_id) {
            return nullptr;
        }
        return &images.at(static_cast<std::size_t>(*s.image_id));
    }

    [[nodiscard]] const std::vector<Sample>& split(std::string_view name) const {
        if (name == "train") return train;
        if (name == "steerfit") return steerfit;
        if (name == "eval") return eval;
        fail(ErrorKind::argument, "unknown split '" + std::string(name) + "'");
    }
};

inline json sample_to_json(const Sample& s) {
    json j{{"id", s.id},
           {"task", to_string(s.task)},
           {"prompt_kind", to_string(s.prompt_kind)},
           {"variant", to_string(s.variant)},
           {"tokens", s.tokens},
           {"wk_answer", s.wk_answer},
           {"object_ids", s.object_ids},
           {"attribute", s.attribute}};
    j["image"] = s.image_id ? json("images/" + std::to_string(*s.image_id) + ".bin") : json(nullptr);
    j["cf_answer"] = s.cf_answer ? json(*s.cf_answer) : json(nullptr);
    return j;
}

inline Sample sample_from_json(const json& j) {
    Sample s;
    j.at("id").get_to(s.id);
    s.task = parse_task(j.at("task").get<std::string>());
    s.prompt_kind = parse_prompt_kind(j.at("prompt_kind").get<std::string>());
    s.variant = parse_variant(j.at("variant").get<std::string>());
    j.at("tokens").get_to(s.tokens);
    j.at("wk_answer").get_to(s.wk_answer);
    j.at("object_ids").get_to(s.object_ids);
    j.at("attribute").get_to(s.attribute);
    if (!j.at("image").is_null()) {
        const auto ref = j.at("image").get<std::string>();
        constexpr std::string_view prefix = "images/";
        require(ref.starts_with(prefix) && ref.ends_with(".bin"), ErrorKind::load, "bad image ref " + ref);
        s.image_id = std::stoi(ref.substr(prefix.size(), ref.size() - prefix.size() - 4));
    }
    if (!j.at("cf_answer").is_null()) {
        s.cf_answer = j.at("cf_answer").get<int>();
    }
    return s;
}

inline std::string split_to_jsonl(const std::vector<Sample>& split) {
    std::string out;
    for (const auto& s : split) {
        out += sample_to_json(s).dump();
        out += '\n';
    }
    return out;
}

inline std::string image_bytes(const CellImage& img) {
    std::string out;
    out.reserve(8 + img.pixels.size() * 4);
    put_u32(out, static_cast<std::uint32_t>(img.width));
    put_u32(out, static_cast<std::uint32_t>(img.height));
    put_f32s(out, img.pixels);
    return out;
}

inline std::string mask_bytes(const CellImage& img) {
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(img.width));
    put_u32(out, static_cast<std::uint32_t>(img.height));
    put_u32(out, static_cast<std::uint32_t>(img.masks.size()));
    put_i32(out, img.baseline_row.value_or(-1));
    const std::size_t nbytes = (img.n_pixels() + 7) / 8;
    for (const auto& m : img.masks) {
        put_u32(out, static_cast<std::uint32_t>(m.object_id));
        std::string packed(nbytes, '\0');
        for (std::size_t i = 0; i < m.bits.size(); ++i) {
            if (m.bits[i] != 0) {
                packed[i / 8] = static_cast<char>(packed[i / 8] | (1 << (i % 8)));
            }
        }
        out += packed;
    }
    return out;
}

inline CellImage image_from_bytes(std::string_view image, std::string_view mask, const std::string& what) {
    ByteReader r(image, what);
    CellImage img;
    img.width = static_cast<int>(r.u32());
    img.height = static_cast<int>(r.u32());
    require(img.width > 0 && img.height > 0 && img.width <= 1 << 14 && img.height <= 1 << 14, ErrorKind::load,
            what + ": implausible image dimensions");
    img.pixels.resize(img.n_pixels() * 3);
    r.f32s(img.pixels);
    require(r.remaining() == 0, ErrorKind::load, what + ": trailing bytes in image blob");

    ByteReader m(mask, what + " (mask)");
    const auto mw = static_cast<int>(m.u32());
    const auto mh = static_cast<int>(m.u32());
    require(mw == img.width && mh == img.height, ErrorKind::load, what + ": mask/image dimension mismatch");
    const auto n = m.u32();
    const auto baseline = m.i32();
    if (baseline >= 0) {
        img.baseline_row = baseline;
    }
    const std::size_t nbytes = (img.n_pixels() + 7) / 8;
    for (std::uint32_t k = 0; k < n; ++k) {
        ObjectMask om;
        om.object_id = static_cast<int>(m.u32());
        const auto packed = m.take(nbytes);
        om.bits.resize(img.n_pixels());
        for (std::size_t i = 0; i < om.bits.size(); ++i) {
            om.bits[i] = static_cast<std::uint8_t>((static_cast<unsigned char>(packed[i / 8]) >> (i % 8)) & 1U);
        }
        img.masks.push_back(std::move(om));
    }
    require(m.remaining() == 0, ErrorKind::load, what + ": trailing bytes in mask blob");
    return img;
}

inline json universe_to_json(const Dataset& d) {
    json objs = json::array();
    for (const auto& o : d.universe) {
        objs.push_back({{"id", o.id}, {"name", o.name}, {"canonical_color", o.canonical_color},
                        {"size_units", o.size_units}});
    }
    json rels = json::array();
    for (const auto& r : d.relations) {
        rels.push_back({{"small", r.small}, {"big", r.big}});
    }
    return json{{"palette", d.config.palette}, {"objects", objs}, {"size_relations", rels}};
}

namespace detail {

inline std::string universe_digest(const Dataset& d) { return sha256_hex(universe_to_json(d).dump()); }

struct DatasetDigests {
    std::string universe, train, steerfit, eval, images, dataset;
};

inline DatasetDigests compute_digests(const Dataset& d) {
    DatasetDigests g;
    const auto universe = universe_to_json(d).dump();
    const auto train = split_to_jsonl(d.train);
    const auto steer = split_to_jsonl(d.steerfit);
    const auto eval = split_to_jsonl(d.eval);
    g.universe = sha256_hex(universe);
    g.train = sha256_hex(train);
    g.steerfit = sha256_hex(steer);
    g.eval = sha256_hex(eval);
    Sha256 imgs;
    for (const auto& img : d.images) {
        imgs.update(image_bytes(img)).update(mask_bytes(img));
    }
    g.images = imgs.hex();
    Sha256 all;
    all.update_value<std::uint64_t>(d.seed);
    all.update(json(d.config).dump());
    all.update(d.assignment.dump());
    for (const auto* h : {&g.universe, &g.train, &g.steerfit, &g.eval, &g.images}) {
        all.update(*h);
    }
    g.dataset = all.hex();
    return g;
}

inline json count_table(const std::vector<Sample>& split) {
    std::map<std::string, int> counts;
    for (const auto& s : split) {
        counts[std::string(to_string(s.task)) + "/" + std::string(to_string(s.prompt_kind)) + "/" +
               std::string(to_string(s.variant))]++;
    }
    return json(counts);
}

}  // namespace detail

/// Manifest content; its digest covers seed, config, assignment and every file.
inline json dataset_manifest(const Dataset& d) {
    const auto g = detail::compute_digests(d);
    return json{{"format_version", kDatasetFormatVersion},
                {"seed", d.seed},
                {"config", d.config},
                {"counts",
                 {{"train", detail::count_table(d.train)},
                  {"steerfit", detail::count_table(d.steerfit)},
                  {"eval", detail::count_table(d.eval)}}},
                {"n_images", d.images.size()},
                {"assignment", d.assignment},
                {"digests",
                 {{"universe", g.universe},
                  {"train", g.train},
                  {"steerfit", g.steerfit},
                  {"eval", g.eval},
                  {"images", g.images},
                  {"dataset", g.dataset}}}};
}

inline std::string dataset_digest(const Dataset& d) { return detail::compute_digests(d).dataset; }

// ----------------------------- generation -----------------------------

namespace detail {

class SplitBuilder {
public:
    SplitBuilder(Dataset& d, const Vocabulary& vocab) : d_(d), vocab_(vocab) {}

    int add_image(CellImage img) {
        d_.images.push_back(std::move(img));
        return static_cast<int>(d_.images.size()) - 1;
    }

    Sample color_sample(Task task, PromptKind kind, Variant variant, std::optional<int> image, const ObjectSpec& o,
                        int rendered_color) const {
        Sample s;
        s.task = task;
        s.prompt_kind = kind;
        s.variant = variant;
        s.image_id = image;
        const std::array<std::string, 1> names{o.name};
        s.tokens = build_prompt(vocab_, Task::color, kind, names);
        s.wk_answer = vocab_.color_token(o.canonical_color);
        if (variant == Variant::cf) {
            s.cf_answer = vocab_.color_token(rendered_color);
        }
        s.object_ids = {o.id};
        s.attribute = rendered_color;
        return s;
    }

    Sample size_sample(PromptKind kind, Variant variant, std::optional<int> image, const ObjectSpec& left,
                       const ObjectSpec& right, const SizeRelation& rel) const {
        Sample s;
        s.task = Task::size;
        s.prompt_kind = kind;
        s.variant = variant;
        s.image_id = image;
        const std::array<std::string, 2> names{left.name, right.name};
        s.tokens = build_prompt(vocab_, Task::size, kind, names);
        s.wk_answer = vocab_.object_token(rel.big);
        if (variant == Variant::cf) {
            s.cf_answer = vocab_.object_token(rel.small);
        }
        s.object_ids = {left.id, right.id};
        s.attribute = variant == Variant::cf ? rel.small : rel.big;
        return s;
    }

private:
    Dataset& d_;
    const Vocabulary& vocab_;
};

/// Steer-fit colors: each round maps every object to the canonical color of
/// another object (a random permutation subject to the hue-distance rule), so
/// the rendered and canonical answers over the steer-fit split form the same
/// multiset and color content cancels in the This-minus-Most mean.
inline std::vector<std::vector<int>> balanced_steer_colors(std::span<const ObjectSpec> universe,
                                                           std::span<const ColorSpec> palette, int rounds, Rng& rng) {
    const std::size_t n = universe.size();
    std::vector<std::vector<int>> out(n);
    for (int round = 0; round < rounds; ++round) {
        bool found = false;
        for (int attempt = 0; attempt < 20000 && !found; ++attempt) {
            std::vector<int> perm(n);
            for (std::size_t i = 0; i < n; ++i) {
                perm[i] = static_cast<int>(i);
            }
            rng.shuffle(perm);
            found = true;
            for (std::size_t i = 0; i < n && found; ++i) {
                const int c = universe[static_cast<std::size_t>(perm[i])].canonical_color;
                const auto ok = admissible_cf_colors(universe[i].canonical_color, palette);
                found = std::find(ok.begin(), ok.end(), c) != ok.end() &&
                        std::find(out[i].begin(), out[i].end(), c) == out[i].end();
            }
            if (found) {
                for (std::size_t i = 0; i < n; ++i) {
                    out[i].push_back(universe[static_cast<std::size_t>(perm[i])].canonical_color);
                }
            }
        }
        require(found, ErrorKind::generation,
                "no balanced steer-fit color assignment found; lower steer_cf_colors or widen the palette");
    }
    return out;
}

inline int color_side(Rng& rng, int canvas) {
    const int lo = canvas / 2;
    const int hi = canvas - 4;
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, hi - lo + 1))));
}

}  // namespace detail

/// Builds the three splits. Color: objects are split into grounding objects
/// (trained with images under both prompt kinds) and eval objects, whose
/// world-knowledge images and held-out counterfactual colors never reach
/// training; their priors come from text-only "most" questions. Size mirrors
/// this at the level of relations.
inline Dataset generate_dataset(const DatasetConfig& config, std::uint64_t seed) {
    validate(config);
    Dataset d;
    d.seed = seed;
    d.config = config;
    d.universe = build_universe(mix_seed(seed, 1), config.n_objects, config.palette);
    d.relations = make_size_relations(d.universe);
    const Vocabulary vocab = d.vocabulary();
    const auto& palette = config.palette;
    const int canvas = config.canvas_px;
    detail::SplitBuilder b(d, vocab);
    Rng rng(mix_seed(seed, 2));

    auto render = [&](const ObjectSpec& o, int color, Rng& r) {
        const int side = detail::color_side(r, canvas);
        const CellImage wk =
            render_object_image(o, palette[static_cast<std::size_t>(o.canonical_color)], side, canvas, r.next_u64());
        if (color == o.canonical_color) {
            return wk;
        }
        return hue_remap(wk, wk.mask_of(o.id).bits, palette[static_cast<std::size_t>(color)]);
    };

    // ---- color ----
    std::vector<int> order(d.universe.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = static_cast<int>(i);
    }
    rng.shuffle(order);
    const auto n_eval_objects = static_cast<std::size_t>(
        std::clamp<long>(std::lround(config.eval_object_fraction * static_cast<double>(order.size())), 1,
                         static_cast<long>(order.size()) - 1));
    std::vector<int> eval_objects(order.begin(), order.begin() + static_cast<long>(n_eval_objects));
    std::vector<int> ground_objects(order.begin() + static_cast<long>(n_eval_objects), order.end());
    std::sort(eval_objects.begin(), eval_objects.end());
    std::sort(ground_objects.begin(), ground_objects.end());

    Rng steer_rng = rng.fork(4000);
    const auto steer_colors = detail::balanced_steer_colors(d.universe, palette, config.steer_cf_colors, steer_rng);

    json color_assign = json::object();
    color_assign["ground_objects"] = ground_objects;
    json held = json::array();

    for (int oid : ground_objects) {
        const auto& o = d.universe[static_cast<std::size_t>(oid)];
        Rng r = rng.fork(static_cast<std::uint64_t>(1000 + oid));
        for (int c = 0; c < static_cast<int>(palette.size()); ++c) {
            const Variant v = c == o.canonical_color ? Variant::wk : Variant::cf;
            if (v == Variant::cf && hue_distance(palette[static_cast<std::size_t>(c)].hue_deg,
                                                 palette[static_cast<std::size_t>(o.canonical_color)].hue_deg) <
                                        kMinCfHueDistance) {
                continue;
            }
            for (int k = 0; k < config.train_renders; ++k) {
                const int img = b.add_image(render(o, c, r));
                d.train.push_back(b.color_sample(Task::color, PromptKind::this_, v, img, o, c));
            }
        }
        for (int k = 0; k < config.train_most_renders; ++k) {
            const int img = b.add_image(render(o, o.canonical_color, r));
            d.train.push_back(b.color_sample(Task::color, PromptKind::most, Variant::wk, img, o, o.canonical_color));
        }
    }

    for (int oid : eval_objects) {
        const auto& o = d.universe[static_cast<std::size_t>(oid)];
        Rng r = rng.fork(static_cast<std::uint64_t>(2000 + oid));
        const auto admissible = admissible_cf_colors(o.canonical_color, palette);
        const auto& steer_cf = steer_colors[static_cast<std::size_t>(oid)];
        const int need = config.eval_cf_colors + config.steer_cf_colors;
        require(static_cast<int>(admissible.size()) >= need, ErrorKind::config,
                "object " + o.name + " has " + std::to_string(admissible.size()) +
                    " admissible counterfactual colors but eval_cf_colors + steer_cf_colors = " +
                    std::to_string(need));
        std::vector<int> picked(steer_cf);
        while (static_cast<int>(picked.size()) < need) {
            const int c = select_cf_color(o, palette, r);
            if (std::find(picked.begin(), picked.end(), c) == picked.end()) {
                picked.push_back(c);
            }
        }
        const std::vector<int> eval_cf(picked.begin() + config.steer_cf_colors, picked.end());
        held.push_back({{"object", oid}, {"eval_cf", eval_cf}, {"steer_cf", steer_cf}});

        for (int c : admissible) {
            if (std::find(picked.begin(), picked.end(), c) != picked.end()) {
                continue;
            }
            for (int k = 0; k < config.train_renders; ++k) {
                const int img = b.add_image(render(o, c, r));
                d.train.push_back(b.color_sample(Task::color, PromptKind::this_, Variant::cf, img, o, c));
            }
        }
        for (int k = 0; k < config.eval_renders; ++k) {
            const int img = b.add_image(render(o, o.canonical_color, r));
            for (auto kind : {PromptKind::this_, PromptKind::most}) {
                d.eval.push_back(b.color_sample(Task::color, kind, Variant::wk, img, o, o.canonical_color));
            }
        }
        for (int c : eval_cf) {
            for (int k = 0; k < config.eval_renders; ++k) {
                const int img = b.add_image(render(o, c, r));
                for (auto kind : {PromptKind::this_, PromptKind::most}) {
                    d.eval.push_back(b.color_sample(Task::color, kind, Variant::cf, img, o, c));
                }
            }
        }
        for (int c : steer_cf) {
            for (int k = 0; k < config.steer_renders; ++k) {
                const int img = b.add_image(render(o, c, r));
                for (auto kind : {PromptKind::this_, PromptKind::most}) {
                    d.steerfit.push_back(b.color_sample(Task::color, kind, Variant::cf, img, o, c));
                }
            }
        }
    }
    color_assign["eval_objects"] = held;

    for (const auto& o : d.universe) {
        for (int k = 0; k < config.text_prior_repeats; ++k) {
            d.train.push_back(
                b.color_sample(Task::color, PromptKind::most, Variant::text_only, std::nullopt, o, o.canonical_color));
        }
    }

    // "most" questions about a grounding object over a picture of another
    // grounding object whose color conflicts with the prior; the answer is the prior.
    for (int oid : ground_objects) {
        const auto& o = d.universe[static_cast<std::size_t>(oid)];
        Rng r = rng.fork(static_cast<std::uint64_t>(2500 + oid));
        std::vector<int> others;
        for (int g : ground_objects) {
            const auto& go = d.universe[static_cast<std::size_t>(g)];
            if (g != o.id && hue_distance(palette[static_cast<std::size_t>(go.canonical_color)].hue_deg,
                                          palette[static_cast<std::size_t>(o.canonical_color)].hue_deg) >=
                                 kMinCfHueDistance) {
                others.push_back(g);
            }
        }
        for (int k = 0; k < config.distractor_repeats && !others.empty(); ++k) {
            const auto& shown = d.universe[static_cast<std::size_t>(others[r.below(others.size())])];
            const int img = b.add_image(render(shown, shown.canonical_color, r));
            Sample s = b.color_sample(Task::color, PromptKind::most, Variant::distractor, img, o, o.canonical_color);
            s.object_ids = {o.id, shown.id};
            s.attribute = shown.canonical_color;
            d.train.push_back(std::move(s));
        }
    }

    // Steer-fit pairs for grounding objects too, so the fitted difference
    // averages over every canonical color.
    for (int oid : ground_objects) {
        const auto& o = d.universe[static_cast<std::size_t>(oid)];
        Rng r = rng.fork(static_cast<std::uint64_t>(3000 + oid));
        for (int c : steer_colors[static_cast<std::size_t>(oid)]) {
            for (int j = 0; j < config.steer_renders; ++j) {
                const int img = b.add_image(render(o, c, r));
                for (auto kind : {PromptKind::this_, PromptKind::most}) {
                    d.steerfit.push_back(b.color_sample(Task::color, kind, Variant::cf, img, o, c));
                }
            }
        }
    }

    // ---- size ----
    std::vector<SizeRelation> rels = d.relations;
    rng.shuffle(rels);
    const auto n_rel = static_cast<long>(rels.size());
    const long n_eval_rel = std::lround(config.size_eval_fraction * static_cast<double>(n_rel));
    const long n_steer_rel = std::lround(config.size_steer_fraction * static_cast<double>(n_rel));
    require(n_eval_rel >= 1 && n_steer_rel >= 1 && n_eval_rel + n_steer_rel < n_rel, ErrorKind::config,
            "universe yields " + std::to_string(n_rel) +
                " size relations, too few for the requested eval/steer-fit fractions");
    const std::vector<SizeRelation> eval_rels(rels.begin(), rels.begin() + n_eval_rel);
    const std::vector<SizeRelation> steer_rels(rels.begin() + n_eval_rel, rels.begin() + n_eval_rel + n_steer_rel);
    const std::vector<SizeRelation> train_rels(rels.begin() + n_eval_rel + n_steer_rel, rels.end());

    auto rel_json = [](const std::vector<SizeRelation>& v) {
        json a = json::array();
        for (const auto& r : v) {
            a.push_back({r.small, r.big});
        }
        return a;
    };
    d.assignment = json{{"color", color_assign},
                        {"size", {{"train", rel_json(train_rels)}, {"eval", rel_json(eval_rels)},
                                  {"steerfit", rel_json(steer_rels)}}}};

    auto obj = [&](int id) -> const ObjectSpec& { return d.universe[static_cast<std::size_t>(id)]; };
    auto size_image = [&](const SizeRelation& rel, Variant v, Rng& r, bool small_left) {
        const auto& left = small_left ? obj(rel.small) : obj(rel.big);
        const auto& right = small_left ? obj(rel.big) : obj(rel.small);
        const bool small_drawn_big = v == Variant::cf;
        const Side bigger = (small_left == small_drawn_big) ? Side::left : Side::right;
        CellImage img = compose_size_pair(left, palette[static_cast<std::size_t>(left.canonical_color)], right,
                                          palette[static_cast<std::size_t>(right.canonical_color)], bigger, canvas,
                                          r.next_u64());
        return std::pair{b.add_image(std::move(img)), std::pair<const ObjectSpec*, const ObjectSpec*>{&left, &right}};
    };

    auto emit = [&](std::vector<Sample>& split, const SizeRelation& rel, Variant v, Rng& r,
                    std::initializer_list<PromptKind> kinds) {
        const bool small_left = r.below(2) == 0;
        const auto [img, lr] = size_image(rel, v, r, small_left);
        for (auto kind : kinds) {
            split.push_back(b.size_sample(kind, v, img, *lr.first, *lr.second, rel));
        }
    };

    for (const auto& rel : train_rels) {
        Rng r = rng.fork(static_cast<std::uint64_t>(3000 + rel.small * 1000 + rel.big));
        for (int k = 0; k < config.size_train_renders; ++k) {
            emit(d.train, rel, Variant::wk, r, {PromptKind::this_});
            emit(d.train, rel, Variant::cf, r, {PromptKind::this_});
            emit(d.train, rel, Variant::wk, r, {PromptKind::most});
        }
    }
    for (const auto& rel : eval_rels) {
        Rng r = rng.fork(static_cast<std::uint64_t>(4000 + rel.small * 1000 + rel.big));
        for (int k = 0; k < config.size_eval_renders; ++k) {
            emit(d.eval, rel, Variant::wk, r, {PromptKind::this_, PromptKind::most});
            emit(d.eval, rel, Variant::cf, r, {PromptKind::this_, PromptKind::most});
        }
    }
    for (const auto& rel : steer_rels) {
        Rng r = rng.fork(static_cast<std::uint64_t>(5000 + rel.small * 1000 + rel.big));
        for (int k = 0; k < config.size_steer_renders; ++k) {
            emit(d.steerfit, rel, Variant::cf, r, {PromptKind::this_, PromptKind::most});
        }
    }
    for (const auto& rel : rels) {
        Rng r = rng.fork(static_cast<std::uint64_t>(6000 + rel.small * 1000 + rel.big));
        for (int k = 0; k < config.size_text_prior_repeats; ++k) {
            const bool small_left = r.below(2) == 0;
            const auto& left = small_left ? obj(rel.small) : obj(rel.big);
            const auto& right = small_left ? obj(rel.big) : obj(rel.small);
            d.train.push_back(b.size_sample(PromptKind::most, Variant::text_only, std::nullopt, left, right, rel));
        }
    }

    int next_id = 0;
    for (auto* split : {&d.train, &d.steerfit, &d.eval}) {
        for (auto& s : *split) {
            s.id = next_id++;
        }
    }
    return d;
}

// ----------------------------- persistence -----------------------------

inline void persist_dataset(const Dataset& d, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "masks", ec);
    require(!ec, ErrorKind::io, "cannot create dataset directory " + dir.string());
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        write_file_atomic(dir / "images" / (std::to_string(i) + ".bin"), image_bytes(d.images[i]));
        write_file_atomic(dir / "masks" / (std::to_string(i) + ".bin"), mask_bytes(d.images[i]));
    }
    write_file_atomic(dir / "universe.json", universe_to_json(d).dump(2) + "\n");
    write_file_atomic(dir / "train.jsonl", split_to_jsonl(d.train));
    write_file_atomic(dir / "steerfit.jsonl", split_to_jsonl(d.steerfit));
    write_file_atomic(dir / "eval.jsonl", split_to_jsonl(d.eval));
    // Manifest last: its presence marks a complete dataset.
    write_file_atomic(dir / "manifest.json", dataset_manifest(d).dump(2) + "\n");
}

namespace detail {

inline std::vector<Sample> read_split(const std::filesystem::path& p) {
    const std::string text = read_file(p);
    std::vector<Sample> out;
    std::istringstream in(text);
    std::string line;
    std::size_t index = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(sample_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            fail(ErrorKind::load, p.filename().string() + " record " + std::to_string(index) + ": " + e.what());
        }
        ++index;
    }
    if (!text.empty() && text.back() != '\n') {
        fail(ErrorKind::load, p.filename().string() + " record " + std::to_string(index - 1) + ": truncated line");
    }
    return out;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset d;
    json manifest;
    try {
        manifest = json::parse(read_file(dir / "manifest.json"));
        require(manifest.at("format_version").get<int>() == kDatasetFormatVersion, ErrorKind::load,
                "unsupported dataset format version");
        d.seed = manifest.at("seed").get<std::uint64_t>();
        const auto& c = manifest.at("config");
        DatasetConfig cfg;
        c.get_to(cfg);
        d.config = cfg;
        d.assignment = manifest.at("assignment");

        const json u = json::parse(read_file(dir / "universe.json"));
        for (const auto& o : u.at("objects")) {
            d.universe.push_back({o.at("id").get<int>(), o.at("name").get<std::string>(),
                                  o.at("canonical_color").get<int>(), o.at("size_units").get<double>()});
        }
        for (const auto& r : u.at("size_relations")) {
            d.relations.push_back({r.at("small").get<int>(), r.at("big").get<int>()});
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorKind::load, "dataset header in " + dir.string() + ": " + e.what());
    }

    d.train = detail::read_split(dir / "train.jsonl");
    d.steerfit = detail::read_split(dir / "steerfit.jsonl");
    d.eval = detail::read_split(dir / "eval.jsonl");

    const auto n_images = manifest.at("n_images").get<std::size_t>();
    d.images.reserve(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        const auto name = std::to_string(i) + ".bin";
        d.images.push_back(image_from_bytes(read_file(dir / "images" / name), read_file(dir / "masks" / name),
                                            "image record " + std::to_string(i)));
    }
    for (const auto* split : {&d.train, &d.steerfit, &d.eval}) {
        for (const auto& s : *split) {
            require(!s.image_id || (*s.image_id >= 0 && static_cast<std::size_t>(*s.image_id) < n_images),
                    ErrorKind::load, "sample " + std::to_string(s.id) + " references a missing image");
        }
    }

    const auto expected = manifest.at("digests").at("dataset").get<std::string>();
    const auto actual = dataset_digest(d);
    require(expected == actual, ErrorKind::integrity,
            "dataset digest mismatch in " + dir.string() + " (manifest " + expected.substr(0, 12) + ", content " +
                actual.substr(0, 12) + ")");
    return d;
}

}  // namespace pvp
