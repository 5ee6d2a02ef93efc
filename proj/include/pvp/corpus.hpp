#pragma once

// Synthetic object universe, image rendering/editing and prompt templates.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvp/color.hpp"
#include "pvp/common.hpp"

namespace pvp {

inline constexpr double kMinCfHueDistance = 30.0;
inline constexpr double kSizeRelationFactor = 10.0;
inline constexpr int kBigSideRatio = 25;
inline constexpr int kSmallSideRatio = 8;
inline constexpr int kDashRun = 4;

struct ColorSpec {
    std::string name;
    double hue_deg = 0;
    double sat = 1;
    double val = 1;

    bool operator==(const ColorSpec&) const = default;
};

inline std::vector<ColorSpec> default_palette() {
    return {
        {"red", 0.0, 0.85, 0.80},    {"orange", 30.0, 0.85, 0.80}, {"yellow", 60.0, 0.85, 0.80},
        {"green", 120.0, 0.85, 0.80}, {"cyan", 180.0, 0.85, 0.80},  {"blue", 240.0, 0.85, 0.80},
        {"purple", 280.0, 0.85, 0.80}, {"pink", 320.0, 0.85, 0.80},
    };
}

inline void validate_palette(std::span<const ColorSpec> palette) {
    for (std::size_t i = 0; i < palette.size(); ++i) {
        const auto& c = palette[i];
        require(!c.name.empty(), ErrorKind::config, "palette entry " + std::to_string(i) + " has no name");
        require(c.hue_deg >= 0.0 && c.hue_deg < 360.0, ErrorKind::config,
                "palette." + c.name + ".hue_deg must be in [0, 360)");
        require(c.sat > 0.0 && c.sat <= 1.0, ErrorKind::config,
                "palette." + c.name + ".sat must be in (0, 1] (achromatic colors are not supported)");
        require(c.val > 0.0 && c.val <= 1.0, ErrorKind::config, "palette." + c.name + ".val must be in (0, 1]");
        for (std::size_t j = 0; j < i; ++j) {
            require(palette[j].name != c.name, ErrorKind::config, "duplicate palette name " + c.name);
            require(hue_distance(palette[j].hue_deg, c.hue_deg) >= kMinCfHueDistance, ErrorKind::config,
                    "palette colors " + palette[j].name + " and " + c.name + " are closer than 30 degrees in hue");
        }
    }
}

struct ObjectSpec {
    int id = 0;
    std::string name;
    int canonical_color = 0;
    double size_units = 1;

    bool operator==(const ObjectSpec&) const = default;
};

// ----------------------------- images -----------------------------

struct ObjectMask {
    int object_id = 0;
    std::vector<std::uint8_t> bits;  // one byte per pixel, row-major, 0 or 1

    bool operator==(const ObjectMask&) const = default;
};

struct CellImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;  // row-major RGB triples in [0, 1]
    std::vector<ObjectMask> masks;
    std::optional<int> baseline_row;

    CellImage() = default;
    CellImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 1.0F) {}

    [[nodiscard]] std::size_t n_pixels() const { return static_cast<std::size_t>(width) * height; }
    [[nodiscard]] std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }

    [[nodiscard]] Rgb rgb(std::size_t px) const {
        return {pixels[3 * px], pixels[3 * px + 1], pixels[3 * px + 2]};
    }
    void set_rgb(std::size_t px, Rgb c) {
        pixels[3 * px] = static_cast<float>(c.r);
        pixels[3 * px + 1] = static_cast<float>(c.g);
        pixels[3 * px + 2] = static_cast<float>(c.b);
    }

    [[nodiscard]] const ObjectMask& mask_of(int object_id) const {
        for (const auto& m : masks) {
            if (m.object_id == object_id) {
                return m;
            }
        }
        fail(ErrorKind::argument, "image has no mask for object " + std::to_string(object_id));
    }

    bool operator==(const CellImage&) const = default;
};

struct BoundingBox {
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive; empty when x1 < x0

    [[nodiscard]] int width() const { return x1 - x0 + 1; }
    [[nodiscard]] int height() const { return y1 - y0 + 1; }
};

inline BoundingBox mask_bbox(const CellImage& img, const ObjectMask& m) {
    BoundingBox b{img.width, img.height, -1, -1};
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            if (m.bits[img.index(x, y)] != 0) {
                b.x0 = std::min(b.x0, x);
                b.y0 = std::min(b.y0, y);
                b.x1 = std::max(b.x1, x);
                b.y1 = std::max(b.y1, y);
            }
        }
    }
    return b;
}

inline std::size_t mask_area(const ObjectMask& m) {
    return static_cast<std::size_t>(std::count(m.bits.begin(), m.bits.end(), std::uint8_t{1}));
}

namespace detail {

// Disc inscribed in the square [x0, x0+side) x [y0, y0+side), filled with the
// given color and a seeded +-0.1 jitter on value.
inline ObjectMask paint_blob(CellImage& img, int object_id, const ColorSpec& color, int x0, int y0, int side,
                             Rng& rng) {
    ObjectMask mask{object_id, std::vector<std::uint8_t>(img.n_pixels(), 0)};
    const double c = side / 2.0;
    const double r2 = c * c;
    for (int y = y0; y < y0 + side; ++y) {
        for (int x = x0; x < x0 + side; ++x) {
            const double dx = x + 0.5 - (x0 + c);
            const double dy = y + 0.5 - (y0 + c);
            if (dx * dx + dy * dy > r2) {
                continue;
            }
            const std::size_t px = img.index(x, y);
            const double v = std::clamp(color.val + rng.uniform(-0.1, 0.1), 0.05, 1.0);
            img.set_rgb(px, hsv_to_rgb({color.hue_deg, color.sat, v}));
            mask.bits[px] = 1;
        }
    }
    return mask;
}

}  // namespace detail

/// A single centered blob of the given color on a white canvas.
inline CellImage render_object_image(const ObjectSpec& object, const ColorSpec& color, int side_px, int canvas_px,
                                     std::uint64_t seed) {
    require(side_px > 0, ErrorKind::argument, "side_px must be positive");
    require(side_px <= canvas_px, ErrorKind::argument, "side_px exceeds canvas_px");
    CellImage img(canvas_px, canvas_px);
    Rng rng(seed);
    const int off = (canvas_px - side_px) / 2;
    img.masks.push_back(detail::paint_blob(img, object.id, color, off, off, side_px, rng));
    return img;
}

/// Replace hue inside the mask, keeping saturation and value. Pixels outside
/// the mask are copied untouched.
inline CellImage hue_remap(const CellImage& image, std::span<const std::uint8_t> mask, const ColorSpec& target) {
    require(mask.size() == image.n_pixels(), ErrorKind::shape, "mask dimensions do not match image");
    require(target.sat > 0.0, ErrorKind::argument,
            "hue_remap to achromatic target '" + target.name + "' is unsupported");
    CellImage out = image;
    for (std::size_t px = 0; px < mask.size(); ++px) {
        if (mask[px] == 0) {
            continue;
        }
        Hsv hsv = rgb_to_hsv(image.rgb(px));
        hsv.h = target.hue_deg;
        out.set_rgb(px, hsv_to_rgb(hsv));
    }
    return out;
}

enum class Side { left, right };

struct SizeLayout {
    int big_side = 0;
    int small_side = 0;
    int baseline_row = 0;
};

/// Blob sides for a two-object composition: 25:8 rounded to whole pixels,
/// one pixel of margin around and between the blobs, line two rows from the bottom.
inline SizeLayout size_layout(int canvas_px) {
    SizeLayout s;
    s.big_side = (canvas_px - 3) * kBigSideRatio / (kBigSideRatio + kSmallSideRatio);
    s.small_side = static_cast<int>(std::lround(s.big_side * double(kSmallSideRatio) / kBigSideRatio));
    s.baseline_row = canvas_px - 2;
    require(s.small_side >= 2 && s.big_side + s.small_side + 3 <= canvas_px && s.big_side <= s.baseline_row,
            ErrorKind::config, "canvas of " + std::to_string(canvas_px) + " px cannot hold a 25:8 size pair");
    return s;
}

/// objA on the left, objB on the right, both standing on a dashed baseline.
inline CellImage compose_size_pair(const ObjectSpec& objA, const ColorSpec& colorA, const ObjectSpec& objB,
                                   const ColorSpec& colorB, Side bigger, int canvas_px, std::uint64_t seed) {
    require(objA.id != objB.id, ErrorKind::argument, "compose_size_pair needs two distinct objects");
    const SizeLayout lay = size_layout(canvas_px);
    const int left_side = bigger == Side::left ? lay.big_side : lay.small_side;
    const int right_side = bigger == Side::left ? lay.small_side : lay.big_side;

    CellImage img(canvas_px, canvas_px);
    Rng rng(seed);
    const int left_x = 1;
    const int right_x = canvas_px - 1 - right_side;
    img.masks.push_back(
        detail::paint_blob(img, objA.id, colorA, left_x, lay.baseline_row - left_side, left_side, rng));
    img.masks.push_back(
        detail::paint_blob(img, objB.id, colorB, right_x, lay.baseline_row - right_side, right_side, rng));
    for (int x = 0; x < canvas_px; ++x) {
        if ((x / kDashRun) % 2 == 0) {
            img.set_rgb(img.index(x, lay.baseline_row), {0.0, 0.0, 0.0});
        }
    }
    img.baseline_row = lay.baseline_row;
    return img;
}

// ----------------------------- universe -----------------------------

inline const std::vector<std::string>& object_name_pool() {
    static const std::vector<std::string> names = {
        "strawberry", "banana",   "lemon",    "cherry",    "squirrel", "alligator", "carrot",  "grape",
        "lime",       "pumpkin",  "tomato",   "broccoli",  "flamingo", "crow",      "frog",    "plum",
        "peach",      "corn",     "cucumber", "eggplant",  "lobster",  "canary",    "dolphin", "elephant",
        "mouse",      "whale",    "ant",      "bee",       "horse",    "rose",      "tulip",   "violet",
        "blueberry",  "mango",    "apricot",  "raspberry", "peacock",  "parrot",    "goldfish", "jellyfish",
        "taxi",       "firetruck", "bus",     "pineapple", "kiwi",     "onion",     "pepper",  "radish",
    };
    return names;
}

/// Canonical colors are dealt round-robin then shuffled; sizes are log-uniform
/// over [1, 1e4], stratified so the full four decades are always covered.
inline std::vector<ObjectSpec> build_universe(std::uint64_t seed, int n_objects, std::span<const ColorSpec> palette) {
    require(palette.size() >= 4, ErrorKind::config,
            "palette needs at least 4 colors for counterfactual sampling, got " + std::to_string(palette.size()));
    require(n_objects >= 4, ErrorKind::config, "n_objects must be at least 4");
    Rng rng(seed);

    std::vector<int> colors(static_cast<std::size_t>(n_objects));
    for (int i = 0; i < n_objects; ++i) {
        colors[static_cast<std::size_t>(i)] = i % static_cast<int>(palette.size());
    }
    rng.shuffle(colors);

    constexpr double kDecades = 4.0;
    std::vector<double> sizes(static_cast<std::size_t>(n_objects));
    for (int i = 0; i < n_objects; ++i) {
        const double u = (i + rng.uniform()) / n_objects;
        sizes[static_cast<std::size_t>(i)] = std::pow(10.0, kDecades * u);
    }
    rng.shuffle(sizes);

    const auto& pool = object_name_pool();
    std::vector<ObjectSpec> out;
    out.reserve(static_cast<std::size_t>(n_objects));
    for (int i = 0; i < n_objects; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        std::string name = ui < pool.size() ? pool[ui] : "object" + std::to_string(i);
        out.push_back({i, std::move(name), colors[ui], sizes[ui]});
    }
    return out;
}

/// Indices of palette colors admissible as counterfactuals for `canonical`.
inline std::vector<int> admissible_cf_colors(int canonical, std::span<const ColorSpec> palette) {
    std::vector<int> out;
    const double h0 = palette[static_cast<std::size_t>(canonical)].hue_deg;
    for (std::size_t i = 0; i < palette.size(); ++i) {
        if (static_cast<int>(i) != canonical && hue_distance(palette[i].hue_deg, h0) >= kMinCfHueDistance) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

inline int select_cf_color(const ObjectSpec& object, std::span<const ColorSpec> palette, Rng& rng) {
    require(palette.size() >= 2, ErrorKind::argument, "palette needs at least 2 colors");
    require(object.canonical_color >= 0 && static_cast<std::size_t>(object.canonical_color) < palette.size(),
            ErrorKind::argument, "canonical color out of palette range");
    const auto choices = admissible_cf_colors(object.canonical_color, palette);
    require(!choices.empty(), ErrorKind::generation, "no palette color is distinct enough from " +
                                                         palette[static_cast<std::size_t>(object.canonical_color)].name);
    return choices[static_cast<std::size_t>(rng.below(choices.size()))];
}

struct SizeRelation {
    int small = 0;  // object ids
    int big = 0;

    auto operator<=>(const SizeRelation&) const = default;
};

/// For every object with a >=10x smaller and a >=10x larger neighbor, emit the
/// two relations linking it to its nearest such neighbors. Deduplicated, sorted.
inline std::vector<SizeRelation> make_size_relations(std::span<const ObjectSpec> universe) {
    require(!universe.empty(), ErrorKind::argument, "empty universe");
    std::vector<SizeRelation> out;
    for (const auto& mid : universe) {
        const ObjectSpec* below = nullptr;
        const ObjectSpec* above = nullptr;
        for (const auto& o : universe) {
            if (o.size_units * kSizeRelationFactor <= mid.size_units) {
                if (below == nullptr || o.size_units > below->size_units) {
                    below = &o;
                }
            }
            if (o.size_units >= kSizeRelationFactor * mid.size_units) {
                if (above == nullptr || o.size_units < above->size_units) {
                    above = &o;
                }
            }
        }
        if (below != nullptr && above != nullptr) {
            out.push_back({below->id, mid.id});
            out.push_back({mid.id, above->id});
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// ----------------------------- prompts -----------------------------

enum class Task { color, size };
enum class PromptKind { this_, most };
enum class Variant { wk, cf, text_only, distractor };

inline std::string_view to_string(Task t) { return t == Task::color ? "color" : "size"; }
inline std::string_view to_string(PromptKind k) { return k == PromptKind::this_ ? "this" : "most"; }
inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::wk: return "wk";
        case Variant::cf: return "cf";
        case Variant::text_only: return "text";
        case Variant::distractor: return "distractor";
    }
    return "?";
}

inline Task parse_task(std::string_view s) {
    if (s == "color") return Task::color;
    if (s == "size") return Task::size;
    fail(ErrorKind::argument, "unknown task '" + std::string(s) + "'");
}
inline PromptKind parse_prompt_kind(std::string_view s) {
    if (s == "this") return PromptKind::this_;
    if (s == "most") return PromptKind::most;
    fail(ErrorKind::argument, "unknown prompt kind '" + std::string(s) + "'");
}
inline Variant parse_variant(std::string_view s) {
    if (s == "wk") return Variant::wk;
    if (s == "cf") return Variant::cf;
    if (s == "text") return Variant::text_only;
    if (s == "distractor") return Variant::distractor;
    fail(ErrorKind::argument, "unknown variant '" + std::string(s) + "'");
}

inline constexpr std::string_view kAnswerCue = "<ans>";

/// Fixed toy vocabulary: template words, then color names, then object names.
class Vocabulary {
public:
    static const std::vector<std::string>& template_words() {
        static const std::vector<std::string> w = {std::string(kAnswerCue), "?", "what", "color", "is",
                                                   "this", "are", "most", "which", "bigger",
                                                   "in", "image", "or", "cases"};
        return w;
    }

    Vocabulary() = default;

    Vocabulary(std::span<const ColorSpec> palette, std::span<const ObjectSpec> universe) {
        for (const auto& w : template_words()) {
            add(w);
        }
        color_base_ = size();
        for (const auto& c : palette) {
            add(c.name);
        }
        object_base_ = size();
        for (const auto& o : universe) {
            add(o.name);
        }
    }

    [[nodiscard]] int size() const { return static_cast<int>(words_.size()); }

    [[nodiscard]] int id(std::string_view word) const {
        const auto it = ids_.find(std::string(word));
        require(it != ids_.end(), ErrorKind::vocabulary, "unknown token '" + std::string(word) + "'");
        return it->second;
    }

    [[nodiscard]] const std::string& word(int id) const {
        require(id >= 0 && id < size(), ErrorKind::vocabulary, "token id " + std::to_string(id) + " out of range");
        return words_[static_cast<std::size_t>(id)];
    }

    [[nodiscard]] int color_token(int palette_index) const { return color_base_ + palette_index; }
    [[nodiscard]] int object_token(int object_id) const { return object_base_ + object_id; }
    [[nodiscard]] int answer_cue() const { return 0; }

    [[nodiscard]] std::vector<int> encode(std::span<const std::string> words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) {
            out.push_back(id(w));
        }
        return out;
    }

private:
    void add(const std::string& w) {
        require(!ids_.contains(w), ErrorKind::vocabulary, "duplicate token '" + w + "'");
        ids_[w] = size();
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
    int color_base_ = 0;
    int object_base_ = 0;
};

inline std::vector<std::string> prompt_words(Task task, PromptKind kind, std::span<const std::string> objects) {
    std::vector<std::string> w;
    if (task == Task::color) {
        require(objects.size() == 1, ErrorKind::argument, "color prompts take exactly one object");
        if (kind == PromptKind::this_) {
            w = {"what", "color", "is", "this", objects[0], "?"};
        } else {
            w = {"what", "color", "are", "most", objects[0], "?"};
        }
    } else {
        require(objects.size() == 2, ErrorKind::argument, "size prompts take exactly two objects");
        if (kind == PromptKind::this_) {
            w = {"which", "is", "bigger", "in", "this", "image", objects[0], "or", objects[1], "?"};
        } else {
            w = {"which", "is", "bigger", "in", "most", "cases", objects[0], "or", objects[1], "?"};
        }
    }
    w.emplace_back(kAnswerCue);
    return w;
}

/// Token ids for a templated question; the final token is the answer cue.
inline std::vector<int> build_prompt(const Vocabulary& vocab, Task task, PromptKind kind,
                                     std::span<const std::string> objects) {
    const auto words = prompt_words(task, kind, objects);
    return vocab.encode(words);
}

}  // namespace pvp
