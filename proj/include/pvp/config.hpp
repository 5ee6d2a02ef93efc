#pragma once

// Run configuration: one JSON file covering every stage. Parsing is strict
// (unknown keys are rejected) and defaults are filled in, so serializing the
// parsed form and parsing it again is a fixpoint.

#include <cstdlib>
#include <filesystem>
#include <string>

#include "pvp/dataset.hpp"
#include "pvp/model.hpp"
#include "pvp/steering.hpp"
#include "pvp/train.hpp"

namespace pvp {

inline constexpr int kSchemaVersion = 1;

struct SteeringConfig {
    WindowBounds bounds;
    double alpha = 1.0;

    bool operator==(const SteeringConfig& o) const {
        return bounds.first_layer == o.bounds.first_layer && bounds.last_layer == o.bounds.last_layer &&
               bounds.max_window == o.bounds.max_window && alpha == o.alpha;
    }
};

struct Seeds {
    std::uint64_t data = 7;
    std::uint64_t init = 1;
    std::uint64_t train = 3;

    bool operator==(const Seeds&) const = default;
};

struct RunConfig {
    int schema_version = kSchemaVersion;
    DatasetConfig dataset;
    ModelConfig model;
    TrainSchedule train;
    SteeringConfig steering;
    Seeds seeds;
    std::string output_root;  // empty: --out, then PVP_OUT, then "pvp_out"

    bool operator==(const RunConfig&) const = default;
};

inline json to_json(const RunConfig& c) {
    return json{{"schema_version", c.schema_version},
                {"dataset", c.dataset},
                {"model", c.model},
                {"train", c.train},
                {"steering",
                 {{"first_layer", c.steering.bounds.first_layer},
                  {"last_layer", c.steering.bounds.last_layer},
                  {"max_window", c.steering.bounds.max_window},
                  {"alpha", c.steering.alpha}}},
                {"seeds", {{"data", c.seeds.data}, {"init", c.seeds.init}, {"train", c.seeds.train}}},
                {"output_root", c.output_root}};
}

/// Longest prompt the corpus produces, in tokens.
inline int longest_prompt_tokens() {
    const std::array<std::string, 2> names{"a", "b"};
    return static_cast<int>(prompt_words(Task::size, PromptKind::this_, names).size());
}

inline int expected_vocab_size(const DatasetConfig& d) {
    return static_cast<int>(Vocabulary::template_words().size() + d.palette.size()) + d.n_objects;
}

namespace detail {

/// Rejects keys absent from `defaults` and values whose JSON type differs
/// from the default's; `path` names the offending field.
inline void check_against(const json& user, const json& defaults, const std::string& path) {
    if (defaults.is_object()) {
        require(user.is_object(), ErrorKind::config, path + " must be an object");
        for (const auto& [k, v] : user.items()) {
            const std::string field = path.empty() ? k : path + "." + k;
            require(defaults.contains(k), ErrorKind::config, "unknown key '" + field + "'");
            check_against(v, defaults.at(k), field);
        }
        return;
    }
    if (defaults.is_boolean()) {
        require(user.is_boolean(), ErrorKind::config, path + " must be a boolean");
    } else if (defaults.is_number_unsigned()) {
        require(user.is_number_unsigned() || (user.is_number_integer() && user.get<std::int64_t>() >= 0), ErrorKind::config,
                path + " must be a non-negative integer");
    } else if (defaults.is_number_integer()) {
        require(user.is_number_integer(), ErrorKind::config, path + " must be an integer");
    } else if (defaults.is_number()) {
        require(user.is_number(), ErrorKind::config, path + " must be a number");
    } else if (defaults.is_string()) {
        require(user.is_string(), ErrorKind::config, path + " must be a string");
    } else if (defaults.is_array()) {
        require(user.is_array(), ErrorKind::config, path + " must be an array");
    }
}

}  // namespace detail

/// Cross-module invariants; errors name the field.
inline void validate(const RunConfig& c) {
    require(c.schema_version == kSchemaVersion, ErrorKind::config,
            "schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                std::to_string(kSchemaVersion) + ")");
    validate(c.dataset);
    validate(c.model);
    validate(c.train);
    require(c.model.canvas_px == c.dataset.canvas_px, ErrorKind::config,
            "model.canvas_px (" + std::to_string(c.model.canvas_px) + ") must equal dataset.canvas_px (" +
                std::to_string(c.dataset.canvas_px) + ")");
    const int vocab = expected_vocab_size(c.dataset);
    require(c.model.vocab_size == vocab, ErrorKind::config,
            "model.vocab_size (" + std::to_string(c.model.vocab_size) + ") must equal the dataset vocabulary size (" +
                std::to_string(vocab) + ")");
    require(c.model.max_text() >= longest_prompt_tokens(), ErrorKind::config,
            "model.max_seq leaves " + std::to_string(c.model.max_text()) + " text positions; prompts need " +
                std::to_string(longest_prompt_tokens()));
    const auto& b = c.steering.bounds;
    const int L = c.model.n_layers;
    require(b.first_layer >= 0 && b.first_layer <= L - 1, ErrorKind::config,
            "steering.first_layer must be in [0, model.n_layers - 1]");
    require(b.last_layer == -1 || (b.last_layer >= b.first_layer && b.last_layer <= L - 1), ErrorKind::config,
            "steering.last_layer must be -1 or in [steering.first_layer, model.n_layers - 1]");
    require(b.max_window >= -1, ErrorKind::config, "steering.max_window must be -1 or non-negative");
    require(std::isfinite(c.steering.alpha), ErrorKind::config, "steering.alpha must be finite");
}

inline RunConfig parse_config(const json& user) {
    require(user.is_object(), ErrorKind::config, "config must be a JSON object");
    require(user.contains("schema_version"), ErrorKind::config, "config is missing schema_version");
    const RunConfig defaults;
    json merged = to_json(defaults);
    detail::check_against(user, merged, "");
    merged.merge_patch(user);
    RunConfig c;
    try {
        c.schema_version = merged.at("schema_version").get<int>();
        const auto& d = merged.at("dataset");
        for (std::size_t i = 0; i < d.at("palette").size(); ++i) {
            const auto& e = d.at("palette").at(i);
            const std::string field = "dataset.palette[" + std::to_string(i) + "]";
            require(e.is_object() && e.size() == 4 && e.contains("name") && e.contains("hue_deg") &&
                        e.contains("sat") && e.contains("val") && e.at("name").is_string() &&
                        e.at("hue_deg").is_number() && e.at("sat").is_number() && e.at("val").is_number(),
                    ErrorKind::config, field + " must be {name, hue_deg, sat, val}");
        }
        d.get_to(c.dataset);
        merged.at("model").get_to(c.model);
        merged.at("train").get_to(c.train);
        const auto& s = merged.at("steering");
        s.at("first_layer").get_to(c.steering.bounds.first_layer);
        s.at("last_layer").get_to(c.steering.bounds.last_layer);
        s.at("max_window").get_to(c.steering.bounds.max_window);
        s.at("alpha").get_to(c.steering.alpha);
        const auto& seeds = merged.at("seeds");
        seeds.at("data").get_to(c.seeds.data);
        seeds.at("init").get_to(c.seeds.init);
        seeds.at("train").get_to(c.seeds.train);
        merged.at("output_root").get_to(c.output_root);
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorKind::config, std::string("config: ") + e.what());
    }
    if (c.model.vocab_size == 0) {
        c.model.vocab_size = expected_vocab_size(c.dataset);
    }
    validate(c);
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::config, path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// A config with every default filled in.
inline RunConfig default_config() { return parse_config(json{{"schema_version", kSchemaVersion}}); }

}  // namespace pvp
