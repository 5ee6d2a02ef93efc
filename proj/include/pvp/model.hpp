#pragma once

// Toy multimodal transformer: patch-embedded image tokens (or one learned
// blank token) followed by causal text tokens, pre-norm blocks, final
// layernorm and a (by default tied) unembedding.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvp/common.hpp"
#include "pvp/corpus.hpp"
#include "pvp/kernels.hpp"

namespace pvp {

using json = nlohmann::json;

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int mlp_hidden = 256;
    int vocab_size = 0;  // filled from the dataset vocabulary when 0
    int patch_px = 8;
    int canvas_px = 32;
    int max_seq = 32;
    bool tie_unembedding = true;

    [[nodiscard]] int n_image_tokens() const { return (canvas_px / patch_px) * (canvas_px / patch_px); }
    [[nodiscard]] int max_text() const { return max_seq - n_image_tokens(); }
    [[nodiscard]] int head_dim() const { return d_model / n_heads; }
    [[nodiscard]] int patch_dim() const { return patch_px * patch_px * 3; }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"n_layers", c.n_layers},   {"d_model", c.d_model},     {"n_heads", c.n_heads},
             {"mlp_hidden", c.mlp_hidden}, {"vocab_size", c.vocab_size}, {"patch_px", c.patch_px},
             {"canvas_px", c.canvas_px}, {"max_seq", c.max_seq},     {"tie_unembedding", c.tie_unembedding}};
}

inline void from_json(const json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("mlp_hidden").get_to(c.mlp_hidden);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("patch_px").get_to(c.patch_px);
    j.at("canvas_px").get_to(c.canvas_px);
    j.at("max_seq").get_to(c.max_seq);
    j.at("tie_unembedding").get_to(c.tie_unembedding);
}

inline void validate(const ModelConfig& c) {
    require(c.n_layers >= 1, ErrorKind::config, "model.n_layers must be at least 1");
    require(c.d_model >= 1 && c.n_heads >= 1, ErrorKind::config, "model.d_model and model.n_heads must be positive");
    require(c.d_model % c.n_heads == 0, ErrorKind::config,
            "model.d_model (" + std::to_string(c.d_model) + ") must be divisible by model.n_heads (" +
                std::to_string(c.n_heads) + ")");
    require(c.mlp_hidden >= 1, ErrorKind::config, "model.mlp_hidden must be positive");
    require(c.vocab_size >= 2, ErrorKind::config, "model.vocab_size must be at least 2");
    require(c.patch_px >= 1 && c.canvas_px % c.patch_px == 0, ErrorKind::config,
            "model.canvas_px must be divisible by model.patch_px");
    require(c.max_text() >= 1, ErrorKind::config, "model.max_seq must exceed the number of image tokens");
}

// ----------------------------- parameters -----------------------------

struct TensorInfo {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;

    [[nodiscard]] std::size_t size() const { return rows * cols; }
};

struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Offsets of every tensor inside the flat parameter vector, in declaration
/// (and checkpoint) order.
struct ParamLayout {
    std::size_t tok_emb = 0, text_pos = 0, patch_proj = 0, img_pos = 0, blank = 0;
    std::vector<LayerOffsets> layers;
    std::size_t lnf_g = 0, lnf_b = 0, unembed = 0;
    std::size_t total = 0;
    std::vector<TensorInfo> tensors;

    explicit ParamLayout(const ModelConfig& c) {
        const auto d = static_cast<std::size_t>(c.d_model);
        const auto h = static_cast<std::size_t>(c.mlp_hidden);
        const auto v = static_cast<std::size_t>(c.vocab_size);
        auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
            tensors.push_back({std::move(name), rows, cols, total});
            total += rows * cols;
            return tensors.back().offset;
        };
        tok_emb = add("tok_emb", v, d);
        text_pos = add("text_pos", static_cast<std::size_t>(c.max_text()), d);
        patch_proj = add("patch_proj", static_cast<std::size_t>(c.patch_dim()), d);
        img_pos = add("img_pos", static_cast<std::size_t>(c.n_image_tokens()), d);
        blank = add("blank_image", 1, d);
        for (int l = 0; l < c.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerOffsets o{};
            o.ln1_g = add(p + "ln1.scale", 1, d);
            o.ln1_b = add(p + "ln1.shift", 1, d);
            o.wq = add(p + "attn.q", d, d);
            o.wk = add(p + "attn.k", d, d);
            o.wv = add(p + "attn.v", d, d);
            o.wo = add(p + "attn.o", d, d);
            o.ln2_g = add(p + "ln2.scale", 1, d);
            o.ln2_b = add(p + "ln2.shift", 1, d);
            o.w1 = add(p + "mlp.in", d, h);
            o.b1 = add(p + "mlp.in_bias", 1, h);
            o.w2 = add(p + "mlp.out", h, d);
            o.b2 = add(p + "mlp.out_bias", 1, d);
            layers.push_back(o);
        }
        lnf_g = add("final_norm.scale", 1, d);
        lnf_b = add("final_norm.shift", 1, d);
        unembed = c.tie_unembedding ? tok_emb : add("unembed", v, d);
    }
};

template <class T>
struct Params {
    ModelConfig config;
    ParamLayout layout;
    std::vector<T> data;

    explicit Params(const ModelConfig& c) : config(c), layout(c), data(layout.total, T{0}) {}

    [[nodiscard]] const T* at(std::size_t offset) const { return data.data() + offset; }
    T* at(std::size_t offset) { return data.data() + offset; }

    template <class U>
    [[nodiscard]] Params<U> cast() const {
        Params<U> out(config);
        for (std::size_t i = 0; i < data.size(); ++i) {
            out.data[i] = static_cast<U>(data[i]);
        }
        return out;
    }
};

/// sha-256 over the float32 parameter bytes plus the config.
template <class T>
std::string params_digest(const Params<T>& p) {
    Sha256 h;
    h.update(json(p.config).dump());
    for (const T v : p.data) {
        h.update_value(static_cast<float>(v));
    }
    return h.hex();
}

template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    Params<T> p(config);
    Rng rng(seed);
    constexpr double kStd = 0.02;
    for (const auto& t : p.layout.tensors) {
        const bool is_scale = t.name.ends_with(".scale");
        const bool is_shift = t.name.ends_with(".shift") || t.name.ends_with("_bias");
        for (std::size_t i = 0; i < t.size(); ++i) {
            T v{0};
            if (is_scale) {
                v = T{1};
            } else if (!is_shift) {
                v = static_cast<T>(kStd * rng.normal());
            }
            p.data[t.offset + i] = v;
        }
    }
    return p;
}

// ----------------------------- steering hooks -----------------------------

enum class Direction { to_cf, to_wk };

inline std::string_view to_string(Direction d) { return d == Direction::to_cf ? "to_cf" : "to_wk"; }
inline Direction parse_direction(std::string_view s) {
    if (s == "to_cf" || s == "ToCF") return Direction::to_cf;
    if (s == "to_wk" || s == "ToWK") return Direction::to_wk;
    fail(ErrorKind::argument, "unknown direction '" + std::string(s) + "'");
}

struct InterventionSpec {
    Direction direction = Direction::to_cf;
    int start_layer = 0;
    int window = 0;
    double alpha = 1.0;

    [[nodiscard]] bool covers(int layer) const { return layer >= start_layer && layer <= start_layer + window; }
    bool operator==(const InterventionSpec&) const = default;
};

/// Per-layer counterfactual steering vectors; the world-knowledge vector is
/// the exact negation and is never stored.
struct SteeringVectors {
    Task task = Task::color;
    int n_layers = 0;
    int d_model = 0;
    int n_pairs = 0;
    std::string split_digest;
    std::string config_digest;
    std::vector<float> s_cf;  // n_layers x d_model

    [[nodiscard]] std::span<const float> cf(int layer) const {
        return {s_cf.data() + static_cast<std::size_t>(layer) * d_model, static_cast<std::size_t>(d_model)};
    }

    [[nodiscard]] std::vector<float> wk(int layer) const {
        std::vector<float> out(static_cast<std::size_t>(d_model));
        const auto c = cf(layer);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = -c[i];
        }
        return out;
    }
};

struct Steering {
    const SteeringVectors* vectors = nullptr;
    std::vector<InterventionSpec> specs;
};

inline std::string config_digest(const ModelConfig& c) { return sha256_hex(json(c).dump()); }

// ----------------------------- forward -----------------------------

struct ModelInput {
    const CellImage* image = nullptr;  // nullptr: blank-image token
    std::span<const int> tokens;
};

/// Everything the forward pass computes, kept for backprop and tracing.
template <class T>
struct Activations {
    int seq = 0;
    int n_prefix = 0;  // image tokens, or 1 for the blank token
    std::vector<T> patches;  // n_image x patch_dim
    struct Layer {
        std::vector<T> x_in, xhat1, ln1, rstd1, q, k, v, probs, ctx, x_mid, xhat2, ln2, rstd2, u, act, x_out;
    };
    std::vector<Layer> layers;
    std::vector<T> xhat_f, rstd_f, ln_f;  // at the answer-cue position
    std::vector<T> logits;

    [[nodiscard]] int last() const { return seq - 1; }
};

namespace detail {

template <class T>
void layer_norm(const T* x, const T* g, const T* b, T* xhat, T* out, T* rstd, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T mean{0};
        for (std::size_t i = 0; i < d; ++i) {
            mean += xr[i];
        }
        mean /= static_cast<T>(d);
        T var{0};
        for (std::size_t i = 0; i < d; ++i) {
            const T c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rs = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const T xh = (xr[i] - mean) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * g[i] + b[i];
        }
    }
}

template <class T>
T gelu(T u) {
    constexpr T k0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k1 = static_cast<T>(0.044715);
    return static_cast<T>(0.5) * u * (T{1} + std::tanh(k0 * (u + k1 * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
    constexpr T k0 = static_cast<T>(0.7978845608028654);
    constexpr T k1 = static_cast<T>(0.044715);
    const T inner = k0 * (u + k1 * u * u * u);
    const T t = std::tanh(inner);
    return static_cast<T>(0.5) * (T{1} + t) + static_cast<T>(0.5) * u * (T{1} - t * t) * k0 *
                                                  (T{1} + T{3} * k1 * u * u);
}

/// Image positions see only image positions; text positions see every image
/// position and earlier text.
inline bool attends(int query, int key, int n_prefix) { return query < n_prefix ? key < n_prefix : key <= query; }

}  // namespace detail

template <class T>
std::vector<T> extract_patches(const ModelConfig& c, const CellImage& image) {
    require(image.width == c.canvas_px && image.height == c.canvas_px, ErrorKind::shape,
            "image is " + std::to_string(image.width) + "x" + std::to_string(image.height) + ", model expects " +
                std::to_string(c.canvas_px) + "x" + std::to_string(c.canvas_px));
    require(image.width % c.patch_px == 0 && image.height % c.patch_px == 0, ErrorKind::shape,
            "image dimensions are not divisible by patch_px");
    const int per_row = image.width / c.patch_px;
    const auto pd = static_cast<std::size_t>(c.patch_dim());
    std::vector<T> out(static_cast<std::size_t>(c.n_image_tokens()) * pd);
    for (int py = 0; py < per_row; ++py) {
        for (int px = 0; px < per_row; ++px) {
            T* dst = out.data() + static_cast<std::size_t>(py * per_row + px) * pd;
            std::size_t k = 0;
            for (int y = 0; y < c.patch_px; ++y) {
                for (int x = 0; x < c.patch_px; ++x) {
                    const std::size_t src = 3 * image.index(px * c.patch_px + x, py * c.patch_px + y);
                    for (int ch = 0; ch < 3; ++ch) {
                        dst[k++] = static_cast<T>(image.pixels[src + static_cast<std::size_t>(ch)]);
                    }
                }
            }
        }
    }
    return out;
}

/// Patch projections in raster order, without position embeddings.
template <class T>
std::vector<T> embed_patches(const Params<T>& p, const CellImage& image) {
    const auto& c = p.config;
    const auto patches = extract_patches<T>(c, image);
    std::vector<T> out(static_cast<std::size_t>(c.n_image_tokens()) * static_cast<std::size_t>(c.d_model));
    kernels::matmul(out.data(), patches.data(), p.at(p.layout.patch_proj), static_cast<std::size_t>(c.n_image_tokens()),
                    static_cast<std::size_t>(c.patch_dim()), static_cast<std::size_t>(c.d_model));
    return out;
}

/// Image token vectors: patch projection plus image position embeddings.
template <class T>
std::vector<T> embed_image(const Params<T>& p, const CellImage& image) {
    auto out = embed_patches(p, image);
    const T* pos = p.at(p.layout.img_pos);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += pos[i];
    }
    return out;
}

/// Final layernorm then unembedding, sigma and W_U. Shared by the forward pass
/// and early decoding so both produce bit-identical logits.
template <class T>
void decode_state(const Params<T>& p, std::span<const T> h, std::span<T> xhat, std::span<T> normed, T& rstd,
                  std::span<T> logits) {
    const auto d = static_cast<std::size_t>(p.config.d_model);
    detail::layer_norm(h.data(), p.at(p.layout.lnf_g), p.at(p.layout.lnf_b), xhat.data(), normed.data(), &rstd, 1, d);
    const T* u = p.at(p.layout.unembed);
    for (std::size_t v = 0; v < logits.size(); ++v) {
        logits[v] = kernels::dot(u + v * d, normed.data(), d);
    }
}

template <class T>
std::vector<T> decode_logits(const Params<T>& p, std::span<const T> h) {
    const auto d = static_cast<std::size_t>(p.config.d_model);
    std::vector<T> xhat(d), normed(d), logits(static_cast<std::size_t>(p.config.vocab_size));
    T rstd{};
    decode_state<T>(p, h, xhat, normed, rstd, logits);
    return logits;
}

template <class T>
std::vector<double> softmax(std::span<const T> logits) {
    double mx = -INFINITY;
    for (const T v : logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    std::vector<double> out(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(static_cast<double>(logits[i]) - mx);
        z += out[i];
    }
    for (auto& v : out) {
        v /= z;
    }
    return out;
}

namespace detail {

/// Combined steering coefficient at `layer`: sum of +-alpha over the specs that
/// cover it. Opposite directions at equal alpha cancel to exactly zero.
inline double steering_coefficient(const Steering& s, int layer) {
    double c = 0.0;
    for (const auto& spec : s.specs) {
        if (spec.covers(layer)) {
            c += spec.direction == Direction::to_cf ? spec.alpha : -spec.alpha;
        }
    }
    return c;
}

inline void check_steering(const ModelConfig& cfg, const Steering& s) {
    require(s.vectors != nullptr, ErrorKind::intervention, "steering without vectors");
    require(s.vectors->d_model == cfg.d_model && s.vectors->n_layers == cfg.n_layers, ErrorKind::compatibility,
            "steering vectors were fitted for d_model=" + std::to_string(s.vectors->d_model) +
                ", n_layers=" + std::to_string(s.vectors->n_layers));
    for (const auto& spec : s.specs) {
        require(spec.start_layer >= 0 && spec.window >= 0 && spec.start_layer + spec.window <= cfg.n_layers - 1,
                ErrorKind::intervention,
                "intervention window [" + std::to_string(spec.start_layer) + ", " +
                    std::to_string(spec.start_layer + spec.window) + "] extends past layer " +
                    std::to_string(cfg.n_layers - 1));
    }
}

}  // namespace detail

template <class T>
void forward(const Params<T>& p, const ModelInput& in, Activations<T>& act, const Steering* steering = nullptr) {
    const auto& c = p.config;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto hid = static_cast<std::size_t>(c.mlp_hidden);
    const auto H = static_cast<std::size_t>(c.n_heads);
    const auto dh = static_cast<std::size_t>(c.head_dim());
    const int n_text = static_cast<int>(in.tokens.size());
    require(n_text >= 1, ErrorKind::argument, "empty text prompt");
    require(n_text <= c.max_text(), ErrorKind::shape,
            "prompt of " + std::to_string(n_text) + " tokens does not fit max_seq");
    if (steering != nullptr) {
        detail::check_steering(c, *steering);
    }

    act.n_prefix = in.image != nullptr ? c.n_image_tokens() : 1;
    act.seq = act.n_prefix + n_text;
    const auto S = static_cast<std::size_t>(act.seq);
    const auto P = static_cast<std::size_t>(act.n_prefix);

    // embeddings
    std::vector<T> x(S * d);
    if (in.image != nullptr) {
        act.patches = extract_patches<T>(c, *in.image);
        kernels::matmul(x.data(), act.patches.data(), p.at(p.layout.patch_proj), P,
                        static_cast<std::size_t>(c.patch_dim()), d);
        const T* pos = p.at(p.layout.img_pos);
        for (std::size_t i = 0; i < P * d; ++i) {
            x[i] += pos[i];
        }
    } else {
        act.patches.clear();
        const T* blank = p.at(p.layout.blank);
        std::copy(blank, blank + d, x.begin());
    }
    for (int t = 0; t < n_text; ++t) {
        const int tok = in.tokens[static_cast<std::size_t>(t)];
        require(tok >= 0 && tok < c.vocab_size, ErrorKind::vocabulary, "token id out of range");
        const T* e = p.at(p.layout.tok_emb + static_cast<std::size_t>(tok) * d);
        const T* pe = p.at(p.layout.text_pos + static_cast<std::size_t>(t) * d);
        T* dst = x.data() + (P + static_cast<std::size_t>(t)) * d;
        for (std::size_t i = 0; i < d; ++i) {
            dst[i] = e[i] + pe[i];
        }
    }

    act.layers.resize(static_cast<std::size_t>(c.n_layers));
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& o = p.layout.layers[static_cast<std::size_t>(l)];
        auto& L = act.layers[static_cast<std::size_t>(l)];
        L.x_in = x;
        L.xhat1.resize(S * d);
        L.ln1.resize(S * d);
        L.rstd1.resize(S);
        detail::layer_norm(x.data(), p.at(o.ln1_g), p.at(o.ln1_b), L.xhat1.data(), L.ln1.data(), L.rstd1.data(), S, d);
        L.q.resize(S * d);
        L.k.resize(S * d);
        L.v.resize(S * d);
        kernels::matmul(L.q.data(), L.ln1.data(), p.at(o.wq), S, d, d);
        kernels::matmul(L.k.data(), L.ln1.data(), p.at(o.wk), S, d, d);
        kernels::matmul(L.v.data(), L.ln1.data(), p.at(o.wv), S, d, d);

        L.probs.assign(H * S * S, T{0});
        L.ctx.assign(S * d, T{0});
        std::vector<T> row(S);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < S; ++i) {
                T mx = -INFINITY;
                for (std::size_t j = 0; j < S; ++j) {
                    if (!detail::attends(static_cast<int>(i), static_cast<int>(j), act.n_prefix)) {
                        continue;
                    }
                    row[j] = kernels::dot(L.q.data() + i * d + h * dh, L.k.data() + j * d + h * dh, dh) * scale;
                    mx = std::max(mx, row[j]);
                }
                T z{0};
                T* pr = L.probs.data() + (h * S + i) * S;
                for (std::size_t j = 0; j < S; ++j) {
                    if (detail::attends(static_cast<int>(i), static_cast<int>(j), act.n_prefix)) {
                        pr[j] = std::exp(row[j] - mx);
                        z += pr[j];
                    }
                }
                const T inv = T{1} / z;
                T* ci = L.ctx.data() + i * d + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                    pr[j] *= inv;
                    const T pj = pr[j];
                    const T* vj = L.v.data() + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        ci[e] += pj * vj[e];
                    }
                }
            }
        }
        L.x_mid = x;
        kernels::matmul_acc(L.x_mid.data(), L.ctx.data(), p.at(o.wo), S, d, d);

        L.xhat2.resize(S * d);
        L.ln2.resize(S * d);
        L.rstd2.resize(S);
        detail::layer_norm(L.x_mid.data(), p.at(o.ln2_g), p.at(o.ln2_b), L.xhat2.data(), L.ln2.data(),
                           L.rstd2.data(), S, d);
        L.u.resize(S * hid);
        kernels::matmul(L.u.data(), L.ln2.data(), p.at(o.w1), S, d, hid);
        L.act.resize(S * hid);
        const T* b1 = p.at(o.b1);
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < hid; ++j) {
                T& u = L.u[i * hid + j];
                u += b1[j];
                L.act[i * hid + j] = detail::gelu(u);
            }
        }
        x = L.x_mid;
        kernels::matmul_acc(x.data(), L.act.data(), p.at(o.w2), S, hid, d);
        const T* b2 = p.at(o.b2);
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                x[i * d + j] += b2[j];
            }
        }

        if (steering != nullptr) {
            const double coef = detail::steering_coefficient(*steering, l);
            if (coef != 0.0) {
                const auto s = steering->vectors->cf(l);
                T* last = x.data() + (S - 1) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    last[j] += static_cast<T>(coef * static_cast<double>(s[j]));
                }
            }
        }
        L.x_out = x;
    }

    act.xhat_f.resize(d);
    act.ln_f.resize(d);
    act.rstd_f.resize(1);
    act.logits.resize(static_cast<std::size_t>(c.vocab_size));
    decode_state<T>(p, std::span<const T>(x.data() + (S - 1) * d, d), act.xhat_f, act.ln_f, act.rstd_f[0],
                    act.logits);
}

/// Per-layer states and attention maps of one forward pass.
template <class T>
struct ForwardTrace {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int seq = 0;
    int n_prefix = 0;
    bool has_image = false;
    std::vector<T> hidden;     // n_layers x seq x d_model, post-block (post-steering)
    std::vector<T> attention;  // n_layers x n_heads x seq x seq
    std::vector<T> logits;     // at the answer-cue position

    [[nodiscard]] int last() const { return seq - 1; }

    [[nodiscard]] std::span<const T> state(int layer, int position) const {
        return {hidden.data() + (static_cast<std::size_t>(layer) * seq + position) * d_model,
                static_cast<std::size_t>(d_model)};
    }

    [[nodiscard]] std::span<const T> attention_row(int layer, int head, int query) const {
        return {attention.data() + ((static_cast<std::size_t>(layer) * n_heads + head) * seq + query) * seq,
                static_cast<std::size_t>(seq)};
    }
};

template <class T>
ForwardTrace<T> forward(const Params<T>& p, const ModelInput& in, const Steering* steering = nullptr) {
    Activations<T> act;
    forward(p, in, act, steering);
    ForwardTrace<T> tr;
    tr.n_layers = p.config.n_layers;
    tr.d_model = p.config.d_model;
    tr.n_heads = p.config.n_heads;
    tr.seq = act.seq;
    tr.n_prefix = act.n_prefix;
    tr.has_image = in.image != nullptr;
    for (const auto& L : act.layers) {
        tr.hidden.insert(tr.hidden.end(), L.x_out.begin(), L.x_out.end());
        tr.attention.insert(tr.attention.end(), L.probs.begin(), L.probs.end());
    }
    tr.logits = std::move(act.logits);
    return tr;
}

struct Prediction {
    int token = 0;
    double probability = 0;
};

/// Argmax over the full vocabulary, or over `candidates` when given; the
/// probability always comes from the full-vocabulary softmax.
template <class T>
Prediction predict_from_logits(std::span<const T> logits, std::span<const int> candidates = {}) {
    const auto probs = softmax(logits);
    Prediction best{-1, -1.0};
    auto consider = [&](int tok) {
        if (probs[static_cast<std::size_t>(tok)] > best.probability) {
            best = {tok, probs[static_cast<std::size_t>(tok)]};
        }
    };
    if (candidates.empty()) {
        for (int t = 0; t < static_cast<int>(probs.size()); ++t) {
            consider(t);
        }
    } else {
        for (int t : candidates) {
            require(t >= 0 && t < static_cast<int>(probs.size()), ErrorKind::vocabulary, "candidate out of range");
            consider(t);
        }
    }
    return best;
}

}  // namespace pvp
