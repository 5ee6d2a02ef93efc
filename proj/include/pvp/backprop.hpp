#pragma once

// Hand-written reverse pass for the toy transformer. Loss is cross-entropy of
// the supervised answer token at the answer-cue position.

#include <cmath>
#include <span>
#include <vector>

#include "pvp/model.hpp"

namespace pvp {

struct Example {
    const CellImage* image = nullptr;
    std::span<const int> tokens;
    int target = 0;
};

template <class T>
struct LossAndGrads {
    double loss = 0;
    Params<T> grads;
};

namespace detail {

template <class T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* g, T* dg, T* db, T* dx, std::size_t rows,
                         std::size_t d) {
    std::vector<T> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy + r * d;
        const T* xr = xhat + r * d;
        T mean_dxhat{0};
        T mean_dxhat_xhat{0};
        for (std::size_t i = 0; i < d; ++i) {
            dg[i] += dyr[i] * xr[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xr[i];
        }
        mean_dxhat /= static_cast<T>(d);
        mean_dxhat_xhat /= static_cast<T>(d);
        for (std::size_t i = 0; i < d; ++i) {
            dx[r * d + i] += rstd[r] * (dxhat[i] - mean_dxhat - xr[i] * mean_dxhat_xhat);
        }
    }
}

/// Backward for one example; adds d(scale * loss)/dparams into `g` and
/// returns the unscaled loss.
template <class T>
double backward_one(const Params<T>& p, const Activations<T>& act, std::span<const int> tokens, int target, T scale,
                    Params<T>& g) {
    const auto& c = p.config;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto hid = static_cast<std::size_t>(c.mlp_hidden);
    const auto H = static_cast<std::size_t>(c.n_heads);
    const auto dh = static_cast<std::size_t>(c.head_dim());
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const auto S = static_cast<std::size_t>(act.seq);
    const auto P = static_cast<std::size_t>(act.n_prefix);

    // loss
    const auto probs = softmax<T>(act.logits);
    double mx = -INFINITY;
    for (const T v : act.logits) {
        mx = std::max(mx, static_cast<double>(v));
    }
    double z = 0;
    for (const T v : act.logits) {
        z += std::exp(static_cast<double>(v) - mx);
    }
    const double loss = -(static_cast<double>(act.logits[static_cast<std::size_t>(target)]) - mx - std::log(z));

    std::vector<T> dlogits(V);
    for (std::size_t v = 0; v < V; ++v) {
        dlogits[v] = static_cast<T>(probs[v]) * scale;
    }
    dlogits[static_cast<std::size_t>(target)] -= scale;

    // unembedding
    std::vector<T> dln_f(d, T{0});
    const T* u = p.at(p.layout.unembed);
    T* du = g.at(p.layout.unembed);
    for (std::size_t v = 0; v < V; ++v) {
        const T dl = dlogits[v];
        for (std::size_t i = 0; i < d; ++i) {
            du[v * d + i] += dl * act.ln_f[i];
            dln_f[i] += dl * u[v * d + i];
        }
    }
    std::vector<T> dx(S * d, T{0});
    layer_norm_backward(dln_f.data(), act.xhat_f.data(), act.rstd_f.data(), p.at(p.layout.lnf_g), g.at(p.layout.lnf_g),
                        g.at(p.layout.lnf_b), dx.data() + (S - 1) * d, 1, d);

    std::vector<T> wt;  // scratch for transposed weights
    std::vector<T> dact(S * hid), du_(S * hid), dln(S * d), dctx(S * d), dq(S * d), dk(S * d), dv(S * d),
        dprobs(S);
    const T attn_scale = T{1} / std::sqrt(static_cast<T>(dh));

    for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& o = p.layout.layers[static_cast<std::size_t>(l)];
        const auto& L = act.layers[static_cast<std::size_t>(l)];

        // MLP: x_out = x_mid + act W2 + b2   (steering adds a constant)
        T* db2 = g.at(o.b2);
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                db2[j] += dx[i * d + j];
            }
        }
        kernels::matmul_tn_acc(g.at(o.w2), L.act.data(), dx.data(), S, hid, d);
        wt.resize(d * hid);
        kernels::transpose(wt.data(), p.at(o.w2), hid, d);
        kernels::matmul(dact.data(), dx.data(), wt.data(), S, d, hid);
        T* db1 = g.at(o.b1);
        for (std::size_t i = 0; i < S * hid; ++i) {
            du_[i] = dact[i] * detail::gelu_grad(L.u[i]);
        }
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < hid; ++j) {
                db1[j] += du_[i * hid + j];
            }
        }
        kernels::matmul_tn_acc(g.at(o.w1), L.ln2.data(), du_.data(), S, d, hid);
        wt.resize(hid * d);
        kernels::transpose(wt.data(), p.at(o.w1), d, hid);
        kernels::matmul(dln.data(), du_.data(), wt.data(), S, hid, d);
        // dx now accumulates into d(x_mid): residual path plus LN2 path
        layer_norm_backward(dln.data(), L.xhat2.data(), L.rstd2.data(), p.at(o.ln2_g), g.at(o.ln2_g), g.at(o.ln2_b),
                            dx.data(), S, d);

        // attention output: x_mid = x_in + ctx Wo
        kernels::matmul_tn_acc(g.at(o.wo), L.ctx.data(), dx.data(), S, d, d);
        wt.resize(d * d);
        kernels::transpose(wt.data(), p.at(o.wo), d, d);
        kernels::matmul(dctx.data(), dx.data(), wt.data(), S, d, d);

        std::fill(dq.begin(), dq.end(), T{0});
        std::fill(dk.begin(), dk.end(), T{0});
        std::fill(dv.begin(), dv.end(), T{0});
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < S; ++i) {
                const T* pr = L.probs.data() + (h * S + i) * S;
                const T* dci = dctx.data() + i * d + h * dh;
                T sum{0};
                for (std::size_t j = 0; j < S; ++j) {
                    if (!detail::attends(static_cast<int>(i), static_cast<int>(j), act.n_prefix)) {
                        dprobs[j] = T{0};
                        continue;
                    }
                    dprobs[j] = kernels::dot(dci, L.v.data() + j * d + h * dh, dh);
                    sum += dprobs[j] * pr[j];
                    T* dvj = dv.data() + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dvj[e] += pr[j] * dci[e];
                    }
                }
                T* dqi = dq.data() + i * d + h * dh;
                const T* qi = L.q.data() + i * d + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                    if (!detail::attends(static_cast<int>(i), static_cast<int>(j), act.n_prefix)) {
                        continue;
                    }
                    const T ds = pr[j] * (dprobs[j] - sum) * attn_scale;
                    const T* kj = L.k.data() + j * d + h * dh;
                    T* dkj = dk.data() + j * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }
        kernels::matmul_tn_acc(g.at(o.wq), L.ln1.data(), dq.data(), S, d, d);
        kernels::matmul_tn_acc(g.at(o.wk), L.ln1.data(), dk.data(), S, d, d);
        kernels::matmul_tn_acc(g.at(o.wv), L.ln1.data(), dv.data(), S, d, d);
        kernels::transpose(wt.data(), p.at(o.wq), d, d);
        kernels::matmul(dln.data(), dq.data(), wt.data(), S, d, d);
        kernels::transpose(wt.data(), p.at(o.wk), d, d);
        kernels::matmul_acc(dln.data(), dk.data(), wt.data(), S, d, d);
        kernels::transpose(wt.data(), p.at(o.wv), d, d);
        kernels::matmul_acc(dln.data(), dv.data(), wt.data(), S, d, d);
        layer_norm_backward(dln.data(), L.xhat1.data(), L.rstd1.data(), p.at(o.ln1_g), g.at(o.ln1_g), g.at(o.ln1_b),
                            dx.data(), S, d);
    }

    // embeddings
    if (!act.patches.empty()) {
        kernels::matmul_tn_acc(g.at(p.layout.patch_proj), act.patches.data(), dx.data(), P,
                               static_cast<std::size_t>(c.patch_dim()), d);
        T* dpos = g.at(p.layout.img_pos);
        for (std::size_t i = 0; i < P * d; ++i) {
            dpos[i] += dx[i];
        }
    } else {
        T* db = g.at(p.layout.blank);
        for (std::size_t i = 0; i < d; ++i) {
            db[i] += dx[i];
        }
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        T* de = g.at(p.layout.tok_emb + static_cast<std::size_t>(tokens[t]) * d);
        T* dp = g.at(p.layout.text_pos + t * d);
        const T* src = dx.data() + (P + t) * d;
        for (std::size_t i = 0; i < d; ++i) {
            de[i] += src[i];
            dp[i] += src[i];
        }
    }
    return loss;
}

}  // namespace detail

/// Mean cross-entropy over the batch and its gradient. Examples are reduced
/// in batch order.
template <class T>
LossAndGrads<T> loss_and_grads(const Params<T>& p, std::span<const Example> batch, int batch_id = 0) {
    require(!batch.empty(), ErrorKind::argument, "empty batch");
    LossAndGrads<T> out{0.0, Params<T>(p.config)};
    const T scale = T{1} / static_cast<T>(batch.size());
    Activations<T> act;
    double total = 0;
    for (const auto& ex : batch) {
        require(ex.target >= 0 && ex.target < p.config.vocab_size, ErrorKind::argument,
                "example has no valid supervised answer token");
        forward(p, ModelInput{ex.image, ex.tokens}, act);
        total += detail::backward_one(p, act, ex.tokens, ex.target, scale, out.grads);
    }
    out.loss = total / static_cast<double>(batch.size());
    require(std::isfinite(out.loss), ErrorKind::numeric, "non-finite loss in batch " + std::to_string(batch_id));
    return out;
}

}  // namespace pvp
