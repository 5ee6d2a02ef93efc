#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

#include "json.hpp"
#include "pvp/backprop.hpp"
#include "pvp/dataset.hpp"

namespace pvp {

struct TrainSchedule {
    int epochs = 30;
    int batch_size = 16;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    double divergence_loss = 1e3;
    int eval_every = 5;  // epochs between eval-quadrant log entries; the last epoch is always logged

    bool operator==(const TrainSchedule&) const = default;
};

inline void to_json(json& j, const TrainSchedule& s) {
    j = json{{"epochs", s.epochs},           {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate},
             {"beta1", s.beta1},             {"beta2", s.beta2},           {"adam_eps", s.adam_eps},
             {"grad_clip", s.grad_clip},     {"divergence_loss", s.divergence_loss},
             {"eval_every", s.eval_every}};
}

inline void from_json(const json& j, TrainSchedule& s) {
    j.at("epochs").get_to(s.epochs);
    j.at("batch_size").get_to(s.batch_size);
    j.at("learning_rate").get_to(s.learning_rate);
    j.at("beta1").get_to(s.beta1);
    j.at("beta2").get_to(s.beta2);
    j.at("adam_eps").get_to(s.adam_eps);
    j.at("grad_clip").get_to(s.grad_clip);
    j.at("divergence_loss").get_to(s.divergence_loss);
    j.at("eval_every").get_to(s.eval_every);
}

inline void validate(const TrainSchedule& s) {
    require(s.epochs >= 0, ErrorKind::config, "train.epochs must be non-negative");
    require(s.batch_size >= 1, ErrorKind::config, "train.batch_size must be positive");
    require(s.learning_rate > 0, ErrorKind::config, "train.learning_rate must be positive");
    require(s.beta1 >= 0 && s.beta1 < 1 && s.beta2 >= 0 && s.beta2 < 1, ErrorKind::config,
            "train.beta1 and train.beta2 must be in [0, 1)");
    require(s.grad_clip > 0, ErrorKind::config, "train.grad_clip must be positive");
    require(s.eval_every >= 1, ErrorKind::config, "train.eval_every must be positive");
}

inline Example make_example(const Dataset& d, const Sample& s) { return {d.image_of(s), s.tokens, s.target()}; }

/// Adam with bias correction, cosine-decayed step size and global-norm clipping.
class AdamOptimizer {
public:
    AdamOptimizer(std::size_t n, const TrainSchedule& s) : m_(n, 0.0F), v_(n, 0.0F), s_(s) {}

    /// Applies one update; returns the pre-clip gradient norm.
    double step(Params<float>& p, const Params<float>& g, double lr) {
        double sq = 0;
        for (const float x : g.data) {
            sq += static_cast<double>(x) * x;
        }
        const double norm = std::sqrt(sq);
        const double clip = norm > s_.grad_clip ? s_.grad_clip / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(s_.beta1, t_);
        const double bc2 = 1.0 - std::pow(s_.beta2, t_);
        const auto b1 = static_cast<float>(s_.beta1);
        const auto b2 = static_cast<float>(s_.beta2);
        const auto step = static_cast<float>(lr / bc1);
        const auto inv_bc2 = static_cast<float>(1.0 / bc2);
        const auto eps = static_cast<float>(s_.adam_eps);
        const auto c = static_cast<float>(clip);
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const float gi = g.data[i] * c;
            m_[i] = b1 * m_[i] + (1.0F - b1) * gi;
            v_[i] = b2 * v_[i] + (1.0F - b2) * gi * gi;
            p.data[i] -= step * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps);
        }
        return norm;
    }

private:
    std::vector<float> m_, v_;
    TrainSchedule s_;
    int t_ = 0;
};

inline double cosine_lr(const TrainSchedule& s, long step, long total) {
    if (total <= 1) {
        return s.learning_rate;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(total);
    return 0.5 * s.learning_rate * (1.0 + std::cos(std::numbers::pi * frac));
}

struct EpochLog {
    int epoch = 0;
    double loss = 0;
    double train_accuracy = 0;
    json eval;  // accuracy by quadrant, null on epochs without evaluation
};

inline json to_json(const EpochLog& e) {
    return json{{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}, {"eval", e.eval}};
}

using EpochEvaluator = std::function<json(const Params<float>&)>;
using EpochCallback = std::function<void(const EpochLog&)>;

/// Deterministic mini-batch training: the batch order depends only on `seed`.
inline Params<float> train(Params<float> params, const Dataset& data, const std::vector<Sample>& split,
                           const TrainSchedule& schedule, std::uint64_t seed, const EpochEvaluator& evaluate = {},
                           const EpochCallback& on_epoch = {}) {
    validate(schedule);
    require(!split.empty(), ErrorKind::argument, "empty training split");
    if (schedule.epochs == 0) {
        return params;
    }
    const auto bs = static_cast<std::size_t>(schedule.batch_size);
    const long steps_per_epoch = static_cast<long>((split.size() + bs - 1) / bs);
    const long total_steps = steps_per_epoch * schedule.epochs;
    AdamOptimizer opt(params.data.size(), schedule);
    Rng rng(seed);
    std::vector<std::size_t> order(split.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }

    long step = 0;
    Activations<float> act;
    std::vector<Example> batch;
    for (int epoch = 1; epoch <= schedule.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(make_example(data, split[order[i]]));
            }
            Params<float> grads(params.config);
            const float scale = 1.0F / static_cast<float>(batch.size());
            double batch_loss = 0;
            for (const auto& ex : batch) {
                forward(params, ModelInput{ex.image, ex.tokens}, act);
                if (predict_from_logits<float>(act.logits).token == ex.target) {
                    ++correct;
                }
                batch_loss += detail::backward_one(params, act, ex.tokens, ex.target, scale, grads);
            }
            batch_loss /= static_cast<double>(batch.size());
            require(std::isfinite(batch_loss), ErrorKind::numeric, "non-finite loss in batch " + std::to_string(step));
            if (batch_loss > schedule.divergence_loss) {
                fail(ErrorKind::divergence, "loss " + std::to_string(batch_loss) + " at epoch " +
                                                std::to_string(epoch) + ", step " + std::to_string(step) +
                                                " exceeds " + std::to_string(schedule.divergence_loss));
            }
            loss_sum += batch_loss * static_cast<double>(batch.size());
            opt.step(params, grads, cosine_lr(schedule, step, total_steps));
            ++step;
        }
        EpochLog log{epoch, loss_sum / static_cast<double>(split.size()),
                     static_cast<double>(correct) / static_cast<double>(split.size()), nullptr};
        if (evaluate && (epoch % schedule.eval_every == 0 || epoch == schedule.epochs)) {
            log.eval = evaluate(params);
        }
        if (on_epoch) {
            on_epoch(log);
        }
    }
    return params;
}

}  // namespace pvp
