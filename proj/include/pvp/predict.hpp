#pragma once

#include <span>

#include "pvp/dataset.hpp"
#include "pvp/model.hpp"

namespace pvp {

/// Full-vocabulary argmax at the answer cue. `candidates` restricts the
/// argmax for analysis; the probability is always the full-vocabulary one.
template <class T>
Prediction predict_answer(const Params<T>& p, const Dataset& data, const Sample& s, std::span<const int> candidates = {},
                          const Steering* steering = nullptr) {
    Activations<T> act;
    forward(p, ModelInput{data.image_of(s), s.tokens}, act, steering);
    return predict_from_logits<T>(act.logits, candidates);
}

/// Samples of one task, prompt kind and variant, in split order.
inline std::vector<Sample> select(std::span<const Sample> split, Task task, std::optional<PromptKind> kind = {},
                                  std::optional<Variant> variant = {}) {
    std::vector<Sample> out;
    for (const auto& s : split) {
        if (s.task == task && (!kind || s.prompt_kind == *kind) && (!variant || s.variant == *variant)) {
            out.push_back(s);
        }
    }
    return out;
}

}  // namespace pvp
