#include "headmask/loss.hpp"

#include <string>
#include <vector>

#include "headmask/errors.hpp"

namespace headmask {

Tensor label_smoothed_loss(Tape& tape, const Tensor& logits,
                           std::span<const int> targets, float epsilon,
                           int pad_id) {
  std::size_t real = 0;
  for (int t : targets) real += t != pad_id;
  if (real == 0) throw UsageError("label_smoothed_loss: every target is padding");
  const float w = 1.0f / static_cast<float>(real);
  std::vector<float> weights(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    weights[i] = targets[i] == pad_id ? 0.0f : w;
  }
  return smoothed_cross_entropy(tape, logits, targets, weights, epsilon);
}

Tensor sentence_summed_loss(Tape& tape, const Tensor& logits,
                            std::span<const int> targets, int sentences,
                            float epsilon, int pad_id) {
  if (sentences < 1 || targets.size() % static_cast<std::size_t>(sentences) != 0) {
    throw ShapeError("sentence_summed_loss: " + std::to_string(targets.size()) +
                     " targets do not split into " + std::to_string(sentences) +
                     " sentences");
  }
  const std::size_t len = targets.size() / static_cast<std::size_t>(sentences);
  std::vector<float> weights(targets.size(), 0.0f);
  for (std::size_t s = 0; s < static_cast<std::size_t>(sentences); ++s) {
    std::size_t real = 0;
    for (std::size_t i = 0; i < len; ++i) real += targets[s * len + i] != pad_id;
    if (real == 0) continue;
    const float w = 1.0f / static_cast<float>(real);
    for (std::size_t i = 0; i < len; ++i) {
      if (targets[s * len + i] != pad_id) weights[s * len + i] = w;
    }
  }
  return smoothed_cross_entropy(tape, logits, targets, weights, epsilon);
}

}  // namespace headmask
