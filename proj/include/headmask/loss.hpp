#pragma once

#include <span>

#include "headmask/data.hpp"
#include "headmask/tensor.hpp"

namespace headmask {

// Cross entropy against the label-smoothed target distribution: (1 - epsilon)
// on the gold class and epsilon / (V - 1) on every other class, averaged over
// non-pad targets. Throws UsageError when every target is padding.
Tensor label_smoothed_loss(Tape& tape, const Tensor& logits,
                           std::span<const int> targets, float epsilon,
                           int pad_id = kPadId);

// Sum over sentences of each sentence's own mean smoothed loss. targets holds
// `sentences` rows of equal length. All-pad sentences contribute nothing.
Tensor sentence_summed_loss(Tape& tape, const Tensor& logits,
                            std::span<const int> targets, int sentences,
                            float epsilon, int pad_id = kPadId);

}  // namespace headmask
