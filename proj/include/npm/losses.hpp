#pragma once

// Training objectives: mean squared error, the temporal-consistency KL
// regulariser on consecutive frame differences, the combined stage-1 loss
// and the stage-2 adversarial objectives.

#include "npm/ops.hpp"

namespace npm {

/// Floor applied inside every logarithm of the loss functions.
inline constexpr double kLogFloor = 1e-8;

template <typename T>
struct LossReport {
    BasicTensor<T> total;  // differentiable scalar
    double mse = 0;
    double reg = 0;
    double adversarial = 0;
    double total_value = 0;
    double alpha = 0;
    double lambda = 0;
};

/// Mean of squared differences over all elements.
template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// out[i] = S[i+1] - S[i] along the time axis ([T x C x H x W], or axis 1 of
/// [N x T x C x H x W]). Throws ShapeError when fewer than two frames exist.
template <typename T>
BasicTensor<T> frame_differences(const BasicTensor<T>& frames);

/// Sum over consecutive-frame differences of KL(softmax(dPred_i) || softmax(dTarget_i)),
/// with each softmax taken over the flattened channel-pixel extent of one
/// difference frame. Batched input is averaged over the batch. The target
/// side is treated as a constant.
template <typename T>
BasicTensor<T> temporal_consistency(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// mse + alpha * temporal_consistency. Throws ConfigError for negative alpha.
template <typename T>
LossReport<T> stage1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double alpha);

/// mse(fake, real) + lambda * mean(log(1 - D(fake))).
template <typename T>
LossReport<T> generator_loss(const BasicTensor<T>& fake, const BasicTensor<T>& real,
                             const BasicTensor<T>& disc_scores_on_fake, double lambda);

/// Binary cross-entropy pushing real scores to 1 and fake scores to 0.
template <typename T>
BasicTensor<T> discriminator_loss(const BasicTensor<T>& scores_real, const BasicTensor<T>& scores_fake);

}  // namespace npm
