#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "npm/layers.hpp"

namespace npm {

/// Cosine decay from `base_lr` at step 0 to `floor_lr` at `total_steps`;
/// constant at the floor afterwards.
struct CosineSchedule {
    double base_lr = 1e-4;
    double floor_lr = 0.0;
    std::size_t total_steps = 1;

    double lr(std::size_t step) const;
};

/// Adam with decoupled weight decay. Decay applies to tensors of rank >= 2
/// (weights), not to biases or normalisation parameters.
template <typename T>
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(const ParameterSet<T>& params) : AdamW(params, Options{}) {}
    AdamW(const ParameterSet<T>& params, Options options);

    /// Applies one update from the accumulated gradients, then clears them.
    void step(double lr);

    std::size_t steps() const { return steps_; }
    const Options& options() const { return options_; }

    /// Moments are stored as "<prefix>.m.<path>" / "<prefix>.v.<path>".
    void save_to(Checkpoint& ckpt, const std::string& prefix) const;
    void load_from(const Checkpoint& ckpt, const std::string& prefix);

private:
    const ParameterSet<T>* params_;
    Options options_;
    std::size_t steps_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

/// Throws DivergenceError naming the first parameter whose gradient holds a
/// non-finite value.
template <typename T>
void check_finite_gradients(const ParameterSet<T>& params);

}  // namespace npm
