#include "npm/optim.hpp"

#include <cmath>
#include <numbers>

namespace npm {

double CosineSchedule::lr(std::size_t step) const {
    if (total_steps == 0 || step >= total_steps) return floor_lr;
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(const ParameterSet<T>& params, Options options) : params_(&params), options_(options) {
    for (const auto& [path, tensor] : params) {
        m_.emplace_back(tensor.numel(), T(0));
        v_.emplace_back(tensor.numel(), T(0));
    }
}

template <typename T>
void AdamW<T>::step(double lr) {
    if (m_.size() != params_->size()) throw ConfigError("optimizer state does not match the parameter set");
    ++steps_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    std::size_t k = 0;
    for (const auto& entry : *params_) {
        auto tensor = entry.second;
        auto& m = m_[k];
        auto& v = v_[k];
        ++k;
        if (!tensor.has_grad()) continue;
        auto g = tensor.grad_data();
        auto w = tensor.mutable_data();
        const double decay = tensor.rank() >= 2 ? options_.weight_decay : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * gi * gi);
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            double wi = w[i];
            wi -= lr * decay * wi;
            wi -= lr * mhat / (std::sqrt(vhat) + options_.eps);
            w[i] = static_cast<T>(wi);
        }
        tensor.zero_grad();
    }
}

template <typename T>
void AdamW<T>::save_to(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.add_scalar(prefix + ".step", static_cast<float>(steps_));
    std::size_t k = 0;
    for (const auto& [path, tensor] : *params_) {
        ckpt.add(prefix + ".m." + path, tensor.shape(), std::vector<float>(m_[k].begin(), m_[k].end()));
        ckpt.add(prefix + ".v." + path, tensor.shape(), std::vector<float>(v_[k].begin(), v_[k].end()));
        ++k;
    }
}

template <typename T>
void AdamW<T>::load_from(const Checkpoint& ckpt, const std::string& prefix) {
    steps_ = static_cast<std::size_t>(ckpt.scalar(prefix + ".step"));
    std::size_t k = 0;
    for (const auto& [path, tensor] : *params_) {
        const auto& m = ckpt.at(prefix + ".m." + path);
        const auto& v = ckpt.at(prefix + ".v." + path);
        if (m.shape != tensor.shape() || v.shape != tensor.shape()) {
            throw ShapeError("optimizer state for '" + path + "' does not match the parameter shape");
        }
        m_[k].assign(m.values.begin(), m.values.end());
        v_[k].assign(v.values.begin(), v.values.end());
        ++k;
    }
}

template <typename T>
void check_finite_gradients(const ParameterSet<T>& params) {
    for (const auto& [path, tensor] : params) {
        for (auto g : tensor.grad_data()) {
            if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + path + "'");
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;
template void check_finite_gradients<float>(const ParameterSet<float>&);
template void check_finite_gradients<double>(const ParameterSet<double>&);

}  // namespace npm
