#include "npm/losses.hpp"

#include <cmath>

namespace npm {

namespace {

template <typename T>
void check_probabilities(const BasicTensor<T>& scores, const char* what) {
    for (auto v : scores.data()) {
        if (!(v >= T(0) && v <= T(1))) {
            throw DomainError(std::string(what) + " contains value " + std::to_string(v) + " outside [0, 1]");
        }
    }
}

template <typename T>
BasicTensor<T> floored_log(const BasicTensor<T>& x) {
    return log(clamp(x, static_cast<T>(kLogFloor), T(1)));
}

std::size_t time_axis_of(const Shape& s) {
    if (s.size() == 4) return 0;
    if (s.size() == 5) return 1;
    throw ShapeError("frame sequence must be [T x C x H x W] or [N x T x C x H x W], got " + to_string(s));
}

}  // namespace

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("mse: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
    }
    return mean(square(sub(pred, target)));
}

template <typename T>
BasicTensor<T> frame_differences(const BasicTensor<T>& frames) {
    const std::size_t axis = time_axis_of(frames.shape());
    const std::size_t t = frames.dim(axis);
    if (t < 2) throw ShapeError("frame differences need at least two frames, got " + std::to_string(t));
    return sub(slice(frames, axis, 1, t), slice(frames, axis, 0, t - 1));
}

template <typename T>
BasicTensor<T> temporal_consistency(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("temporal consistency: prediction " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
    }
    const std::size_t axis = time_axis_of(pred.shape());
    const std::size_t batch = axis == 1 ? pred.dim(0) : 1;
    const auto dp = frame_differences(pred);
    const auto dt = frame_differences(target.detach());
    const std::size_t frames = batch * dp.dim(axis);
    const std::size_t width = dp.numel() / frames;

    auto logp = log_softmax(reshape(dp, {frames, width}), 1);
    auto logq_raw = log_softmax(reshape(dt, {frames, width}), 1);
    // log(max(q, eps)) on the constant target side
    std::vector<T> logq(logq_raw.data().begin(), logq_raw.data().end());
    const T log_floor = static_cast<T>(std::log(kLogFloor));
    for (auto& v : logq) v = std::max(v, log_floor);
    BasicTensor<T> logq_t(Shape{frames, width}, std::move(logq));

    auto kl = sum(mul(exp(logp), sub(logp, logq_t)));
    return batch == 1 ? kl : scale(kl, T(1) / static_cast<T>(batch));
}

template <typename T>
LossReport<T> stage1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double alpha) {
    if (!(alpha >= 0)) throw ConfigError("consistency weight alpha must be non-negative");
    LossReport<T> r;
    r.alpha = alpha;
    auto mse = mse_loss(pred, target);
    r.mse = mse.item();
    if (alpha == 0) {
        r.total = mse;
        if (pred.dim(time_axis_of(pred.shape())) >= 2) r.reg = temporal_consistency(pred.detach(), target).item();
    } else {
        auto reg = temporal_consistency(pred, target);
        r.reg = reg.item();
        r.total = add(mse, scale(reg, static_cast<T>(alpha)));
    }
    r.total_value = r.total.item();
    return r;
}

template <typename T>
LossReport<T> generator_loss(const BasicTensor<T>& fake, const BasicTensor<T>& real,
                             const BasicTensor<T>& disc_scores_on_fake, double lambda) {
    if (!(lambda >= 0)) throw ConfigError("adversarial weight lambda must be non-negative");
    check_probabilities(disc_scores_on_fake, "discriminator scores");
    LossReport<T> r;
    r.lambda = lambda;
    auto mse = mse_loss(fake, real);
    auto adv = mean(floored_log(add_scalar(neg(disc_scores_on_fake), T(1))));
    r.mse = mse.item();
    r.adversarial = adv.item();
    r.total = lambda == 0 ? mse : add(mse, scale(adv, static_cast<T>(lambda)));
    r.total_value = r.total.item();
    return r;
}

template <typename T>
BasicTensor<T> discriminator_loss(const BasicTensor<T>& scores_real, const BasicTensor<T>& scores_fake) {
    check_probabilities(scores_real, "real scores");
    check_probabilities(scores_fake, "fake scores");
    auto real_term = mean(floored_log(scores_real));
    auto fake_term = mean(floored_log(add_scalar(neg(scores_fake), T(1))));
    return neg(add(real_term, fake_term));
}

#define NPM_INSTANTIATE_LOSSES(T)                                                                            \
    template BasicTensor<T> mse_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> frame_differences<T>(const BasicTensor<T>&);                                    \
    template BasicTensor<T> temporal_consistency<T>(const BasicTensor<T>&, const BasicTensor<T>&);          \
    template LossReport<T> stage1_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&, double);            \
    template LossReport<T> generator_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                             const BasicTensor<T>&, double);                                \
    template BasicTensor<T> discriminator_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);

NPM_INSTANTIATE_LOSSES(float)
NPM_INSTANTIATE_LOSSES(double)

}  // namespace npm
