#include "npm/embedding.hpp"

#include <cmath>

namespace npm {

TimeStamp TimeStamp::make(int day, int hour) {
    if (day < 0 || day >= kDays) {
        throw ConfigError("day of year " + std::to_string(day) + " outside 0..365");
    }
    if (hour < 0 || hour >= kHours) {
        throw ConfigError("hour " + std::to_string(hour) + " outside 0..23");
    }
    return TimeStamp{day, hour};
}

TimeStamp TimeStamp::advanced(int hours) const {
    long long total = static_cast<long long>(day) * kHours + hour + hours;
    const long long cycle = static_cast<long long>(kDays) * kHours;
    total = ((total % cycle) + cycle) % cycle;
    return TimeStamp{static_cast<int>(total / kHours), static_cast<int>(total % kHours)};
}

std::string TimeStamp::to_string() const {
    return "day " + std::to_string(day) + " hour " + std::to_string(hour);
}

std::vector<double> positional_encode(double x, std::size_t d) {
    if (d == 0 || d % 2 != 0) {
        throw ConfigError("positional encoding dimension must be even and positive, got " + std::to_string(d));
    }
    std::vector<double> pe(d);
    for (std::size_t i = 0; i < d / 2; ++i) {
        const double arg = x / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
        pe[2 * i] = std::sin(arg);
        pe[2 * i + 1] = std::cos(arg);
    }
    return pe;
}

template <typename T>
TimeEmbedding<T>::TimeEmbedding(ParameterSet<T>& ps, const std::string& path, std::size_t pe_dim,
                                std::size_t cond_dim, Rng& rng)
    : pe_dim_(pe_dim), cond_dim_(cond_dim) {
    if (pe_dim == 0 || pe_dim % 2 != 0) throw ConfigError("encoding width must be even");
    fc1_ = Linear<T>(ps, path + ".fc1", 2 * pe_dim, cond_dim, rng);
    fc2_ = Linear<T>(ps, path + ".fc2", cond_dim, cond_dim, rng);
}

template <typename T>
BasicTensor<T> TimeEmbedding<T>::encodings(const std::vector<TimeStamp>& stamps) const {
    if (stamps.empty()) throw ShapeError("time embedding needs at least one timestamp");
    std::vector<T> values;
    values.reserve(stamps.size() * 2 * pe_dim_);
    for (const auto& s : stamps) {
        TimeStamp::make(s.day, s.hour);
        for (double v : positional_encode(s.day, pe_dim_)) values.push_back(static_cast<T>(v));
        for (double v : positional_encode(s.hour, pe_dim_)) values.push_back(static_cast<T>(v));
    }
    return BasicTensor<T>(Shape{stamps.size(), 2 * pe_dim_}, std::move(values));
}

template <typename T>
BasicTensor<T> TimeEmbedding<T>::operator()(const std::vector<TimeStamp>& stamps) const {
    return fc2_(gelu(fc1_(encodings(stamps))));
}

template <typename T>
BasicTensor<T> TimeEmbedding<T>::embed(const TimeStamp& stamp) const {
    return reshape((*this)({stamp}), {cond_dim_});
}

template <typename T>
BasicTensor<T> inject_condition(const BasicTensor<T>& features, const BasicTensor<T>& cond) {
    if (features.rank() != 4) {
        throw ShapeError("condition injection expects [N x C x H x W] features, got " + to_string(features.shape()));
    }
    const std::size_t n = features.dim(0), c = features.dim(1);
    if (cond.rank() == 1 && cond.dim(0) == c) return add(features, reshape(cond, {1, c, 1, 1}));
    if (cond.rank() == 2 && cond.dim(0) == n && cond.dim(1) == c) return add(features, reshape(cond, {n, c, 1, 1}));
    throw ShapeError("condition " + to_string(cond.shape()) + " does not match features " +
                     to_string(features.shape()));
}

template class TimeEmbedding<float>;
template class TimeEmbedding<double>;
template BasicTensor<float> inject_condition<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> inject_condition<double>(const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace npm
