#pragma once

// Day and hour sinusoidal encodings and the conditioning MLP that turns a
// timestamp into a per-channel bias for the translator latent.

#include <vector>

#include "npm/layers.hpp"
#include "npm/timestamp.hpp"

namespace npm {

/// Sinusoidal encoding of `x` in `d` dimensions: entry 2i holds
/// sin(x / 10000^(2i/d)), entry 2i+1 the cosine of the same argument.
/// Throws ConfigError for odd or zero `d`.
std::vector<double> positional_encode(double x, std::size_t d);

/// Linear -> GELU -> Linear over [PE(day), PE(hour)].
template <typename T>
class TimeEmbedding {
public:
    TimeEmbedding() = default;
    TimeEmbedding(ParameterSet<T>& ps, const std::string& path, std::size_t pe_dim, std::size_t cond_dim, Rng& rng);

    /// Concatenated day and hour encodings, [N x 2*pe_dim].
    BasicTensor<T> encodings(const std::vector<TimeStamp>& stamps) const;
    /// Condition vectors, [N x cond_dim].
    BasicTensor<T> operator()(const std::vector<TimeStamp>& stamps) const;
    /// Single condition vector, [cond_dim].
    BasicTensor<T> embed(const TimeStamp& stamp) const;

    std::size_t pe_dim() const { return pe_dim_; }
    std::size_t cond_dim() const { return cond_dim_; }

private:
    std::size_t pe_dim_ = 0, cond_dim_ = 0;
    Linear<T> fc1_, fc2_;
};

/// Adds cond[c] (shape [C], or [N x C] per sample) to every pixel of channel c
/// of features [N x C x H x W].
template <typename T>
BasicTensor<T> inject_condition(const BasicTensor<T>& features, const BasicTensor<T>& cond);

}  // namespace npm
