#pragma once

// Dense row-major tensors and the reverse-mode gradient tape.
//
// A tensor is a shared handle to an immutable value node. When a Tape is
// active on the current thread, every op whose inputs require gradients
// appends a node to it; Tape::backward then walks the nodes in reverse
// order. Tensors that do not require gradients (including detached copies)
// are never recorded and never receive gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "npm/error.hpp"

namespace npm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class DType { f32, f64 };

template <typename T>
inline constexpr DType dtype_of = std::is_same_v<T, float> ? DType::f32 : DType::f64;

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient reaches the node
    bool requires_grad = false;
    std::optional<std::size_t> tape_id;
    const Tape<T>* tape = nullptr;

    void accumulate_grad(std::size_t i, T g) {
        if (grad.empty()) grad.assign(data.size(), T(0));
        grad[i] += g;
    }
    T* grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad.data();
    }
};

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

}  // namespace detail

template <typename T>
class BasicTensor {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors hold f32 or f64 values");

public:
    using value_type = T;

    /// Null handle; most accessors require a valid tensor.
    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> values);

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
    static BasicTensor full(Shape shape, T value) { return BasicTensor(std::move(shape), value); }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, value); }

    static constexpr DType dtype() { return dtype_of<T>; }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return data().size(); }

    std::span<const T> data() const&;
    std::span<const T> data() const&& = delete;
    /// Writable view of the values. Only for tensors not yet consumed by a
    /// recorded op: parameters between steps, freshly built inputs.
    std::span<T> mutable_data();

    T item() const;
    T operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    BasicTensor& set_requires_grad(bool flag = true);
    std::optional<std::size_t> tape_id() const;

    bool has_grad() const;
    /// Accumulated gradient (zeros when none has flowed in).
    BasicTensor grad() const;
    std::span<const T> grad_data() const&;
    std::span<const T> grad_data() const&& = delete;
    void zero_grad();

    /// Copy of the values that is not connected to any tape.
    BasicTensor detach() const;
    template <typename U>
    BasicTensor<U> cast() const;

    bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

    // Internal: op implementations reach the node through these.
    const detail::NodePtr<T>& node() const { return node_; }
    explicit BasicTensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

private:
    const detail::TensorNode<T>& checked() const;
    detail::NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Append-only record of differentiable ops. One tape may be active per
/// thread; activation is scoped through Tape::Scope.
template <typename T>
class Tape {
public:
    using Backward = std::function<void(std::span<const T> grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    /// Makes `tape` the active tape of this thread until destruction.
    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* active();

    /// True when an active tape exists and any input requires gradients.
    static bool should_record(std::initializer_list<const BasicTensor<T>*> inputs);
    static bool should_record(std::span<const BasicTensor<T>> inputs);

    /// Registers `output` as produced by `op`; used by op implementations.
    void record(std::string_view op, const BasicTensor<T>& output, Backward backward);

    /// Propagates d(loss)/d(node) to every reachable node. Gradients add up
    /// over fan-out and across repeated calls until zero_grad().
    void backward(const BasicTensor<T>& loss);

    std::size_t size() const { return entries_.size(); }
    std::string_view op_name(std::size_t id) const { return entries_.at(id).op; }
    void clear();

private:
    struct Entry {
        std::string_view op;
        detail::NodePtr<T> output;
        Backward backward;
    };
    std::vector<Entry> entries_;
};

}  // namespace npm
