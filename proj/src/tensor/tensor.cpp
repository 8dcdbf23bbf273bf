#include "npm/tensor.hpp"

#include <sstream>

namespace npm {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : node_(std::make_shared<detail::TensorNode<T>>()) {
    check_extents(shape);
    node_->data.assign(npm::numel(shape), fill);
    node_->shape = std::move(shape);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : node_(std::make_shared<detail::TensorNode<T>>()) {
    check_extents(shape);
    if (npm::numel(shape) != values.size()) {
        throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(npm::numel(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
}

template <typename T>
const detail::TensorNode<T>& BasicTensor<T>::checked() const {
    if (!node_) throw Error("access to a null tensor handle");
    return *node_;
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
    return checked().shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
    }
    return s[axis];
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const& {
    return checked().data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    checked();
    return node_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
    const auto& n = checked();
    if (n.data.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(n.shape));
    return n.data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
    return checked().requires_grad;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
    checked();
    node_->requires_grad = flag;
    return *this;
}

template <typename T>
std::optional<std::size_t> BasicTensor<T>::tape_id() const {
    return checked().tape_id;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
    return !checked().grad.empty();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::grad() const {
    const auto& n = checked();
    if (n.grad.empty()) return BasicTensor(n.shape, T(0));
    return BasicTensor(n.shape, n.grad);
}

template <typename T>
std::span<const T> BasicTensor<T>::grad_data() const& {
    return checked().grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    checked();
    node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    const auto& n = checked();
    return BasicTensor(n.shape, n.data);
}

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
    const auto& n = checked();
    return BasicTensor<U>(n.shape, std::vector<U>(n.data.begin(), n.data.end()));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;

// ---------------------------------------------------------------------------
// Tape

namespace {

template <typename T>
Tape<T>*& active_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

}  // namespace

template <typename T>
Tape<T>::~Tape() {
    clear();
    if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_slot<T>()) {
    active_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
    active_slot<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return active_slot<T>();
}

template <typename T>
bool Tape<T>::should_record(std::initializer_list<const BasicTensor<T>*> inputs) {
    if (!active()) return false;
    for (const auto* t : inputs) {
        if (t && t->valid() && t->requires_grad()) return true;
    }
    return false;
}

template <typename T>
bool Tape<T>::should_record(std::span<const BasicTensor<T>> inputs) {
    if (!active()) return false;
    for (const auto& t : inputs) {
        if (t.valid() && t.requires_grad()) return true;
    }
    return false;
}

template <typename T>
void Tape<T>::record(std::string_view op, const BasicTensor<T>& output, Backward backward) {
    auto node = output.node();
    node->requires_grad = true;
    node->tape_id = entries_.size();
    node->tape = this;
    entries_.push_back(Entry{op, std::move(node), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    const auto& node = loss.node();
    if (!node->tape_id || node->tape != this) {
        throw Error("backward: loss was not produced on this tape");
    }
    node->accumulate_grad(0, T(1));
    for (std::size_t i = *node->tape_id + 1; i-- > 0;) {
        auto& e = entries_[i];
        if (e.output->grad.empty()) continue;
        e.backward(std::span<const T>(e.output->grad));
    }
}

template <typename T>
void Tape<T>::clear() {
    for (auto& e : entries_) {
        e.output->tape_id.reset();
        e.output->tape = nullptr;
        e.output->requires_grad = false;
    }
    entries_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace npm
