#ifndef LIRR_TENSOR_HPP
#define LIRR_TENSOR_HPP

// Dense tensors with a single-use reverse-mode tape.
//
// A Tensor is a shared handle onto a node holding shape, data and (once
// materialized) gradient. Copying a Tensor aliases the node; use clone() for
// a deep copy. Operations live in ops.hpp and record onto an explicit Tape.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lirr {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <std::floating_point T>
class Tape;

template <std::floating_point T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until materialized
  bool requires_grad = false;
  // Id of the recording tape; leaves have owner == 0.
  std::uint64_t owner = 0;
  std::size_t tape_index = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) +
                           " elements but data has " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->owner == 0; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  // Empty span when no gradient has been materialized.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  T operator[](std::size_t i) const { return node_->data[i]; }

  // Fresh leaf with copied data and no gradient tracking.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  // Fresh leaf with copied data keeping the requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  template <std::floating_point>
  friend class Tape;

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

// Ordered record of differentiable operations. Recording order is a
// topological order, so backward walks entries in reverse and visits each
// node once. A tape is single use: a second backward() throws TapeError.
template <std::floating_point T>
class Tape {
 public:
  using Node = TensorNode<T>;
  using NodePtr = std::shared_ptr<Node>;
  // Receives the output gradient; accumulates into captured input nodes.
  using BackwardFn = std::function<void(std::span<const T> out_grad)>;

  Tape() : id_(next_id()) {}
  // With recording disabled every op returns a constant (inference mode).
  explicit Tape(bool recording) : recording_(recording), id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->requires_grad(); });
  }

  // Wraps forward output. When any input requires grad, the op is recorded
  // with `backward`; otherwise the result is a constant leaf.
  Tensor<T> record(Shape shape, std::vector<T> data,
                   const std::vector<const Tensor<T>*>& inputs, BackwardFn backward) {
    if (consumed_) throw TapeError("tape already consumed by backward()");
    bool track = false;
    std::vector<std::size_t> input_ids;
    for (const auto* in : inputs) {
      const auto& n = in->node();
      if (!n->owner) {
        track = track || n->requires_grad;
        continue;
      }
      if (n->owner != id_) throw TapeError("input tensor belongs to a different tape");
      track = track || n->requires_grad;
      input_ids.push_back(n->tape_index);
    }
    Tensor<T> out(std::move(shape), std::move(data), false);
    if (!track || !recording_) return out;
    auto node = out.node();
    node->requires_grad = true;
    node->owner = id_;
    node->tape_index = entries_.size();
    entries_.push_back(Entry{std::move(input_ids), node, std::move(backward)});
    return out;
  }

  void backward(const Tensor<T>& loss) {
    if (consumed_) throw TapeError("backward() called twice on the same tape");
    if (loss.numel() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    const auto& ln = loss.node();
    if (ln->owner != id_) throw TapeError("loss was not recorded on this tape");
    consumed_ = true;
    ln->ensure_grad();
    ln->grad[0] = T(1);
    for (std::size_t i = ln->tape_index + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (e.output->grad.empty()) continue;
      e.backward(e.output->grad);
      // Drop the closure so captured inputs are released early.
      e.backward = nullptr;
    }
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  bool recording() const { return recording_; }
  const std::vector<std::size_t>& input_ids(std::size_t entry) const {
    return entries_.at(entry).inputs;
  }

 private:
  struct Entry {
    std::vector<std::size_t> inputs;
    NodePtr output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool recording_ = true;
  std::uint64_t id_;

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }
};

// Accumulates `g` into the node's gradient when the node tracks gradients.
template <std::floating_point T>
inline void accumulate_grad(TensorNode<T>& node, std::span<const T> g) {
  if (!node.requires_grad) return;
  node.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

}  // namespace lirr

#endif  // LIRR_TENSOR_HPP
