#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace dsfpn {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// One executed op: type plus the shapes it consumed and produced.
struct OpRecord {
  std::string op;
  std::vector<Shape> inputs;
  Shape output;
  bool operator==(const OpRecord&) const = default;
};

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline thread_local bool grad_enabled = true;
inline thread_local std::vector<OpRecord>* active_trace = nullptr;

}  // namespace detail

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Records every op executed on this thread while alive. Nested traces are not supported.
class OpTrace {
 public:
  OpTrace() : previous_(detail::active_trace) { detail::active_trace = &records_; }
  ~OpTrace() { detail::active_trace = previous_; }
  OpTrace(const OpTrace&) = delete;
  OpTrace& operator=(const OpTrace&) = delete;

  const std::vector<OpRecord>& records() const { return records_; }

 private:
  std::vector<OpRecord> records_;
  std::vector<OpRecord>* previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape) { return full(shape, T(0)); }

  static Tensor full(const Shape& shape, T value) {
    return from_data(shape, std::vector<T>(dsfpn::numel(shape), value));
  }

  static Tensor from_data(const Shape& shape, std::vector<T> data) {
    if (dsfpn::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = shape;
    node->value = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value) { return from_data({}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }

  // Writable view for leaves only; op outputs are immutable once produced.
  std::span<T> mutable_data() {
    if (!produced_by_user()) throw std::logic_error("cannot mutate the output of an op");
    return node_->value;
  }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!produced_by_user()) throw std::logic_error("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // A fresh leaf holding a copy of the values.
  Tensor detach() const { return from_data(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  bool produced_by_user() const { return std::string_view(node_->op) == "leaf"; }

  NodePtr node_;
};

namespace detail {

inline void record_op(const char* op, std::vector<Shape> inputs, const Shape& output) {
  if (active_trace) active_trace->push_back({op, std::move(inputs), output});
}

// Creates an op output and links it into the graph when any input needs a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  if (active_trace) {
    std::vector<Shape> in;
    in.reserve(inputs.size());
    for (const auto& n : inputs) in.push_back(n->shape);
    record_op(op, std::move(in), shape);
  }
  for (const T v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled) {
    for (const auto& n : inputs) needs = needs || n->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

// Topologically ordered list of the graph nodes that reach a scalar loss.
template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  static Tape record(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw DimensionError("backward requires a scalar loss");
    }
    Tape tape;
    if (!loss.requires_grad()) return tape;
    std::unordered_set<const detail::Node<T>*> visited;
    // Iterative post-order DFS: inputs always land before their consumers.
    std::vector<std::pair<NodePtr, std::size_t>> stack{{loss.node(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        const NodePtr& child = node->inputs[next++];
        if (child->requires_grad && visited.insert(child.get()).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<const NodePtr> nodes() const { return nodes_; }

  // Seeds d(loss)/d(loss) = 1 and visits every node once in reverse order.
  // Intermediate gradients are reset first; leaf gradients accumulate.
  void backward() const {
    if (nodes_.empty()) return;
    for (const auto& n : nodes_) {
      if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    }
    nodes_.back()->grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

 private:
  std::vector<NodePtr> nodes_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>::record(loss).backward();
}

// Blob layout: u32 rank, u32 dims..., raw little-endian payload.
static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  put_u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <class T>
std::size_t serialized_size(const Tensor<T>& t) {
  return sizeof(std::uint32_t) * (1 + t.rank()) + t.numel() * sizeof(T);
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated tensor blob");
    return v;
  };
  const std::uint32_t rank = get_u32();
  if (rank > 8) throw std::runtime_error("corrupt tensor blob: rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32();
  std::vector<T> data(numel(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)))) {
    throw std::runtime_error("truncated tensor payload");
  }
  return Tensor<T>::from_data(shape, std::move(data));
}

}  // namespace dsfpn
