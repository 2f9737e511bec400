#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mambatrack {

/// Dense 64-bit real tensor with an optional gradient slot.
///
/// Tensors are cheap shared handles: copies alias the same storage, so a
/// parameter captured by a recorded graph node accumulates gradient into the
/// buffer the optimizer later reads. All layouts are row-major.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t numel() const;
  int64_t dim(int i) const;
  int rank() const;

  double* data();
  const double* data() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  /// Gradient buffer, allocated zero-filled on first mutable access.
  double* grad();
  /// Read-only gradient view; nullptr while no gradient has been written.
  const double* grad_ptr() const;
  bool has_grad() const;
  void zero_grad();

  /// Value of a rank-0/1-element tensor.
  double item() const;
  double at(std::initializer_list<int64_t> idx) const;
  double& at_mut(std::initializer_list<int64_t> idx);

  /// Deep copy of data (fresh storage, no grad, requires_grad off).
  Tensor clone() const;

  std::string shape_str() const;

 private:
  struct Impl {
    std::vector<int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first use
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

/// Recorded graph of primitive applications (a reverse-mode tape).
///
/// Nodes are appended in creation order; backward() visits each node exactly
/// once in reverse creation order and adds into the grad buffers of the
/// node's inputs. A graph can be consumed by backward() once; record a fresh
/// graph per forward pass. Gradients accumulate across graphs until the
/// caller zeroes them.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Runs the reverse sweep from a scalar loss. Throws std::invalid_argument
  /// for a non-scalar loss and std::runtime_error on a second call.
  void backward(const Tensor& loss);

  void add_node(std::function<void()> backward_fn);
  size_t size() const { return nodes_.size(); }

  /// Graph currently recording on this thread, or nullptr.
  static Graph* active();

 private:
  friend class GraphContext;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

/// RAII scope that makes a graph the active recording target.
class GraphContext {
 public:
  explicit GraphContext(Graph& g);
  ~GraphContext();
  GraphContext(const GraphContext&) = delete;
  GraphContext& operator=(const GraphContext&) = delete;

 private:
  Graph* prev_;
};

namespace detail {
/// True when an op must record: a graph is active and some input needs grad.
bool tracing(std::initializer_list<const Tensor*> inputs);
std::string format_shape(const std::vector<int64_t>& s);
}  // namespace detail

}  // namespace mambatrack
