#include "mambatrack/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mambatrack {

namespace {
int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + detail::format_shape(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::numel() const { return impl_ ? static_cast<int64_t>(impl_->data.size()) : 0; }

int64_t Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw std::out_of_range("tensor: dim index");
  return impl_->shape[static_cast<size_t>(i)];
}

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  return *this;
}

double* Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad.data();
}

const double* Tensor::grad_ptr() const {
  return (impl_ && !impl_->grad.empty()) ? impl_->grad.data() : nullptr;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str());
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return const_cast<Tensor*>(this)->at_mut(idx);
}

double& Tensor::at_mut(std::initializer_list<int64_t> idx) {
  if (static_cast<int>(idx.size()) != rank())
    throw std::invalid_argument("tensor: index rank mismatch");
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    const int64_t d = impl_->shape[static_cast<size_t>(i)];
    if (v < 0 || v >= d) throw std::out_of_range("tensor: index out of range");
    flat = flat * d + v;
    ++i;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

std::string Tensor::shape_str() const { return detail::format_shape(impl_->shape); }

// ---------------------------------------------------------------------------

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph* Graph::active() { return g_active_graph; }

void Graph::add_node(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
  if (consumed_)
    throw std::runtime_error("backward: graph already consumed; record a fresh graph");
  consumed_ = true;
  Tensor l = loss;
  l.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

GraphContext::GraphContext(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
GraphContext::~GraphContext() { g_active_graph = prev_; }

namespace detail {

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (g_active_graph == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

std::string format_shape(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

}  // namespace detail

}  // namespace mambatrack
