#include "rad2ct/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool grad_mode = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<Real> values) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }
bool grad_enabled() { return grad_mode; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  std::vector<Real> values(numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), Real(0));
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->value.size(); }
std::span<const Real> Tensor::values() const { return node_->value; }
std::span<Real> Tensor::mutable_values() { return node_->value; }

Real Tensor::item() const {
  if (node_->value.size() != 1) throw UsageError("item() on tensor of shape " + to_string(node_->shape));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const Real> Tensor::grad() const { return node_->grad; }
std::span<Real> Tensor::mutable_grad() { return node_->grad; }

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), Real(0));
}

std::uint64_t Tensor::node_id() const { return node_->id; }

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->value)); }

Tensor Tensor::make_result(Shape shape, std::vector<Real> values, std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  auto node = new_node(std::move(shape), std::move(values));
  if (!grad_mode) return Tensor(std::move(node));
  bool any = false;
  for (const auto& p : parents) any = any || p.node_->requires_grad;
  if (!any) return Tensor(std::move(node));
  node->requires_grad = true;
  node->leaf = false;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(std::move(p.node_));
  node->backward = std::move(backward);
  return Tensor(std::move(node));
}

Real* grad_buffer(detail::Node& parent) {
  if (!parent.requires_grad) return nullptr;
  if (parent.grad.size() != parent.value.size()) parent.grad.assign(parent.value.size(), Real(0));
  return parent.grad.data();
}

void Tensor::backward() const {
  if (node_->value.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + to_string(node_->shape));
  }
  if (!node_->requires_grad) throw UsageError("backward() on a tensor that is not on the tape");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), Real(0));
  }
  grad_buffer(*node_)[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->leaf && (*it)->backward) (*it)->backward(**it);
  }
  for (auto* n : order) {
    for (Real g : n->grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("non-finite gradient in tensor of shape " + to_string(n->shape));
      }
    }
  }
}

}  // namespace rad2ct
