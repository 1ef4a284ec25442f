#pragma once

// Dense tensors with a dynamic reverse-mode tape.
//
// Every op in ops.hpp returns a new Tensor whose node remembers its parents and a
// closure that pushes the node's gradient back into them. `backward()` walks the
// graph in reverse topological order. Leaves created with requires_grad=true
// (model parameters) keep their gradient buffer between calls, so repeated
// backward passes accumulate; call zero_grad() between optimizer steps.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rad2ct {

#ifdef RAD2CT_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, accumulates into the parents' grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const Real> values() const;
  // Direct write access; intended for parameter updates and initialization only.
  std::span<Real> mutable_values();
  Real item() const;
  Real operator[](std::size_t i) const { return values()[i]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  /// Opaque tape identifier, unique per process.
  std::uint64_t node_id() const;

  /// Same values, cut from the tape.
  Tensor detach() const;

  /// Reverse pass from a scalar loss. Throws UsageError for non-scalar tensors and
  /// NumericalError if any reachable gradient is not finite.
  void backward() const;

  // Internal: used by op implementations.
  static Tensor make_result(Shape shape, std::vector<Real> values, std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Gradient buffer of a parent inside a backward closure, or nullptr when the
/// parent does not take gradients.
Real* grad_buffer(detail::Node& parent);

}  // namespace rad2ct
