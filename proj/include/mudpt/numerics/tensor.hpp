#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mudpt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the reverse-mode tape. Values are owned here; handles share it.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward() touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major double tensor with optional gradient tracking.
///
/// A `Tensor` is a cheap handle; copies alias the same storage. Results of
/// operations record their inputs only when at least one input requires a
/// gradient, so computations over frozen values build no tape at all.
///
/// Rank-1 tensors behave as a single row wherever a matrix is expected:
/// `rows()` is the product of all leading dimensions and `cols()` the last.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  /// Leaf that accumulates gradients during backward().
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const;
  /// Direct write access; reserved for optimizers and finite-difference probes.
  std::span<double> mutable_values();
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient from the last backward(); zeros if none was accumulated.
  std::vector<double> grad() const;
  void zero_grad();

  /// Value copy with no tape history.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Runs reverse-mode differentiation from a scalar `loss`, accumulating into
/// every reachable tensor that requires a gradient.
void backward(const Tensor& loss);

/// True when every value is finite.
bool all_finite(std::span<const double> values);

}  // namespace mudpt
