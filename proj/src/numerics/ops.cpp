#include "mudpt/numerics/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "mudpt/errors.hpp"
#include "mudpt/numerics/kernels.hpp"

namespace mudpt::ops {

namespace {

using detail::Node;
using kernels::GemmShape;
using kernels::Transpose;

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                   BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  for (const Tensor* in : inputs) track = track || in->requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) node->inputs.push_back(in->node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> value, std::span<const Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool track = false;
  for (const Tensor& in : inputs) track = track || in.requires_grad();
  if (track) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient buffer of input `i`, or nullptr when it does not need one.
std::vector<double>* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() > 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm({m, n, k}, Transpose::kNo, Transpose::kNo, a.values(), b.values(), out);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, n, k](Node& self) {
    const auto& g = self.grad;
    if (auto* ga = grad_of(self, 0)) {
      kernels::gemm({m, k, n}, Transpose::kNo, Transpose::kYes, g, self.inputs[1]->value, *ga);
    }
    if (auto* gb = grad_of(self, 1)) {
      kernels::gemm({k, n, m}, Transpose::kYes, Transpose::kNo, self.inputs[0]->value, g, *gb);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm({m, n, k}, Transpose::kNo, Transpose::kYes, a.values(), b.values(), out);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, n, k](Node& self) {
    const auto& g = self.grad;
    if (auto* ga = grad_of(self, 0)) {
      kernels::gemm({m, k, n}, Transpose::kNo, Transpose::kNo, g, self.inputs[1]->value, *ga);
    }
    if (auto* gb = grad_of(self, 1)) {
      kernels::gemm({n, k, m}, Transpose::kYes, Transpose::kNo, g, self.inputs[0]->value, *gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto v = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return make_result({c, r}, std::move(out), {&a}, [r, c](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += self.grad[j * r + i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* gk = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*gk)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    }
    if (auto* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {&a}, [s](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * s;
    }
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("scale_by: factor must hold one value, got " + shape_string(s.shape()));
  const double f = s.item();
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= f;
  return make_result(a.shape(), std::move(out), {&a, &s}, [](Node& self) {
    const double f = self.inputs[1]->value[0];
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * f;
    }
    if (auto* gs = grad_of(self, 1)) {
      const auto& av = self.inputs[0]->value;
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * av[i];
      (*gs)[0] += acc;
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const std::size_t r = a.rows(), c = a.cols();
  if (row.size() != c) {
    throw ShapeError("add_row: row " + shape_string(row.shape()) + " vs matrix " + shape_string(a.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto rv = row.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  return make_result(a.shape(), std::move(out), {&a, &row}, [r, c](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    }
    if (auto* gr = grad_of(self, 1)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gr)[j] += self.grad[i * c + j];
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = std::exp(v);
  return make_result(a.shape(), std::move(out), {&a}, [](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * self.value[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kCubic = 0.044715;
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x = 0.5 * x * (1.0 + std::tanh(kC * (x + kCubic * x * x * x)));
  return make_result(a.shape(), std::move(out), {&a}, [](Node& self) {
    if (auto* ga = grad_of(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = xv[i];
        const double t = std::tanh(kC * (x + kCubic * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kCubic * x * x);
        (*ga)[i] += self.grad[i] * d;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: input " + shape_string(x.shape()) + ", gamma " + shape_string(gamma.shape()) +
                     ", beta " + shape_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw InvalidInputError("layer_norm: eps must be positive");
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(r * c);
  std::vector<double> xhat(r * c);
  std::vector<double> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * rstd[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       const auto& g = self.grad;
                       const auto& gv = self.inputs[1]->value;
                       if (auto* gg = grad_of(self, 1)) {
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[i * c + j] * xhat[i * c + j];
                       }
                       if (auto* gb = grad_of(self, 2)) {
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[i * c + j];
                       }
                       if (auto* gx = grad_of(self, 0)) {
                         const double inv_c = 1.0 / static_cast<double>(c);
                         for (std::size_t i = 0; i < r; ++i) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double d = g[i * c + j] * gv[j];
                             mean_d += d;
                             mean_dx += d * xhat[i * c + j];
                           }
                           mean_d *= inv_c;
                           mean_dx *= inv_c;
                           for (std::size_t j = 0; j < c; ++j) {
                             const double d = g[i * c + j] * gv[j];
                             (*gx)[i * c + j] += rstd[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x) {
  if (!x.defined() || x.size() == 0) throw InvalidInputError("softmax: empty input");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  kernels::softmax_rows_serial(r, c, x.values(), out);
  return make_result(x.shape(), std::move(out), {&x}, [r, c](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self.value.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += y[j] * (g[j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (!x.defined() || x.size() == 0) throw InvalidInputError("log_softmax: empty input");
  const std::size_t r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {&x}, [r, c](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*gx)[i * c + j] += self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gs;
        }
      }
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw InvalidInputError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: width " + std::to_string(p.cols()) + " vs " + std::to_string(c));
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result_n({total, c}, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t n = self.inputs[k]->value.size();
      if (auto* gk = grad_of(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*gk)[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || begin + count > r) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                     std::to_string(r) + " rows");
  }
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return make_result({count, c}, std::move(out), {&x}, [begin, c](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[begin * c + i] += self.grad[i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw InvalidInputError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * total + offset + j] = pv[i * pc + j];
    offset += pc;
  }
  return make_result_n({r, total}, std::move(out), parts, [r, total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t pc = self.inputs[k]->shape.back();
      if (auto* gk = grad_of(self, k)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) (*gk)[i * pc + j] += self.grad[i * total + offset + j];
      }
      offset += pc;
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || begin + count > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                     std::to_string(c) + " cols");
  }
  auto xv = x.values();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = xv[i * c + begin + j];
  return make_result({r, count}, std::move(out), {&x}, [r, c, begin, count](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) (*gx)[i * c + begin + j] += self.grad[i * count + j];
    }
  });
}

Tensor select(const Tensor& x, std::size_t index) {
  if (x.rank() < 2) throw ShapeError("select: needs rank >= 2, got " + shape_string(x.shape()));
  if (index >= x.dim(0)) {
    throw ShapeError("select: index " + std::to_string(index) + " out of " + shape_string(x.shape()));
  }
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = shape_size(inner);
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(index * n),
                          xv.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return make_result(std::move(inner), std::move(out), {&x}, [index, n](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*gx)[index * n + i] += self.grad[i];
    }
  });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw InvalidInputError("stack: no inputs");
  const Shape& inner = parts[0].shape();
  std::vector<double> out;
  out.reserve(parts.size() * shape_size(inner));
  for (const Tensor& p : parts) {
    if (p.shape() != inner) throw ShapeError("stack: " + shape_string(p.shape()) + " vs " + shape_string(inner));
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return make_result_n(std::move(shape), std::move(out), parts, [](Node& self) {
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (auto* gk = grad_of(self, k)) {
        for (std::size_t i = 0; i < n; ++i) (*gk)[i] += self.grad[k * n + i];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {&x}, [](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {&x}, [](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (double& g : *gx) g += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor l2_normalize_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(r * c);
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / norms[i];
  }
  return make_result(x.shape(), std::move(out), {&x}, [r, c, norms = std::move(norms)](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self.value.data() + i * c;
        const double* g = self.grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += (g[j] - y[j] * dot) / norms[i];
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.empty()) throw InvalidInputError("cross_entropy: empty batch");
  if (labels.size() != r) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(r) + " rows");
  }
  std::vector<int> owned(labels.begin(), labels.end());
  for (int y : owned) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw InvalidInputError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  std::vector<double> probs(r * c);
  kernels::softmax_rows_serial(r, c, logits.values(), probs);
  auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = lv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    loss += mx + std::log(s) - row[owned[i]];
  }
  loss /= static_cast<double>(r);
  return make_result({1}, {loss}, {&logits},
                     [r, c, owned = std::move(owned), probs = std::move(probs)](Node& self) {
                       if (auto* gx = grad_of(self, 0)) {
                         const double s = self.grad[0] / static_cast<double>(r);
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             const double onehot = static_cast<int>(j) == owned[i] ? 1.0 : 0.0;
                             (*gx)[i * c + j] += s * (probs[i * c + j] - onehot);
                           }
                         }
                       }
                     });
}

}  // namespace mudpt::ops

namespace mudpt {

void AttentionParams::validate() const {
  if (!query.defined() || !key.defined() || !value.defined() || !output.defined()) {
    throw ShapeError("attention: projection missing");
  }
  if (heads == 0) throw ShapeError("attention: head count must be positive");
  const std::size_t w = query.rank() == 2 ? query.dim(0) : 0;
  for (const Tensor* t : {&query, &key, &value, &output}) {
    if (t->rank() != 2 || t->dim(0) != w || t->dim(1) != w) {
      throw ShapeError("attention: projections must be square and equal, got " + shape_string(t->shape()));
    }
  }
  if (w % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(w) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
}

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                            const AttentionParams& params) {
  params.validate();
  const std::size_t w = params.width();
  if (queries.cols() != w || keys.cols() != w || values.cols() != w) {
    throw ShapeError("attention: input widths must equal " + std::to_string(w));
  }
  if (keys.rows() != values.rows()) throw ShapeError("attention: key and value sequences differ in length");

  const Tensor q = ops::matmul(queries, params.query);
  const Tensor k = ops::matmul(keys, params.key);
  const Tensor v = ops::matmul(values, params.value);
  const std::size_t hw = params.head_width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hw));

  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    const bool whole = params.heads == 1;
    const Tensor qh = whole ? q : ops::slice_cols(q, h * hw, hw);
    const Tensor kh = whole ? k : ops::slice_cols(k, h * hw, hw);
    const Tensor vh = whole ? v : ops::slice_cols(v, h * hw, hw);
    const Tensor weights = ops::softmax(ops::scale(ops::matmul_nt(qh, kh), scale));
    heads.push_back(ops::matmul(weights, vh));
  }
  const Tensor merged = heads.size() == 1 ? heads[0] : ops::concat_cols(heads);
  return ops::matmul(merged, params.output);
}

}  // namespace mudpt
