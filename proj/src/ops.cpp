// SPDX-License-Identifier: Apache-2.0
#include "dimple/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dimple/errors.hpp"

namespace dimple {

using detail::make_result;
using detail::Node;

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_to_string(t.shape()));
  }
}

// Resolves the result shape of a binary elementwise op with scalar broadcast.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()) + " do not match");
}

// Accumulates d(out)/d(operand) * g into an operand that may be broadcast.
template <typename F>
void accumulate_operand(Node& operand, std::size_t n, F&& contribution) {
  if (!operand.requires_grad) return;
  auto& g = operand.grad_buffer();
  if (operand.data.size() == n) {
    for (std::size_t i = 0; i < n; ++i) g[i] += contribution(i);
  } else {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += contribution(i);
    g[0] += total;
  }
}

inline double value_at(const Node& node, std::size_t i) { return node.data.size() == 1 ? node.data[0] : node.data[i]; }
inline double value_at(const Tensor& t, std::size_t i) { return t.numel() == 1 ? t.data()[0] : t.data()[i]; }

template <typename F, typename B>
Tensor unary(const char* op, const Tensor& x, F&& forward, B backward) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [backward](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * backward(xn.data[i], self.data[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ for shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ad[i * k + t];
      const double* brow = bd.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return make_result("matmul", {m, n}, std::move(c), {a, b}, [m, k, n](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    const double* g = self.grad.data();
    if (an.requires_grad) {
      auto& ga = an.grad_buffer();  // dA = dC B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          const double* brow = bn.data.data() + t * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + t] += acc;
        }
      }
    }
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();  // dB = A^T dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = an.data[i * k + t];
          double* gbrow = gb.data() + t * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {a}, [m, n](Node& self) {
    Node& an = *self.parents[0];
    if (!an.requires_grad) return;
    auto& g = an.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a, b, "add");
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = value_at(a, i) + value_at(b, i);
  return make_result("add", std::move(shape), std::move(out), {a, b}, [n](Node& self) {
    accumulate_operand(*self.parents[0], n, [&](std::size_t i) { return self.grad[i]; });
    accumulate_operand(*self.parents[1], n, [&](std::size_t i) { return self.grad[i]; });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a, b, "sub");
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = value_at(a, i) - value_at(b, i);
  return make_result("sub", std::move(shape), std::move(out), {a, b}, [n](Node& self) {
    accumulate_operand(*self.parents[0], n, [&](std::size_t i) { return self.grad[i]; });
    accumulate_operand(*self.parents[1], n, [&](std::size_t i) { return -self.grad[i]; });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a, b, "mul");
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = value_at(a, i) * value_at(b, i);
  return make_result("mul", std::move(shape), std::move(out), {a, b}, [n](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    accumulate_operand(an, n, [&](std::size_t i) { return self.grad[i] * value_at(bn, i); });
    accumulate_operand(bn, n, [&](std::size_t i) { return self.grad[i] * value_at(an, i); });
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape shape = broadcast_shape(a, b, "div");
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double denom = value_at(b, i);
    if (denom == 0.0) throw DomainError("div: division by zero at element " + std::to_string(i));
    out[i] = value_at(a, i) / denom;
  }
  return make_result("div", std::move(shape), std::move(out), {a, b}, [n](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    accumulate_operand(an, n, [&](std::size_t i) { return self.grad[i] / value_at(bn, i); });
    accumulate_operand(bn, n, [&](std::size_t i) {
      const double d = value_at(bn, i);
      return -self.grad[i] * value_at(an, i) / (d * d);
    });
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      "add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  for (double v : x.data()) {
    if (!std::isfinite(std::exp(v))) throw DomainError("exp: overflow at input " + std::to_string(v));
  }
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v, double) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum", Shape{}, {total}, {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.dim());
  if (rank == 0) throw DimensionError("softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range for " + shape_to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.shape()[axis];
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (int d = axis + 1; d < rank; ++d) inner *= x.shape()[d];

  auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        out[base + j * inner] = std::exp(in[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [outer, inner, n](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.dim() == 0) throw DimensionError("log_softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto in = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [rows, n](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = r * n + j;
        g[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta shapes " + shape_to_string(gamma.shape()) + ", " +
                         shape_to_string(beta.shape()) + " do not match feature width " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<double> out(x.numel());
  // xhat and 1/sigma are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gm[j] * h + bt[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta}, [rows, d, xhat, inv_std](Node& self) {
    Node& xn = *self.parents[0];
    Node& gn = *self.parents[1];
    Node& bn = *self.parents[2];
    const auto& gy = self.grad;
    if (gn.requires_grad) {
      auto& gg = gn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
    }
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
    }
    if (xn.requires_grad) {
      auto& gx = xn.grad_buffer();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * gn.data[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = gy[r * d + j] * gn.data[j];
          gx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias shape " + shape_to_string(bias.shape()) + " does not match " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return make_result("add_bias", x.shape(), std::move(out), {x, bias}, [m, n](Node& self) {
    Node& xn = *self.parents[0];
    Node& bn = *self.parents[1];
    if (xn.requires_grad) {
      auto& g = xn.grad_buffer();
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  require_matrix(x, "normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto in = x.data();
  std::vector<double> out(m * n);
  auto norms = std::make_shared<std::vector<double>>(m);
  constexpr double kUnitSlack = 4.0 * std::numeric_limits<double>::epsilon();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += in[i * n + j] * in[i * n + j];
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw DegenerateProjectionError("normalize_rows: row " + std::to_string(i) + " has norm " +
                                      std::to_string(norm) + " and cannot be normalized");
    }
    (*norms)[i] = norm;
    // Rows that are already unit length up to rounding pass through unchanged,
    // which keeps re-normalization exactly idempotent.
    const bool unit = std::abs(norm - 1.0) <= kUnitSlack;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = unit ? in[i * n + j] : in[i * n + j] / norm;
  }
  return make_result("normalize_rows", x.shape(), std::move(out), {x}, [m, n, norms](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
      const double inv = 1.0 / (*norms)[i];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += inv * (self.grad[i * n + j] - self.data[i * n + j] * dot);
    }
  });
}

Tensor pick(const Tensor& x, std::span<const int> columns) {
  require_matrix(x, "pick");
  const std::size_t m = x.rows(), n = x.cols();
  if (columns.size() != m) {
    throw DimensionError("pick: " + std::to_string(columns.size()) + " indices for " + std::to_string(m) + " rows");
  }
  std::vector<int> cols(columns.begin(), columns.end());
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= n) {
      throw DimensionError("pick: index " + std::to_string(cols[i]) + " out of range [0, " + std::to_string(n) + ")");
    }
    out[i] = x.data()[i * n + cols[i]];
  }
  return make_result("pick", {m}, std::move(out), {x}, [n, cols = std::move(cols)](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < cols.size(); ++i) g[i * n + cols[i]] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const int> indices) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<int> idx(indices.begin(), indices.end());
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= m) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range [0, " +
                           std::to_string(m) + ")");
    }
    std::copy_n(x.data().begin() + idx[i] * n, n, out.begin() + i * n);
  }
  const std::size_t rows = idx.size();
  return make_result("gather_rows", {rows, n}, std::move(out), {x}, [n, idx = std::move(idx)](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  const std::size_t n = x.cols();
  if (begin >= end || end > x.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + shape_to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  return make_result("slice_rows", {end - begin, n}, std::move(out), {x}, [begin, n](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for shape " + shape_to_string(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().begin() + i * n + begin, w, out.begin() + i * w);
  return make_result("slice_cols", {m, w}, std::move(out), {x}, [m, n, w, begin](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim() != 2 || p.cols() != n) {
      throw DimensionError("concat_rows: shape " + shape_to_string(p.shape()) + " does not match width " +
                           std::to_string(n));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result("concat_rows", {total, n}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [offsets = std::move(offsets)](Node& self) {
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         Node& pn = *self.parents[p];
                         if (!pn.requires_grad) continue;
                         auto& g = pn.grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, offsets;
  for (const auto& p : parts) {
    if (p.dim() != 2 || p.rows() != m) {
      throw DimensionError("concat_cols: shape " + shape_to_string(p.shape()) + " does not match height " +
                           std::to_string(m));
    }
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto d = parts[p].data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(d.begin() + i * widths[p], widths[p], out.begin() + i * total + offsets[p]);
  }
  return make_result("concat_cols", {m, total}, std::move(out), std::vector<Tensor>(parts.begin(), parts.end()),
                     [m, total, widths = std::move(widths), offsets = std::move(offsets)](Node& self) {
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                         Node& pn = *self.parents[p];
                         if (!pn.requires_grad) continue;
                         auto& g = pn.grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < widths[p]; ++j)
                             g[i * widths[p] + j] += self.grad[i * total + offsets[p] + j];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor pairwise_sq_dists(const Tensor& x) {
  require_matrix(x, "pairwise_sq_dists");
  const std::size_t n = x.rows(), p = x.cols();
  auto in = x.data();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double diff = in[i * p + k] - in[j * p + k];
        s += diff * diff;
      }
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  }
  return make_result("pairwise_sq_dists", {n, n}, std::move(out), {x}, [n, p](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = 2.0 * (self.grad[i * n + j] + self.grad[j * n + i]);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < p; ++k) g[i * p + k] += w * (xn.data[i * p + k] - xn.data[j * p + k]);
      }
    }
  });
}

namespace {

// out = H a H for a square n×n matrix stored row-major.
std::vector<double> double_center(const double* a, std::size_t n) {
  std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += a[i * n + j];
      col_mean[j] += a[i * n + j];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    total += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
    col_mean[i] /= static_cast<double>(n);
  }
  total /= static_cast<double>(n * n);
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] - row_mean[i] - col_mean[j] + total;
  return out;
}

}  // namespace

Tensor center_gram(const Tensor& k) {
  require_matrix(k, "center_gram");
  const std::size_t n = k.rows();
  if (k.cols() != n) throw DimensionError("center_gram: matrix must be square, got " + shape_to_string(k.shape()));
  auto out = double_center(k.data().data(), n);
  return make_result("center_gram", {n, n}, std::move(out), {k}, [n](Node& self) {
    Node& kn = *self.parents[0];
    if (!kn.requires_grad) return;
    // Centering is self-adjoint: dK = H dOut H.
    auto gk = double_center(self.grad.data(), n);
    auto& g = kn.grad_buffer();
    for (std::size_t i = 0; i < n * n; ++i) g[i] += gk[i];
  });
}


Tensor tile_rows(const Tensor& x, std::size_t times) {
  require_matrix(x, "tile_rows");
  if (times == 0) throw DimensionError("tile_rows: times must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out;
  out.reserve(times * m * n);
  for (std::size_t t = 0; t < times; ++t) out.insert(out.end(), x.data().begin(), x.data().end());
  return make_result("tile_rows", {times * m, n}, std::move(out), {x}, [times, m, n](Node& self) {
    Node& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.grad_buffer();
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[t * m * n + i];
  });
}

Tensor inject_rows(const Tensor& x, const Tensor& rows, std::size_t seq_len, std::size_t offset) {
  require_matrix(x, "inject_rows");
  require_matrix(rows, "inject_rows");
  const std::size_t n = x.cols(), r = rows.rows();
  if (rows.cols() != n) {
    throw DimensionError("inject_rows: shapes " + shape_to_string(x.shape()) + " and " +
                         shape_to_string(rows.shape()) + " differ in width");
  }
  if (seq_len == 0 || x.rows() % seq_len != 0 || offset + r > seq_len) {
    throw DimensionError("inject_rows: " + std::to_string(r) + " rows at offset " + std::to_string(offset) +
                         " do not fit sequences of length " + std::to_string(seq_len) + " in " +
                         shape_to_string(x.shape()));
  }
  const std::size_t num_seq = x.rows() / seq_len;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t s = 0; s < num_seq; ++s)
    std::copy(rows.data().begin(), rows.data().end(), out.begin() + (s * seq_len + offset) * n);
  return make_result("inject_rows", x.shape(), std::move(out), {x, rows},
                     [num_seq, seq_len, offset, r, n](Node& self) {
                       Node& xn = *self.parents[0];
                       Node& rn = *self.parents[1];
                       if (xn.requires_grad) {
                         auto& g = xn.grad_buffer();
                         for (std::size_t s = 0; s < num_seq; ++s) {
                           for (std::size_t i = 0; i < seq_len; ++i) {
                             if (i >= offset && i < offset + r) continue;
                             const std::size_t row = s * seq_len + i;
                             for (std::size_t j = 0; j < n; ++j) g[row * n + j] += self.grad[row * n + j];
                           }
                         }
                       }
                       if (rn.requires_grad) {
                         auto& g = rn.grad_buffer();
                         for (std::size_t s = 0; s < num_seq; ++s)
                           for (std::size_t i = 0; i < r * n; ++i)
                             g[i] += self.grad[(s * seq_len + offset) * n + i];
                       }
                     });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                            std::size_t num_heads) {
  require_matrix(q, "multi_head_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("multi_head_attention: q/k/v shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()) + " differ");
  }
  const std::size_t d = q.cols();
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  if (seq_len == 0 || q.rows() % seq_len != 0) {
    throw DimensionError("multi_head_attention: " + std::to_string(q.rows()) + " rows are not a multiple of " +
                         std::to_string(seq_len));
  }
  const std::size_t num_seq = q.rows() / seq_len, dh = d / num_heads, T = seq_len;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data(), kd = k.data(), vd = v.data();
  // Attention weights per (sequence, head), kept for the backward pass.
  auto weights = std::make_shared<std::vector<double>>(num_seq * num_heads * T * T);
  std::vector<double> out(q.numel(), 0.0);
  for (std::size_t s = 0; s < num_seq; ++s) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      double* a = weights->data() + (s * num_heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = qd.data() + (s * T + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          const double* kj = kd.data() + (s * T + j) * d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          a[i * T + j] = dot * inv_sqrt;
          mx = std::max(mx, a[i * T + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          a[i * T + j] = std::exp(a[i * T + j] - mx);
          z += a[i * T + j];
        }
        double* oi = out.data() + (s * T + i) * d + h * dh;
        for (std::size_t j = 0; j < T; ++j) {
          a[i * T + j] /= z;
          const double* vj = vd.data() + (s * T + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += a[i * T + j] * vj[c];
        }
      }
    }
  }
  return make_result(
      "multi_head_attention", q.shape(), std::move(out), {q, k, v},
      [num_seq, num_heads, T, d, dh, inv_sqrt, weights](Node& self) {
        Node& qn = *self.parents[0];
        Node& kn = *self.parents[1];
        Node& vn = *self.parents[2];
        std::vector<double>* gq = qn.requires_grad ? &qn.grad_buffer() : nullptr;
        std::vector<double>* gk = kn.requires_grad ? &kn.grad_buffer() : nullptr;
        std::vector<double>* gv = vn.requires_grad ? &vn.grad_buffer() : nullptr;
        std::vector<double> da(T * T);
        for (std::size_t s = 0; s < num_seq; ++s) {
          for (std::size_t h = 0; h < num_heads; ++h) {
            const double* a = weights->data() + (s * num_heads + h) * T * T;
            // dA = dO V^T ; dV = A^T dO
            for (std::size_t i = 0; i < T; ++i) {
              const double* goi = self.grad.data() + (s * T + i) * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double* vj = vn.data.data() + (s * T + j) * d + h * dh;
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += goi[c] * vj[c];
                da[i * T + j] = dot;
                if (gv) {
                  double* gvj = gv->data() + (s * T + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += a[i * T + j] * goi[c];
                }
              }
            }
            // dS = A * (dA - rowsum(dA * A)), then back through the scaled dot products.
            for (std::size_t i = 0; i < T; ++i) {
              double rs = 0.0;
              for (std::size_t j = 0; j < T; ++j) rs += da[i * T + j] * a[i * T + j];
              const double* qi = qn.data.data() + (s * T + i) * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double ds = a[i * T + j] * (da[i * T + j] - rs) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* kj = kn.data.data() + (s * T + j) * d + h * dh;
                if (gq) {
                  double* gqi = gq->data() + (s * T + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk->data() + (s * T + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace dimple
