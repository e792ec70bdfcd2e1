#include "effecg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "effecg/parallel.hpp"

namespace effecg {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

std::vector<double> copy_values(const Tensor& t) {
  auto v = t.values();
  return {v.begin(), v.end()};
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Elementwise unary op given value and derivative as functions of x.
template <class F, class D>
Tensor unary(const char* name, const Tensor& x, F f, D df) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return record_op(name, x.shape(), std::move(out), {x},
                   [x, df](std::span<const double> g, std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     auto xv = x.values();
                     for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * df(xv[i]);
                   });
}

std::size_t outer_of(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

std::size_t inner_of(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return record_op("add", a.shape(), std::move(out), {a, b},
                   [](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (auto slot : gin) {
                       for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return record_op("sub", a.shape(), std::move(out), {a, b},
                   [](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                     for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] -= g[i];
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return record_op("mul", a.shape(), std::move(out), {a, b},
                   [a, b](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto av = a.values();
                     auto bv = b.values();
                     for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * bv[i];
                     for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] += g[i] * av[i];
                   });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double v) {
                 const double t = std::tanh(v);
                 return 1.0 - t * t;
               });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

Tensor swish(const Tensor& x) {
  return unary("swish", x, [](double v) { return v * stable_sigmoid(v); },
               [](double v) {
                 const double s = stable_sigmoid(v);
                 return s + v * s * (1.0 - s);
               });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return record_op("sum", Shape{}, {s}, {x},
                   [](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (auto& v : gin[0]) v += g[0];
                   });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw std::invalid_argument("global_avg_pool expects [C x N] or [B x C x N], got " +
                                shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  if (n == 0) throw std::invalid_argument("global_avg_pool over an empty time axis");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = shape_numel(out_shape);
  auto xv = x.values();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < n; ++t) s += xv[r * n + t];
    out[r] = s / static_cast<double>(n);
  }
  return record_op("global_avg_pool", std::move(out_shape), std::move(out), {x},
                   [n](std::span<const double> g, std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     const double inv = 1.0 / static_cast<double>(n);
                     for (std::size_t r = 0; r < g.size(); ++r) {
                       for (std::size_t t = 0; t < n; ++t) gin[0][r * n + t] += g[r] * inv;
                     }
                   });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw std::invalid_argument("softmax axis out of range");
  const std::size_t outer = outer_of(s, axis);
  const std::size_t dim = s[axis];
  const std::size_t inner = inner_of(s, axis);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * dim * inner + in;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < dim; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < dim; ++k) out[base + k * inner] /= z;
    }
  }
  auto y = out;
  return record_op("softmax", s, std::move(out), {x},
                   [y = std::move(y), outer, dim, inner](std::span<const double> g,
                                                         std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t in = 0; in < inner; ++in) {
                         const std::size_t base = o * dim * inner + in;
                         double dot = 0.0;
                         for (std::size_t k = 0; k < dim; ++k) {
                           dot += g[base + k * inner] * y[base + k * inner];
                         }
                         for (std::size_t k = 0; k < dim; ++k) {
                           const std::size_t i = base + k * inner;
                           gin[0][i] += y[i] * (g[i] - dot);
                         }
                       }
                     }
                   });
}

namespace {

// c[M x P] += a[M x K] * b[K x P], all row-major.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double aij = a[i * k + j];
      if (aij == 0.0) continue;
      const double* brow = b + j * p;
      double* crow = c + i * p;
      for (std::size_t q = 0; q < p; ++q) crow[q] += aij * brow[q];
    }
  }
}

// c[M x K] += g[M x P] * b[K x P]^T
void gemm_acc_bt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) s += g[i * p + q] * b[j * p + q];
      c[i * k + j] += s;
    }
  }
}

// c[K x P] += a[M x K]^T * g[M x P]
void gemm_acc_at(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                 std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double aij = a[i * k + j];
      if (aij == 0.0) continue;
      for (std::size_t q = 0; q < p; ++q) c[j * p + q] += aij * g[i * p + q];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul inner extent mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, p);
  return record_op("matmul", Shape{m, p}, std::move(out), {a, b},
                   [a, b, m, k, p](std::span<const double> g,
                                   std::span<const std::span<double>> gin) {
                     if (!gin[0].empty()) gemm_acc_bt(g.data(), b.values().data(), gin[0].data(), m, k, p);
                     if (!gin[1].empty()) gemm_acc_at(a.values().data(), g.data(), gin[1].data(), m, k, p);
                   });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw std::invalid_argument("batched_matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(2);
  std::vector<double> out(bs * m * p, 0.0);
  for (std::size_t i = 0; i < bs; ++i) {
    gemm_acc(a.values().data() + i * m * k, b.values().data() + i * k * p, out.data() + i * m * p,
             m, k, p);
  }
  return record_op("batched_matmul", Shape{bs, m, p}, std::move(out), {a, b},
                   [a, b, bs, m, k, p](std::span<const double> g,
                                       std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < bs; ++i) {
                       const double* gi = g.data() + i * m * p;
                       if (!gin[0].empty()) {
                         gemm_acc_bt(gi, b.values().data() + i * k * p, gin[0].data() + i * m * k,
                                     m, k, p);
                       }
                       if (!gin[1].empty()) {
                         gemm_acc_at(a.values().data() + i * m * k, gi, gin[1].data() + i * k * p,
                                     m, k, p);
                       }
                     }
                   });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw std::invalid_argument("transpose expects rank 2 or 3, got " + shape_str(x.shape()));
  }
  const std::size_t bs = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t m = x.shape()[x.rank() - 2];
  const std::size_t n = x.shape()[x.rank() - 1];
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < bs; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    }
  }
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  return record_op("transpose", std::move(s), std::move(out), {x},
                   [bs, m, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     for (std::size_t b = 0; b < bs; ++b) {
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t j = 0; j < n; ++j) {
                           gin[0][b * m * n + i * n + j] += g[b * m * n + j * m + i];
                         }
                       }
                     }
                   });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  return record_op("reshape", std::move(shape), copy_values(x), {x},
                   [](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                   });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw std::invalid_argument("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw std::invalid_argument("concat extent mismatch: " + shape_str(first) + " vs " +
                                  shape_str(s) + " along axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const std::size_t outer = outer_of(first, axis);
  const std::size_t inner = inner_of(first, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t d = p.shape()[axis];
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * d * inner, d * inner, out.begin() + (o * total + off) * inner);
    }
    off += d;
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[axis]);
  return record_op("concat", std::move(out_shape), std::move(out), parts,
                   [outer, inner, total, offsets, extents](std::span<const double> g,
                                                           std::span<const std::span<double>> gin) {
                     for (std::size_t k = 0; k < gin.size(); ++k) {
                       if (gin[k].empty()) continue;
                       const std::size_t d = extents[k];
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < d * inner; ++i) {
                           gin[k][o * d * inner + i] += g[(o * total + offsets[k]) * inner + i];
                         }
                       }
                     }
                   });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw std::invalid_argument("slice [" + std::to_string(start) + ", " +
                                std::to_string(start + length) + ") out of range for " +
                                shape_str(s) + " axis " + std::to_string(axis));
  }
  const std::size_t outer = outer_of(s, axis);
  const std::size_t inner = inner_of(s, axis);
  const std::size_t d = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  auto xv = x.values();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + (o * d + start) * inner, length * inner,
                out.begin() + o * length * inner);
  }
  return record_op("slice", std::move(out_shape), std::move(out), {x},
                   [outer, inner, d, start, length](std::span<const double> g,
                                                    std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t i = 0; i < length * inner; ++i) {
                         gin[0][(o * d + start) * inner + i] += g[o * length * inner + i];
                       }
                     }
                   });
}

Tensor add_bias(const Tensor& x, const Tensor& b, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || b.rank() != 1 || b.dim(0) != s[axis]) {
    throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " does not match axis " +
                                std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t d = s[axis];
  const std::size_t inner = inner_of(s, axis);
  auto xv = x.values();
  auto bv = b.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[(i / inner) % d];
  return record_op("add_bias", s, std::move(out), {x, b},
                   [d, inner](std::span<const double> g, std::span<const std::span<double>> gin) {
                     for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                     if (!gin[1].empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[1][(i / inner) % d] += g[i];
                     }
                   });
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  if (x.rank() < 1 || s.shape() != Shape(x.shape().begin(), x.shape().end() - 1)) {
    throw std::invalid_argument("channel_scale: scale " + shape_str(s.shape()) +
                                " must equal the leading axes of " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  auto xv = x.values();
  auto sv = s.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv[i / n];
  return record_op("channel_scale", x.shape(), std::move(out), {x, s},
                   [x, s, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto xv = x.values();
                     auto sv = s.values();
                     for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * sv[i / n];
                     if (!gin[1].empty()) {
                       for (std::size_t i = 0; i < g.size(); ++i) gin[1][i / n] += g[i] * xv[i];
                     }
                   });
}

Tensor row_select(const std::vector<bool>& take_a, const Tensor& a, const Tensor& b) {
  require_same_shape("row_select", a, b);
  if (a.rank() < 1 || a.dim(0) != take_a.size()) {
    throw std::invalid_argument("row_select: selector length " + std::to_string(take_a.size()) +
                                " vs rows of " + shape_str(a.shape()));
  }
  const std::size_t rows = take_a.size();
  const std::size_t width = rows ? a.numel() / rows : 0;
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& src = take_a[r] ? av : bv;
    std::copy_n(src.begin() + r * width, width, out.begin() + r * width);
  }
  return record_op("row_select", a.shape(), std::move(out), {a, b},
                   [take_a, width](std::span<const double> g,
                                   std::span<const std::span<double>> gin) {
                     for (std::size_t r = 0; r < take_a.size(); ++r) {
                       auto dst = take_a[r] ? gin[0] : gin[1];
                       if (dst.empty()) continue;
                       for (std::size_t i = 0; i < width; ++i) dst[r * width + i] += g[r * width + i];
                     }
                   });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& rows) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows expects a [V x D] table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (auto r : rows) {
    if (r >= v) {
      throw std::out_of_range("row index " + std::to_string(r) + " out of range for table of " +
                              std::to_string(v) + " rows");
    }
  }
  auto tv = table.values();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(tv.begin() + rows[i] * d, d, out.begin() + i * d);
  }
  return record_op("gather_rows", Shape{rows.size(), d}, std::move(out), {table},
                   [rows, d](std::span<const double> g, std::span<const std::span<double>> gin) {
                     if (gin[0].empty()) return;
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       for (std::size_t j = 0; j < d; ++j) gin[0][rows[i] * d + j] += g[i * d + j];
                     }
                   });
}

ConvGeometry conv_geometry(std::size_t length, std::size_t kernel, std::size_t stride,
                           Padding padding) {
  if (stride == 0) throw std::invalid_argument("convolution stride must be positive");
  if (kernel == 0) throw std::invalid_argument("convolution kernel must be non-empty");
  ConvGeometry geo;
  if (padding == Padding::same) {
    const std::size_t out = (length + stride - 1) / stride;
    const std::size_t needed = out == 0 ? 0 : (out - 1) * stride + kernel;
    const std::size_t total = needed > length ? needed - length : 0;
    geo.pad_left = total / 2;
    geo.pad_right = total - geo.pad_left;
  }
  const std::size_t padded = length + geo.pad_left + geo.pad_right;
  if (kernel > padded) {
    throw std::invalid_argument("kernel of " + std::to_string(kernel) +
                                " taps exceeds padded input length " + std::to_string(padded));
  }
  geo.out_length = (padded - kernel) / stride + 1;
  return geo;
}

namespace {

struct ConvDims {
  std::size_t batch;
  std::size_t channels;
  std::size_t length;
  bool batched;
};

ConvDims conv_dims(const char* op, const Tensor& input) {
  if (input.rank() == 2) return {1, input.dim(0), input.dim(1), false};
  if (input.rank() == 3) return {input.dim(0), input.dim(1), input.dim(2), true};
  throw std::invalid_argument(std::string(op) + " expects [C x N] or [B x C x N] input, got " +
                              shape_str(input.shape()));
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride, Padding padding) {
  const auto dims = conv_dims("conv1d", input);
  if (kernels.rank() != 3) {
    throw std::invalid_argument("conv1d kernels must be [C_out x C_in x K], got " +
                                shape_str(kernels.shape()));
  }
  const std::size_t cout = kernels.dim(0), cin = kernels.dim(1), k = kernels.dim(2);
  if (cin != dims.channels) {
    throw std::invalid_argument("conv1d: kernels expect " + std::to_string(cin) +
                                " input channels but input " + shape_str(input.shape()) + " has " +
                                std::to_string(dims.channels));
  }
  const auto geo = conv_geometry(dims.length, k, stride, padding);
  const std::size_t n = dims.length, nout = geo.out_length, bs = dims.batch;
  const long left = static_cast<long>(geo.pad_left);
  std::vector<double> out(bs * cout * nout, 0.0);
  {
    const double* x = input.values().data();
    const double* w = kernels.values().data();
    parallel_for(bs, [&](std::size_t b) {
      for (std::size_t co = 0; co < cout; ++co) {
        double* orow = out.data() + (b * cout + co) * nout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* xrow = x + (b * cin + ci) * n;
          const double* wrow = w + (co * cin + ci) * k;
          for (std::size_t t = 0; t < nout; ++t) {
            const long base = static_cast<long>(t * stride) - left;
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
              const long pos = base + static_cast<long>(j);
              if (pos >= 0 && pos < static_cast<long>(n)) s += wrow[j] * xrow[pos];
            }
            orow[t] += s;
          }
        }
      }
    });
  }
  Shape out_shape = dims.batched ? Shape{bs, cout, nout} : Shape{cout, nout};
  return record_op(
      "conv1d", std::move(out_shape), std::move(out), {input, kernels},
      [input, kernels, bs, cin, cout, k, n, nout, stride, left](
          std::span<const double> g, std::span<const std::span<double>> gin) {
        const double* x = input.values().data();
        const double* w = kernels.values().data();
        auto gx = gin[0];
        auto gw = gin[1];
        // Kernel gradients are reduced per sample and summed in batch order.
        std::vector<std::vector<double>> partial(gw.empty() ? 0 : bs);
        parallel_for(bs, [&](std::size_t b) {
          if (!gw.empty()) partial[b].assign(gw.size(), 0.0);
          for (std::size_t co = 0; co < cout; ++co) {
            const double* grow = g.data() + (b * cout + co) * nout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* xrow = x + (b * cin + ci) * n;
              const double* wrow = w + (co * cin + ci) * k;
              for (std::size_t t = 0; t < nout; ++t) {
                const double gt = grow[t];
                if (gt == 0.0) continue;
                const long base = static_cast<long>(t * stride) - left;
                for (std::size_t j = 0; j < k; ++j) {
                  const long pos = base + static_cast<long>(j);
                  if (pos < 0 || pos >= static_cast<long>(n)) continue;
                  if (!gx.empty()) gx[(b * cin + ci) * n + pos] += gt * wrow[j];
                  if (!gw.empty()) partial[b][(co * cin + ci) * k + j] += gt * xrow[pos];
                }
              }
            }
          }
        });
        for (const auto& p : partial) {
          for (std::size_t i = 0; i < p.size(); ++i) gw[i] += p[i];
        }
      });
}

Tensor depthwise_conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride,
                        Padding padding) {
  const auto dims = conv_dims("depthwise_conv1d", input);
  if (kernels.rank() != 2 || kernels.dim(0) != dims.channels) {
    throw std::invalid_argument("depthwise_conv1d: kernels " + shape_str(kernels.shape()) +
                                " must be [C x K] with C = " + std::to_string(dims.channels));
  }
  const std::size_t c = dims.channels, k = kernels.dim(1), n = dims.length, bs = dims.batch;
  const auto geo = conv_geometry(n, k, stride, padding);
  const std::size_t nout = geo.out_length;
  const long left = static_cast<long>(geo.pad_left);
  std::vector<double> out(bs * c * nout, 0.0);
  {
    const double* x = input.values().data();
    const double* w = kernels.values().data();
    parallel_for(bs, [&](std::size_t b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xrow = x + (b * c + ch) * n;
        const double* wrow = w + ch * k;
        double* orow = out.data() + (b * c + ch) * nout;
        for (std::size_t t = 0; t < nout; ++t) {
          const long base = static_cast<long>(t * stride) - left;
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) {
            const long pos = base + static_cast<long>(j);
            if (pos >= 0 && pos < static_cast<long>(n)) s += wrow[j] * xrow[pos];
          }
          orow[t] = s;
        }
      }
    });
  }
  Shape out_shape = dims.batched ? Shape{bs, c, nout} : Shape{c, nout};
  return record_op(
      "depthwise_conv1d", std::move(out_shape), std::move(out), {input, kernels},
      [input, kernels, bs, c, k, n, nout, stride, left](std::span<const double> g,
                                                        std::span<const std::span<double>> gin) {
        const double* x = input.values().data();
        const double* w = kernels.values().data();
        auto gx = gin[0];
        auto gw = gin[1];
        std::vector<std::vector<double>> partial(gw.empty() ? 0 : bs);
        parallel_for(bs, [&](std::size_t b) {
          if (!gw.empty()) partial[b].assign(gw.size(), 0.0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* xrow = x + (b * c + ch) * n;
            const double* wrow = w + ch * k;
            const double* grow = g.data() + (b * c + ch) * nout;
            for (std::size_t t = 0; t < nout; ++t) {
              const double gt = grow[t];
              if (gt == 0.0) continue;
              const long base = static_cast<long>(t * stride) - left;
              for (std::size_t j = 0; j < k; ++j) {
                const long pos = base + static_cast<long>(j);
                if (pos < 0 || pos >= static_cast<long>(n)) continue;
                if (!gx.empty()) gx[(b * c + ch) * n + pos] += gt * wrow[j];
                if (!gw.empty()) partial[b][ch * k + j] += gt * xrow[pos];
              }
            }
          }
        });
        for (const auto& p : partial) {
          for (std::size_t i = 0; i < p.size(); ++i) gw[i] += p[i];
        }
      });
}

namespace {

struct NormDims {
  std::size_t batch;
  std::size_t channels;
  std::size_t length;
};

NormDims norm_dims(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  NormDims d{};
  if (x.rank() == 3) {
    d = {x.dim(0), x.dim(1), x.dim(2)};
  } else if (x.rank() == 2) {
    d = {x.dim(0), x.dim(1), 1};
  } else {
    throw std::invalid_argument("batch norm expects [B x C x N] or [B x C], got " +
                                shape_str(x.shape()));
  }
  if (gamma.shape() != Shape{d.channels} || beta.shape() != Shape{d.channels}) {
    throw std::invalid_argument("batch norm scale/shift must be [" + std::to_string(d.channels) +
                                "]");
  }
  return d;
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  const auto d = norm_dims(x, gamma, beta);
  if (d.batch < 2) {
    throw std::invalid_argument("batch norm in train mode needs a batch of at least 2, got " +
                                std::to_string(d.batch));
  }
  const std::size_t bs = d.batch, c = d.channels, n = d.length;
  const double count = static_cast<double>(bs * n);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0), inv_std(c);
  for (std::size_t b = 0; b < bs; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t t = 0; t < n; ++t) mu[ch] += xv[(b * c + ch) * n + t];
    }
  }
  for (auto& m : mu) m /= count;
  for (std::size_t b = 0; b < bs; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t t = 0; t < n; ++t) {
        const double dv = xv[(b * c + ch) * n + t] - mu[ch];
        var[ch] += dv * dv;
      }
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    var[ch] /= count;
    inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
  }
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t ch = (i / n) % c;
    xhat[i] = (xv[i] - mu[ch]) * inv_std[ch];
    out[i] = gv[ch] * xhat[i] + bv[ch];
  }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return record_op(
      "batch_norm_train", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std, c, n, count](
          std::span<const double> g, std::span<const std::span<double>> gin) {
        auto gv = gamma.values();
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ch = (i / n) % c;
          sum_g[ch] += g[i];
          sum_gx[ch] += g[i] * xhat[i];
        }
        if (!gin[0].empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ch = (i / n) % c;
            gin[0][i] += gv[ch] * inv_std[ch] / count *
                         (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
          }
        }
        if (!gin[1].empty()) {
          for (std::size_t ch = 0; ch < c; ++ch) gin[1][ch] += sum_gx[ch];
        }
        if (!gin[2].empty()) {
          for (std::size_t ch = 0; ch < c; ++ch) gin[2][ch] += sum_g[ch];
        }
      });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const std::vector<double>& running_mean,
                       const std::vector<double>& running_var, double eps) {
  const auto d = norm_dims(x, gamma, beta);
  const std::size_t c = d.channels, n = d.length;
  if (running_mean.size() != c || running_var.size() != c) {
    throw std::invalid_argument("batch norm running statistics do not match channel count");
  }
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t ch = (i / n) % c;
    xhat[i] = (xv[i] - running_mean[ch]) * inv_std[ch];
    out[i] = gv[ch] * xhat[i] + bv[ch];
  }
  return record_op("batch_norm_eval", x.shape(), std::move(out), {x, gamma, beta},
                   [gamma, xhat = std::move(xhat), inv_std, c, n](
                       std::span<const double> g, std::span<const std::span<double>> gin) {
                     auto gv = gamma.values();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const std::size_t ch = (i / n) % c;
                       if (!gin[0].empty()) gin[0][i] += g[i] * gv[ch] * inv_std[ch];
                       if (!gin[1].empty()) gin[1][ch] += g[i] * xhat[i];
                       if (!gin[2].empty()) gin[2][ch] += g[i];
                     }
                   });
}

}  // namespace effecg
