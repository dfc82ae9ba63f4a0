#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "relook/error.hpp"
#include "relook/tensor.hpp"

namespace relook {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

/// Reverse-mode tape. Values are appended in execution order, so every op's
/// inputs precede it and a single reverse sweep visits each op once.
///
/// Leaves created with `leaf(param)` copy the parameter value; on backward the
/// accumulated gradient is added into `param.grad()` when the parameter
/// requires grad. A tape is single-use and single-threaded.
template <typename T = float>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T>& param) {
    Node n;
    n.value = Tensor<T>(param.shape(), param.values());
    n.needs_grad = param.requires_grad();
    n.param = &param;
    return push(std::move(n));
  }

  Var constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Records an op output. `backward` is invoked with the op's node index once
  /// its output gradient is complete.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (Var v : inputs) n.needs_grad = n.needs_grad || nodes_.at(v.id).needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (Var v : inputs) n.needs_grad = n.needs_grad || nodes_.at(v.id).needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated on first use.
  std::span<T> grad(Var v) { return grad(v.id); }
  std::span<T> grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss) {
    if (backward_done_) throw Error("backward already ran on this tape");
    const Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw DimensionError("backward requires a scalar root, got shape " +
                           shape_str(root.value.shape()));
    }
    backward_done_ = true;
    grad(loss)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, id);
      } else if (n.param != nullptr) {
        auto dst = n.param->grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Tensor<T>* param = nullptr;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

/// c = a * b for a[MxK], b[KxN].
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(av.shape()) + " * " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernels::matmul_nn<T>(av.data(), bv.data(), out.data(), m, k, n);
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    std::vector<T> g(t.grad(self).begin(), t.grad(self).end());
    if (t.needs_grad(a)) {
      std::vector<T> da(m * k);
      kernels::matmul_nt<T>(g, t.value(b).data(), da, m, n, k);
      auto dst = t.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) dst[i] += da[i];
    }
    if (t.needs_grad(b)) kernels::matmul_tn_acc<T>(t.value(a).data(), g, t.grad(b), m, k, n);
  });
}

/// c = a * b^T for a[MxK], b[NxK].
template <typename T>
Var matmul_nt(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(av.shape()) + " * " +
                         shape_str(bv.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  kernels::matmul_nt<T>(av.data(), bv.data(), out.data(), m, k, n);
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    std::vector<T> g(t.grad(self).begin(), t.grad(self).end());
    if (t.needs_grad(a)) {
      // da = g[MxN] * b[NxK]
      std::vector<T> da(m * k);
      kernels::matmul_nn<T>(g, t.value(b).data(), da, m, n, k);
      auto dst = t.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) dst[i] += da[i];
    }
    // db = g^T[NxM] * a[MxK]
    if (t.needs_grad(b)) kernels::matmul_tn_acc<T>(g, t.value(a).data(), t.grad(b), m, n, k);
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_same(av, bv, "add");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    for (Var x : {a, b}) {
      if (!t.needs_grad(x)) continue;
      auto dst = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

/// a[MxN] + bias[N] broadcast over rows.
template <typename T>
Var add_rowwise(Tape<T>& tape, Var a, Var bias) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(bias);
  if (bv.size() != av.cols()) {
    throw DimensionError("add_rowwise: bias " + shape_str(bv.shape()) + " vs " + shape_str(av.shape()));
  }
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  return tape.record(std::move(out), {a, bias}, [a, bias, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) {
      auto dst = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.needs_grad(bias)) {
      auto dst = t.grad(bias);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += g[i * n + j];
        dst[j] += static_cast<T>(s);
      }
    }
  });
}

/// Elementwise product.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  detail::require_same(av, bv, "mul");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) {
      auto dst = t.grad(a);
      const auto& other = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
    }
    if (t.needs_grad(b)) {
      auto dst = t.grad(b);
      const auto& other = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
  const auto& av = tape.value(a);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return tape.record(std::move(out), {a}, [a, s](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * s;
  });
}

template <typename T>
Var gelu(Tape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(kernels::gelu(av[i]));
  return tape.record(std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(a);
    const auto& x = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += static_cast<T>(g[i] * kernels::gelu_grad(x[i]));
  });
}

/// Row-wise layer normalization with affine gain and bias.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta) {
  const auto& xv = tape.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (tape.value(gamma).size() != n || tape.value(beta).size() != n) {
    throw DimensionError("layer_norm: affine parameters must have extent " + std::to_string(n));
  }
  Tensor<T> out(xv.shape());
  std::vector<kernels::NormStats> stats(m);
  for (std::size_t i = 0; i < m; ++i) {
    stats[i] = kernels::layer_norm_row<T>(xv.row(i), tape.value(gamma).data(), tape.value(beta).data(),
                                          out.row(i));
  }
  return tape.record(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, m, n, stats = std::move(stats)](Tape<T>& t, std::size_t self) {
                       auto g = t.grad(self);
                       const auto& xv = t.value(x);
                       const auto& gv = t.value(gamma);
                       std::vector<double> xhat(n), dxhat(n);
                       std::vector<double> dgamma(n, 0.0), dbeta(n, 0.0);
                       const bool want_x = t.needs_grad(x);
                       for (std::size_t i = 0; i < m; ++i) {
                         const auto [mean, rstd] = stats[i];
                         double sum_d = 0.0, sum_dx = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           xhat[j] = (xv[i * n + j] - mean) * rstd;
                           const double gij = g[i * n + j];
                           dgamma[j] += gij * xhat[j];
                           dbeta[j] += gij;
                           dxhat[j] = gij * gv[j];
                           sum_d += dxhat[j];
                           sum_dx += dxhat[j] * xhat[j];
                         }
                         if (want_x) {
                           auto dst = t.grad(x);
                           for (std::size_t j = 0; j < n; ++j) {
                             dst[i * n + j] += static_cast<T>(
                                 rstd * (dxhat[j] - sum_d / n - xhat[j] * sum_dx / n));
                           }
                         }
                       }
                       if (t.needs_grad(gamma)) {
                         auto dst = t.grad(gamma);
                         for (std::size_t j = 0; j < n; ++j) dst[j] += static_cast<T>(dgamma[j]);
                       }
                       if (t.needs_grad(beta)) {
                         auto dst = t.grad(beta);
                         for (std::size_t j = 0; j < n; ++j) dst[j] += static_cast<T>(dbeta[j]);
                       }
                     });
}

namespace detail {

// dx_j = y_j * (g_j - sum_k g_k y_k), scaled by `s`.
template <typename T>
void softmax_backward_row(std::span<const T> y, std::span<const T> g, std::span<T> dx,
                          std::size_t valid, double s) {
  double dot = 0.0;
  for (std::size_t j = 0; j < valid; ++j) dot += static_cast<double>(g[j]) * y[j];
  for (std::size_t j = 0; j < valid; ++j) dx[j] += static_cast<T>(s * y[j] * (g[j] - dot));
}

}  // namespace detail

/// Softmax along `axis` (0 = down columns, 1 = along rows). Rank-1 inputs
/// normalize over their single axis.
template <typename T>
Var softmax(Tape<T>& tape, Var x, int axis = -1) {
  const auto& xv = tape.value(x);
  if (xv.rank() == 1) axis = 1;
  if (axis < 0) axis += 2;
  if (axis != 0 && axis != 1) throw DimensionError("softmax: invalid axis " + std::to_string(axis));
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<T> out(xv.shape());
  if (axis == 1) {
    for (std::size_t i = 0; i < m; ++i) kernels::softmax_row<T>(xv.row(i), out.row(i), n);
  } else {
    std::vector<T> col(m), res(m);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) col[i] = xv[i * n + j];
      kernels::softmax_row<T>(col, res, m);
      for (std::size_t i = 0; i < m; ++i) out[i * n + j] = res[i];
    }
  }
  return tape.record(std::move(out), {x}, [x, axis, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(x);
    const auto& y = t.value(Var{self});
    if (axis == 1) {
      for (std::size_t i = 0; i < m; ++i) {
        detail::softmax_backward_row<T>(y.row(i), g.subspan(i * n, n), dst.subspan(i * n, n), n, 1.0);
      }
    } else {
      std::vector<T> yc(m), gc(m), dc(m);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) {
          yc[i] = y[i * n + j];
          gc[i] = g[i * n + j];
          dc[i] = T{0};
        }
        detail::softmax_backward_row<T>(yc, gc, dc, m, 1.0);
        for (std::size_t i = 0; i < m; ++i) dst[i * n + j] += dc[i];
      }
    }
  });
}

/// Row i of the result is softmax(scale * x[i, 0..i]) padded with zeros, the
/// causal attention pattern for a square score matrix.
template <typename T>
Var causal_softmax(Tape<T>& tape, Var x, double scale) {
  const auto& xv = tape.value(x);
  detail::require_matrix(xv, "causal_softmax");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (m != n) throw DimensionError("causal_softmax expects a square matrix, got " + shape_str(xv.shape()));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) kernels::softmax_row<T>(xv.row(i), out.row(i), i + 1, scale);
  return tape.record(std::move(out), {x}, [x, m, n, scale](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(x);
    const auto& y = t.value(Var{self});
    for (std::size_t i = 0; i < m; ++i) {
      detail::softmax_backward_row<T>(y.row(i), g.subspan(i * n, n), dst.subspan(i * n, n), i + 1, scale);
    }
  });
}

/// Gathers rows of `table` by id.
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::vector<int> ids) {
  const auto& tv = tape.value(table);
  detail::require_matrix(tv, "embedding");
  const std::size_t d = tv.cols();
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.rows()));
    }
    std::copy_n(tv.row(ids[i]).begin(), d, out.row(i).begin());
  }
  return tape.record(std::move(out), {table}, [table, d, ids = std::move(ids)](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dst[ids[i] * d + j] += g[i * d + j];
  });
}

/// Gathers each row from one of two tables: `from_second[i]` selects `second`.
template <typename T>
Var embedding2(Tape<T>& tape, Var first, Var second, std::vector<int> ids, std::vector<bool> from_second) {
  const auto& fv = tape.value(first);
  const auto& sv = tape.value(second);
  if (fv.cols() != sv.cols()) throw DimensionError("embedding2: tables differ in width");
  if (ids.size() != from_second.size()) throw DimensionError("embedding2: ids/selectors length mismatch");
  const std::size_t d = fv.cols();
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& tv = from_second[i] ? sv : fv;
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw DimensionError("embedding2: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.rows()));
    }
    std::copy_n(tv.row(ids[i]).begin(), d, out.row(i).begin());
  }
  return tape.record(std::move(out), {first, second},
                     [first, second, d, ids = std::move(ids), sel = std::move(from_second)](Tape<T>& t,
                                                                                            std::size_t self) {
                       auto g = t.grad(self);
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         const Var tab = sel[i] ? second : first;
                         if (!t.needs_grad(tab)) continue;
                         auto dst = t.grad(tab);
                         for (std::size_t j = 0; j < d; ++j) dst[ids[i] * d + j] += g[i * d + j];
                       }
                     });
}

template <typename T>
Var slice_cols(Tape<T>& tape, Var a, std::size_t start, std::size_t count) {
  const auto& av = tape.value(a);
  detail::require_matrix(av, "slice_cols");
  const std::size_t m = av.rows(), n = av.cols();
  if (start + count > n || count == 0) throw DimensionError("slice_cols: range outside " + shape_str(av.shape()));
  Tensor<T> out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.row(i).begin() + start, count, out.row(i).begin());
  return tape.record(std::move(out), {a}, [a, m, n, start, count](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) dst[i * n + start + j] += g[i * count + j];
  });
}

template <typename T>
Var concat_cols(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = tape.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& v = tape.value(p);
    if (v.rows() != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor<T> out(Shape{m, total});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = tape.value(parts[p]);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(v.row(i).begin(), widths[p], out.row(i).begin() + off);
    off += widths[p];
  }
  return tape.record(std::move(out), parts, [parts, widths, m, total](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (t.needs_grad(parts[p])) {
        auto dst = t.grad(parts[p]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) dst[i * widths[p] + j] += g[i * total + off + j];
      }
      off += widths[p];
    }
  });
}

/// Picks rows of a matrix (rows may repeat).
template <typename T>
Var select_rows(Tape<T>& tape, Var a, std::vector<std::size_t> rows) {
  const auto& av = tape.value(a);
  detail::require_matrix(av, "select_rows");
  if (rows.empty()) throw DimensionError("select_rows: empty selection");
  const std::size_t n = av.cols();
  Tensor<T> out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.rows()) throw DimensionError("select_rows: row index out of range");
    std::copy_n(av.row(rows[i]).begin(), n, out.row(i).begin());
  }
  return tape.record(std::move(out), {a}, [a, n, rows = std::move(rows)](Tape<T>& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad(a);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) dst[rows[i] * n + j] += g[i * n + j];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  double s = 0.0;
  for (T v : av.data()) s += v;
  return tape.record(Tensor<T>::scalar(static_cast<T>(s)), {a}, [a](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& d : t.grad(a)) d += g;
  });
}

/// Scalar sum_i a_i * w_i for constant weights w.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var a, std::vector<T> weights) {
  const auto& av = tape.value(a);
  if (weights.size() != av.size()) throw DimensionError("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(av[i]) * weights[i];
  return tape.record(Tensor<T>::scalar(static_cast<T>(s)), {a},
                     [a, w = std::move(weights)](Tape<T>& t, std::size_t self) {
                       const T g = t.grad(self)[0];
                       auto dst = t.grad(a);
                       for (std::size_t i = 0; i < w.size(); ++i) dst[i] += g * w[i];
                     });
}

/// Per-row log softmax(logits)[target]; returns a rank-1 tensor of length T.
template <typename T>
Var token_logprobs(Tape<T>& tape, Var logits, std::vector<int> targets) {
  const auto& lv = tape.value(logits);
  detail::require_matrix(lv, "token_logprobs");
  const std::size_t m = lv.rows(), v = lv.cols();
  if (targets.size() != m) throw DimensionError("token_logprobs: one target per row required");
  Tensor<T> out(Shape{m});
  std::vector<double> lse(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw DimensionError("token_logprobs: target id out of range");
    }
    lse[i] = kernels::logsumexp_row<T>(lv.row(i));
    out[i] = static_cast<T>(lv(i, targets[i]) - lse[i]);
  }
  return tape.record(std::move(out), {logits},
                     [logits, m, v, tg = std::move(targets), lse = std::move(lse)](Tape<T>& t, std::size_t self) {
                       auto g = t.grad(self);
                       auto dst = t.grad(logits);
                       const auto& lv = t.value(logits);
                       for (std::size_t i = 0; i < m; ++i) {
                         if (g[i] == T{0}) continue;
                         for (std::size_t j = 0; j < v; ++j) {
                           const double p = std::exp(static_cast<double>(lv[i * v + j]) - lse[i]);
                           dst[i * v + j] += static_cast<T>(g[i] * ((static_cast<int>(j) == tg[i]) - p));
                         }
                       }
                     });
}

/// Mean over unmasked rows of -log softmax(logits)[target].
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
  const auto& lv = tape.value(logits);
  detail::require_matrix(lv, "cross_entropy");
  if (targets.size() != lv.rows() || mask.size() != lv.rows()) {
    throw DimensionError("cross_entropy: targets/mask must have one entry per row");
  }
  std::vector<T> w(lv.rows(), T{0});
  std::size_t active = 0;
  for (bool b : mask) active += b;
  if (active == 0) throw EmptyInputError("cross_entropy: every position is masked");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? static_cast<T>(-1.0 / active) : T{0};
  Var lp = token_logprobs(tape, logits, targets);
  return weighted_sum(tape, lp, std::move(w));
}

}  // namespace relook
