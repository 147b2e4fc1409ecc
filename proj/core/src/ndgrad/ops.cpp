#include "flowdpt/ndgrad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

namespace flowdpt::nd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

MapC view(const Array& a) { return MapC(a.ptr(), a.rows(), a.cols()); }
Map view(Array& a) { return Map(a.ptr(), a.rows(), a.cols()); }

void require_rank2(const Array& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 operand, got " +
                     shape_string(a.shape()));
  }
}

Graph& same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  }
  return a.graph();
}

// Elementwise binary op with optional [1, n] row broadcast of b.
enum class Broadcast { none, row };

Broadcast check_binary(const Array& a, const Array& b, const char* op) {
  require_rank2(a, op);
  require_rank2(b, op);
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  throw ShapeError(op, a.shape(), b.shape());
}

void reduce_into(Array& dst, const Array& g, Broadcast bc, double sign = 1.0) {
  if (bc == Broadcast::none) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += sign * g[i];
    return;
  }
  const std::size_t n = g.cols();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double* gr = g.ptr() + r * n;
    for (std::size_t c = 0; c < n; ++c) dst[c] += sign * gr[c];
  }
}

template <typename F, typename DF>
Var unary(Var a, const char* op, F f, DF df) {
  const Array& av = a.value();
  require_rank2(av, op);
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const Array* ap = &av;
  return a.graph().record(std::move(out), {a},
                          [ap, df](const Array& y, const Array& g, std::span<Array* const> gi) {
                            Array& ga = *gi[0];
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              ga[i] += g[i] * df((*ap)[i], y[i]);
                            }
                          });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const Array& av = a.value();
  const Array& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows()) throw ShapeError("matmul", av.shape(), bv.shape());
  Array out({av.rows(), bv.cols()});
  view(out).noalias() = view(av) * view(bv);
  const Array* ap = &av;
  const Array* bp = &bv;
  return g.record(std::move(out), {a, b},
                  [ap, bp](const Array&, const Array& gout, std::span<Array* const> gi) {
                    if (gi[0]) view(*gi[0]).noalias() += view(gout) * view(*bp).transpose();
                    if (gi[1]) view(*gi[1]).noalias() += view(*ap).transpose() * view(gout);
                  });
}

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b, "add");
  const Array& av = a.value();
  const Array& bv = b.value();
  const Broadcast bc = check_binary(av, bv, "add");
  Array out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += bc == Broadcast::none ? bv[i] : bv[i % n];
  }
  return g.record(std::move(out), {a, b},
                  [bc](const Array&, const Array& gout, std::span<Array* const> gi) {
                    if (gi[0]) reduce_into(*gi[0], gout, Broadcast::none);
                    if (gi[1]) reduce_into(*gi[1], gout, bc);
                  });
}

Var sub(Var a, Var b) {
  Graph& g = same_graph(a, b, "sub");
  const Array& av = a.value();
  const Array& bv = b.value();
  const Broadcast bc = check_binary(av, bv, "sub");
  Array out = av;
  const std::size_t n = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= bc == Broadcast::none ? bv[i] : bv[i % n];
  }
  return g.record(std::move(out), {a, b},
                  [bc](const Array&, const Array& gout, std::span<Array* const> gi) {
                    if (gi[0]) reduce_into(*gi[0], gout, Broadcast::none);
                    if (gi[1]) reduce_into(*gi[1], gout, bc, -1.0);
                  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b, "mul");
  const Array& av = a.value();
  const Array& bv = b.value();
  const Broadcast bc = check_binary(av, bv, "mul");
  const std::size_t n = av.cols();
  auto bidx = [bc, n](std::size_t i) { return bc == Broadcast::none ? i : i % n; };
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[bidx(i)];
  const Array* ap = &av;
  const Array* bp = &bv;
  return g.record(std::move(out), {a, b},
                  [ap, bp, bidx](const Array&, const Array& gout, std::span<Array* const> gi) {
                    for (std::size_t i = 0; i < gout.size(); ++i) {
                      if (gi[0]) (*gi[0])[i] += gout[i] * (*bp)[bidx(i)];
                      if (gi[1]) (*gi[1])[bidx(i)] += gout[i] * (*ap)[i];
                    }
                  });
}

Var scale(Var a, double s) {
  return unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Graph& g = parts[0].graph();
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    same_graph(parts[0], p, "concat_cols");
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != rows) {
      throw ShapeError("concat_cols", parts[0].value().shape(), p.value().shape());
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Array out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
    }
    off += widths[k];
  }
  return g.record(std::move(out), parts,
                  [widths, total](const Array&, const Array& gout, std::span<Array* const> gi) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < gi.size(); ++k) {
                      if (gi[k]) {
                        Array& dst = *gi[k];
                        for (std::size_t r = 0; r < dst.rows(); ++r) {
                          for (std::size_t c = 0; c < widths[k]; ++c) {
                            dst[r * widths[k] + c] += gout[r * total + off + c];
                          }
                        }
                      }
                      off += widths[k];
                    }
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Graph& g = parts[0].graph();
  const std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (Var p : parts) {
    same_graph(parts[0], p, "concat_rows");
    require_rank2(p.value(), "concat_rows");
    if (p.value().cols() != cols) {
      throw ShapeError("concat_rows", parts[0].value().shape(), p.value().shape());
    }
    total += p.value().rows();
  }
  Array out({total, cols});
  std::vector<std::size_t> sizes;
  std::size_t off = 0;
  for (Var p : parts) {
    const Array& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.ptr() + off);
    off += pv.size();
    sizes.push_back(pv.size());
  }
  return g.record(std::move(out), parts,
                  [sizes](const Array&, const Array& gout, std::span<Array* const> gi) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < gi.size(); ++k) {
                      if (gi[k]) {
                        for (std::size_t i = 0; i < sizes[k]; ++i) (*gi[k])[i] += gout[off + i];
                      }
                      off += sizes[k];
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Array& av = a.value();
  require_rank2(av, "slice_cols");
  if (begin >= end || end > av.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for shape " + shape_string(av.shape()));
  }
  const std::size_t w = end - begin;
  const std::size_t n = av.cols();
  Array out({av.rows(), w});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.ptr() + r * n + begin, w, out.ptr() + r * w);
  }
  return a.graph().record(std::move(out), {a},
                          [begin, w, n](const Array&, const Array& gout, std::span<Array* const> gi) {
                            Array& ga = *gi[0];
                            for (std::size_t r = 0; r < gout.rows(); ++r) {
                              for (std::size_t c = 0; c < w; ++c) ga[r * n + begin + c] += gout[r * w + c];
                            }
                          });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Array& av = a.value();
  require_rank2(av, "slice_rows");
  if (begin >= end || end > av.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") invalid for shape " + shape_string(av.shape()));
  }
  const std::size_t n = av.cols();
  Array out({end - begin, n});
  std::copy(av.ptr() + begin * n, av.ptr() + end * n, out.ptr());
  return a.graph().record(std::move(out), {a},
                          [begin, n](const Array&, const Array& gout, std::span<Array* const> gi) {
                            Array& ga = *gi[0];
                            for (std::size_t i = 0; i < gout.size(); ++i) ga[begin * n + i] += gout[i];
                          });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Array& tv = table.value();
  require_rank2(tv, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t n = tv.cols();
  Array out({indices.size(), n});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) +
                       " out of range for shape " + shape_string(tv.shape()));
    }
    std::copy_n(tv.ptr() + indices[i] * n, n, out.ptr() + i * n);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.graph().record(
      std::move(out), {table},
      [idx = std::move(idx), n](const Array&, const Array& gout, std::span<Array* const> gi) {
        Array& gt = *gi[0];
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < n; ++c) gt[idx[i] * n + c] += gout[i * n + c];
        }
      });
}

Var broadcast_rows(Var a, std::size_t rows) {
  const Array& av = a.value();
  require_rank2(av, "broadcast_rows");
  if (av.rows() != 1 || rows == 0) {
    throw ShapeError("broadcast_rows: expected a [1, n] operand and rows > 0, got " +
                     shape_string(av.shape()));
  }
  const std::size_t n = av.cols();
  Array out({rows, n});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.ptr(), n, out.ptr() + r * n);
  return a.graph().record(std::move(out), {a},
                          [](const Array&, const Array& gout, std::span<Array* const> gi) {
                            reduce_into(*gi[0], gout, Broadcast::row);
                          });
}

Var softmax_rows(Var a) {
  const Array& av = a.value();
  require_rank2(av, "softmax_rows");
  const std::size_t n = av.cols();
  Array out(av.shape());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const double* x = av.ptr() + r * n;
    double* y = out.ptr() + r * n;
    const double m = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (y[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < n; ++c) y[c] /= s;
  }
  return a.graph().record(std::move(out), {a},
                          [n](const Array& y, const Array& gout, std::span<Array* const> gi) {
                            Array& ga = *gi[0];
                            for (std::size_t r = 0; r < y.rows(); ++r) {
                              const double* yr = y.ptr() + r * n;
                              const double* gr = gout.ptr() + r * n;
                              double dot = 0.0;
                              for (std::size_t c = 0; c < n; ++c) dot += yr[c] * gr[c];
                              for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += yr[c] * (gr[c] - dot);
                            }
                          });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = same_graph(x, gain, "layer_norm");
  same_graph(x, bias, "layer_norm");
  const Array& xv = x.value();
  require_rank2(xv, "layer_norm");
  const Shape row_shape{1, xv.cols()};
  if (gain.value().shape() != row_shape) throw ShapeError("layer_norm(gain)", row_shape, gain.value().shape());
  if (bias.value().shape() != row_shape) throw ShapeError("layer_norm(bias)", row_shape, bias.value().shape());

  const std::size_t rows = xv.rows();
  const std::size_t n = xv.cols();
  Array xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * n;
    double* hr = xhat.ptr() + r * n;
    const bool constant = std::all_of(xr, xr + n, [&](double v) { return v == xr[0]; });
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(n);
    if (constant) var = 0.0;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) hr[c] = constant ? 0.0 : (xr[c] - mu) * inv_std[r];
  }
  const Array& gv = gain.value();
  const Array& bv = bias.value();
  Array out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xhat[r * n + c] * gv[c] + bv[c];
  }
  const Array* gp = &gv;
  return g.record(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gp, n](
          const Array&, const Array& gout, std::span<Array* const> gi) {
        const std::size_t rows = gout.rows();
        const double inv_n = 1.0 / static_cast<double>(n);
        std::vector<double> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = gout.ptr() + r * n;
          const double* hr = xhat.ptr() + r * n;
          if (gi[1]) for (std::size_t c = 0; c < n; ++c) (*gi[1])[c] += gr[c] * hr[c];
          if (gi[2]) for (std::size_t c = 0; c < n; ++c) (*gi[2])[c] += gr[c];
          if (!gi[0]) continue;
          double mean_d = 0.0;
          double mean_dh = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            dxhat[c] = gr[c] * (*gp)[c];
            mean_d += dxhat[c];
            mean_dh += dxhat[c] * hr[c];
          }
          mean_d *= inv_n;
          mean_dh *= inv_n;
          for (std::size_t c = 0; c < n; ++c) {
            (*gi[0])[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
          }
        }
      });
}

Var gelu(Var a) {
  const Array& av = a.value();
  require_rank2(av, "gelu");
  using Vec = Eigen::Array<double, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(av.size());
  const Eigen::Map<const Vec> x(av.ptr(), n);
  // tanh(u) = sign(u) (1 - e) / (1 + e) with e = exp(-2|u|), which keeps
  // the exponential vectorized and never overflows.
  const Vec u = kGeluC * (x + kGeluA * x.cube());
  const Vec e = (-2.0 * u.abs()).exp();
  auto th = std::make_shared<Vec>(u.sign() * (1.0 - e) / (1.0 + e));
  Array out(av.shape());
  Eigen::Map<Vec>(out.ptr(), n) = 0.5 * x * (1.0 + *th);
  const Array* ap = &av;
  return a.graph().record(
      std::move(out), {a}, [ap, th, n](const Array&, const Array& g, std::span<Array* const> gi) {
        const Eigen::Map<const Vec> x(ap->ptr(), n);
        const Eigen::Map<const Vec> gv(g.ptr(), n);
        const Vec& t = *th;
        Eigen::Map<Vec>(gi[0]->ptr(), n) +=
            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square()));
      });
}

Var silu(Var a) {
  return unary(
      a, "silu", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var exp(Var a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sin(Var a) {
  return unary(
      a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(
      a, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var square(Var a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(Var a) {
  const Array& av = a.value();
  double s = 0.0;
  for (double x : av.data()) s += x;
  return a.graph().record(Array::scalar(s), {a},
                          [](const Array&, const Array& gout, std::span<Array* const> gi) {
                            const double g = gout[0];
                            for (double& x : gi[0]->data()) x += g;
                          });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var causal_self_attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len) {
  Graph& g = same_graph(q, k, "causal_self_attention");
  same_graph(q, v, "causal_self_attention");
  const Array& qv = q.value();
  const Array& kv = k.value();
  const Array& vv = v.value();
  require_rank2(qv, "causal_self_attention");
  if (kv.shape() != qv.shape()) throw ShapeError("causal_self_attention(k)", qv.shape(), kv.shape());
  if (vv.shape() != qv.shape()) throw ShapeError("causal_self_attention(v)", qv.shape(), vv.shape());
  const std::size_t rows = qv.rows();
  const std::size_t d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_self_attention: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t T = seq_len == 0 ? rows : seq_len;
  if (T == 0 || rows % T != 0) {
    throw ShapeError("causal_self_attention: " + std::to_string(rows) +
                     " rows do not split into sequences of length " + std::to_string(T));
  }
  const std::size_t n_seq = rows / T;
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  // Attention probabilities per (sequence, head), [T x T], zero above the
  // diagonal.
  std::vector<RowMat> probs(n_seq * n_heads);
  Array out({rows, d});
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t base = s * T * d;
    for (std::size_t h = 0; h < n_heads; ++h) {
      StridedC Q(qv.ptr() + base + h * dh, Ti, dhi, stride);
      StridedC K(kv.ptr() + base + h * dh, Ti, dhi, stride);
      StridedC V(vv.ptr() + base + h * dh, Ti, dhi, stride);
      RowMat S = (Q * K.transpose()) * sc;
      RowMat& P = probs[s * n_heads + h];
      P.setZero(Ti, Ti);
      for (Eigen::Index i = 0; i < Ti; ++i) {
        const auto s_row = S.row(i).head(i + 1).array();
        auto p_row = P.row(i).head(i + 1).array();
        p_row = (s_row - s_row.maxCoeff()).exp();
        p_row /= p_row.sum();
      }
      Strided O(out.ptr() + base + h * dh, Ti, dhi, stride);
      O.noalias() = P * V;
    }
  }
  const Array* qp = &qv;
  const Array* kp = &kv;
  const Array* vp = &vv;
  return g.record(
      std::move(out), {q, k, v},
      [probs = std::move(probs), qp, kp, vp, n_seq, n_heads, T, d, dh, sc, Ti, dhi, stride](
          const Array&, const Array& gout, std::span<Array* const> gi) {
        for (std::size_t s = 0; s < n_seq; ++s) {
          const std::size_t base = s * T * d;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const RowMat& P = probs[s * n_heads + h];
            const std::size_t off = base + h * dh;
            StridedC dO(gout.ptr() + off, Ti, dhi, stride);
            StridedC Q(qp->ptr() + off, Ti, dhi, stride);
            StridedC K(kp->ptr() + off, Ti, dhi, stride);
            StridedC V(vp->ptr() + off, Ti, dhi, stride);
            if (gi[2]) {
              Strided dV(gi[2]->ptr() + off, Ti, dhi, stride);
              dV.noalias() += P.transpose() * dO;
            }
            if (!gi[0] && !gi[1]) continue;
            RowMat dP = dO * V.transpose();
            RowMat dS = RowMat::Zero(Ti, Ti);
            for (Eigen::Index i = 0; i < Ti; ++i) {
              const auto p_row = P.row(i).head(i + 1).array();
              const auto dp_row = dP.row(i).head(i + 1).array();
              const double dot = (p_row * dp_row).sum();
              dS.row(i).head(i + 1).array() = p_row * (dp_row - dot) * sc;
            }
            if (gi[0]) {
              Strided dQ(gi[0]->ptr() + off, Ti, dhi, stride);
              dQ.noalias() += dS * K;
            }
            if (gi[1]) {
              Strided dK(gi[1]->ptr() + off, Ti, dhi, stride);
              dK.noalias() += dS.transpose() * Q;
            }
          }
        }
      });
}

}  // namespace flowdpt::nd
