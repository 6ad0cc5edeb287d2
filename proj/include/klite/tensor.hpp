#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "klite/errors.hpp"
#include "klite/kernels.hpp"

// Minimal dense 2-D tensor core with a reverse-mode tape. Graphs are built
// per forward pass; parameters live outside the tape and receive gradient
// accumulation through bound sinks. No in-place mutation of tracked values.
namespace klite::tc {

template <typename T>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, T(0)) {}
  Mat(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), a(std::move(values)) {
    if (a.size() != r * c) throw TensorError("Mat: data does not match shape");
  }

  static Mat zeros(std::size_t r, std::size_t c) { return Mat(r, c); }

  T& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  const T& at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
  std::size_t size() const { return a.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename T>
bool all_finite(const Mat<T>& m) {
  for (const T v : m.a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

struct AttentionConfig {
  std::size_t model_dim = 0;
  std::size_t num_heads = 8;
  std::size_t head_dim = 0;

  AttentionConfig(std::size_t dim, std::size_t heads)
      : model_dim(dim), num_heads(heads) {
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw TensorError("attention: num_heads (" + std::to_string(heads) +
                        ") must divide model_dim (" + std::to_string(dim) + ")");
    head_dim = dim / heads;
  }
};

constexpr double kLayerNormEps = 1e-5;

template <typename T>
class Tape {
 public:
  using Id = std::uint32_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tracked leaf holding its own value. Gradient is computed and readable
  // after backward() but not accumulated anywhere.
  Id input(Mat<T> m) {
    return push(std::move(m), nullptr, nullptr, "input", {});
  }

  // Leaf viewing external storage; backward() accumulates into *grad
  // when grad is non-null.
  Id param(const Mat<T>* value, Mat<T>* grad) {
    if (grad && !grad->same_shape(*value))
      throw TensorError("param: grad shape " + shape_str(grad->rows, grad->cols) +
                        " does not match value " + shape_str(value->rows, value->cols));
    return push(Mat<T>{}, value, grad, "param", {});
  }

  const Mat<T>& val(Id id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  const Mat<T>& grad_of(Id id) const { return nodes_[id].grad; }
  std::size_t node_count() const { return nodes_.size(); }

  Id add(Id x, Id y) {
    const Mat<T>&a = val(x), &b = val(y);
    if (!a.same_shape(b))
      throw TensorError("add: shape " + shape_str(a.rows, a.cols) + " vs " +
                        shape_str(b.rows, b.cols));
    Mat<T> out(a.rows, a.cols);
    kernels::active<T>().add(a.a.data(), b.a.data(), out.a.data(), out.size());
    return push(std::move(out), nullptr, nullptr, "add", [x, y](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      t.accumulate(x, g);
      t.accumulate(y, g);
    });
  }

  Id scale(Id x, T c) {
    const Mat<T>& a = val(x);
    Mat<T> out(a.rows, a.cols);
    kernels::active<T>().scale(a.a.data(), c, out.a.data(), out.size());
    return push(std::move(out), nullptr, nullptr, "scale", [x, c](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      kernels::active<T>().axpy(c, g.a.data(), t.nodes_[x].grad.a.data(), g.size());
    });
  }

  // C = A[m,k] * B[k,n]
  Id matmul(Id x, Id y) {
    const Mat<T>&a = val(x), &b = val(y);
    if (a.cols != b.rows)
      throw TensorError("matmul: " + shape_str(a.rows, a.cols) + " x " +
                        shape_str(b.rows, b.cols));
    Mat<T> out(a.rows, b.cols);
    kernels::active<T>().matmul_nn(a.a.data(), b.a.data(), out.a.data(), a.rows,
                                   a.cols, b.cols, false);
    return push(std::move(out), nullptr, nullptr, "matmul", [x, y](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      const Mat<T>&a = t.val(x), &b = t.val(y);
      // dA += G * B^T ; dB += A^T * G
      kernels::active<T>().matmul_nt(g.a.data(), b.a.data(), t.nodes_[x].grad.a.data(),
                                     g.rows, g.cols, b.rows, true);
      kernels::active<T>().matmul_tn(a.a.data(), g.a.data(), t.nodes_[y].grad.a.data(),
                                     a.cols, a.rows, g.cols, true);
    });
  }

  // C = A[m,k] * B[n,k]^T
  Id matmul_nt(Id x, Id y) {
    const Mat<T>&a = val(x), &b = val(y);
    if (a.cols != b.cols)
      throw TensorError("matmul_nt: " + shape_str(a.rows, a.cols) + " x " +
                        shape_str(b.rows, b.cols) + "^T");
    Mat<T> out(a.rows, b.rows);
    kernels::active<T>().matmul_nt(a.a.data(), b.a.data(), out.a.data(), a.rows,
                                   a.cols, b.rows, false);
    return push(std::move(out), nullptr, nullptr, "matmul_nt", [x, y](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;  // [m,n]
      const Mat<T>&a = t.val(x), &b = t.val(y);
      // dA += G * B ; dB += G^T * A
      kernels::active<T>().matmul_nn(g.a.data(), b.a.data(), t.nodes_[x].grad.a.data(),
                                     g.rows, g.cols, b.cols, true);
      kernels::active<T>().matmul_tn(g.a.data(), a.a.data(), t.nodes_[y].grad.a.data(),
                                     g.cols, g.rows, a.cols, true);
    });
  }

  // y = x*W + b, b broadcast over rows
  Id linear(Id x, Id w, Id b) {
    const Mat<T>&xv = val(x), &wv = val(w), &bv = val(b);
    if (xv.cols != wv.rows)
      throw TensorError("linear: x " + shape_str(xv.rows, xv.cols) + " vs W " +
                        shape_str(wv.rows, wv.cols));
    if (bv.rows != 1 || bv.cols != wv.cols)
      throw TensorError("linear: bias " + shape_str(bv.rows, bv.cols) +
                        " vs W " + shape_str(wv.rows, wv.cols));
    Mat<T> out(xv.rows, wv.cols);
    kernels::active<T>().matmul_nn(xv.a.data(), wv.a.data(), out.a.data(), xv.rows,
                                   xv.cols, wv.cols, false);
    for (std::size_t i = 0; i < out.rows; ++i)
      kernels::active<T>().add(out.a.data() + i * out.cols, bv.a.data(),
                               out.a.data() + i * out.cols, out.cols);
    return push(std::move(out), nullptr, nullptr, "linear",
                [x, w, b](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      const Mat<T>&xv = t.val(x), &wv = t.val(w);
      kernels::active<T>().matmul_nt(g.a.data(), wv.a.data(),
                                     t.nodes_[x].grad.a.data(), g.rows, g.cols,
                                     wv.rows, true);
      kernels::active<T>().matmul_tn(xv.a.data(), g.a.data(),
                                     t.nodes_[w].grad.a.data(), xv.cols, xv.rows,
                                     g.cols, true);
      Mat<T>& db = t.nodes_[b].grad;
      for (std::size_t i = 0; i < g.rows; ++i)
        kernels::active<T>().add(db.a.data(), g.a.data() + i * g.cols, db.a.data(),
                                 g.cols);
    });
  }

  Id relu(Id x) {
    const Mat<T>& a = val(x);
    Mat<T> out(a.rows, a.cols);
    kernels::active<T>().relu(a.a.data(), out.a.data(), out.size());
    return push(std::move(out), nullptr, nullptr, "relu", [x](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      kernels::active<T>().relu_backward(t.val(x).a.data(), g.a.data(),
                                         t.nodes_[x].grad.a.data(), g.size());
    });
  }

  // stable row-wise softmax (max subtraction)
  Id softmax_rows(Id x) {
    const Mat<T>& a = val(x);
    Mat<T> out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
      const T* row = a.a.data() + i * a.cols;
      T* orow = out.a.data() + i * a.cols;
      const T m = kernels::active<T>().max(row, a.cols);
      T s = 0;
      for (std::size_t j = 0; j < a.cols; ++j) {
        orow[j] = std::exp(row[j] - m);
        s += orow[j];
      }
      kernels::active<T>().scale(orow, T(1) / s, orow, a.cols);
    }
    return push(std::move(out), nullptr, nullptr, "softmax_rows",
                [x](Tape& t, Id self) {
      const Mat<T>&g = t.nodes_[self].grad, &y = t.val(self);
      Mat<T>& dx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < y.rows; ++i) {
        const T* yrow = y.a.data() + i * y.cols;
        const T* grow = g.a.data() + i * y.cols;
        T* drow = dx.a.data() + i * y.cols;
        const T gy = kernels::active<T>().dot(grow, yrow, y.cols);
        for (std::size_t j = 0; j < y.cols; ++j)
          drow[j] += yrow[j] * (grow[j] - gy);
      }
    });
  }

  // per-row zero mean / unit variance, then gain & bias (both [1,d])
  Id layer_norm(Id x, Id gain, Id bias) {
    const Mat<T>&a = val(x), &gv = val(gain), &bv = val(bias);
    if (gv.rows != 1 || gv.cols != a.cols || bv.rows != 1 || bv.cols != a.cols)
      throw TensorError("layer_norm: gain/bias must be [1," +
                        std::to_string(a.cols) + "]");
    Mat<T> out(a.rows, a.cols);
    Mat<T> xhat(a.rows, a.cols);
    std::vector<T> inv(a.rows);
    const T d = static_cast<T>(a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
      const T* row = a.a.data() + i * a.cols;
      const T mu = kernels::active<T>().sum(row, a.cols) / d;
      T var = 0;
      for (std::size_t j = 0; j < a.cols; ++j) {
        const T c = row[j] - mu;
        var += c * c;
      }
      var /= d;
      inv[i] = T(1) / std::sqrt(var + T(kLayerNormEps));
      for (std::size_t j = 0; j < a.cols; ++j) {
        xhat.at(i, j) = (row[j] - mu) * inv[i];
        out.at(i, j) = xhat.at(i, j) * gv.a[j] + bv.a[j];
      }
    }
    return push(std::move(out), nullptr, nullptr, "layer_norm",
                [x, gain, bias, xhat = std::move(xhat),
                 inv = std::move(inv)](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      const Mat<T>& gv = t.val(gain);
      Mat<T>& dx = t.nodes_[x].grad;
      Mat<T>& dgain = t.nodes_[gain].grad;
      Mat<T>& dbias = t.nodes_[bias].grad;
      const std::size_t d = g.cols;
      std::vector<T> dxhat(d);
      for (std::size_t i = 0; i < g.rows; ++i) {
        const T* grow = g.a.data() + i * d;
        const T* xrow = xhat.a.data() + i * d;
        T mean_dxhat = 0, mean_dxhat_x = 0;
        for (std::size_t j = 0; j < d; ++j) {
          dgain.a[j] += grow[j] * xrow[j];
          dbias.a[j] += grow[j];
          dxhat[j] = grow[j] * gv.a[j];
          mean_dxhat += dxhat[j];
          mean_dxhat_x += dxhat[j] * xrow[j];
        }
        mean_dxhat /= static_cast<T>(d);
        mean_dxhat_x /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j)
          dx.a[i * d + j] +=
              inv[i] * (dxhat[j] - mean_dxhat - xrow[j] * mean_dxhat_x);
      }
    });
  }

  Id slice_cols(Id x, std::size_t off, std::size_t width) {
    const Mat<T>& a = val(x);
    if (off + width > a.cols)
      throw TensorError("slice_cols: [" + std::to_string(off) + "," +
                        std::to_string(off + width) + ") out of " +
                        std::to_string(a.cols));
    Mat<T> out(a.rows, width);
    for (std::size_t i = 0; i < a.rows; ++i)
      std::copy_n(a.a.data() + i * a.cols + off, width, out.a.data() + i * width);
    return push(std::move(out), nullptr, nullptr, "slice_cols",
                [x, off, width](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      Mat<T>& dx = t.nodes_[x].grad;
      for (std::size_t i = 0; i < g.rows; ++i)
        kernels::active<T>().add(dx.a.data() + i * dx.cols + off,
                                 g.a.data() + i * width,
                                 dx.a.data() + i * dx.cols + off, width);
    });
  }

  Id concat_cols(std::span<const Id> parts) {
    if (parts.empty()) throw TensorError("concat_cols: no inputs");
    const std::size_t rows = val(parts[0]).rows;
    std::size_t total = 0;
    for (Id p : parts) {
      if (val(p).rows != rows) throw TensorError("concat_cols: row mismatch");
      total += val(p).cols;
    }
    Mat<T> out(rows, total);
    std::size_t off = 0;
    for (Id p : parts) {
      const Mat<T>& a = val(p);
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(a.a.data() + i * a.cols, a.cols,
                    out.a.data() + i * total + off);
      off += a.cols;
    }
    std::vector<Id> ids(parts.begin(), parts.end());
    return push(std::move(out), nullptr, nullptr, "concat_cols",
                [ids = std::move(ids)](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      std::size_t off = 0;
      for (Id p : ids) {
        Mat<T>& dp = t.nodes_[p].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
          kernels::active<T>().add(dp.a.data() + i * dp.cols,
                                   g.a.data() + i * g.cols + off,
                                   dp.a.data() + i * dp.cols, dp.cols);
        off += dp.cols;
      }
    });
  }

  // [n,d] -> [1,d] column means
  Id mean_rows(Id x) {
    const Mat<T>& a = val(x);
    if (a.rows == 0) throw TensorError("mean_rows: empty input");
    Mat<T> out(1, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
      kernels::active<T>().add(out.a.data(), a.a.data() + i * a.cols,
                               out.a.data(), a.cols);
    kernels::active<T>().scale(out.a.data(), T(1) / static_cast<T>(a.rows),
                               out.a.data(), a.cols);
    return push(std::move(out), nullptr, nullptr, "mean_rows",
                [x](Tape& t, Id self) {
      const Mat<T>& g = t.nodes_[self].grad;
      Mat<T>& dx = t.nodes_[x].grad;
      const T inv = T(1) / static_cast<T>(dx.rows);
      for (std::size_t i = 0; i < dx.rows; ++i)
        kernels::active<T>().axpy(inv, g.a.data(), dx.a.data() + i * dx.cols,
                                  g.cols);
    });
  }

  // scalar sum w[i,j]*x[i,j]; handy for building test losses
  Id weighted_sum(Id x, Mat<T> w) {
    const Mat<T>& a = val(x);
    if (!a.same_shape(w)) throw TensorError("weighted_sum: shape mismatch");
    Mat<T> out(1, 1);
    out.a[0] = kernels::active<T>().dot(a.a.data(), w.a.data(), a.size());
    return push(std::move(out), nullptr, nullptr, "weighted_sum",
                [x, w = std::move(w)](Tape& t, Id self) {
      const T g = t.nodes_[self].grad.a[0];
      kernels::active<T>().axpy(g, w.a.data(), t.nodes_[x].grad.a.data(), w.size());
    });
  }

  Id sum_all(Id x) {
    const Mat<T>& a = val(x);
    Mat<T> out(1, 1);
    out.a[0] = kernels::active<T>().sum(a.a.data(), a.size());
    return push(std::move(out), nullptr, nullptr, "sum_all", [x](Tape& t, Id self) {
      const T g = t.nodes_[self].grad.a[0];
      Mat<T>& dx = t.nodes_[x].grad;
      for (T& v : dx.a) v += g;
    });
  }

  // mean negative log-softmax at target indices; grad = (softmax - onehot)/n
  Id cross_entropy(Id logits, std::vector<int> targets) {
    const Mat<T>& a = val(logits);
    if (targets.size() != a.rows)
      throw TensorError("cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(a.rows) + " rows");
    for (int t : targets)
      if (t < 0 || static_cast<std::size_t>(t) >= a.cols)
        throw TensorError("cross_entropy: target " + std::to_string(t) +
                          " out of range [0," + std::to_string(a.cols) + ")");
    Mat<T> probs(a.rows, a.cols);
    T loss = 0;
    for (std::size_t i = 0; i < a.rows; ++i) {
      const T* row = a.a.data() + i * a.cols;
      T* prow = probs.a.data() + i * a.cols;
      const T m = kernels::active<T>().max(row, a.cols);
      T s = 0;
      for (std::size_t j = 0; j < a.cols; ++j) {
        prow[j] = std::exp(row[j] - m);
        s += prow[j];
      }
      kernels::active<T>().scale(prow, T(1) / s, prow, a.cols);
      loss += m + std::log(s) - row[targets[i]];
    }
    Mat<T> out(1, 1);
    out.a[0] = loss / static_cast<T>(a.rows);
    return push(std::move(out), nullptr, nullptr, "cross_entropy",
                [logits, targets = std::move(targets),
                 probs = std::move(probs)](Tape& t, Id self) {
      const T g = t.nodes_[self].grad.a[0];
      Mat<T>& dx = t.nodes_[logits].grad;
      const T invn = T(1) / static_cast<T>(probs.rows);
      for (std::size_t i = 0; i < probs.rows; ++i) {
        const T* prow = probs.a.data() + i * probs.cols;
        T* drow = dx.a.data() + i * probs.cols;
        for (std::size_t j = 0; j < probs.cols; ++j)
          drow[j] += g * invn * prow[j];
        drow[targets[i]] -= g * invn;
      }
    });
  }

  // Seeds d(root)/d(root) = seed and sweeps the tape in reverse. Root must be
  // scalar. Afterwards grads are readable via grad_of and accumulated into
  // bound param sinks.
  void backward(Id root, T seed = T(1)) {
    if (val(root).size() != 1) throw TensorError("backward: root must be scalar");
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Mat<T>& v = val(static_cast<Id>(i));
      nodes_[i].grad = Mat<T>::zeros(v.rows, v.cols);
    }
    nodes_[root].grad.a[0] = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i].backward) nodes_[i].backward(*this, static_cast<Id>(i));
    for (Node& n : nodes_)
      if (n.grad_sink)
        kernels::active<T>().add(n.grad_sink->a.data(), n.grad.a.data(),
                                 n.grad_sink->a.data(), n.grad.size());
  }

 private:
  struct Node {
    Mat<T> owned;
    const Mat<T>* external = nullptr;
    Mat<T>* grad_sink = nullptr;
    Mat<T> grad;
    std::function<void(Tape&, Id)> backward;
  };

  void accumulate(Id id, const Mat<T>& g) {
    Mat<T>& dst = nodes_[id].grad;
    kernels::active<T>().add(dst.a.data(), g.a.data(), dst.a.data(), g.size());
  }

  Id push(Mat<T> owned, const Mat<T>* external, Mat<T>* grad_sink,
          const char* op, std::function<void(Tape&, Id)> backward) {
    Node n;
    n.owned = std::move(owned);
    n.external = external;
    n.grad_sink = grad_sink;
    n.backward = std::move(backward);
    if (!all_finite(n.external ? *n.external : n.owned))
      throw NumericalError(std::string(op) + " produced non-finite values");
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

struct MhaParamIds {
  std::uint32_t wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention, heads sliced from full-width projections,
// concatenated and output-projected. attn_avg (optional) receives the
// head-averaged attention weights [nq, nk].
template <typename T>
typename Tape<T>::Id multi_head_attention(Tape<T>& t, typename Tape<T>::Id q_in,
                                          typename Tape<T>::Id kv_in,
                                          const MhaParamIds& p,
                                          const AttentionConfig& cfg,
                                          Mat<T>* attn_avg = nullptr) {
  using Id = typename Tape<T>::Id;
  const std::size_t nq = t.val(q_in).rows, nk = t.val(kv_in).rows;
  if (t.val(q_in).cols != cfg.model_dim || t.val(kv_in).cols != cfg.model_dim)
    throw TensorError("attention: inputs " + shape_str(nq, t.val(q_in).cols) +
                      ", " + shape_str(nk, t.val(kv_in).cols) + " vs model_dim " +
                      std::to_string(cfg.model_dim));
  const Id q = t.linear(q_in, p.wq, p.bq);
  const Id k = t.linear(kv_in, p.wk, p.bk);
  const Id v = t.linear(kv_in, p.wv, p.bv);
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.head_dim));
  if (attn_avg) *attn_avg = Mat<T>::zeros(nq, nk);
  std::vector<Id> heads;
  heads.reserve(cfg.num_heads);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const std::size_t off = h * cfg.head_dim;
    const Id qh = t.slice_cols(q, off, cfg.head_dim);
    const Id kh = t.slice_cols(k, off, cfg.head_dim);
    const Id vh = t.slice_cols(v, off, cfg.head_dim);
    const Id scores = t.scale(t.matmul_nt(qh, kh), scale);
    const Id attn = t.softmax_rows(scores);
    if (attn_avg)
      kernels::active<T>().axpy(T(1) / static_cast<T>(cfg.num_heads),
                                t.val(attn).a.data(), attn_avg->a.data(),
                                attn_avg->size());
    heads.push_back(t.matmul(attn, vh));
  }
  const Id cat = t.concat_cols(heads);
  return t.linear(cat, p.wo, p.bo);
}

// Central-difference gradient verification over every parameter scalar.
// build must construct a scalar loss from the bound parameter ids; it is
// invoked on fresh tapes and must be a pure function of the param values.
double grad_check(
    std::span<Mat<double>* const> params,
    const std::function<std::uint32_t(Tape<double>&,
                                      const std::vector<std::uint32_t>&)>& build,
    double eps = 1e-4);

}  // namespace klite::tc
