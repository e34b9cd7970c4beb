#pragma once

// Cross-shaped window attention head over the joint token of the three
// backbone branches.
//
// Tokens are the spatially flattened concatenation [x1 | x2 | xc]: token
// (r, c) of an h x w grid is row r * w + c of an (h*w) x (3*C_v) matrix.
// Half of the 2K heads attend within horizontal stripes of s rows, the other
// half within vertical stripes of s columns.

#include <cmath>
#include <string>
#include <vector>

#include "scannet/backbone.hpp"
#include "scannet/ops.hpp"
#include "scannet/params.hpp"
#include "scannet/types.hpp"

namespace scannet {

enum class Orientation { horizontal, vertical };

/// Token membership of every stripe for one orientation.
struct StripeLayout {
  int rows = 0;  // stripe extent in token rows
  int cols = 0;  // stripe extent in token columns
  std::vector<std::vector<int>> tokens;  // per stripe, token indices in row-major order within the stripe
};

inline StripeLayout stripe_layout(int h, int w, Orientation o, int s) {
  if (s < 1) throw ShapeError("stripe width must be >= 1");
  const int extent = o == Orientation::horizontal ? h : w;
  if (extent % s != 0)
    throw ShapeError("stripe width " + std::to_string(s) + " does not divide grid extent " + std::to_string(extent));
  StripeLayout l;
  l.rows = o == Orientation::horizontal ? s : h;
  l.cols = o == Orientation::horizontal ? w : s;
  for (int m = 0; m < extent / s; ++m) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(l.rows) * l.cols);
    const int r0 = o == Orientation::horizontal ? m * s : 0;
    const int c0 = o == Orientation::horizontal ? 0 : m * s;
    for (int r = 0; r < l.rows; ++r)
      for (int c = 0; c < l.cols; ++c) ids.push_back((r0 + r) * w + (c0 + c));
    l.tokens.push_back(std::move(ids));
  }
  return l;
}

/// Splits an (h*w) x d token matrix into its stripes.
template <typename T>
std::vector<Tensor<T>> stripe_partition(const Tensor<T>& x, int h, int w, Orientation o, int s) {
  if (x.rank() != 2 || x.dim(0) != h * w)
    throw ShapeError("stripe_partition: tokens " + shape_str(x.shape) + " do not form a " + std::to_string(h) + "x" +
                     std::to_string(w) + " grid");
  const StripeLayout l = stripe_layout(h, w, o, s);
  const int d = x.dim(1);
  std::vector<Tensor<T>> out;
  for (const auto& ids : l.tokens) {
    Tensor<T> st(Shape{static_cast<int>(ids.size()), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(x.ptr() + static_cast<std::size_t>(ids[i]) * d, d, st.ptr() + i * d);
    out.push_back(std::move(st));
  }
  return out;
}

template <typename T>
Tensor<T> stripe_reassemble(const std::vector<Tensor<T>>& stripes, int h, int w, Orientation o, int s) {
  const StripeLayout l = stripe_layout(h, w, o, s);
  if (stripes.size() != l.tokens.size()) throw ShapeError("stripe_reassemble: wrong stripe count");
  const int d = stripes.empty() ? 0 : stripes[0].dim(1);
  Tensor<T> x(Shape{h * w, d});
  for (std::size_t m = 0; m < stripes.size(); ++m) {
    const auto& ids = l.tokens[m];
    require_shape(stripes[m].shape, Shape{static_cast<int>(ids.size()), d}, "stripe_reassemble");
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(stripes[m].ptr() + i * d, d, x.ptr() + static_cast<std::size_t>(ids[i]) * d);
  }
  return x;
}

/// Shape of the learnable relative-position table for a stripe of rows x cols tokens.
inline Shape bias_table_shape(int rows, int cols) { return Shape{2 * rows - 1, 2 * cols - 1}; }

/// Expands a relative-position table to the m x m bias matrix of one stripe.
/// Entry (i, j) reads table[dr + rows - 1][dc + cols - 1] with (dr, dc) = pos(i) - pos(j).
template <typename T>
ops::RowMat<T> expand_bias(const T* table, int rows, int cols) {
  const int m = rows * cols, tc = 2 * cols - 1;
  ops::RowMat<T> b(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const int dr = i / cols - j / cols + rows - 1;
      const int dc = i % cols - j % cols + cols - 1;
      b(i, j) = table[dr * tc + dc];
    }
  return b;
}

namespace detail {

template <typename T>
void softmax_rows(ops::RowMat<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const T m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= ops::detail::serial_sum(s.data() + r * s.cols(), s.cols());
  }
}

}  // namespace detail

/// Attention of one stripe for one head: [softmax(q k^T / sqrt(d_k)) + B] v, or
/// softmax(q k^T / sqrt(d_k) + B) v when `bias_inside`. Returns m x d_k.
template <typename T>
Tensor<T> stripe_attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                           const Tensor<T>& bias, bool bias_inside = false) {
  if (x.rank() != 2 || wq.rank() != 2 || wq.dim(0) != x.dim(1) || wk.shape != wq.shape || wv.shape != wq.shape)
    throw ShapeError("stripe_attention: tokens " + shape_str(x.shape) + " vs projections " + shape_str(wq.shape));
  const int m = x.dim(0), d = x.dim(1), dk = wq.dim(1);
  if (m < 1) throw ShapeError("stripe_attention: empty stripe");
  require_shape(bias.shape, Shape{m, m}, "stripe_attention bias");
  using M = ops::RowMat<T>;
  ops::CMapMat<T> X(x.ptr(), m, d);
  const M q = X * ops::CMapMat<T>(wq.ptr(), d, dk);
  const M k = X * ops::CMapMat<T>(wk.ptr(), d, dk);
  const M v = X * ops::CMapMat<T>(wv.ptr(), d, dk);
  M a = (q * k.transpose()) / std::sqrt(static_cast<T>(dk));
  ops::CMapMat<T> B(bias.ptr(), m, m);
  if (bias_inside) a += B;
  detail::softmax_rows(a);
  if (!bias_inside) a += B;
  Tensor<T> out(Shape{m, dk});
  ops::MapMat<T>(out.ptr(), m, dk) = a * v;
  return out;
}

struct CswinGeometry {
  int h = 0, w = 0, s = 1, heads_per_group = 1;
  bool bias_inside = false;
};

namespace ops {

/// Multi-head stripe attention on projected q, k, v (each n x d, head j owns columns
/// [j*d_k, (j+1)*d_k)). Heads 0..K-1 use horizontal stripes, K..2K-1 vertical ones.
/// `bias_tables[j]` is head j's relative-position table. Output is n x d (heads concatenated).
template <typename T>
Var cswin_attention(Tape<T>& tape, Var q, Var k, Var v, const std::vector<Var>& bias_tables, CswinGeometry g) {
  const Shape& qs = tape.shape(q);
  detail::require_rank(qs, 2, "cswin_attention q");
  require_shape(tape.shape(k), qs, "cswin_attention k");
  require_shape(tape.shape(v), qs, "cswin_attention v");
  const int n = qs[0], d = qs[1], heads = 2 * g.heads_per_group;
  if (n != g.h * g.w) throw ShapeError("cswin_attention: " + std::to_string(n) + " tokens for a " + std::to_string(g.h) + "x" + std::to_string(g.w) + " grid");
  if (d % heads != 0) throw ShapeError("cswin_attention: depth " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (static_cast<int>(bias_tables.size()) != heads) throw ShapeError("cswin_attention: need one bias table per head");
  const int dk = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));

  const StripeLayout hl = stripe_layout(g.h, g.w, Orientation::horizontal, g.s);
  const StripeLayout vl = stripe_layout(g.h, g.w, Orientation::vertical, g.s);
  for (int j = 0; j < heads; ++j) {
    const StripeLayout& l = j < g.heads_per_group ? hl : vl;
    require_shape(tape.shape(bias_tables[static_cast<std::size_t>(j)]), bias_table_shape(l.rows, l.cols),
                  "cswin_attention bias table");
  }

  const Tensor<T>& Q = tape.value(q);
  const Tensor<T>& Kt = tape.value(k);
  const Tensor<T>& V = tape.value(v);
  auto gather = [&](const Tensor<T>& src, const std::vector<int>& ids, int col0) {
    RowMat<T> m(static_cast<Eigen::Index>(ids.size()), dk);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int c = 0; c < dk; ++c) m(static_cast<Eigen::Index>(i), c) = src[static_cast<std::size_t>(ids[i]) * d + col0 + c];
    return m;
  };

  // Softmax outputs per (head, stripe), kept for the backward pass.
  std::vector<std::vector<RowMat<T>>> probs(static_cast<std::size_t>(heads));
  std::vector<RowMat<T>> biases(static_cast<std::size_t>(heads));
  Tensor<T> out(Shape{n, d});
  for (int j = 0; j < heads; ++j) {
    const StripeLayout& l = j < g.heads_per_group ? hl : vl;
    biases[static_cast<std::size_t>(j)] = expand_bias(tape.value(bias_tables[static_cast<std::size_t>(j)]).ptr(), l.rows, l.cols);
    const RowMat<T>& B = biases[static_cast<std::size_t>(j)];
    for (const auto& ids : l.tokens) {
      const RowMat<T> qs_ = gather(Q, ids, j * dk), ks_ = gather(Kt, ids, j * dk), vs_ = gather(V, ids, j * dk);
      RowMat<T> p = (qs_ * ks_.transpose()) * scale;
      if (g.bias_inside) p += B;
      scannet::detail::softmax_rows(p);
      const RowMat<T> o = g.bias_inside ? RowMat<T>(p * vs_) : RowMat<T>((p + B) * vs_);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int c = 0; c < dk; ++c) out[static_cast<std::size_t>(ids[i]) * d + j * dk + c] = o(static_cast<Eigen::Index>(i), c);
      probs[static_cast<std::size_t>(j)].push_back(std::move(p));
    }
  }

  std::vector<Var> parents{q, k, v};
  parents.insert(parents.end(), bias_tables.begin(), bias_tables.end());
  return tape.record(
      std::move(out), parents,
      [=, probs = std::move(probs), biases = std::move(biases)](Tape<T>& t, int self) {
        const Tensor<T>& G = t.grad(self);
        const Tensor<T>& Q = t.value(q);
        const Tensor<T>& K = t.value(k);
        const Tensor<T>& Vv = t.value(v);
        T* dq = t.grad_ptr(q);
        T* dkp = t.grad_ptr(k);
        T* dv = t.grad_ptr(v);
        auto gather = [&](const Tensor<T>& src, const std::vector<int>& ids, int col0) {
          RowMat<T> m(static_cast<Eigen::Index>(ids.size()), dk);
          for (std::size_t i = 0; i < ids.size(); ++i)
            for (int c = 0; c < dk; ++c) m(static_cast<Eigen::Index>(i), c) = src[static_cast<std::size_t>(ids[i]) * d + col0 + c];
          return m;
        };
        auto scatter = [&](T* dst, const RowMat<T>& m, const std::vector<int>& ids, int col0) {
          if (!dst) return;
          for (std::size_t i = 0; i < ids.size(); ++i)
            for (int c = 0; c < dk; ++c) dst[static_cast<std::size_t>(ids[i]) * d + col0 + c] += m(static_cast<Eigen::Index>(i), c);
        };
        for (int j = 0; j < heads; ++j) {
          const StripeLayout& l = j < g.heads_per_group ? hl : vl;
          const RowMat<T>& B = biases[static_cast<std::size_t>(j)];
          T* dtable = t.grad_ptr(bias_tables[static_cast<std::size_t>(j)]);
          const int tc = 2 * l.cols - 1;
          for (std::size_t sidx = 0; sidx < l.tokens.size(); ++sidx) {
            const auto& ids = l.tokens[sidx];
            const RowMat<T>& P = probs[static_cast<std::size_t>(j)][sidx];
            const RowMat<T> go = gather(G, ids, j * dk);
            const RowMat<T> qs_ = gather(Q, ids, j * dk), ks_ = gather(K, ids, j * dk), vs_ = gather(Vv, ids, j * dk);
            const RowMat<T> A = g.bias_inside ? P : RowMat<T>(P + B);
            scatter(dv, A.transpose() * go, ids, j * dk);
            const RowMat<T> dA = go * vs_.transpose();
            // Gradient w.r.t. the softmax logits.
            RowMat<T> dS = dA;
            for (Eigen::Index r = 0; r < dS.rows(); ++r) {
              T dot = 0;
              for (Eigen::Index c = 0; c < dA.cols(); ++c) dot += dA(r, c) * P(r, c);
              dS.row(r) = P.row(r).array() * (dA.row(r).array() - dot);
            }
            if (dtable) {
              const RowMat<T>& dB = g.bias_inside ? dS : dA;
              const int m = static_cast<int>(ids.size());
              for (int a = 0; a < m; ++a)
                for (int b2 = 0; b2 < m; ++b2) {
                  const int dr = a / l.cols - b2 / l.cols + l.rows - 1;
                  const int dc = a % l.cols - b2 % l.cols + l.cols - 1;
                  dtable[dr * tc + dc] += dB(a, b2);
                }
            }
            scatter(dq, (dS * ks_) * scale, ids, j * dk);
            scatter(dkp, (dS.transpose() * qs_) * scale, ids, j * dk);
          }
        }
      });
}

}  // namespace ops

/// Parameters of one attention block under `prefix` (e.g. "sf.l0").
template <typename T>
void add_attention_block_params(ParameterStore<T>& p, const std::string& prefix, const ModelConfig& cfg) {
  const int d = cfg.token_depth(), hidden = cfg.mlp_ratio * d;
  const int h = cfg.input_height / 4, w = cfg.input_width / 4, s = cfg.stripe_width;
  p.add(prefix + ".ln1.g", Shape{d}, Init::ones);
  p.add(prefix + ".ln1.b", Shape{d}, Init::zeros);
  for (const char* m : {".attn.wq", ".attn.wk", ".attn.wv"}) p.add(prefix + m, Shape{d, d}, Init::xavier_normal, d, d);
  for (int j = 0; j < 2 * cfg.heads_per_group; ++j) {
    const bool horiz = j < cfg.heads_per_group;
    p.add(prefix + ".attn.bias" + std::to_string(j), horiz ? bias_table_shape(s, w) : bias_table_shape(h, s), Init::zeros);
  }
  p.add(prefix + ".attn.wo", Shape{d, d}, Init::xavier_normal, d, d);
  p.add(prefix + ".attn.bo", Shape{d}, Init::zeros);
  p.add(prefix + ".ln2.g", Shape{d}, Init::ones);
  p.add(prefix + ".ln2.b", Shape{d}, Init::zeros);
  p.add(prefix + ".mlp.w1", Shape{d, hidden}, Init::xavier_normal, d, hidden);
  p.add(prefix + ".mlp.b1", Shape{hidden}, Init::zeros);
  p.add(prefix + ".mlp.w2", Shape{hidden, d}, Init::xavier_normal, hidden, d);
  p.add(prefix + ".mlp.b2", Shape{d}, Init::zeros);
}

template <typename T>
void add_scanformer_params(ParameterStore<T>& p, const ModelConfig& cfg) {
  for (int l = 0; l < cfg.attention_layers; ++l) add_attention_block_params(p, "sf.l" + std::to_string(l), cfg);
}

/// Zeroes the residual-branch output projections so every block is the identity map.
template <typename T>
void zero_residual_branches(ParameterStore<T>& p, const ModelConfig& cfg) {
  for (int l = 0; l < cfg.attention_layers; ++l) {
    const std::string pre = "sf.l" + std::to_string(l);
    for (const char* n : {".attn.wo", ".attn.bo", ".mlp.w2", ".mlp.b2"}) {
      auto& v = p.value(pre + n);
      std::fill(v.data.begin(), v.data.end(), T(0));
    }
  }
}

/// Concatenates three C x h x w grids along channels and flattens to (h*w) x 3C.
template <typename T>
Var tokenize(Tape<T>& t, Var x1, Var x2, Var xc) {
  const Shape s = t.shape(x1);
  if (s.size() != 3 || t.shape(x2) != s || t.shape(xc) != s)
    throw ShapeError("tokenize: feature grids " + shape_str(s) + ", " + shape_str(t.shape(x2)) + ", " +
                     shape_str(t.shape(xc)) + " must share one C x h x w shape");
  Var cat = ops::concat0(t, {x1, x2, xc});
  Var flat = ops::reshape(t, cat, Shape{3 * s[0], s[1] * s[2]});
  return ops::transpose2d(t, flat);
}

/// Inverse of tokenize: returns the three grids in (x1 | x2 | xc) order.
template <typename T>
TedOutputs detokenize(Tape<T>& t, Var tokens, int h, int w) {
  const Shape& s = t.shape(tokens);
  if (s.size() != 2 || s[0] != h * w || s[1] % 3 != 0)
    throw ShapeError("detokenize: tokens " + shape_str(s) + " incompatible with a " + std::to_string(h) + "x" +
                     std::to_string(w) + " grid of three branches");
  const int c = s[1] / 3;
  Var grid = ops::reshape(t, ops::transpose2d(t, tokens), Shape{s[1], h, w});
  return {ops::slice0(t, grid, 0, c), ops::slice0(t, grid, c, c), ops::slice0(t, grid, 2 * c, c)};
}

/// Multi-head cross-shaped window self-attention followed by the output projection.
template <typename T>
Var cswin_sa(Binder<T>& b, const std::string& prefix, Var x, CswinGeometry g) {
  Tape<T>& t = b.tape();
  const Var q = ops::linear(t, x, b(prefix + ".attn.wq"), Var{});
  const Var k = ops::linear(t, x, b(prefix + ".attn.wk"), Var{});
  const Var v = ops::linear(t, x, b(prefix + ".attn.wv"), Var{});
  std::vector<Var> tables;
  for (int j = 0; j < 2 * g.heads_per_group; ++j) tables.push_back(b(prefix + ".attn.bias" + std::to_string(j)));
  const Var a = ops::cswin_attention(t, q, k, v, tables, g);
  return ops::linear(t, a, b(prefix + ".attn.wo"), b(prefix + ".attn.bo"));
}

/// x' = SA(LN(x)) + x;  out = MLP(LN(x')) + x'.
template <typename T>
Var attention_block(Binder<T>& b, const std::string& prefix, Var x, CswinGeometry g) {
  Tape<T>& t = b.tape();
  const Var n1 = ops::layer_norm(t, x, b(prefix + ".ln1.g"), b(prefix + ".ln1.b"));
  const Var xh = ops::add(t, cswin_sa(b, prefix, n1, g), x);
  const Var n2 = ops::layer_norm(t, xh, b(prefix + ".ln2.g"), b(prefix + ".ln2.b"));
  Var m = ops::gelu(t, ops::linear(t, n2, b(prefix + ".mlp.w1"), b(prefix + ".mlp.b1")));
  m = ops::linear(t, m, b(prefix + ".mlp.w2"), b(prefix + ".mlp.b2"));
  return ops::add(t, m, xh);
}

inline CswinGeometry geometry_for(const ModelConfig& cfg, int h, int w) {
  return {h, w, cfg.stripe_width, cfg.heads_per_group, cfg.bias_inside_softmax};
}

template <typename T>
TedOutputs scanformer_forward(Binder<T>& b, const ModelConfig& cfg, const TedOutputs& ted) {
  Tape<T>& t = b.tape();
  const Shape s = t.shape(ted.x1);
  Var x = tokenize(t, ted.x1, ted.x2, ted.xc);
  const CswinGeometry g = geometry_for(cfg, s[1], s[2]);
  for (int l = 0; l < cfg.attention_layers; ++l) x = attention_block(b, "sf.l" + std::to_string(l), x, g);
  return detokenize(t, x, s[1], s[2]);
}

}  // namespace scannet
