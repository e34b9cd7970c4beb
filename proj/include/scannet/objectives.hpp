#pragma once

// Segmentation heads and the semantic learning objectives:
//   L = L_sem + L_psd + L_sc + lambda_chg * L_chg
// L_sem supervises changed pixels, L_psd uses pseudo labels on unchanged
// pixels where both epochs agree, L_sc is the cosine consistency term, and
// L_chg is a binary change loss for the change head.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "scannet/ops.hpp"
#include "scannet/params.hpp"
#include "scannet/types.hpp"

namespace scannet {

/// Which epoch's probabilities name the pseudo class.
enum class PseudoSource { first, second, mean };

inline PseudoSource parse_pseudo_source(const std::string& s) {
  if (s == "first") return PseudoSource::first;
  if (s == "second") return PseudoSource::second;
  if (s == "mean") return PseudoSource::mean;
  throw ConfigError("pseudo_source must be first|second|mean, got '" + s + "'");
}

inline const char* to_string(PseudoSource s) {
  switch (s) {
    case PseudoSource::first: return "first";
    case PseudoSource::second: return "second";
    default: return "mean";
  }
}

struct LossConfig {
  double lambda_chg = 1.0;
  bool use_psd = true;
  bool use_sc = true;
  // Literal case assignment of the consistency loss (1 - cos on changed pixels).
  bool sc_swap_cases = false;
  // Per-class binary cross-entropy form for L_sem / L_psd instead of multi-class CE.
  bool full_binary_ce = false;
  PseudoSource pseudo_source = PseudoSource::first;
  double eps = 1e-12;

  static LossConfig read(ConfigReader& r, const std::string& prefix = "loss.") {
    LossConfig c;
    std::string src = to_string(c.pseudo_source);
    r.read(prefix + "lambda_chg", c.lambda_chg);
    r.read(prefix + "use_psd", c.use_psd);
    r.read(prefix + "use_sc", c.use_sc);
    r.read(prefix + "sc_swap_cases", c.sc_swap_cases);
    r.read(prefix + "full_binary_ce", c.full_binary_ce);
    r.read(prefix + "pseudo_source", src);
    r.read(prefix + "eps", c.eps);
    c.pseudo_source = parse_pseudo_source(src);
    if (c.lambda_chg < 0) throw ConfigError("loss.lambda_chg must be >= 0");
    if (!(c.eps > 0 && c.eps < 1e-3)) throw ConfigError("loss.eps must be in (0, 1e-3)");
    return c;
  }
};

using PseudoLabelMap = SemanticChangeMap;

template <typename T>
void add_head_params(ParameterStore<T>& p, const ModelConfig& cfg) {
  const int cv = cfg.encoder_channels_v;
  p.add("head.sem.w", Shape{cfg.num_classes, cv, 1, 1}, Init::xavier_normal, cv, cfg.num_classes);
  p.add("head.sem.b", Shape{cfg.num_classes}, Init::zeros);
  p.add("head.chg.w", Shape{1, cv, 1, 1}, Init::xavier_normal, cv, 1);
  p.add("head.chg.b", Shape{1}, Init::zeros);
}

/// 1x1 projection to class logits at 1/4 scale, x4 bilinear upsampling (no softmax).
template <typename T>
Var semantic_logits(Binder<T>& b, Var feat) {
  Tape<T>& t = b.tape();
  return ops::upsample_bilinear(t, ops::conv2d(t, feat, b("head.sem.w"), b("head.sem.b"), 1, 0), 4);
}

/// Per-pixel class probabilities (N x H x W). The same parameters serve both epochs.
template <typename T>
Var semantic_head(Binder<T>& b, Var feat) {
  return ops::softmax_channels(b.tape(), semantic_logits(b, feat));
}

template <typename T>
Var change_logits(Binder<T>& b, Var feat) {
  Tape<T>& t = b.tape();
  return ops::upsample_bilinear(t, ops::conv2d(t, feat, b("head.chg.w"), b("head.chg.b"), 1, 0), 4);
}

/// Change probability (1 x H x W) in [0, 1].
template <typename T>
Var change_head(Binder<T>& b, Var feat) {
  return ops::sigmoid(b.tape(), change_logits(b, feat));
}

namespace detail {

inline void require_probs(const Shape& s, int H, int W, const char* what) {
  if (s.size() != 3 || s[1] != H || s[2] != W)
    throw ShapeError(std::string(what) + ": probabilities " + shape_str(s) + " do not match " + std::to_string(H) +
                     "x" + std::to_string(W) + " labels");
}

// Cross-entropy of per-pixel probability vectors against class targets (1..N; 0 = skip),
// averaged over targeted pixels. Returns (loss, count) and writes dL/dP when `grad` is set.
template <typename T>
T masked_ce(const Tensor<T>& P, const std::vector<std::uint8_t>& target, bool binary_form, T eps, T* grad,
            T upstream) {
  const int N = P.dim(0);
  const std::size_t HW = static_cast<std::size_t>(P.dim(1)) * P.dim(2);
  std::size_t count = 0;
  for (std::size_t p = 0; p < HW; ++p) count += target[p] != 0;
  if (count == 0) return T(0);
  const T inv = T(1) / static_cast<T>(count);
  T total = 0;
  for (std::size_t p = 0; p < HW; ++p) {
    const int c = target[p];
    if (c == 0) continue;
    if (c > N) throw DataError("class target " + std::to_string(c) + " exceeds probability channels");
    for (int k = 0; k < N; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * HW + p;
      const bool hit = k == c - 1;
      if (hit) {
        const T y = P[i];
        total -= std::log(std::max(y, eps));
        if (grad && y > eps) grad[i] -= upstream * inv / y;
      } else if (binary_form) {
        const T y = T(1) - P[i];
        total -= std::log(std::max(y, eps));
        if (grad && y > eps) grad[i] += upstream * inv / y;
      }
    }
  }
  return total * inv;
}

template <typename T>
struct CosineParts {
  T cos = 0;
  T na = 0, nb = 0;  // vector norms
};

template <typename T>
CosineParts<T> pixel_cosine(const Tensor<T>& A, const Tensor<T>& B, std::size_t p, std::size_t HW, int N) {
  T dot = 0, aa = 0, bb = 0;
  for (int k = 0; k < N; ++k) {
    const std::size_t i = static_cast<std::size_t>(k) * HW + p;
    dot += A[i] * B[i];
    aa += A[i] * A[i];
    bb += B[i] * B[i];
  }
  CosineParts<T> c;
  c.na = std::sqrt(aa);
  c.nb = std::sqrt(bb);
  c.cos = (c.na > T(0) && c.nb > T(0)) ? dot / (c.na * c.nb) : T(0);
  return c;
}

}  // namespace detail

/// Cosine similarity of the two epochs' probability vectors at pixel p.
template <typename T>
T probability_cosine(const Tensor<T>& p1, const Tensor<T>& p2, std::size_t pixel) {
  return detail::pixel_cosine(p1, p2, pixel, static_cast<std::size_t>(p1.dim(1)) * p1.dim(2), p1.dim(0)).cos;
}

/// Semantic loss over changed pixels: sum over epochs of the mean cross-entropy at pixels with L_i != 0.
template <typename T>
Var loss_sem(Tape<T>& t, Var p1, Var p2, const SemanticChangeMap& l1, const SemanticChangeMap& l2,
             const LossConfig& cfg = {}) {
  detail::require_probs(t.shape(p1), l1.height, l1.width, "loss_sem");
  detail::require_probs(t.shape(p2), l2.height, l2.width, "loss_sem");
  const T eps = static_cast<T>(cfg.eps);
  const T v = detail::masked_ce(t.value(p1), l1.classes, cfg.full_binary_ce, eps, static_cast<T*>(nullptr), T(0)) +
              detail::masked_ce(t.value(p2), l2.classes, cfg.full_binary_ce, eps, static_cast<T*>(nullptr), T(0));
  return t.record(Tensor<T>(Shape{1}, std::vector<T>{v}), {p1, p2},
                  [=, c1 = l1.classes, c2 = l2.classes, bin = cfg.full_binary_ce](Tape<T>& tp, int self) {
                    const T up = tp.grad(self)[0];
                    if (T* g = tp.grad_ptr(p1)) detail::masked_ce(tp.value(p1), c1, bin, eps, g, up);
                    if (T* g = tp.grad_ptr(p2)) detail::masked_ce(tp.value(p2), c2, bin, eps, g, up);
                  });
}

/// Pseudo labels on unchanged pixels whose bi-temporal probability vectors have cosine >= threshold.
template <typename T>
PseudoLabelMap make_pseudo_labels(const Tensor<T>& p1, const Tensor<T>& p2, const ChangeMask& mask, double threshold,
                                  PseudoSource source = PseudoSource::first) {
  if (p1.shape != p2.shape || p1.rank() != 3 || p1.dim(1) != mask.height || p1.dim(2) != mask.width)
    throw ShapeError("make_pseudo_labels: probabilities " + shape_str(p1.shape) + " / " + shape_str(p2.shape) +
                     " vs mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  const int N = p1.dim(0);
  const std::size_t HW = static_cast<std::size_t>(mask.height) * mask.width;
  PseudoLabelMap out(mask.height, mask.width, N);
  for (std::size_t p = 0; p < HW; ++p) {
    if (mask.mask[p]) continue;
    if (detail::pixel_cosine(p1, p2, p, HW, N).cos < static_cast<T>(threshold)) continue;
    int best = 0;
    T best_v = -1;
    for (int k = 0; k < N; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * HW + p;
      const T v = source == PseudoSource::first ? p1[i] : source == PseudoSource::second ? p2[i] : (p1[i] + p2[i]) / 2;
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out.classes[p] = static_cast<std::uint8_t>(best + 1);
  }
  return out;
}

/// Fraction of unchanged pixels that received a pseudo label.
inline double pseudo_coverage(const PseudoLabelMap& pseudo, const ChangeMask& mask) {
  std::size_t unchanged = 0, labeled = 0;
  for (std::size_t p = 0; p < mask.size(); ++p)
    if (!mask.mask[p]) {
      ++unchanged;
      labeled += pseudo.classes[p] != 0;
    }
  return unchanged ? static_cast<double>(labeled) / static_cast<double>(unchanged) : 0.0;
}

/// Pseudo-label loss: both epochs' cross-entropy against the (constant) pseudo labels.
template <typename T>
Var loss_psd(Tape<T>& t, Var p1, Var p2, const PseudoLabelMap& pseudo, const LossConfig& cfg = {}) {
  return loss_sem(t, p1, p2, pseudo, pseudo, cfg);
}

/// Consistency loss averaged over all pixels: 1 - cos where unchanged, cos where changed
/// (cases swapped when `sc_swap_cases`).
template <typename T>
Var loss_sc(Tape<T>& t, Var p1, Var p2, const ChangeMask& mask, const LossConfig& cfg = {}) {
  detail::require_probs(t.shape(p1), mask.height, mask.width, "loss_sc");
  require_shape(t.shape(p2), t.shape(p1), "loss_sc");
  const Tensor<T>& A = t.value(p1);
  const Tensor<T>& B = t.value(p2);
  const int N = A.dim(0);
  const std::size_t HW = mask.size();
  const bool literal = cfg.sc_swap_cases;
  auto pull_together = [literal](std::uint8_t m) { return (m == 0) != literal; };
  T total = 0;
  for (std::size_t p = 0; p < HW; ++p) {
    const T c = detail::pixel_cosine(A, B, p, HW, N).cos;
    total += pull_together(mask.mask[p]) ? T(1) - c : c;
  }
  const T v = HW ? total / static_cast<T>(HW) : T(0);
  return t.record(Tensor<T>(Shape{1}, std::vector<T>{v}), {p1, p2},
                  [=, m = mask.mask](Tape<T>& tp, int self) {
                    const T up = tp.grad(self)[0] / static_cast<T>(HW);
                    const Tensor<T>& A = tp.value(p1);
                    const Tensor<T>& B = tp.value(p2);
                    T* ga = tp.grad_ptr(p1);
                    T* gb = tp.grad_ptr(p2);
                    for (std::size_t p = 0; p < HW; ++p) {
                      const auto cp = detail::pixel_cosine(A, B, p, HW, N);
                      if (cp.na == T(0) || cp.nb == T(0)) continue;
                      const T sign = pull_together(m[p]) ? T(-1) : T(1);
                      for (int k = 0; k < N; ++k) {
                        const std::size_t i = static_cast<std::size_t>(k) * HW + p;
                        if (ga) ga[i] += up * sign * (B[i] / (cp.na * cp.nb) - cp.cos * A[i] / (cp.na * cp.na));
                        if (gb) gb[i] += up * sign * (A[i] / (cp.na * cp.nb) - cp.cos * B[i] / (cp.nb * cp.nb));
                      }
                    }
                  });
}

/// Binary cross-entropy of the change probability against the change mask, averaged over pixels.
template <typename T>
Var loss_change(Tape<T>& t, Var prob, const ChangeMask& mask, const LossConfig& cfg = {}) {
  const Shape& s = t.shape(prob);
  if (s.size() != 3 || s[0] != 1 || s[1] != mask.height || s[2] != mask.width)
    throw ShapeError("loss_change: probability " + shape_str(s) + " vs mask " + std::to_string(mask.height) + "x" +
                     std::to_string(mask.width));
  const T eps = static_cast<T>(cfg.eps);
  const Tensor<T>& P = t.value(prob);
  const std::size_t n = P.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) total -= std::log(std::max(mask.mask[i] ? P[i] : T(1) - P[i], eps));
  const T v = n ? total / static_cast<T>(n) : T(0);
  return t.record(Tensor<T>(Shape{1}, std::vector<T>{v}), {prob}, [=, m = mask.mask](Tape<T>& tp, int self) {
    T* g = tp.grad_ptr(prob);
    if (!g) return;
    const T up = tp.grad(self)[0] / static_cast<T>(n);
    const Tensor<T>& P = tp.value(prob);
    for (std::size_t i = 0; i < n; ++i) {
      if (m[i]) {
        if (P[i] > eps) g[i] -= up / P[i];
      } else if (T(1) - P[i] > eps) {
        g[i] += up / (T(1) - P[i]);
      }
    }
  });
}

struct LossBreakdown {
  double sem = 0, psd = 0, sc = 0, chg = 0, total = 0;
  double pseudo_coverage = 0;
};

struct LossTerms {
  Var total;
  LossBreakdown values;
};

/// Sums the enabled objectives on the tape. Pseudo labels are generated from the current
/// probabilities and enter the loss as constants.
template <typename T>
LossTerms total_loss(Tape<T>& t, Var p1, Var p2, Var change_prob, const SemanticChangeMap& l1,
                     const SemanticChangeMap& l2, double pseudo_threshold, const LossConfig& cfg) {
  const ChangeMask mask = derive_change_mask(l1, l2);
  LossTerms out;
  Var total = loss_sem(t, p1, p2, l1, l2, cfg);
  out.values.sem = static_cast<double>(t.value(total)[0]);
  if (cfg.use_psd) {
    const PseudoLabelMap pseudo =
        make_pseudo_labels(t.value(p1), t.value(p2), mask, pseudo_threshold, cfg.pseudo_source);
    out.values.pseudo_coverage = pseudo_coverage(pseudo, mask);
    Var l = loss_psd(t, p1, p2, pseudo, cfg);
    out.values.psd = static_cast<double>(t.value(l)[0]);
    total = ops::add(t, total, l);
  }
  if (cfg.use_sc) {
    Var l = loss_sc(t, p1, p2, mask, cfg);
    out.values.sc = static_cast<double>(t.value(l)[0]);
    total = ops::add(t, total, l);
  }
  if (cfg.lambda_chg > 0 && change_prob.valid()) {
    Var l = loss_change(t, change_prob, mask, cfg);
    out.values.chg = static_cast<double>(t.value(l)[0]);
    total = ops::add(t, total, ops::scale(t, l, static_cast<T>(cfg.lambda_chg)));
  }
  out.total = total;
  out.values.total = static_cast<double>(t.value(total)[0]);
  return out;
}

/// Final maps: 0 in both epochs where change_prob < threshold, else per-epoch argmax (lowest index on ties).
template <typename T>
std::pair<SemanticChangeMap, SemanticChangeMap> compose_prediction(const Tensor<T>& p1, const Tensor<T>& p2,
                                                                   const Tensor<T>& change_prob,
                                                                   double threshold = 0.5) {
  if (p1.shape != p2.shape || p1.rank() != 3 || change_prob.rank() != 3 || change_prob.dim(1) != p1.dim(1) ||
      change_prob.dim(2) != p1.dim(2))
    throw ShapeError("compose_prediction: shapes " + shape_str(p1.shape) + ", " + shape_str(p2.shape) + ", " +
                     shape_str(change_prob.shape) + " disagree");
  const int N = p1.dim(0), H = p1.dim(1), W = p1.dim(2);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  SemanticChangeMap m1(H, W, N), m2(H, W, N);
  auto argmax = [&](const Tensor<T>& P, std::size_t p) {
    int best = 0;
    for (int k = 1; k < N; ++k)
      if (P[static_cast<std::size_t>(k) * HW + p] > P[static_cast<std::size_t>(best) * HW + p]) best = k;
    return static_cast<std::uint8_t>(best + 1);
  };
  for (std::size_t p = 0; p < HW; ++p) {
    if (change_prob[p] < static_cast<T>(threshold)) continue;
    m1.classes[p] = argmax(p1, p);
    m2.classes[p] = argmax(p2, p);
  }
  return {std::move(m1), std::move(m2)};
}

}  // namespace scannet
