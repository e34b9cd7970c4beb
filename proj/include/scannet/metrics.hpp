#pragma once

// Semantic change detection accuracy metrics over a pooled confusion matrix,
// and from-to transition analysis of bi-temporal maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scannet/types.hpp"

namespace scannet {

/// (N+1) x (N+1) counts; entry (i, j) = pixels predicted class i with ground truth j. Index 0 = no-change.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes)
      : n_(num_classes), counts_(static_cast<std::size_t>(num_classes + 1) * (num_classes + 1), 0) {
    if (num_classes < 1) throw DataError("ConfusionMatrix needs at least one class");
  }

  /// Builds from a row-major (N+1)^2 list of counts.
  static ConfusionMatrix from_counts(int num_classes, const std::vector<std::uint64_t>& counts) {
    ConfusionMatrix q(num_classes);
    if (counts.size() != q.counts_.size())
      throw ShapeError("confusion matrix needs " + std::to_string(q.counts_.size()) + " counts, got " +
                       std::to_string(counts.size()));
    q.counts_ = counts;
    return q;
  }

  int num_classes() const { return n_; }
  int dim() const { return n_ + 1; }
  std::uint64_t operator()(int pred, int gt) const { return counts_[static_cast<std::size_t>(pred) * dim() + gt]; }
  std::uint64_t& operator()(int pred, int gt) { return counts_[static_cast<std::size_t>(pred) * dim() + gt]; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.n_ != n_) throw DataError("cannot merge confusion matrices with different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  void add_map(const SemanticChangeMap& pred, const SemanticChangeMap& gt) {
    if (!pred.same_shape(gt))
      throw ShapeError("prediction is " + dims_str(pred) + " but ground truth is " + dims_str(gt));
    if (pred.num_classes != n_ || gt.num_classes != n_)
      throw DataError("map class count does not match confusion matrix (" + std::to_string(n_) + ")");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p = pred.classes[i], g = gt.classes[i];
      if (p > n_ || g > n_) throw DataError("class index out of range while accumulating confusion");
      ++(*this)(p, g);
    }
  }

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// Adds both epochs of a prediction into `running` (each pixel counted once per epoch).
inline ConfusionMatrix accumulate_confusion(const SemanticChangeMap& pred1, const SemanticChangeMap& pred2,
                                            const SemanticChangeMap& gt1, const SemanticChangeMap& gt2,
                                            ConfusionMatrix running) {
  if (!pred1.same_shape(pred2) || !pred1.same_shape(gt1) || !pred1.same_shape(gt2))
    throw ShapeError("accumulate_confusion: maps differ in size (" + dims_str(pred1) + ", " + dims_str(pred2) + ", " +
                     dims_str(gt1) + ", " + dims_str(gt2) + ")");
  running.add_map(pred1, gt1);
  running.add_map(pred2, gt2);
  return running;
}

// Zero-denominator convention: a 0/0 quotient is 0 and sets the flag.
namespace detail {
inline double safe_div(double num, double den, bool& flagged) {
  if (den == 0.0) {
    flagged = true;
    return 0.0;
  }
  return num / den;
}
}  // namespace detail

inline double overall_accuracy(const ConfusionMatrix& q) {
  const std::uint64_t total = q.total();
  if (total == 0) throw DataError("no pixels evaluated");
  std::uint64_t diag = 0;
  for (int i = 0; i < q.dim(); ++i) diag += q(i, i);
  return static_cast<double>(diag) / static_cast<double>(total);
}

struct IouResult {
  double iou_nc = 0, iou_c = 0, miou = 0;
  bool nc_undefined = false, c_undefined = false;
};

inline IouResult miou(const ConfusionMatrix& q) {
  const double total = static_cast<double>(q.total());
  if (total == 0) throw DataError("no pixels evaluated");
  double row0 = 0, col0 = 0, changed = 0;
  for (int k = 0; k < q.dim(); ++k) {
    row0 += static_cast<double>(q(0, k));
    col0 += static_cast<double>(q(k, 0));
  }
  for (int i = 1; i < q.dim(); ++i)
    for (int j = 1; j < q.dim(); ++j) changed += static_cast<double>(q(i, j));
  const double q00 = static_cast<double>(q(0, 0));
  IouResult r;
  r.iou_nc = detail::safe_div(q00, row0 + col0 - q00, r.nc_undefined);
  r.iou_c = detail::safe_div(changed, total - q00, r.c_undefined);
  r.miou = 0.5 * (r.iou_nc + r.iou_c);
  return r;
}

struct SekResult {
  double rho = 0, eta = 0, sek = 0;
};

/// Separated kappa on the matrix with the no-change/no-change cell removed.
inline SekResult sek(const ConfusionMatrix& q) {
  const int D = q.dim();
  auto qh = [&](int i, int j) { return (i == 0 && j == 0) ? 0.0 : static_cast<double>(q(i, j)); };
  double total = 0, diag = 0, marg = 0;
  for (int i = 0; i < D; ++i) {
    double row = 0, col = 0;
    for (int j = 0; j < D; ++j) {
      row += qh(i, j);
      col += qh(j, i);
    }
    marg += row * col;
    diag += qh(i, i);
    total += row;
  }
  if (total == 0) throw NumericError("SeK undefined: no change pixels anywhere");
  SekResult r;
  r.rho = diag / total;
  r.eta = marg / (total * total);
  if (r.eta >= 1.0) throw NumericError("SeK undefined: degenerate marginals");
  const double iou_c = miou(q).iou_c;
  r.sek = std::exp(iou_c - 1.0) * (r.rho - r.eta) / (1.0 - r.eta);
  return r;
}

struct FscdResult {
  double precision = 0, recall = 0, f_scd = 0;
  bool undefined = false;
};

inline FscdResult f_scd(const ConfusionMatrix& q) {
  if (q.total() == 0) throw DataError("no pixels evaluated");
  const int D = q.dim();
  double hits = 0, predicted = 0, actual = 0;
  for (int i = 1; i < D; ++i) {
    hits += static_cast<double>(q(i, i));
    for (int j = 0; j < D; ++j) {
      predicted += static_cast<double>(q(i, j));
      actual += static_cast<double>(q(j, i));
    }
  }
  FscdResult r;
  r.precision = detail::safe_div(hits, predicted, r.undefined);
  r.recall = detail::safe_div(hits, actual, r.undefined);
  r.f_scd = detail::safe_div(2.0 * r.precision * r.recall, r.precision + r.recall, r.undefined);
  return r;
}

struct MetricsReport {
  double oa = 0, miou = 0, iou_nc = 0, iou_c = 0, sek = 0, rho = 0, eta = 0, p_scd = 0, r_scd = 0, f_scd = 0;
  std::uint64_t pixels = 0;
  // Names of quantities that hit the zero-denominator convention, or "sek" when SeK is undefined.
  std::vector<std::string> flags;
};

enum class EpochPooling { pooled, averaged };

inline MetricsReport compute_metrics(const ConfusionMatrix& q) {
  MetricsReport r;
  r.pixels = q.total();
  r.oa = overall_accuracy(q);
  const IouResult iou = miou(q);
  r.iou_nc = iou.iou_nc;
  r.iou_c = iou.iou_c;
  r.miou = iou.miou;
  if (iou.nc_undefined) r.flags.push_back("iou_nc");
  if (iou.c_undefined) r.flags.push_back("iou_c");
  try {
    const SekResult s = sek(q);
    r.rho = s.rho;
    r.eta = s.eta;
    r.sek = s.sek;
  } catch (const NumericError&) {
    r.flags.push_back("sek");
  }
  const FscdResult f = f_scd(q);
  r.p_scd = f.precision;
  r.r_scd = f.recall;
  r.f_scd = f.f_scd;
  if (f.undefined) r.flags.push_back("f_scd");
  return r;
}

/// Averages the metrics of the two per-epoch matrices instead of pooling them.
inline MetricsReport compute_metrics_averaged(const ConfusionMatrix& epoch1, const ConfusionMatrix& epoch2) {
  const MetricsReport a = compute_metrics(epoch1), b = compute_metrics(epoch2);
  MetricsReport r;
  r.pixels = a.pixels + b.pixels;
  r.oa = 0.5 * (a.oa + b.oa);
  r.miou = 0.5 * (a.miou + b.miou);
  r.iou_nc = 0.5 * (a.iou_nc + b.iou_nc);
  r.iou_c = 0.5 * (a.iou_c + b.iou_c);
  r.sek = 0.5 * (a.sek + b.sek);
  r.rho = 0.5 * (a.rho + b.rho);
  r.eta = 0.5 * (a.eta + b.eta);
  r.p_scd = 0.5 * (a.p_scd + b.p_scd);
  r.r_scd = 0.5 * (a.r_scd + b.r_scd);
  r.f_scd = 0.5 * (a.f_scd + b.f_scd);
  r.flags = a.flags;
  for (const auto& f : b.flags)
    if (std::find(r.flags.begin(), r.flags.end(), f) == r.flags.end()) r.flags.push_back(f);
  return r;
}

/// Machine-readable `name=value` lines.
inline std::string format_metrics_flat(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "oa=" << r.oa << '\n'
     << "miou=" << r.miou << '\n'
     << "iou_nc=" << r.iou_nc << '\n'
     << "iou_c=" << r.iou_c << '\n'
     << "sek=" << r.sek << '\n'
     << "rho=" << r.rho << '\n'
     << "eta=" << r.eta << '\n'
     << "p_scd=" << r.p_scd << '\n'
     << "r_scd=" << r.r_scd << '\n'
     << "f_scd=" << r.f_scd << '\n'
     << "pixels=" << r.pixels << '\n';
  os << "flags=";
  for (std::size_t i = 0; i < r.flags.size(); ++i) os << (i ? "," : "") << r.flags[i];
  os << '\n';
  return os.str();
}

/// Human-readable aligned table (percentages).
inline std::string format_metrics_table(const MetricsReport& r) {
  std::ostringstream os;
  auto row = [&](const char* name, double v) {
    os << std::left << std::setw(10) << name << std::right << std::setw(9) << std::fixed << std::setprecision(2)
       << 100.0 * v << " %\n";
  };
  row("OA", r.oa);
  row("mIoU", r.miou);
  row("IoU_nc", r.iou_nc);
  row("IoU_c", r.iou_c);
  row("SeK", r.sek);
  row("P_scd", r.p_scd);
  row("R_scd", r.r_scd);
  row("F_scd", r.f_scd);
  if (!r.flags.empty()) {
    os << "undefined (reported as 0):";
    for (const auto& f : r.flags) os << ' ' << f;
    os << '\n';
  }
  return os.str();
}

struct TransitionRow {
  int from = 0;
  int to = 0;
  std::uint64_t count = 0;
  double proportion = 0;
  bool false_change() const { return from == to; }
};

/// From-to counts over pixels labeled in both epochs. Diagonal entries are self-contradictory
/// "false changes" and are kept as rows but also summarized separately.
struct TransitionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;  // num_classes x num_classes, index (from-1, to-1)
  std::vector<TransitionRow> rows;    // nonzero entries, descending proportion
  std::uint64_t total = 0;
  std::uint64_t false_changes = 0;

  explicit TransitionMatrix(int n = 0) : num_classes(n), counts(static_cast<std::size_t>(n) * n, 0) {}

  std::uint64_t count(int from, int to) const {
    return counts[static_cast<std::size_t>(from - 1) * num_classes + (to - 1)];
  }
  double false_change_fraction() const { return total ? static_cast<double>(false_changes) / total : 0.0; }

  void add(const SemanticChangeMap& map1, const SemanticChangeMap& map2) {
    if (!map1.same_shape(map2))
      throw ShapeError("transition analysis: map1 is " + dims_str(map1) + " but map2 is " + dims_str(map2));
    for (std::size_t i = 0; i < map1.size(); ++i) {
      const int a = map1.classes[i], b = map2.classes[i];
      if (a == 0 || b == 0 || a > num_classes || b > num_classes) continue;
      ++counts[static_cast<std::size_t>(a - 1) * num_classes + (b - 1)];
    }
    finalize();
  }

  void merge(const TransitionMatrix& o) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    finalize();
  }

  void finalize() {
    rows.clear();
    total = 0;
    false_changes = 0;
    for (int a = 1; a <= num_classes; ++a)
      for (int b = 1; b <= num_classes; ++b) {
        const auto c = count(a, b);
        total += c;
        if (a == b) false_changes += c;
        if (c) rows.push_back({a, b, c, 0.0});
      }
    for (auto& r : rows) r.proportion = static_cast<double>(r.count) / static_cast<double>(total);
    std::stable_sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.count > y.count; });
  }
};

inline TransitionMatrix transition_analysis(const SemanticChangeMap& map1, const SemanticChangeMap& map2) {
  TransitionMatrix t(std::max(map1.num_classes, map2.num_classes));
  t.add(map1, map2);
  return t;
}

/// CSV: from_class,to_class,count,proportion (rows sorted by descending proportion).
inline std::string format_transitions_csv(const TransitionMatrix& t, const std::vector<std::string>& class_names = {}) {
  auto name = [&](int c) {
    return c - 1 < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(c - 1)] : std::to_string(c);
  };
  std::ostringstream os;
  os << "from_class,to_class,count,proportion\n";
  os << std::setprecision(8);
  for (const auto& r : t.rows) os << name(r.from) << ',' << name(r.to) << ',' << r.count << ',' << r.proportion << '\n';
  return os.str();
}

}  // namespace scannet
