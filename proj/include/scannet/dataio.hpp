#pragma once

// Dataset storage in the im1/ im2/ label1/ label2/ directory layout, the
// deterministic synthetic bi-temporal generator, and flip/rotate augmentation.
//
// On-disk layout under a dataset root:
//   dataset.cfg      num_classes, image size, file extension, palette
//   manifest.txt     one "<split> <id>" line per sample
//   im1/<id>.png     8-bit RGB, epoch 1
//   im2/<id>.png     8-bit RGB, epoch 2
//   label1/<id>.png  8-bit single-channel class indices (0 = no change)
//   label2/<id>.png
// Labels hold raw class indices; the palette only colours previews.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "scannet/config.hpp"
#include "scannet/metrics.hpp"
#include "scannet/types.hpp"

namespace scannet {

namespace fs = std::filesystem;

/// SplitMix64 finalizer; derives independent stream seeds from (seed, a, b).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return step(step(step(seed) ^ a) ^ b);
}

using Rgb = std::array<double, 3>;

struct ManifestEntry {
  std::string split;
  std::string id;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  fs::path root;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::string extension = ".png";
  std::vector<Rgb> palette;  // index 0 = no change
  std::vector<ManifestEntry> entries;

  std::vector<std::string> ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (split.empty() || e.split == split) out.push_back(e.id);
    return out;
  }

  fs::path file(const std::string& dir, const std::string& id) const { return root / dir / (id + extension); }
};

namespace detail {

inline std::string format_rgb(const Rgb& c) {
  std::ostringstream os;
  os << c[0] << "," << c[1] << "," << c[2];
  return os.str();
}

inline Rgb parse_rgb(const std::string& key, const std::string& text) {
  Rgb c{};
  char sep1 = 0, sep2 = 0;
  std::istringstream in(text);
  if (!(in >> c[0] >> sep1 >> c[1] >> sep2 >> c[2]) || sep1 != ',' || sep2 != ',')
    throw ConfigError("key '" + key + "': expected r,g,b, got '" + text + "'");
  for (double v : c)
    if (v < 0 || v > 1) throw ConfigError("key '" + key + "': colour components must be in [0, 1]");
  return c;
}

inline Rgb default_colour(int cls) {
  static const std::vector<Rgb> base = {{0, 0, 0},          {0.62, 0.52, 0.40}, {0.55, 0.78, 0.35},
                                        {0.10, 0.42, 0.16}, {0.15, 0.32, 0.72}, {0.88, 0.86, 0.84}};
  if (cls < static_cast<int>(base.size())) return base[cls];
  // Further classes get evenly spaced hues.
  const double h = std::fmod(cls * 0.61803398875, 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  const int seg = static_cast<int>(h);
  static const int perm[6][3] = {{0, 1, 2}, {1, 0, 2}, {2, 0, 1}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}};
  const double vals[3] = {0.85, 0.25 + 0.6 * x, 0.25};
  return {vals[perm[seg][0]], vals[perm[seg][1]], vals[perm[seg][2]]};
}

}  // namespace detail

inline void write_manifest(const DatasetManifest& m) {
  fs::create_directories(m.root);
  {
    std::ofstream os(m.root / "dataset.cfg");
    os << "num_classes = " << m.num_classes << "\n";
    os << "height = " << m.height << "\n";
    os << "width = " << m.width << "\n";
    os << "extension = " << m.extension << "\n";
    for (std::size_t k = 0; k < m.palette.size(); ++k)
      os << "palette." << k << " = " << detail::format_rgb(m.palette[k]) << "\n";
    if (!os) throw DataError("cannot write " + (m.root / "dataset.cfg").string());
  }
  std::ofstream os(m.root / "manifest.txt");
  for (const auto& e : m.entries) os << e.split << " " << e.id << "\n";
  if (!os) throw DataError("cannot write " + (m.root / "manifest.txt").string());
}

inline DatasetManifest read_manifest(const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  if (!fs::exists(root / "dataset.cfg")) throw DataError("no dataset.cfg under " + root.string());
  const FlatConfig cfg = FlatConfig::load((root / "dataset.cfg").string());
  ConfigReader r(cfg);
  r.read("num_classes", m.num_classes);
  r.read("height", m.height);
  r.read("width", m.width);
  r.read("extension", m.extension);
  if (m.num_classes < 1 || m.num_classes > 254) throw DataError("dataset.cfg: num_classes must be in [1, 254]");
  for (int k = 0; k <= m.num_classes; ++k) {
    std::string text = detail::format_rgb(detail::default_colour(k));
    r.read("palette." + std::to_string(k), text);
    m.palette.push_back(detail::parse_rgb("palette." + std::to_string(k), text));
  }
  r.require_all_known();

  std::ifstream in(root / "manifest.txt");
  if (!in) throw DataError("no manifest.txt under " + root.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ls(t);
    ManifestEntry e;
    std::string extra;
    if (!(ls >> e.split >> e.id) || (ls >> extra))
      throw DataError("manifest.txt:" + std::to_string(lineno) + ": expected '<split> <id>'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Image I/O

inline Tensor<float> read_image(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing image file " + path.string());
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot decode image " + path.string());
  if (bgr.depth() != CV_8U) throw DataError(path.string() + ": expected 8-bit image");
  const int H = bgr.rows, W = bgr.cols;
  Tensor<float> t(Shape{3, H, W});
  for (int y = 0; y < H; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0f;
  }
  return t;
}

inline void write_image(const fs::path& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_image: expected 3 x H x W, got " + shape_str(img.shape));
  const int H = img.dim(1), W = img.dim(2);
  cv::Mat bgr(H, W, CV_8UC3);
  for (int y = 0; y < H; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        row[x][2 - c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  }
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

inline SemanticChangeMap read_label(const fs::path& path, int num_classes) {
  if (!fs::exists(path)) throw DataError("missing label file " + path.string());
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot decode label " + path.string());
  if (m.type() != CV_8UC1) throw DataError(path.string() + ": labels must be 8-bit single-channel index images");
  SemanticChangeMap out(m.rows, m.cols, num_classes);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (row[x] > num_classes)
        throw DataError(path.string() + ": class index " + std::to_string(row[x]) + " at pixel (" + std::to_string(y) +
                        ", " + std::to_string(x) + ") exceeds num_classes " + std::to_string(num_classes));
      out.at(y, x) = row[x];
    }
  }
  return out;
}

inline void write_label(const fs::path& path, const SemanticChangeMap& m) {
  cv::Mat img(m.height, m.width, CV_8UC1);
  for (int y = 0; y < m.height; ++y) std::copy_n(&m.classes[static_cast<std::size_t>(y) * m.width], m.width, img.ptr<std::uint8_t>(y));
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write label " + path.string());
}

/// Colour rendering of a class map with the manifest palette.
inline void write_label_preview(const fs::path& path, const SemanticChangeMap& m, const std::vector<Rgb>& palette) {
  Tensor<float> img(Shape{3, m.height, m.width});
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const int k = m.at(y, x);
      const Rgb c = k < static_cast<int>(palette.size()) ? palette[k] : detail::default_colour(k);
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = static_cast<float>(c[ch]);
    }
  write_image(path, img);
}

inline void save_sample(const DatasetManifest& m, const BitemporalSample& s) {
  write_image(m.file("im1", s.id), s.image1);
  write_image(m.file("im2", s.id), s.image2);
  write_label(m.file("label1", s.id), s.label1);
  write_label(m.file("label2", s.id), s.label2);
}

/// Loads and validates one sample; throws DataError listing every violation found.
inline BitemporalSample load_sample(const DatasetManifest& m, const std::string& id) {
  BitemporalSample s;
  s.id = id;
  s.image1 = read_image(m.file("im1", id));
  s.image2 = read_image(m.file("im2", id));
  s.label1 = read_label(m.file("label1", id), m.num_classes);
  s.label2 = read_label(m.file("label2", id), m.num_classes);
  const auto violations = validate_sample(s);
  if (!violations.empty()) {
    std::string msg = "sample '" + id + "' is invalid:";
    for (const auto& v : violations) msg += "\n  " + to_string(v);
    throw DataError(msg);
  }
  return s;
}

inline std::vector<BitemporalSample> load_split(const DatasetManifest& m, const std::string& split) {
  std::vector<BitemporalSample> out;
  for (const auto& id : m.ids(split)) out.push_back(load_sample(m, id));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct Transition {
  int from = 0;
  int to = 0;
  double weight = 0;
};

struct GeneratorSpec {
  std::uint64_t seed = 0;
  int count = 100;
  int height = 64;
  int width = 64;
  int num_classes = 5;
  double change_fraction = 0.20;
  double change_tolerance = 0.05;
  std::vector<Transition> transitions = default_transitions();
  std::vector<Rgb> colours;  // per class 1..N; empty = defaults
  double noise = 0.05;
  double gain_range = 0.10;    // per-epoch gain drawn from [1 - r, 1 + r]
  double offset_range = 0.05;  // per-epoch offset drawn from [-r, r]
  int background_class = 1;
  int mosaic_shapes_min = 3;
  int mosaic_shapes_max = 8;
  int max_retries = 500;
  std::string split = "3:1:1";

  /// Ground(1)/low vegetation(2)/tree(3)/water(4)/building(5), dominated by ground -> building.
  static std::vector<Transition> default_transitions() {
    return {{1, 5, 0.30}, {2, 5, 0.16}, {1, 2, 0.12}, {2, 1, 0.11}, {3, 5, 0.08},
            {5, 1, 0.06}, {3, 1, 0.06}, {4, 1, 0.04}, {1, 4, 0.04}, {2, 3, 0.03}};
  }

  std::vector<double> normalized_weights() const {
    double total = 0;
    for (const auto& t : transitions) total += t.weight;
    std::vector<double> out;
    for (const auto& t : transitions) out.push_back(t.weight / total);
    return out;
  }

  Rgb colour(int cls) const {
    if (!colours.empty()) return colours.at(static_cast<std::size_t>(cls - 1));
    return detail::default_colour(cls);
  }

  std::array<int, 3> split_counts() const {
    std::array<double, 3> r{};
    char c1 = 0, c2 = 0;
    std::istringstream in(split);
    if (!(in >> r[0] >> c1 >> r[1] >> c2 >> r[2]) || c1 != ':' || c2 != ':' || r[0] < 0 || r[1] < 0 || r[2] < 0 ||
        r[0] + r[1] + r[2] <= 0)
      throw ConfigError("gen.split must look like 3:1:1, got '" + split + "'");
    const double total = r[0] + r[1] + r[2];
    const int train = static_cast<int>(std::floor(count * r[0] / total + 1e-9));
    const int val = static_cast<int>(std::floor(count * r[1] / total + 1e-9));
    return {train, val, count - train - val};
  }

  void validate() const {
    std::vector<std::string> errs;
    auto need = [&](bool ok, const std::string& msg) {
      if (!ok) errs.push_back(msg);
    };
    need(count >= 1, "count must be >= 1");
    need(height >= 8 && width >= 8, "height and width must be >= 8");
    need(num_classes >= 2 && num_classes <= 254, "num_classes must be in [2, 254]");
    need(change_fraction > 0 && change_fraction < 1, "change_fraction must be in (0, 1)");
    need(change_tolerance > 0 && change_tolerance < change_fraction, "change_tolerance must be in (0, change_fraction)");
    need(!transitions.empty(), "transition distribution is empty");
    double total = 0;
    for (const auto& t : transitions) {
      need(t.from != t.to, "transition " + std::to_string(t.from) + ">" + std::to_string(t.to) +
                               " maps a class to itself");
      need(t.from >= 1 && t.from <= num_classes && t.to >= 1 && t.to <= num_classes,
           "transition classes must be in 1..num_classes");
      need(t.weight >= 0, "transition weights must be non-negative");
      total += t.weight;
    }
    need(total > 0, "transition weights sum to zero");
    need(colours.empty() || static_cast<int>(colours.size()) == num_classes, "colours must list num_classes entries");
    need(noise >= 0 && gain_range >= 0 && gain_range < 1 && offset_range >= 0, "noise/illumination ranges invalid");
    need(background_class >= 1 && background_class <= num_classes, "background_class out of range");
    need(mosaic_shapes_min >= 0 && mosaic_shapes_max >= mosaic_shapes_min, "mosaic shape counts invalid");
    need(max_retries >= 1, "max_retries must be >= 1");
    try {
      split_counts();
    } catch (const ConfigError& e) {
      errs.push_back(e.what());
    }
    if (errs.empty()) return;
    std::string msg = "invalid generator spec:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  static std::vector<Transition> parse_transitions(const std::string& text) {
    std::vector<Transition> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      Transition t;
      char gt = 0, colon = 0;
      std::istringstream is(item);
      if (!(is >> t.from >> gt >> t.to >> colon >> t.weight) || gt != '>' || colon != ':')
        throw ConfigError("gen.transitions: expected 'from>to:weight', got '" + item + "'");
      out.push_back(t);
    }
    return out;
  }

  static std::string format_transitions(const std::vector<Transition>& ts) {
    std::ostringstream os;
    for (std::size_t i = 0; i < ts.size(); ++i) os << (i ? "," : "") << ts[i].from << ">" << ts[i].to << ":" << ts[i].weight;
    return os.str();
  }

  static GeneratorSpec read(ConfigReader& r, const std::string& prefix = "gen.") {
    GeneratorSpec g;
    std::string transitions = format_transitions(g.transitions);
    r.read(prefix + "seed", g.seed);
    r.read(prefix + "count", g.count);
    r.read(prefix + "height", g.height);
    r.read(prefix + "width", g.width);
    r.read(prefix + "num_classes", g.num_classes);
    r.read(prefix + "change_fraction", g.change_fraction);
    r.read(prefix + "change_tolerance", g.change_tolerance);
    r.read(prefix + "transitions", transitions);
    r.read(prefix + "noise", g.noise);
    r.read(prefix + "gain_range", g.gain_range);
    r.read(prefix + "offset_range", g.offset_range);
    r.read(prefix + "background_class", g.background_class);
    r.read(prefix + "mosaic_shapes_min", g.mosaic_shapes_min);
    r.read(prefix + "mosaic_shapes_max", g.mosaic_shapes_max);
    r.read(prefix + "max_retries", g.max_retries);
    r.read(prefix + "split", g.split);
    g.transitions = parse_transitions(transitions);
    for (int k = 1; k <= g.num_classes; ++k) {
      const std::string key = prefix + "colour." + std::to_string(k);
      std::string text;
      r.read(key, text);
      if (text.empty()) continue;
      if (g.colours.empty())
        for (int j = 1; j <= g.num_classes; ++j) g.colours.push_back(detail::default_colour(j));
      g.colours[static_cast<std::size_t>(k - 1)] = detail::parse_rgb(key, text);
    }
    g.validate();
    return g;
  }
};

/// One accepted change region: its transition and how many pixels it contributed.
struct RegionRecord {
  int sample = 0;
  int transition = 0;  // index into GeneratorSpec::transitions
  std::size_t pixels = 0;
};

struct GeneratorStats {
  std::vector<double> change_fraction;  // per sample
  std::vector<RegionRecord> regions;

  double mean_change_fraction() const {
    double s = 0;
    for (double f : change_fraction) s += f;
    return change_fraction.empty() ? 0.0 : s / static_cast<double>(change_fraction.size());
  }

  /// Number of accepted regions per transition.
  std::vector<std::size_t> region_counts(std::size_t n_transitions) const {
    std::vector<std::size_t> c(n_transitions, 0);
    for (const auto& r : regions) ++c.at(static_cast<std::size_t>(r.transition));
    return c;
  }

  std::vector<std::size_t> pixel_counts(std::size_t n_transitions) const {
    std::vector<std::size_t> c(n_transitions, 0);
    for (const auto& r : regions) c.at(static_cast<std::size_t>(r.transition)) += r.pixels;
    return c;
  }

  /// Kish effective sample size of the pixel-weighted transition proportions.
  double effective_regions() const {
    double s = 0, s2 = 0;
    for (const auto& r : regions) {
      s += static_cast<double>(r.pixels);
      s2 += static_cast<double>(r.pixels) * static_cast<double>(r.pixels);
    }
    return s2 > 0 ? s * s / s2 : 0.0;
  }
};

namespace detail {

struct ShapeDraw {
  bool ellipse = false;
  int cy = 0, cx = 0, ry = 0, rx = 0;

  bool contains(int y, int x) const {
    if (!ellipse) return std::abs(y - cy) <= ry && std::abs(x - cx) <= rx;
    const double dy = (y - cy) / (ry + 0.5), dx = (x - cx) / (rx + 0.5);
    return dy * dy + dx * dx <= 1.0;
  }
};

inline ShapeDraw draw_shape(std::mt19937_64& rng, int H, int W, int min_r, int max_r) {
  std::uniform_int_distribution<int> ry(min_r, max_r), rx(min_r, max_r), cy(0, H - 1), cx(0, W - 1);
  std::bernoulli_distribution ell(0.5);
  ShapeDraw s;
  s.ellipse = ell(rng);
  s.ry = ry(rng);
  s.rx = rx(rng);
  s.cy = cy(rng);
  s.cx = cx(rng);
  return s;
}

template <typename Fn>
void for_each_pixel(const ShapeDraw& s, int H, int W, Fn&& fn) {
  for (int y = std::max(0, s.cy - s.ry); y <= std::min(H - 1, s.cy + s.ry); ++y)
    for (int x = std::max(0, s.cx - s.rx); x <= std::min(W - 1, s.cx + s.rx); ++x)
      if (s.contains(y, x)) fn(y, x);
}

inline Tensor<float> render_epoch(const std::vector<int>& classes, int H, int W, const GeneratorSpec& spec,
                                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> gain(1.0 - spec.gain_range, 1.0 + spec.gain_range);
  std::uniform_real_distribution<double> offset(-spec.offset_range, spec.offset_range);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double g = gain(rng), o = offset(rng);
  Tensor<float> img(Shape{3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const Rgb c = spec.colour(classes[static_cast<std::size_t>(y) * W + x]);
      for (int ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) = static_cast<float>(std::clamp(c[ch] * g + o + (spec.noise > 0 ? noise(rng) : 0.0), 0.0, 1.0));
    }
  return img;
}

}  // namespace detail

/// Builds sample `index` of the corpus. Region records are appended to `stats` when given.
inline BitemporalSample generate_sample(const GeneratorSpec& spec, int index, GeneratorStats* stats = nullptr) {
  const int H = spec.height, W = spec.width, N = spec.num_classes;
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::mt19937_64 rng(mix_seed(spec.seed, 0x5ca7, static_cast<std::uint64_t>(index)));

  // (a) epoch-1 mosaic over the background class
  std::vector<int> mosaic(HW, spec.background_class);
  std::uniform_int_distribution<int> n_shapes(spec.mosaic_shapes_min, spec.mosaic_shapes_max);
  std::uniform_int_distribution<int> cls(1, N);
  const int big = std::max(2, std::min(H, W) / 4);
  for (int k = n_shapes(rng); k > 0; --k) {
    const detail::ShapeDraw s = detail::draw_shape(rng, H, W, 2, big);
    const int c = cls(rng);
    detail::for_each_pixel(s, H, W, [&](int y, int x) { mosaic[static_cast<std::size_t>(y) * W + x] = c; });
  }

  // (b, c) change regions with transitions drawn independently of their size
  const std::vector<double> weights = spec.normalized_weights();
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  std::vector<int> e1 = mosaic, e2 = mosaic;
  std::vector<std::uint8_t> changed(HW, 0);
  std::size_t n_changed = 0;
  const double lo = spec.change_fraction - spec.change_tolerance / 2;
  const double hi = spec.change_fraction + spec.change_tolerance / 2;
  const int max_r = std::max(2, std::min(H, W) / 6);
  std::vector<RegionRecord> accepted;
  int rejections = 0;
  while (static_cast<double>(n_changed) / static_cast<double>(HW) < lo) {
    const int t = pick(rng);
    const detail::ShapeDraw s = detail::draw_shape(rng, H, W, 1, max_r);
    std::vector<std::size_t> fresh;
    detail::for_each_pixel(s, H, W, [&](int y, int x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (!changed[p]) fresh.push_back(p);
    });
    if (fresh.empty() || static_cast<double>(n_changed + fresh.size()) / static_cast<double>(HW) > hi) {
      if (++rejections > spec.max_retries)
        throw DataError("generator: cannot reach change fraction " + std::to_string(spec.change_fraction) +
                        " for sample " + std::to_string(index) + " within " + std::to_string(spec.max_retries) +
                        " retries");
      continue;
    }
    const Transition& tr = spec.transitions[static_cast<std::size_t>(t)];
    for (std::size_t p : fresh) {
      changed[p] = 1;
      e1[p] = tr.from;
      e2[p] = tr.to;
    }
    n_changed += fresh.size();
    accepted.push_back({index, t, fresh.size()});
  }

  // (d) rendering, (e) labels only inside change regions
  BitemporalSample s;
  char id[32];
  std::snprintf(id, sizeof(id), "s%05d", index);
  s.id = id;
  s.image1 = detail::render_epoch(e1, H, W, spec, rng);
  s.image2 = detail::render_epoch(e2, H, W, spec, rng);
  s.label1 = SemanticChangeMap(H, W, N);
  s.label2 = SemanticChangeMap(H, W, N);
  for (std::size_t p = 0; p < HW; ++p)
    if (changed[p]) {
      s.label1.classes[p] = static_cast<std::uint8_t>(e1[p]);
      s.label2.classes[p] = static_cast<std::uint8_t>(e2[p]);
    }
  if (stats) {
    stats->change_fraction.push_back(static_cast<double>(n_changed) / static_cast<double>(HW));
    stats->regions.insert(stats->regions.end(), accepted.begin(), accepted.end());
  }
  return s;
}

inline std::string split_of(const GeneratorSpec& spec, int index) {
  const auto c = spec.split_counts();
  if (index < c[0]) return "train";
  if (index < c[0] + c[1]) return "val";
  return "test";
}

inline void write_generator_stats(const fs::path& path, const GeneratorSpec& spec, const GeneratorStats& stats) {
  std::ofstream os(path);
  os << "sample,from_class,to_class,pixels\n";
  for (const auto& r : stats.regions) {
    const auto& t = spec.transitions[static_cast<std::size_t>(r.transition)];
    os << r.sample << "," << t.from << "," << t.to << "," << r.pixels << "\n";
  }
  if (!os) throw DataError("cannot write " + path.string());
}

/// Writes the whole corpus under `root` and returns its manifest.
inline DatasetManifest generate_dataset(const GeneratorSpec& spec, const fs::path& root,
                                        GeneratorStats* stats = nullptr) {
  spec.validate();
  DatasetManifest m;
  m.root = root;
  m.num_classes = spec.num_classes;
  m.height = spec.height;
  m.width = spec.width;
  m.palette.push_back({0, 0, 0});
  for (int k = 1; k <= spec.num_classes; ++k) m.palette.push_back(spec.colour(k));
  GeneratorStats local;
  for (int i = 0; i < spec.count; ++i) {
    const BitemporalSample s = generate_sample(spec, i, &local);
    save_sample(m, s);
    m.entries.push_back({split_of(spec, i), s.id});
  }
  write_manifest(m);
  write_generator_stats(root / "generator_stats.csv", spec, local);
  if (stats) *stats = std::move(local);
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Flip { identity, horizontal, vertical, rot90, rot180, rot270 };

inline Flip inverse(Flip f) {
  switch (f) {
    case Flip::rot90: return Flip::rot270;
    case Flip::rot270: return Flip::rot90;
    default: return f;
  }
}

inline const char* to_string(Flip f) {
  static const char* names[] = {"identity", "horizontal", "vertical", "rot90", "rot180", "rot270"};
  return names[static_cast<int>(f)];
}

namespace detail {

// Source coordinate for output (y, x) of an H x W input; rot90 is counter-clockwise.
inline std::pair<int, int> source_of(Flip f, int y, int x, int H, int W) {
  switch (f) {
    case Flip::horizontal: return {y, W - 1 - x};
    case Flip::vertical: return {H - 1 - y, x};
    case Flip::rot90: return {x, W - 1 - y};
    case Flip::rot180: return {H - 1 - y, W - 1 - x};
    case Flip::rot270: return {H - 1 - x, y};
    default: return {y, x};
  }
}

inline bool swaps_axes(Flip f) { return f == Flip::rot90 || f == Flip::rot270; }

}  // namespace detail

template <typename T>
Tensor<T> apply_flip(const Tensor<T>& img, Flip f) {
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int OH = detail::swaps_axes(f) ? W : H, OW = detail::swaps_axes(f) ? H : W;
  Tensor<T> out(Shape{C, OH, OW});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < OH; ++y)
      for (int x = 0; x < OW; ++x) {
        const auto [sy, sx] = detail::source_of(f, y, x, H, W);
        out.at(c, y, x) = img.at(c, sy, sx);
      }
  return out;
}

inline SemanticChangeMap apply_flip(const SemanticChangeMap& m, Flip f) {
  const int OH = detail::swaps_axes(f) ? m.width : m.height, OW = detail::swaps_axes(f) ? m.height : m.width;
  SemanticChangeMap out(OH, OW, m.num_classes);
  for (int y = 0; y < OH; ++y)
    for (int x = 0; x < OW; ++x) {
      const auto [sy, sx] = detail::source_of(f, y, x, m.height, m.width);
      out.at(y, x) = m.at(sy, sx);
    }
  return out;
}

inline BitemporalSample apply_flip(const BitemporalSample& s, Flip f) {
  return {s.id, apply_flip(s.image1, f), apply_flip(s.image2, f), apply_flip(s.label1, f), apply_flip(s.label2, f)};
}

/// Draws one of the six transforms; quarter turns only for square samples.
template <typename Rng>
Flip sample_flip(Rng& rng, bool square) {
  std::uniform_int_distribution<int> d(0, square ? 5 : 3);
  const int k = d(rng);
  if (!square && k == 3) return Flip::rot180;
  return static_cast<Flip>(k);
}

template <typename Rng>
BitemporalSample augment(const BitemporalSample& s, Rng& rng, Flip* chosen = nullptr) {
  const Flip f = sample_flip(rng, s.label1.height == s.label1.width);
  if (chosen) *chosen = f;
  return apply_flip(s, f);
}

/// Class histogram of a transition matrix computed straight from labels.
inline TransitionMatrix label_transitions(const std::vector<BitemporalSample>& samples, int num_classes) {
  TransitionMatrix tm(num_classes);
  for (const auto& s : samples) tm.add(s.label1, s.label2);
  tm.finalize();
  return tm;
}

}  // namespace scannet
