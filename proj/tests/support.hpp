#pragma once

// Helpers shared by the unit and acceptance tests: random tensors and maps,
// a central-difference gradient checker, and scratch directories.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "scannet/scannet.hpp"

namespace testing_support {

using namespace scannet;

inline Tensor<double> random_tensor(std::mt19937_64& rng, const Shape& s, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data) v = d(rng);
  return t;
}

inline Tensor<float> random_tensor_f(std::mt19937_64& rng, const Shape& s, float lo = -1, float hi = 1) {
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor<float> t(s);
  for (auto& v : t.data) v = d(rng);
  return t;
}

/// Random N x H x W probability grid (each pixel a point of the simplex, strictly positive).
inline Tensor<double> random_probs(std::mt19937_64& rng, int n, int h, int w) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Tensor<double> p(Shape{n, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += (p.at(k, y, x) = g(rng) + 1e-3);
      for (int k = 0; k < n; ++k) p.at(k, y, x) /= s;
    }
  return p;
}

/// A valid pair of semantic change maps: changed pixels carry distinct classes in both epochs.
inline std::pair<SemanticChangeMap, SemanticChangeMap> random_label_pair(std::mt19937_64& rng, int h, int w, int n,
                                                                         double change_prob = 0.4) {
  SemanticChangeMap a(h, w, n), b(h, w, n);
  std::bernoulli_distribution ch(change_prob);
  std::uniform_int_distribution<int> cls(1, n);
  for (std::size_t p = 0; p < a.size(); ++p) {
    if (!ch(rng) || n < 2) continue;
    const int x = cls(rng);
    int y = cls(rng);
    while (y == x) y = cls(rng);
    a.classes[p] = static_cast<std::uint8_t>(x);
    b.classes[p] = static_cast<std::uint8_t>(y);
  }
  return {a, b};
}

/// Arbitrary (not necessarily pairing-valid) map with values in 0..n.
inline SemanticChangeMap random_map(std::mt19937_64& rng, int h, int w, int n) {
  SemanticChangeMap m(h, w, n);
  std::uniform_int_distribution<int> cls(0, n);
  for (auto& c : m.classes) c = static_cast<std::uint8_t>(cls(rng));
  return m;
}

struct GradProbe {
  std::string name;
  Tensor<double>* value;
  const Tensor<double>* grad;
};

struct GradReport {
  int probes = 0;
  double max_rel_err = 0;
  std::string worst;
};

/// Relative error with a floor on the denominator so that two near-zero gradients compare absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss(true)` must rebuild the graph, run backward and fill every probe's grad;
/// `loss(false)` only evaluates. Probes `per_tensor` random entries of every tensor.
inline GradReport check_gradients(const std::function<double(bool)>& loss, const std::vector<GradProbe>& probes,
                                  int per_tensor, std::mt19937_64& rng, double h = 1e-6) {
  loss(true);
  std::vector<Tensor<double>> analytic;
  for (const auto& p : probes) analytic.push_back(*p.grad);
  GradReport rep;
  for (std::size_t t = 0; t < probes.size(); ++t) {
    Tensor<double>& v = *probes[t].value;
    std::uniform_int_distribution<std::size_t> idx(0, v.size() - 1);
    const int n = std::min<int>(per_tensor, static_cast<int>(v.size()));
    for (int k = 0; k < n; ++k) {
      const std::size_t i = per_tensor >= static_cast<int>(v.size()) ? static_cast<std::size_t>(k) : idx(rng);
      const double orig = v[i];
      v[i] = orig + h;
      const double up = loss(false);
      v[i] = orig - h;
      const double down = loss(false);
      v[i] = orig;
      const double num = (up - down) / (2 * h);
      const double err = relative_error(analytic[t][i], num);
      ++rep.probes;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = probes[t].name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[t][i]) +
                    " numeric=" + std::to_string(num);
      }
    }
  }
  return rep;
}

/// Probes for every entry of a parameter store.
inline std::vector<GradProbe> store_probes(ParameterStore<double>& p) {
  std::vector<GradProbe> out;
  for (auto& e : p.entries()) out.push_back({e.name, &e.value, &e.grad});
  return out;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("scannet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Small model configuration for fast tests.
inline ModelConfig tiny_config(int size = 16) {
  ModelConfig c;
  c.num_classes = 3;
  c.encoder_channels_u = 4;
  c.encoder_channels_v = 4;
  c.stem_channels = 2;
  c.stripe_width = 2;
  c.attention_layers = 1;
  c.heads_per_group = 1;
  c.input_height = size;
  c.input_width = size;
  c.change_blocks = 1;
  c.max_norm_groups = 2;
  return c;
}

}  // namespace testing_support
