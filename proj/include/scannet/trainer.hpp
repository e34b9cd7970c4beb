#pragma once

// Optimization loop: SGD with Nesterov momentum under a polynomial learning
// rate decay, evaluation, and bit-exact checkpoint / resume.
//
// Every random choice during training (epoch shuffles, augmentation) is a pure
// function of (seed, epoch or iteration, slot), so a run restored from a
// checkpoint continues exactly as the uninterrupted run would.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "scannet/dataio.hpp"
#include "scannet/metrics.hpp"
#include "scannet/model.hpp"
#include "scannet/objectives.hpp"

namespace scannet {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 8;
  double lr0 = 0.1;
  double lr_power = 1.5;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int eval_every = 1;  // epochs between validation passes; 0 = only after the last epoch
  bool augment = true;
  LossConfig loss;

  void validate() const {
    std::vector<std::string> errs;
    if (epochs < 1) errs.push_back("train.epochs must be >= 1");
    if (batch_size < 1) errs.push_back("train.batch_size must be >= 1");
    if (!(lr0 > 0)) errs.push_back("train.lr0 must be > 0");
    if (!(lr_power >= 0)) errs.push_back("train.lr_power must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) errs.push_back("train.momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) errs.push_back("train.weight_decay must be >= 0");
    if (eval_every < 0) errs.push_back("train.eval_every must be >= 0");
    if (errs.empty()) return;
    std::string msg = "invalid train config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  static TrainConfig read(ConfigReader& r) {
    TrainConfig c;
    r.read("train.epochs", c.epochs);
    r.read("train.batch_size", c.batch_size);
    r.read("train.lr0", c.lr0);
    r.read("train.lr_power", c.lr_power);
    r.read("train.momentum", c.momentum);
    r.read("train.weight_decay", c.weight_decay);
    r.read("train.seed", c.seed);
    r.read("train.eval_every", c.eval_every);
    r.read("train.augment", c.augment);
    c.loss = LossConfig::read(r, "loss.");
    c.validate();
    return c;
  }

  /// Identifies everything that shapes the optimization trajectory.
  std::uint64_t fingerprint() const {
    std::ostringstream os;
    os.precision(17);
    os << epochs << ' ' << batch_size << ' ' << lr0 << ' ' << lr_power << ' ' << momentum << ' ' << weight_decay << ' '
       << seed << ' ' << augment << ' ' << loss.lambda_chg << ' ' << loss.use_psd << ' ' << loss.use_sc << ' '
       << loss.sc_swap_cases << ' ' << loss.full_binary_ce << ' ' << to_string(loss.pseudo_source) << ' '
       << loss.eps;
    return fnv1a64(os.str());
  }
};

/// lr0 * (1 - iteration / total)^power.
inline double lr_schedule(long iteration, long total, double lr0, double power) {
  if (total <= 0) throw std::invalid_argument("lr_schedule: total iterations must be positive");
  if (iteration < 0 || iteration > total)
    throw std::invalid_argument("lr_schedule: iteration " + std::to_string(iteration) + " outside [0, " +
                                std::to_string(total) + "]");
  if (iteration == total) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(iteration) / static_cast<double>(total), power);
}

template <typename T>
struct TrainState {
  long iteration = 0;
  long total_iterations = 0;
  std::uint64_t seed = 0;
  double best_metric = -1.0;
  long best_iteration = -1;
  std::vector<Tensor<T>> momentum;  // one buffer per parameter, in store order

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

inline long steps_per_epoch(std::size_t samples, int batch_size) {
  return static_cast<long>(samples / static_cast<std::size_t>(batch_size));
}

template <typename T>
TrainState<T> initial_state(const ScanNet<T>& model, const TrainConfig& cfg, std::size_t train_samples) {
  const long spe = steps_per_epoch(train_samples, cfg.batch_size);
  if (spe == 0)
    throw DataError("training split has " + std::to_string(train_samples) + " samples, fewer than batch_size " +
                    std::to_string(cfg.batch_size));
  TrainState<T> s;
  s.total_iterations = spe * cfg.epochs;
  s.seed = cfg.seed;
  for (const auto& e : model.params().entries()) s.momentum.emplace_back(e.value.shape);
  return s;
}

struct StepResult {
  double lr = 0;
  LossBreakdown loss;  // averaged over the batch
};

/// Deterministic sample order for one epoch.
inline std::vector<std::size_t> epoch_order(std::uint64_t seed, long epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, 0x5107f1e, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline void check_finite_loss(const LossBreakdown& l, const std::string& where) {
  const std::pair<const char*, double> terms[] = {{"L_sem", l.sem}, {"L_psd", l.psd}, {"L_sc", l.sc}, {"L_chg", l.chg}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw NumericError("non-finite " + std::string(name) + " (" + std::to_string(v) + ") " + where);
  if (!std::isfinite(l.total)) throw NumericError("non-finite total loss " + where);
}

/// Forward + backward for one sample; gradients are added into the parameter store scaled by `weight`.
template <typename T>
LossBreakdown accumulate_sample_gradient(ScanNet<T>& model, const BitemporalSample& s, const LossConfig& loss,
                                         T weight) {
  Tape<T> tape;
  Binder<T> b(tape, model.params(), true);
  const ForwardOutputs f = model.forward(b, s.image1.template cast<T>(), s.image2.template cast<T>());
  const LossTerms terms =
      total_loss(tape, f.prob1, f.prob2, f.change_prob, s.label1, s.label2, model.config().pseudo_threshold, loss);
  check_finite_loss(terms.values, "on sample '" + s.id + "'");
  tape.backward(terms.total, weight);
  return terms.values;
}

/// Applies one Nesterov momentum update (buf = mu*buf + g; p -= lr*(g + mu*buf)).
template <typename T>
void nesterov_update(ParameterStore<T>& params, std::vector<Tensor<T>>& momentum, double lr, double mu,
                     double weight_decay) {
  auto& entries = params.entries();
  if (momentum.size() != entries.size()) throw std::logic_error("momentum buffers do not match parameters");
  const T tlr = static_cast<T>(lr), tmu = static_cast<T>(mu), wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T>& p = entries[i].value;
    const Tensor<T>& g = entries[i].grad;
    Tensor<T>& buf = momentum[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g[j] + wd * p[j];
      buf[j] = tmu * buf[j] + gj;
      p[j] -= tlr * (gj + tmu * buf[j]);
    }
  }
}

/// One optimizer step on `batch` (already augmented). Advances state.iteration.
template <typename T>
StepResult train_step(ScanNet<T>& model, const std::vector<BitemporalSample>& batch, TrainState<T>& state,
                      const TrainConfig& cfg) {
  if (batch.empty()) throw DataError("train_step: empty batch");
  StepResult r;
  r.lr = lr_schedule(state.iteration, state.total_iterations, cfg.lr0, cfg.lr_power);
  model.params().zero_grad();
  const T w = T(1) / static_cast<T>(batch.size());
  for (const auto& s : batch) {
    const LossBreakdown l = accumulate_sample_gradient(model, s, cfg.loss, w);
    r.loss.sem += l.sem;
    r.loss.psd += l.psd;
    r.loss.sc += l.sc;
    r.loss.chg += l.chg;
    r.loss.total += l.total;
    r.loss.pseudo_coverage += l.pseudo_coverage;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double* v : {&r.loss.sem, &r.loss.psd, &r.loss.sc, &r.loss.chg, &r.loss.total, &r.loss.pseudo_coverage}) *v *= inv;
  for (const auto& e : model.params().entries())
    if (!e.grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + e.name + "'");
  nesterov_update(model.params(), state.momentum, r.lr, cfg.momentum, cfg.weight_decay);
  ++state.iteration;
  return r;
}

/// The batch consumed at `iteration`, with its deterministic augmentation.
template <typename T>
std::vector<BitemporalSample> batch_for_iteration(const std::vector<BitemporalSample>& train, const TrainState<T>& state,
                                                  const TrainConfig& cfg) {
  const long spe = steps_per_epoch(train.size(), cfg.batch_size);
  const long epoch = state.iteration / spe, slot = state.iteration % spe;
  const auto order = epoch_order(state.seed, epoch, train.size());
  std::vector<BitemporalSample> batch;
  for (int j = 0; j < cfg.batch_size; ++j) {
    const BitemporalSample& s = train[order[static_cast<std::size_t>(slot * cfg.batch_size + j)]];
    if (!cfg.augment) {
      batch.push_back(s);
      continue;
    }
    std::mt19937_64 rng(mix_seed(state.seed, 0xa11a + static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(state.iteration)));
    batch.push_back(augment(s, rng));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  MetricsReport report;
  ConfusionMatrix confusion;
  TransitionMatrix transitions;
  std::size_t samples = 0;
};

struct PredictedPair {
  std::string id;
  SemanticChangeMap pred1, pred2;
};

/// Pools one confusion matrix over both epochs of every prediction.
inline EvalResult evaluate_predictions(const std::vector<PredictedPair>& preds,
                                       const std::vector<BitemporalSample>& truth, int num_classes) {
  if (truth.empty()) throw DataError("evaluate: split is empty");
  if (preds.size() != truth.size()) throw DataError("evaluate: prediction count does not match the split");
  EvalResult r{MetricsReport{}, ConfusionMatrix(num_classes), TransitionMatrix(num_classes), truth.size()};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    r.confusion = accumulate_confusion(preds[i].pred1, preds[i].pred2, truth[i].label1, truth[i].label2, std::move(r.confusion));
    r.transitions.add(preds[i].pred1, preds[i].pred2);
  }
  r.transitions.finalize();
  r.report = compute_metrics(r.confusion);
  return r;
}

template <typename T>
PredictedPair predict_sample(ScanNet<T>& model, const BitemporalSample& s, double change_threshold = 0.5) {
  auto p = model.predict(s.image1.template cast<T>(), s.image2.template cast<T>());
  auto [m1, m2] = compose_prediction(p.prob1, p.prob2, p.change_prob, change_threshold);
  return {s.id, std::move(m1), std::move(m2)};
}

/// Runs the model over `split` and scores it. Parameters are only read.
template <typename T>
EvalResult evaluate(ScanNet<T>& model, const std::vector<BitemporalSample>& split, double change_threshold = 0.5,
                    std::vector<PredictedPair>* predictions = nullptr) {
  if (split.empty()) throw DataError("evaluate: split is empty");
  std::vector<PredictedPair> preds;
  preds.reserve(split.size());
  for (const auto& s : split) preds.push_back(predict_sample(model, s, change_threshold));
  EvalResult r = evaluate_predictions(preds, split, model.config().num_classes);
  if (predictions) *predictions = std::move(preds);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "SCANNETC" | u32 version | u64 model-config hash | u64 payload size | payload | u64 FNV-1a(payload)
//   payload: model config text, train fingerprint, train state, parameters, momentum buffers

inline constexpr char kCheckpointMagic[8] = {'S', 'C', 'A', 'N', 'N', 'E', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  ModelConfig model;
  std::uint64_t train_fingerprint = 0;
};

namespace detail {

inline void put_string(std::ostream& os, const std::string& s) {
  ParameterStore<double>::put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t limit = 1 << 20) {
  const auto n = ParameterStore<double>::get<std::uint64_t>(is);
  if (n > limit) throw DataError("corrupt checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw DataError("corrupt checkpoint: unexpected end of data");
  return s;
}

/// Reads the framed payload and verifies magic, version and checksum.
inline std::pair<CheckpointHeader, std::string> read_frame(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw DataError(path.string() + " is not a checkpoint (bad magic)");
  using P = ParameterStore<double>;
  CheckpointHeader h;
  h.version = P::get<std::uint32_t>(in);
  if (h.version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(h.version) + " in " + path.string());
  h.config_hash = P::get<std::uint64_t>(in);
  const auto size = P::get<std::uint64_t>(in);
  if (size > (std::uint64_t{1} << 34)) throw DataError("corrupt checkpoint: implausible payload size");
  std::string payload(size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(size));
  if (!in) throw DataError("corrupt checkpoint " + path.string() + ": truncated payload");
  const auto checksum = P::get<std::uint64_t>(in);
  if (checksum != fnv1a64(payload)) throw DataError("corrupt checkpoint " + path.string() + ": checksum mismatch");
  std::istringstream ps(payload);
  h.model = ModelConfig::from_flat(FlatConfig::parse_string(get_string(ps)), "");
  if (h.model.hash() != h.config_hash) throw DataError("corrupt checkpoint: config hash does not match its config");
  h.train_fingerprint = P::get<std::uint64_t>(ps);
  return {h, payload};
}

}  // namespace detail

/// Writes a checkpoint atomically (temporary file + rename).
template <typename T>
void save_checkpoint(const fs::path& path, const ScanNet<T>& model, const TrainState<T>& state,
                     std::uint64_t train_fingerprint = 0) {
  using P = ParameterStore<double>;
  std::ostringstream ps;
  detail::put_string(ps, model.config().to_flat("").serialize());
  P::put<std::uint64_t>(ps, train_fingerprint);
  P::put<std::int64_t>(ps, state.iteration);
  P::put<std::int64_t>(ps, state.total_iterations);
  P::put<std::uint64_t>(ps, state.seed);
  P::put<double>(ps, state.best_metric);
  P::put<std::int64_t>(ps, state.best_iteration);
  model.params().write(ps);
  P::put<std::uint64_t>(ps, state.momentum.size());
  for (const auto& m : state.momentum)
    for (T v : m.data) P::put<double>(ps, static_cast<double>(v));
  const std::string payload = ps.str();

  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os.write(kCheckpointMagic, 8);
    P::put<std::uint32_t>(os, kCheckpointVersion);
    P::put<std::uint64_t>(os, model.config().hash());
    P::put<std::uint64_t>(os, payload.size());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    P::put<std::uint64_t>(os, fnv1a64(payload));
    if (!os) throw DataError("cannot write checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline CheckpointHeader read_checkpoint_header(const fs::path& path) { return detail::read_frame(path).first; }

/// Restores parameters and training state. Nothing is modified unless the whole file is valid and
/// its model configuration matches. A nonzero `expect_fingerprint` also pins the training setup.
template <typename T>
void load_checkpoint(const fs::path& path, ScanNet<T>& model, TrainState<T>* state,
                     std::uint64_t expect_fingerprint = 0) {
  using P = ParameterStore<double>;
  auto [h, payload] = detail::read_frame(path);
  if (h.config_hash != model.config().hash())
    throw DataError("checkpoint " + path.string() + " was written for a different model configuration");
  if (expect_fingerprint != 0 && h.train_fingerprint != expect_fingerprint)
    throw DataError("checkpoint " + path.string() + " was written with different training settings");
  std::istringstream ps(payload);
  detail::get_string(ps);
  P::get<std::uint64_t>(ps);
  TrainState<T> s;
  s.iteration = P::get<std::int64_t>(ps);
  s.total_iterations = P::get<std::int64_t>(ps);
  s.seed = P::get<std::uint64_t>(ps);
  s.best_metric = P::get<double>(ps);
  s.best_iteration = P::get<std::int64_t>(ps);
  if (s.iteration < 0 || s.iteration > s.total_iterations) throw DataError("corrupt checkpoint: iteration out of range");
  ParameterStore<T> staged = model.params();
  staged.read_values(ps);
  const auto n = P::get<std::uint64_t>(ps);
  if (n != staged.entries().size()) throw DataError("corrupt checkpoint: momentum buffer count mismatch");
  for (const auto& e : staged.entries()) {
    Tensor<T> m(e.value.shape);
    for (auto& v : m.data) v = static_cast<T>(P::get<double>(ps));
    s.momentum.push_back(std::move(m));
  }
  if (ps.peek() != std::char_traits<char>::eof()) throw DataError("corrupt checkpoint: trailing data");
  model.params() = std::move(staged);
  if (state) *state = std::move(s);
}

// ---------------------------------------------------------------------------
// Fit loop

inline std::string format_step_line(long iteration, long epoch, const StepResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "iter=%ld epoch=%ld lr=%.9g loss=%.9g sem=%.9g psd=%.9g sc=%.9g chg=%.9g coverage=%.6f",
                iteration, epoch, r.lr, r.loss.total, r.loss.sem, r.loss.psd, r.loss.sc, r.loss.chg,
                r.loss.pseudo_coverage);
  return buf;
}

inline std::string format_eval_line(long iteration, long epoch, const std::string& split, const MetricsReport& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "iteration=%ld epoch=%ld split=%s oa=%.9g miou=%.9g sek=%.9g f_scd=%.9g", iteration,
                epoch, split.c_str(), m.oa, m.miou, m.sek, m.f_scd);
  return buf;
}

struct FitOptions {
  fs::path out_dir;                       // empty = no files
  long stop_at_iteration = -1;            // stop early (checkpointing state) once reached
  std::function<void(long, const StepResult&)> on_step;
  std::function<void(long, const EvalResult&)> on_eval;
};

struct FitResult {
  std::vector<StepResult> steps;
  std::vector<std::pair<long, MetricsReport>> evals;
  bool stopped_early = false;
};

namespace detail {

// Drops log lines written after `iteration` (left behind by a run that stopped past its checkpoint).
inline void truncate_log(const fs::path& path, const std::string& key, long iteration) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    const auto pos = line.find(key + "=");
    if (pos != std::string::npos && std::stol(line.substr(pos + key.size() + 1)) > iteration) continue;
    keep.push_back(line);
  }
  in.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
}

}  // namespace detail

/// Trains from `state` to the end of the schedule (or opts.stop_at_iteration).
template <typename T>
FitResult fit(ScanNet<T>& model, const std::vector<BitemporalSample>& train, const std::vector<BitemporalSample>& val,
              TrainState<T>& state, const TrainConfig& cfg, const FitOptions& opts = {}) {
  cfg.validate();
  const long spe = steps_per_epoch(train.size(), cfg.batch_size);
  if (spe == 0) throw DataError("training split is smaller than one batch");
  if (state.total_iterations != spe * cfg.epochs)
    throw DataError("training state expects " + std::to_string(state.total_iterations) + " iterations, config gives " +
                    std::to_string(spe * cfg.epochs));
  const bool files = !opts.out_dir.empty();
  std::ofstream train_log, metrics_log;
  if (files) {
    fs::create_directories(opts.out_dir);
    detail::truncate_log(opts.out_dir / "train_log.txt", "iter", state.iteration);
    detail::truncate_log(opts.out_dir / "metrics_log.txt", "iteration", state.iteration);
    train_log.open(opts.out_dir / "train_log.txt", std::ios::app);
    metrics_log.open(opts.out_dir / "metrics_log.txt", std::ios::app);
  }
  const std::uint64_t fp = cfg.fingerprint();
  FitResult result;
  while (state.iteration < state.total_iterations) {
    if (opts.stop_at_iteration >= 0 && state.iteration >= opts.stop_at_iteration) {
      result.stopped_early = true;
      break;
    }
    const long epoch = state.iteration / spe;
    const auto batch = batch_for_iteration(train, state, cfg);
    const StepResult r = train_step(model, batch, state, cfg);
    result.steps.push_back(r);
    if (files) train_log << format_step_line(state.iteration, epoch, r) << '\n' << std::flush;
    if (opts.on_step) opts.on_step(state.iteration, r);

    const bool epoch_end = state.iteration % spe == 0;
    const long done_epochs = state.iteration / spe;
    const bool last = state.iteration == state.total_iterations;
    const bool do_eval = epoch_end && (last || (cfg.eval_every > 0 && done_epochs % cfg.eval_every == 0));
    if (do_eval && !val.empty()) {
      const EvalResult ev = evaluate(model, val);
      result.evals.emplace_back(state.iteration, ev.report);
      if (files) metrics_log << format_eval_line(state.iteration, done_epochs, "val", ev.report) << '\n' << std::flush;
      if (opts.on_eval) opts.on_eval(state.iteration, ev);
      if (ev.report.f_scd > state.best_metric) {
        state.best_metric = ev.report.f_scd;
        state.best_iteration = state.iteration;
        if (files) save_checkpoint(opts.out_dir / "checkpoint_best.bin", model, state, fp);
      }
    }
    if (files && epoch_end) save_checkpoint(opts.out_dir / "checkpoint_last.bin", model, state, fp);
  }
  if (files) {
    save_checkpoint(opts.out_dir / "checkpoint_last.bin", model, state, fp);
    // Without a validation split the final weights stand in for the best ones.
    if (val.empty() && !result.stopped_early) save_checkpoint(opts.out_dir / "checkpoint_best.bin", model, state, fp);
  }
  return result;
}

}  // namespace scannet
