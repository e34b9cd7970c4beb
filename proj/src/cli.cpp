#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "scannet/scannet.hpp"

namespace scannet::cli {
namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Flat key = value configuration file");
  cmd->add_option("--override", c.overrides, "Dotted key=value override; repeatable, last wins")->take_all();
  cmd->add_option("--seed", c.seed, "Seed for every random choice");
  cmd->add_option("--out", c.out, "Output directory (all files land here)")->required();
  cmd->add_flag("--force", c.force, "Allow writing into a non-empty output directory");
}

/// defaults < file < --override < --seed
FlatConfig assemble(const FlatConfig& defaults, const Common& c, const std::string& seed_key) {
  FlatConfig cfg = defaults;
  if (!c.config_path.empty()) cfg.merge(FlatConfig::load(c.config_path));
  for (const auto& o : c.overrides) cfg.set_assignment(o);
  if (c.seed) cfg.set(seed_key, std::to_string(*c.seed));
  return cfg;
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << text;
  if (!os) throw DataError("cannot write " + path.string());
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::vector<BitemporalSample> load_nonempty(const DatasetManifest& m, const std::string& split) {
  auto samples = load_split(m, split);
  if (samples.empty()) throw DataError("split '" + split + "' of " + m.root.string() + " is empty");
  return samples;
}

ScanNet<float> load_model(const std::string& checkpoint, const DatasetManifest& data) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  const CheckpointHeader h = read_checkpoint_header(checkpoint);
  if (h.model.num_classes != data.num_classes)
    throw DataError("checkpoint has " + std::to_string(h.model.num_classes) + " classes, dataset has " +
                    std::to_string(data.num_classes));
  ScanNet<float> model(h.model);
  load_checkpoint(checkpoint, model, static_cast<TrainState<float>*>(nullptr));
  return model;
}

// --------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::optional<int> count;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const fs::path root = a.common.out;
  if (non_empty_dir(root) && !a.common.force)
    throw UsageError("output directory " + root.string() + " is not empty (use --force to overwrite)");
  FlatConfig cfg = assemble({}, a.common, "gen.seed");
  if (a.count) cfg.set("gen.count", std::to_string(*a.count));
  ConfigReader r(cfg);
  const GeneratorSpec spec = GeneratorSpec::read(r);
  for (const char* p : {"model.", "train.", "loss."}) r.accept_prefix(p);
  r.require_all_known();
  if (a.common.force)
    for (const char* d : {"im1", "im2", "label1", "label2"}) fs::remove_all(root / d);

  GeneratorStats stats;
  const DatasetManifest m = generate_dataset(spec, root, &stats);
  double lo = 1, hi = 0;
  for (double f : stats.change_fraction) {
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  const auto c = spec.split_counts();
  out << "generated " << m.entries.size() << " samples (" << c[0] << " train, " << c[1] << " val, " << c[2]
      << " test) under " << root.string() << "\n";
  out << "change fraction: mean " << fixed(stats.mean_change_fraction(), 4) << ", min " << fixed(lo, 4) << ", max "
      << fixed(hi, 4) << " (target " << fixed(spec.change_fraction, 2) << " +/- " << fixed(spec.change_tolerance, 2)
      << ")\n";
  const auto pixels = stats.pixel_counts(spec.transitions.size());
  const auto regions = stats.region_counts(spec.transitions.size());
  const auto w = spec.normalized_weights();
  double total = 0;
  for (auto p : pixels) total += static_cast<double>(p);
  out << "transition  target  regions  pixel share\n";
  for (std::size_t k = 0; k < spec.transitions.size(); ++k) {
    std::ostringstream name;
    name << spec.transitions[k].from << "->" << spec.transitions[k].to;
    out << std::left << std::setw(10) << name.str() << std::right << std::setw(8) << fixed(w[k], 4) << std::setw(9)
        << regions[k] << std::setw(13) << fixed(total > 0 ? pixels[k] / total : 0.0, 4) << "\n";
  }
  return kOk;
}

// --------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data;
  bool resume = false;
  long stop_at = -1;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const DatasetManifest data = read_manifest(a.data);
  FlatConfig defaults;
  defaults.set("model.num_classes", std::to_string(data.num_classes));
  if (data.height > 0) defaults.set("model.input_height", std::to_string(data.height));
  if (data.width > 0) defaults.set("model.input_width", std::to_string(data.width));
  const FlatConfig cfg = assemble(defaults, a.common, "train.seed");
  ConfigReader r(cfg);
  const ModelConfig mcfg = ModelConfig::read(r);
  const TrainConfig tcfg = TrainConfig::read(r);
  r.accept_prefix("gen.");
  r.require_all_known();
  if (mcfg.num_classes != data.num_classes)
    throw DataError("model.num_classes = " + std::to_string(mcfg.num_classes) + " but the dataset has " +
                    std::to_string(data.num_classes) + " classes");

  const fs::path dir = a.common.out;
  if (!a.resume && fs::exists(dir / "checkpoint_last.bin") && !a.common.force)
    throw UsageError(dir.string() + " already holds a training run (use --resume or --force)");
  if (!a.resume)
    for (const char* f : {"train_log.txt", "metrics_log.txt", "checkpoint_last.bin", "checkpoint_best.bin"})
      fs::remove(dir / f);

  const auto train = load_nonempty(data, "train");
  const auto val = load_split(data, "val");
  ScanNet<float> model(mcfg, mix_seed(tcfg.seed, 0x1417));
  TrainState<float> state = initial_state(model, tcfg, train.size());
  if (a.resume) {
    load_checkpoint(dir / "checkpoint_last.bin", model, &state, tcfg.fingerprint());
    out << "resuming at iteration " << state.iteration << " of " << state.total_iterations << "\n";
  }
  write_text(dir / "config_resolved.cfg", cfg.serialize());

  FitOptions opts;
  opts.out_dir = dir;
  opts.stop_at_iteration = a.stop_at;
  const long spe = steps_per_epoch(train.size(), tcfg.batch_size);
  opts.on_step = [&](long it, const StepResult& s) {
    if (it % spe == 0 || it == 1)
      out << "iter " << it << "/" << state.total_iterations << "  lr " << std::setprecision(4) << s.lr << "  loss "
          << s.loss.total << "\n";
  };
  opts.on_eval = [&](long it, const EvalResult& e) {
    out << "eval @" << it << "  F_scd " << fixed(100 * e.report.f_scd, 2) << "  mIoU " << fixed(100 * e.report.miou, 2)
        << "  SeK " << fixed(100 * e.report.sek, 2) << "\n";
  };
  out << "training " << model.params().parameter_count() << " parameters on " << train.size() << " samples ("
      << spe << " steps/epoch, " << state.total_iterations << " steps)\n";
  const FitResult res = fit(model, train, val, state, tcfg, opts);
  out << (res.stopped_early ? "stopped" : "finished") << " at iteration " << state.iteration << "; best val F_scd "
      << (state.best_iteration >= 0 ? fixed(100 * state.best_metric, 2) : std::string("n/a")) << "\n";
  return kOk;
}

// --------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::string pred_dir;
  bool use_gt = false;
  bool save_predictions = false;
  double change_threshold = 0.5;
};

std::vector<PredictedPair> gather_predictions(const EvalArgs& a, const DatasetManifest& data,
                                              const std::vector<BitemporalSample>& samples) {
  const int sources = (a.use_gt ? 1 : 0) + (a.checkpoint.empty() ? 0 : 1) + (a.pred_dir.empty() ? 0 : 1);
  if (sources != 1) throw UsageError("give exactly one of --checkpoint, --pred-dir, --use-gt");
  std::vector<PredictedPair> preds;
  if (a.use_gt) {
    for (const auto& s : samples) preds.push_back({s.id, s.label1, s.label2});
  } else if (!a.pred_dir.empty()) {
    DatasetManifest pm = data;
    pm.root = a.pred_dir;
    for (const auto& s : samples)
      preds.push_back({s.id, read_label(pm.file("label1", s.id), data.num_classes),
                       read_label(pm.file("label2", s.id), data.num_classes)});
  } else {
    ScanNet<float> model = load_model(a.checkpoint, data);
    for (const auto& s : samples) preds.push_back(predict_sample(model, s, a.change_threshold));
  }
  return preds;
}

void save_predictions(const fs::path& dir, const DatasetManifest& data, const std::vector<PredictedPair>& preds) {
  DatasetManifest pm = data;
  pm.root = dir;
  for (const auto& p : preds) {
    write_label(pm.file("label1", p.id), p.pred1);
    write_label(pm.file("label2", p.id), p.pred2);
  }
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const DatasetManifest data = read_manifest(a.data);
  const auto samples = load_nonempty(data, a.split);
  const auto preds = gather_predictions(a, data, samples);
  const EvalResult r = evaluate_predictions(preds, samples, data.num_classes);
  const fs::path dir = a.common.out;
  write_text(dir / "metrics.txt", format_metrics_flat(r.report));
  write_text(dir / "metrics_table.txt", format_metrics_table(r.report));
  write_text(dir / "transitions.csv", format_transitions_csv(r.transitions));
  if (a.save_predictions) save_predictions(dir / "pred", data, preds);
  out << "split '" << a.split << "': " << samples.size() << " samples, " << r.report.pixels << " pixel labels\n";
  out << format_metrics_table(r.report);
  return kOk;
}

int cmd_analyze(const EvalArgs& a, std::ostream& out) {
  const DatasetManifest data = read_manifest(a.data);
  const auto samples = load_nonempty(data, a.split);
  const auto preds = gather_predictions(a, data, samples);
  TransitionMatrix tm(data.num_classes);
  for (const auto& p : preds) tm.add(p.pred1, p.pred2);
  tm.finalize();
  const fs::path dir = a.common.out;
  write_text(dir / "transitions.csv", format_transitions_csv(tm));
  std::ostringstream summary;
  summary << "change_pixels=" << tm.total << "\n"
          << "false_changes=" << tm.false_changes << "\n"
          << "false_change_percent=" << std::setprecision(10) << 100.0 * tm.false_change_fraction() << "\n";
  write_text(dir / "analysis.txt", summary.str());
  out << "from  to   count       share\n";
  for (const auto& row : tm.rows)
    out << std::setw(4) << row.from << std::setw(4) << row.to << std::setw(10) << row.count << std::setw(11)
        << fixed(100 * row.proportion, 2) << " %" << (row.false_change() ? "  (false change)" : "") << "\n";
  out << "false changes: " << fixed(100 * tm.false_change_fraction(), 2) << " % (" << tm.false_changes << " of "
      << tm.total << " change pixels)\n";
  return kOk;
}

// --------------------------------------------------------------------------

struct PseudoArgs {
  Common common;
  std::string data;
  std::string checkpoint;
  std::string split = "train";
  std::vector<double> thresholds;
  std::string source = "first";
  bool preview = false;
};

int cmd_pseudo_preview(const PseudoArgs& a, std::ostream& out) {
  std::vector<double> ts = a.thresholds.empty() ? std::vector<double>{0.8} : a.thresholds;
  for (double t : ts)
    if (!(t > 0 && t <= 1)) throw UsageError("--threshold values must lie in (0, 1]");
  const PseudoSource src = parse_pseudo_source(a.source);
  const DatasetManifest data = read_manifest(a.data);
  const auto samples = load_nonempty(data, a.split);
  ScanNet<float> model = load_model(a.checkpoint, data);
  std::vector<decltype(model.predict(samples[0].image1, samples[0].image2))> probs;
  for (const auto& s : samples) probs.push_back(model.predict(s.image1, s.image2));

  const fs::path dir = a.common.out;
  std::ostringstream csv;
  csv << "threshold,labeled,unchanged,coverage\n";
  out << "threshold  coverage\n";
  for (double t : ts) {
    char tag[32];
    std::snprintf(tag, sizeof(tag), "T%.4g", t);
    std::size_t labeled = 0, unchanged = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const ChangeMask mask = derive_change_mask(samples[i].label1, samples[i].label2);
      const PseudoLabelMap pl = make_pseudo_labels(probs[i].prob1, probs[i].prob2, mask, t, src);
      for (std::size_t p = 0; p < mask.size(); ++p)
        if (!mask.mask[p]) {
          ++unchanged;
          labeled += pl.classes[p] != 0;
        }
      write_label(dir / tag / (samples[i].id + ".png"), pl);
      if (a.preview) write_label_preview(dir / tag / "preview" / (samples[i].id + ".png"), pl, data.palette);
    }
    const double cov = unchanged ? static_cast<double>(labeled) / static_cast<double>(unchanged) : 0.0;
    csv << t << "," << labeled << "," << unchanged << "," << std::setprecision(10) << cov << "\n";
    out << std::left << std::setw(11) << t << std::right << fixed(100 * cov, 2) << " %\n";
  }
  write_text(dir / "coverage.csv", csv.str());
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic change detection: data generation, training, evaluation and analysis"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic bi-temporal dataset (gen.* keys)");
  add_common(g, gen.common);
  g->add_option("--count", gen.count, "Number of samples (overrides gen.count)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model (model.*, train.*, loss.* keys)");
  add_common(t, tr.common);
  t->add_option("--data", tr.data, "Dataset root")->required();
  t->add_flag("--resume", tr.resume, "Continue from <out>/checkpoint_last.bin");
  t->add_option("--stop-at-iteration", tr.stop_at, "Stop (with a checkpoint) once this iteration is reached");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predictions on a split");
  add_common(e, ev.common);
  e->add_option("--data", ev.data, "Dataset root")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
  e->add_option("--pred-dir", ev.pred_dir, "Directory with label1/ label2/ prediction maps");
  e->add_flag("--use-gt", ev.use_gt, "Score the ground truth against itself");
  e->add_option("--split", ev.split, "Split to score")->capture_default_str();
  e->add_option("--change-threshold", ev.change_threshold, "Change probability threshold")->capture_default_str();
  e->add_flag("--save-predictions", ev.save_predictions, "Write predicted maps under <out>/pred");

  EvalArgs an;
  an.split = "test";
  auto* n = app.add_subcommand("analyze", "From-to transition analysis of predicted changes");
  add_common(n, an.common);
  n->add_option("--data", an.data, "Dataset root")->required();
  n->add_option("--checkpoint", an.checkpoint, "Model checkpoint");
  n->add_option("--pred-dir", an.pred_dir, "Directory with label1/ label2/ prediction maps");
  n->add_flag("--use-gt", an.use_gt, "Analyze the ground-truth labels");
  n->add_option("--split", an.split, "Split to analyze")->capture_default_str();
  n->add_option("--change-threshold", an.change_threshold, "Change probability threshold")->capture_default_str();

  PseudoArgs ps;
  auto* p = app.add_subcommand("pseudo-preview", "Write pseudo-label maps and coverage for thresholds");
  add_common(p, ps.common);
  p->add_option("--data", ps.data, "Dataset root")->required();
  p->add_option("--checkpoint", ps.checkpoint, "Model checkpoint")->required();
  p->add_option("--split", ps.split, "Split to process")->capture_default_str();
  p->add_option("--threshold", ps.thresholds, "Cosine threshold T; repeatable (default 0.8)")->take_all();
  p->add_option("--source", ps.source, "Epoch naming the pseudo class: first|second|mean")->capture_default_str();
  p->add_flag("--preview", ps.preview, "Also write palette-coloured previews");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_generate(gen, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*n) return cmd_analyze(an, out);
    if (*p) return cmd_pseudo_preview(ps, out);
    return kUsage;
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kUsage;
  } catch (const NumericError& ex) {
    err << "numeric failure: " << ex.what() << "\n";
    return kNumeric;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const ShapeError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kData;
  }
}

}  // namespace scannet::cli
