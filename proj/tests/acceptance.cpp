// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. `acceptance 5 6` runs a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "attention_reference.hpp"
#include "cli.hpp"
#include "support.hpp"

using namespace scannet;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::string num(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void jitter(ParameterStore<double>& p, std::mt19937_64& rng, double a) {
  std::uniform_real_distribution<double> d(-a, a);
  for (auto& e : p.entries())
    for (auto& v : e.value.data) v += d(rng);
}

/// Scalar sum_i w_i y_i recorded on the tape.
Var readout(Tape<double>& t, Var y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += t.value(y)[i] * w[i];
  return t.record(Tensor<double>(Shape{1}, std::vector<double>{s}), {y}, [y, &w](Tape<double>& tp, int self) {
    double* d = tp.grad_ptr(y);
    for (std::size_t i = 0; i < w.size(); ++i) d[i] += tp.grad(self)[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// 1. Metrics against hand evaluation

Outcome metric_oracle() {
  Outcome o;
  // rows = prediction, columns = ground truth; class 0 = no change
  const double q[3][3] = {{40, 5, 5}, {4, 20, 1}, {2, 3, 20}};
  double total = 0, diag = 0, row[3] = {}, col[3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      total += q[i][j];
      row[i] += q[i][j];
      col[j] += q[i][j];
      if (i == j) diag += q[i][j];
    }
  const double oa = diag / total;
  const double iou_nc = q[0][0] / (row[0] + col[0] - q[0][0]);
  const double iou_c = (total - row[0] - col[0] + q[0][0]) / (total - q[0][0]);
  const double miou = 0.5 * (iou_nc + iou_c);
  // Kappa over the matrix with the no-change hit removed.
  const double t2 = total - q[0][0];
  const double rho = (diag - q[0][0]) / t2;
  double eta = 0;
  for (int i = 0; i < 3; ++i) {
    const double r = row[i] - (i == 0 ? q[0][0] : 0), c = col[i] - (i == 0 ? q[0][0] : 0);
    eta += r * c;
  }
  eta /= t2 * t2;
  const double sek = (rho - eta) / (1 - eta) * std::exp(iou_c - 1);
  const double p = (diag - q[0][0]) / (row[1] + row[2]);
  const double r = (diag - q[0][0]) / (col[1] + col[2]);
  const double f = 2 * p * r / (p + r);

  const MetricsReport m = compute_metrics(ConfusionMatrix::from_counts(2, {40, 5, 5, 4, 20, 1, 2, 3, 20}));
  const std::vector<std::tuple<const char*, double, double, double>> cases = {
      {"OA", m.oa, oa, 0.8},          {"IoU_nc", m.iou_nc, iou_nc, 40.0 / 56}, {"IoU_c", m.iou_c, iou_c, 44.0 / 60},
      {"mIoU", m.miou, miou, 0.723810}, {"rho", m.rho, rho, 2.0 / 3},          {"eta", m.eta, eta, 0.391667},
      {"SeK", m.sek, sek, 0.34623},   {"P", m.p_scd, p, 0.8},                 {"R", m.r_scd, r, 40.0 / 54},
      {"F_scd", m.f_scd, f, 10.0 / 13}};
  double worst = 0;
  for (const auto& [name, got, hand, quoted] : cases) {
    worst = std::max({worst, std::abs(got - hand), std::abs(got - quoted)});
    o.require(std::abs(got - hand) <= 1e-4, std::string(name) + " " + num(got) + " vs hand " + num(hand));
    o.require(std::abs(got - quoted) <= 1e-4, std::string(name) + " " + num(got) + " vs quoted " + num(quoted));
  }
  const MetricsReport perfect = compute_metrics(ConfusionMatrix::from_counts(2, {50, 0, 0, 0, 25, 0, 0, 0, 25}));
  for (double v : {perfect.oa, perfect.miou, perfect.iou_nc, perfect.iou_c, perfect.sek, perfect.rho, perfect.p_scd,
                   perfect.r_scd, perfect.f_scd})
    o.require(v == 1.0, "perfect prediction gave " + num(v, 17));
  if (o.pass) o.detail = "10 metrics, max deviation " + num(worst, 3) + "; perfect prediction exactly 1";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Attention against naive references

ModelConfig attention_config(int grid, int cv, int s, int k) {
  ModelConfig c = tiny_config(4 * grid);
  c.encoder_channels_v = cv;
  c.stripe_width = s;
  c.heads_per_group = k;
  return c;
}

Tensor<double> run_cswin_sa_f(const ModelConfig& cfg, const AttentionWeights& wt, const Tensor<double>& x) {
  ParameterStore<float> p(1);
  add_attention_block_params(p, "a", cfg);
  load_attention_weights(p, "a", wt);
  Tape<float> t;
  Binder<float> b(t, p, false);
  const int g = cfg.input_height / 4;
  return t.value(cswin_sa(b, "a", t.constant(x.cast<float>()), geometry_for(cfg, g, g))).cast<double>();
}

Outcome attention_oracle() {
  Outcome o;
  std::mt19937_64 rng(2024);
  const ModelConfig cfg = attention_config(16, 8, 2, 2);  // 16 x 16 tokens, d = 24
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto wt = random_attention_weights(rng, 24, 16, 16, 2, 2);
    const auto x = random_tensor(rng, {256, 24});
    worst = std::max(worst, max_abs_diff(run_cswin_sa_f(cfg, wt, x), reference_cswin(x, wt, 16, 16, 2, 2, false)));
  }
  o.require(worst <= 1e-5, "stripe attention deviates by " + num(worst, 3));
  double worst_global = 0;
  for (int k : {1, 2}) {
    const ModelConfig g = attention_config(4, 4, 4, k);
    auto wt = random_attention_weights(rng, 12, 4, 4, 4, k);
    for (auto& b : wt.bias) std::fill(b.data.begin(), b.data.end(), 0.0);
    const auto x = random_tensor(rng, {16, 12});
    worst_global = std::max(worst_global, max_abs_diff(run_cswin_sa_f(g, wt, x), reference_global(x, wt, 2 * k)));
  }
  o.require(worst_global <= 1e-5, "s = h = w deviates from global attention by " + num(worst_global, 3));
  if (o.pass)
    o.detail = "100 trials max |diff| " + num(worst, 3) + "; global case " + num(worst_global, 3);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Gradients against central differences

struct GradLine {
  std::string name;
  GradReport rep;
};

GradLine loss_gradient(int term, std::mt19937_64& rng) {
  const int n = 4, h = 5, w = 5;
  Tensor<double> z1 = random_tensor(rng, {n, h, w}, -2, 2), z2 = random_tensor(rng, {n, h, w}, -2, 2),
                 zc = random_tensor(rng, {1, h, w}, -2, 2);
  Tensor<double> g1(z1.shape), g2(z2.shape), gc(zc.shape);
  const auto [l1, l2] = random_label_pair(rng, h, w, n, 0.5);
  const ChangeMask mask = derive_change_mask(l1, l2);
  PseudoLabelMap pseudo;
  {
    Tape<double> t;
    Var a = ops::softmax_channels(t, t.constant(z1)), b = ops::softmax_channels(t, t.constant(z2));
    pseudo = make_pseudo_labels(t.value(a), t.value(b), mask, 0.3);
  }
  auto run = [&](bool backward) {
    Tape<double> t;
    Var a = ops::softmax_channels(t, t.parameter(z1, &g1));
    Var b = ops::softmax_channels(t, t.parameter(z2, &g2));
    Var cp = ops::sigmoid(t, t.parameter(zc, &gc));
    Var l = term == 0 ? loss_sem(t, a, b, l1, l2) : term == 1 ? loss_psd(t, a, b, pseudo) : term == 2 ? loss_sc(t, a, b, mask) : loss_change(t, cp, mask);
    if (backward) {
      for (auto* g : {&g1, &g2, &gc}) std::fill(g->data.begin(), g->data.end(), 0.0);
      t.backward(l);
    }
    return t.value(l)[0];
  };
  std::vector<GradProbe> probes = {{"z1", &z1, &g1}, {"z2", &z2, &g2}};
  if (term == 3) probes = {{"zc", &zc, &gc}};
  static const char* names[] = {"L_sem", "L_psd", "L_sc", "L_chg"};
  return {names[term], check_gradients(run, probes, 25, rng)};
}

GradLine block_gradient(std::mt19937_64& rng) {
  const ModelConfig cfg = attention_config(4, 4, 2, 2);
  ParameterStore<double> p(5);
  add_attention_block_params(p, "blk", cfg);
  jitter(p, rng, 0.3);
  Tensor<double> x = random_tensor(rng, {16, 12}), gx(Shape{16, 12});
  const Tensor<double> w = random_tensor(rng, {16, 12});
  auto run = [&](bool backward) {
    Tape<double> t;
    Binder<double> b(t, p);
    Var l = readout(t, attention_block(b, "blk", t.parameter(x, &gx), geometry_for(cfg, 4, 4)), w);
    if (backward) {
      p.zero_grad();
      std::fill(gx.data.begin(), gx.data.end(), 0.0);
      t.backward(l);
    }
    return t.value(l)[0];
  };
  auto probes = store_probes(p);
  probes.push_back({"x", &x, &gx});
  return {"attention block", check_gradients(run, probes, 3, rng)};
}

GradLine neck_gradient(std::mt19937_64& rng) {
  const ModelConfig cfg = tiny_config(16);
  ParameterStore<double> p(3);
  add_backbone_params(p, cfg);
  jitter(p, rng, 0.3);
  Tensor<double> xu = random_tensor(rng, {8, 8, 8}), xv = random_tensor(rng, {4, 4, 4});
  Tensor<double> gu(xu.shape), gv(xv.shape);
  const Tensor<double> w = random_tensor(rng, {4, 8, 8});
  auto run = [&](bool backward) {
    Tape<double> t;
    Binder<double> b(t, p);
    Var l = readout(t, neck(b, cfg, "neck.c", t.parameter(xu, &gu), t.parameter(xv, &gv)), w);
    if (backward) {
      p.zero_grad();
      std::fill(gu.data.begin(), gu.data.end(), 0.0);
      std::fill(gv.data.begin(), gv.data.end(), 0.0);
      t.backward(l);
    }
    return t.value(l)[0];
  };
  std::vector<GradProbe> probes = {{"x_u", &xu, &gu}, {"x_v", &xv, &gv}};
  for (auto& e : p.entries())
    if (e.name.rfind("neck.c.", 0) == 0) probes.push_back({e.name, &e.value, &e.grad});
  return {"neck", check_gradients(run, probes, 6, rng)};
}

GradLine change_branch_gradient(std::mt19937_64& rng) {
  ModelConfig cfg = tiny_config(16);
  cfg.change_blocks = 2;
  ParameterStore<double> p(5);
  add_backbone_params(p, cfg);
  jitter(p, rng, 0.3);
  Tensor<double> a = random_tensor(rng, {4, 2, 2}), c = random_tensor(rng, {4, 2, 2});
  Tensor<double> ga(a.shape), gc(c.shape);
  const Tensor<double> w = random_tensor(rng, {4, 2, 2});
  auto run = [&](bool backward) {
    Tape<double> t;
    Binder<double> b(t, p);
    Var l = readout(t, change_branch(b, cfg, t.parameter(a, &ga), t.parameter(c, &gc)), w);
    if (backward) {
      p.zero_grad();
      std::fill(ga.data.begin(), ga.data.end(), 0.0);
      std::fill(gc.data.begin(), gc.data.end(), 0.0);
      t.backward(l);
    }
    return t.value(l)[0];
  };
  std::vector<GradProbe> probes = {{"x1_v", &a, &ga}, {"x2_v", &c, &gc}};
  for (auto& e : p.entries())
    if (e.name.rfind("chg.", 0) == 0) probes.push_back({e.name, &e.value, &e.grad});
  return {"change branch", check_gradients(run, probes, 3, rng)};
}

Outcome gradient_suite() {
  Outcome o;
  std::mt19937_64 rng(77);
  std::vector<GradLine> lines;
  for (int term = 0; term < 4; ++term) lines.push_back(loss_gradient(term, rng));
  lines.push_back(block_gradient(rng));
  lines.push_back(neck_gradient(rng));
  lines.push_back(change_branch_gradient(rng));
  double worst = 0;
  int fewest = 1 << 30;
  for (const auto& l : lines) {
    o.require(l.rep.probes >= 20, l.name + " has only " + std::to_string(l.rep.probes) + " probes");
    o.require(l.rep.max_rel_err <= 1e-4, l.name + " rel err " + num(l.rep.max_rel_err, 3) + " at " + l.rep.worst);
    worst = std::max(worst, l.rep.max_rel_err);
    fewest = std::min(fewest, l.rep.probes);
  }
  if (o.pass)
    o.detail = std::to_string(lines.size()) + " suites, >= " + std::to_string(fewest) + " probes each, max rel err " +
               num(worst, 3);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Structural invariants

Outcome structural_invariants() {
  Outcome o;
  std::mt19937_64 rng(4);

  for (int seed = 0; seed < 3; ++seed) {
    ModelConfig cfg = tiny_config(16);
    cfg.encoder_channels_u = 6;
    cfg.encoder_channels_v = 8;
    ParameterStore<float> p(static_cast<std::uint64_t>(seed));
    add_backbone_params(p, cfg);
    const auto i1 = random_tensor_f(rng, {3, 16, 16}, 0, 1), i2 = random_tensor_f(rng, {3, 16, 16}, 0, 1);
    Tape<float> t;
    Binder<float> b(t, p, false);
    const auto fwd = ted_forward(b, cfg, t.constant(i1), t.constant(i2));
    const auto rev = ted_forward(b, cfg, t.constant(i2), t.constant(i1));
    o.require(t.value(rev.x1).data == t.value(fwd.x2).data && t.value(rev.x2).data == t.value(fwd.x1).data,
              "swapping the inputs does not swap the temporal features exactly");
  }

  {
    const auto a = random_tensor(rng, {3, 4, 5}), b = random_tensor(rng, {3, 4, 5}), c = random_tensor(rng, {3, 4, 5});
    Tape<double> t;
    const TedOutputs back = detokenize(t, tokenize(t, t.constant(a), t.constant(b), t.constant(c)), 4, 5);
    o.require(max_abs_diff(t.value(back.x1), a) == 0 && max_abs_diff(t.value(back.x2), b) == 0 &&
                  max_abs_diff(t.value(back.xc), c) == 0,
              "detokenize(tokenize(x)) != x");
  }

  {
    ModelConfig cfg = attention_config(4, 4, 2, 2);
    cfg.attention_layers = 2;
    ParameterStore<double> p(3);
    add_scanformer_params(p, cfg);
    jitter(p, rng, 0.3);
    zero_residual_branches(p, cfg);
    Tape<double> t;
    Binder<double> b(t, p, false);
    const TedOutputs in{t.constant(random_tensor(rng, {4, 4, 4})), t.constant(random_tensor(rng, {4, 4, 4})),
                        t.constant(random_tensor(rng, {4, 4, 4}))};
    const TedOutputs out = scanformer_forward(b, cfg, in);
    o.require(max_abs_diff(t.value(out.x1), t.value(in.x1)) == 0 && max_abs_diff(t.value(out.x2), t.value(in.x2)) == 0 &&
                  max_abs_diff(t.value(out.xc), t.value(in.xc)) == 0,
              "attention blocks with zeroed residual branches are not the identity");
  }

  {
    ops::RowMat<float> m(64, 48);
    std::uniform_real_distribution<float> d(-50.f, 50.f);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
    detail::softmax_rows(m);
    float worst = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      float s = 0;
      for (Eigen::Index c = 0; c < m.cols(); ++c) s += m(r, c);
      worst = std::max(worst, std::abs(s - 1.0f));
    }
    o.require(worst <= 1e-6f, "softmax row sum off by " + num(worst, 3));
  }

  for (int trial = 0; trial < 50; ++trial) {
    const auto p1 = random_probs(rng, 4, 6, 6), p2 = random_probs(rng, 4, 6, 6);
    const auto [l1, l2] = random_label_pair(rng, 6, 6, 4, 0.3);
    const ChangeMask mask = derive_change_mask(l1, l2);
    double prev = 2;
    for (double T : {0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0}) {
      const double cov = pseudo_coverage(make_pseudo_labels(p1, p2, mask, T), mask);
      if (cov > prev) o.require(false, "pseudo-label coverage grew with T at T=" + num(T));
      prev = cov;
    }
    Tape<double> t;
    const double sc = t.value(loss_sc(t, t.constant(p1), t.constant(p2), mask))[0];
    if (sc < 0 || sc > 1) o.require(false, "loss_sc = " + num(sc) + " outside [0, 1]");
  }
  if (o.pass)
    o.detail = "swap equivariance exact, tokenize round trip, identity blocks, softmax rows, pseudo monotonicity, "
               "loss_sc range";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Desk-scale overfit

GeneratorSpec desk_generator(std::uint64_t seed, int count) {
  GeneratorSpec g;
  g.seed = seed;
  g.count = count;
  return g;  // 64 x 64, five classes, default transition distribution
}

ModelConfig desk_model() {
  ModelConfig m;
  m.encoder_channels_u = 16;
  m.encoder_channels_v = 32;
  return m;
}

Outcome desk_overfit() {
  Outcome o;
  const GeneratorSpec g = desk_generator(7, 8);
  std::vector<BitemporalSample> train;
  for (int i = 0; i < 8; ++i) train.push_back(generate_sample(g, i));
  TrainConfig tc;
  tc.epochs = 500;
  tc.batch_size = 8;
  tc.lr0 = 0.01;
  tc.augment = false;
  tc.eval_every = 0;
  tc.seed = 1;
  ScanNet<float> model(desk_model(), mix_seed(tc.seed, 0x1417));
  TrainState<float> state = initial_state(model, tc, train.size());
  const FitResult fr = fit(model, train, {}, state, tc, FitOptions{});
  o.require(fr.steps.size() <= 500, std::to_string(fr.steps.size()) + " steps");
  const double first = fr.steps.front().loss.total, last = fr.steps.back().loss.total;
  o.require(last < first, "loss did not decrease (" + num(first) + " -> " + num(last) + ")");
  const EvalResult ev = evaluate(model, train);
  o.require(ev.report.f_scd >= 0.90, "F_scd " + num(ev.report.f_scd, 4) + " < 0.90");
  o.require(ev.report.miou >= 0.90, "mIoU " + num(ev.report.miou, 4) + " < 0.90");
  o.detail = (o.pass ? "" : o.detail + "; ") + std::to_string(fr.steps.size()) + " steps, loss " + num(first, 4) +
             " -> " + num(last, 4) + ", train F_scd " + num(ev.report.f_scd, 4) + ", mIoU " + num(ev.report.miou, 4);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Learning-scheme direction

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome scheme_direction() {
  Outcome o;
  const GeneratorSpec g = desk_generator(31, 250);
  std::vector<BitemporalSample> train, val;
  for (int i = 0; i < 250; ++i) (i < 200 ? train : val).push_back(generate_sample(g, i));
  std::vector<double> with, without;
  for (bool scheme : {true, false})
    for (std::uint64_t seed : {1, 2, 3}) {
      TrainConfig tc;
      tc.epochs = 30;
      tc.batch_size = 8;
      tc.lr0 = 0.01;
      tc.eval_every = 0;
      tc.seed = seed;
      tc.loss.use_psd = scheme;
      tc.loss.use_sc = scheme;
      ScanNet<float> model(desk_model(), mix_seed(seed, 0x1417));
      TrainState<float> state = initial_state(model, tc, train.size());
      fit(model, train, {}, state, tc, FitOptions{});
      const double f = evaluate(model, val).report.f_scd;
      (scheme ? with : without).push_back(f);
      std::printf("    scheme %-3s seed %llu: val F_scd %.4f\n", scheme ? "on" : "off",
                  static_cast<unsigned long long>(seed), f);
      std::fflush(stdout);
    }
  const double mw = median3(with), mo = median3(without);
  o.require(mw >= mo - 0.01, "median with scheme " + num(mw, 4) + " < median without " + num(mo, 4) + " - 0.01");
  o.detail = (o.pass ? "" : o.detail + "; ") + "median val F_scd with " + num(mw, 4) + ", without " + num(mo, 4);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Determinism through the command line

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "scannet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

std::vector<std::string> cli_train(const fs::path& data, const fs::path& out) {
  return {"train", "--data", data.string(), "--out", out.string(), "--seed", "9", "--override",
          "model.encoder_channels_u=4", "model.encoder_channels_v=4", "model.stem_channels=2",
          "model.attention_layers=1", "model.heads_per_group=1", "model.change_blocks=1", "model.max_norm_groups=2",
          "train.epochs=3", "train.batch_size=2", "train.lr0=0.01"};
}

Outcome determinism() {
  Outcome o;
  TempDir dir("acceptance_det");
  o.require(cli({"generate", "--out", (dir / "data").string(), "--seed", "4", "--count", "10", "--override",
                 "gen.height=16", "gen.width=16", "gen.num_classes=3", "gen.transitions=1>2:0.5,2>3:0.3,3>1:0.2"}) == 0,
            "generate failed");
  if (!o.pass) return o;
  o.require(cli(cli_train(dir / "data", dir / "a")) == 0, "first run failed");
  o.require(cli(cli_train(dir / "data", dir / "b")) == 0, "second run failed");
  auto stop = cli_train(dir / "data", dir / "c");
  stop.insert(stop.end(), {"--stop-at-iteration", "4"});
  o.require(cli(stop) == 0, "interrupted run failed");
  auto resume = cli_train(dir / "data", dir / "c");
  resume.push_back("--resume");
  o.require(cli(resume) == 0, "resumed run failed");
  if (!o.pass) return o;
  for (const char* f : {"metrics_log.txt", "train_log.txt", "checkpoint_last.bin", "checkpoint_best.bin"}) {
    o.require(slurp(dir / "a" / f) == slurp(dir / "b" / f), std::string(f) + " differs between identical runs");
    o.require(slurp(dir / "a" / f) == slurp(dir / "c" / f), std::string(f) + " differs after resume");
  }
  o.require(!slurp(dir / "a" / "metrics_log.txt").empty(), "metrics log is empty");
  if (o.pass) o.detail = "identical logs and checkpoints for repeated and resumed runs";
  return o;
}

// ---------------------------------------------------------------------------
// 8. Generator statistics

Outcome generator_statistics() {
  Outcome o;
  TempDir dir("acceptance_gen");
  GeneratorSpec g = desk_generator(8, 500);
  GeneratorStats stats;
  const DatasetManifest m = generate_dataset(g, dir.path(), &stats);
  const double mean = stats.mean_change_fraction();
  o.require(std::abs(mean - 0.20) <= 0.05, "mean change fraction " + num(mean, 4));
  for (double f : stats.change_fraction)
    if (std::abs(f - 0.20) > 0.05) {
      o.require(false, "a sample has change fraction " + num(f, 4));
      break;
    }

  const auto w = g.normalized_weights();
  const auto regions = stats.region_counts(w.size());
  const auto pixels = stats.pixel_counts(w.size());
  double n_regions = 0, n_pixels = 0;
  for (auto r : regions) n_regions += static_cast<double>(r);
  for (auto p : pixels) n_pixels += static_cast<double>(p);
  const double n_eff = stats.effective_regions();
  double worst_z = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double sd = std::sqrt(w[k] * (1 - w[k]));
    const double z_regions = std::abs(regions[k] / n_regions - w[k]) / (sd / std::sqrt(n_regions));
    const double z_pixels = std::abs(pixels[k] / n_pixels - w[k]) / (sd / std::sqrt(n_eff));
    worst_z = std::max({worst_z, z_regions, z_pixels});
    o.require(z_regions <= 3, "transition " + std::to_string(k) + " region share off by " + num(z_regions, 3) + " sigma");
    o.require(z_pixels <= 3, "transition " + std::to_string(k) + " pixel share off by " + num(z_pixels, 3) + " sigma");
  }

  std::size_t bad = 0, loaded = 0;
  for (const auto& split : {"train", "val", "test"})
    for (const auto& s : load_split(m, split)) {
      ++loaded;
      bad += validate_sample(s).empty() ? 0 : 1;
    }
  o.require(loaded == 500, std::to_string(loaded) + " samples loaded");
  o.require(bad == 0, std::to_string(bad) + " samples fail validation");
  if (o.pass)
    o.detail = "mean change fraction " + num(mean, 4) + ", worst transition deviation " + num(worst_z, 3) +
               " sigma, 500/500 samples valid";
  return o;
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*fn)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "metric oracle", metric_oracle},
      {2, "attention oracle", attention_oracle},
      {3, "gradient suite", gradient_suite},
      {4, "structural invariants", structural_invariants},
      {5, "desk-scale overfit", desk_overfit},
      {6, "learning-scheme direction", scheme_direction},
      {7, "determinism", determinism},
      {8, "generator statistics", generator_statistics},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
