#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace scannet;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

std::vector<BitemporalSample> tiny_corpus(int count, std::uint64_t seed = 1) {
  GeneratorSpec g;
  g.seed = seed;
  g.count = count;
  g.height = g.width = 16;
  g.num_classes = 3;
  g.transitions = GeneratorSpec::parse_transitions("1>2:0.5,2>3:0.3,3>1:0.2");
  std::vector<BitemporalSample> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_sample(g, i));
  return out;
}

TrainConfig tiny_train(int epochs = 2, int batch = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.lr0 = 0.01;
  c.seed = 5;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(LrSchedule, Values) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 1000, 0.1, 1.5), 0.1);
  EXPECT_EQ(lr_schedule(1000, 1000, 0.1, 1.5), 0.0);
  EXPECT_NEAR(lr_schedule(500, 1000, 0.1, 1.5), 0.0353553, 1e-7);
  EXPECT_THROW(lr_schedule(1001, 1000, 0.1, 1.5), std::invalid_argument);
  EXPECT_THROW(lr_schedule(-1, 1000, 0.1, 1.5), std::invalid_argument);
}

TEST(LrSchedule, NonIncreasing) {
  for (long total : {1L, 7L, 250L}) {
    double prev = lr_schedule(0, total, 0.1, 1.5);
    for (long i = 1; i <= total; ++i) {
      const double v = lr_schedule(i, total, 0.1, 1.5);
      EXPECT_LE(v, prev);
      prev = v;
    }
  }
}

TEST(TrainConfig, ValidationAndDropLastBatches) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr0 = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(steps_per_epoch(10, 4), 2);
  EXPECT_EQ(steps_per_epoch(3, 4), 0);
  ScanNet<float> m(tiny_config(), 1);
  EXPECT_THROW(initial_state(m, tiny_train(2, 4), 3), DataError);
  EXPECT_EQ(initial_state(m, tiny_train(3, 4), 10).total_iterations, 6);
}

TEST(TrainStep, BitReproducible) {
  const auto data = tiny_corpus(2);
  const TrainConfig cfg = tiny_train();
  ScanNet<float> a(tiny_config(), 3), b(tiny_config(), 3);
  auto sa = initial_state(a, cfg, data.size()), sb = initial_state(b, cfg, data.size());
  const auto ra = train_step(a, data, sa, cfg);
  const auto rb = train_step(b, data, sb, cfg);
  EXPECT_EQ(a.params().hash(), b.params().hash());
  EXPECT_EQ(ra.loss.total, rb.loss.total);
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(sa.iteration, 1);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
  const auto data = tiny_corpus(2);
  TrainConfig cfg = tiny_train();
  cfg.lr0 = 0.0;
  ScanNet<float> m(tiny_config(), 3);
  auto s = initial_state(m, cfg, data.size());
  const auto before = m.params().hash();
  train_step(m, data, s, cfg);
  train_step(m, data, s, cfg);
  EXPECT_EQ(m.params().hash(), before);
}

TEST(TrainStep, RepeatedStepsOnOneBatchReduceTheLoss) {
  const auto data = tiny_corpus(2);
  TrainConfig cfg = tiny_train(50, 2);
  ScanNet<float> m(tiny_config(), 3);
  auto s = initial_state(m, cfg, data.size());
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    const auto r = train_step(m, data, s, cfg);
    if (i == 0) first = r.loss.total;
    last = r.loss.total;
  }
  EXPECT_LT(last, first);
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
  auto data = tiny_corpus(1);
  data[0].image1.data[5] = std::numeric_limits<float>::quiet_NaN();
  ScanNet<float> m(tiny_config(), 3);
  TrainConfig cfg = tiny_train(1, 1);
  auto s = initial_state(m, cfg, 1);
  try {
    train_step(m, data, s, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite L_"), std::string::npos) << e.what();
  }
  LossBreakdown l;
  l.sc = std::numeric_limits<double>::infinity();
  EXPECT_THROW(check_finite_loss(l, "x"), NumericError);
}

TEST(Nesterov, MatchesHandComputedUpdate) {
  ParameterStore<double> p(1);
  p.add("w", Shape{1}, Init::zeros)[0] = 1.0;
  std::vector<Tensor<double>> buf{Tensor<double>(Shape{1})};
  p.grad("w")[0] = 0.5;
  nesterov_update(p, buf, 0.1, 0.9, 0.0);  // buf = 0.5; p = 1 - 0.1 * (0.5 + 0.45)
  EXPECT_DOUBLE_EQ(buf[0][0], 0.5);
  EXPECT_DOUBLE_EQ(p.value("w")[0], 1.0 - 0.1 * 0.95);
  nesterov_update(p, buf, 0.1, 0.9, 0.0);  // buf = 0.95; p -= 0.1 * (0.5 + 0.855)
  EXPECT_DOUBLE_EQ(buf[0][0], 0.95);
  EXPECT_DOUBLE_EQ(p.value("w")[0], 1.0 - 0.1 * 0.95 - 0.1 * 1.355);
}

TEST(Evaluate, OraclePredictorScoresOne) {
  const auto data = tiny_corpus(4);
  std::vector<PredictedPair> preds;
  for (const auto& s : data) preds.push_back({s.id, s.label1, s.label2});
  const EvalResult r = evaluate_predictions(preds, data, 3);
  EXPECT_EQ(r.report.oa, 1.0);
  EXPECT_EQ(r.report.miou, 1.0);
  EXPECT_EQ(r.report.sek, 1.0);
  EXPECT_EQ(r.report.f_scd, 1.0);
  EXPECT_EQ(r.confusion.total(), 4u * 2 * 256);
  EXPECT_THROW(evaluate_predictions({}, {}, 3), DataError);
}

TEST(Evaluate, OrderIndependentAndReadOnly) {
  auto data = tiny_corpus(5);
  ScanNet<float> m(tiny_config(), 4);
  const auto before = m.params().hash();
  const EvalResult a = evaluate(m, data);
  EXPECT_EQ(m.params().hash(), before);
  std::reverse(data.begin(), data.end());
  const EvalResult b = evaluate(m, data);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(a.report.f_scd, b.report.f_scd);
  ScanNet<float> empty(tiny_config(), 4);
  EXPECT_THROW(evaluate(empty, {}), DataError);
}

TEST(Checkpoint, ResumeThenStepEqualsUninterruptedStep) {
  TempDir dir("ckpt");
  const auto data = tiny_corpus(2);
  const TrainConfig cfg = tiny_train();
  ScanNet<float> a(tiny_config(), 3);
  auto sa = initial_state(a, cfg, data.size());
  train_step(a, data, sa, cfg);
  save_checkpoint(dir / "c.bin", a, sa, cfg.fingerprint());

  ScanNet<float> b(tiny_config(), 99);
  TrainState<float> sb;
  load_checkpoint(dir / "c.bin", b, &sb, cfg.fingerprint());
  EXPECT_EQ(a.params().hash(), b.params().hash());
  EXPECT_EQ(sa, sb);
  train_step(a, data, sa, cfg);
  train_step(b, data, sb, cfg);
  EXPECT_EQ(a.params().hash(), b.params().hash());
  EXPECT_EQ(sa, sb);
}

TEST(Checkpoint, HeaderRoundTrips) {
  TempDir dir("hdr");
  ModelConfig cfg = tiny_config();
  ScanNet<float> m(cfg, 1);
  TrainState<float> s = initial_state(m, tiny_train(), 4);
  save_checkpoint(dir / "c.bin", m, s, 1234);
  const CheckpointHeader h = read_checkpoint_header(dir / "c.bin");
  EXPECT_EQ(h.version, kCheckpointVersion);
  EXPECT_EQ(h.config_hash, cfg.hash());
  EXPECT_EQ(h.model.hash(), cfg.hash());
  EXPECT_EQ(h.train_fingerprint, 1234u);
  EXPECT_EQ(slurp(dir / "c.bin").substr(0, 8), "SCANNETC");
}

TEST(Checkpoint, CorruptionIsRejectedWithoutPartialState) {
  TempDir dir("corrupt");
  ScanNet<float> src(tiny_config(), 1);
  TrainState<float> s = initial_state(src, tiny_train(), 4);
  save_checkpoint(dir / "c.bin", src, s);
  const std::string good = slurp(dir / "c.bin");

  ScanNet<float> dst(tiny_config(), 2);
  TrainState<float> ds = initial_state(dst, tiny_train(), 4);
  ds.iteration = 1;
  const auto before = dst.params().hash();
  auto attempt = [&](const std::string& bytes) {
    std::ofstream(dir / "bad.bin", std::ios::binary | std::ios::trunc) << bytes;
    EXPECT_THROW(load_checkpoint(dir / "bad.bin", dst, &ds), DataError);
    EXPECT_EQ(dst.params().hash(), before);
    EXPECT_EQ(ds.iteration, 1);
  };
  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x40;
  attempt(flipped);
  attempt(good.substr(0, good.size() - 9));
  attempt("SCANNETX" + good.substr(8));
  attempt("");
  std::string version = good;
  version[8] = 7;
  attempt(version);

  // a structurally valid file for another architecture
  ModelConfig other = tiny_config();
  other.encoder_channels_v = 8;
  ScanNet<float> o(other, 1);
  save_checkpoint(dir / "other.bin", o, initial_state(o, tiny_train(), 4));
  EXPECT_THROW(load_checkpoint(dir / "other.bin", dst, &ds), DataError);
  EXPECT_EQ(dst.params().hash(), before);
  // different training settings
  EXPECT_THROW(load_checkpoint(dir / "c.bin", dst, &ds, tiny_train(3).fingerprint() + 1), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin", dst, &ds), DataError);
}

TEST(Fit, IdenticalRunsProduceIdenticalLogs) {
  TempDir a("fit_a"), b("fit_b");
  const auto train = tiny_corpus(4), val = tiny_corpus(2, 2);
  const TrainConfig cfg = tiny_train(3, 2);
  for (const fs::path& dir : {a.path(), b.path()}) {
    ScanNet<float> m(tiny_config(), 3);
    auto s = initial_state(m, cfg, train.size());
    fit(m, train, val, s, cfg, FitOptions{dir, -1, {}, {}});
  }
  EXPECT_EQ(slurp(a / "train_log.txt"), slurp(b / "train_log.txt"));
  EXPECT_EQ(slurp(a / "metrics_log.txt"), slurp(b / "metrics_log.txt"));
  EXPECT_FALSE(slurp(a / "metrics_log.txt").empty());
  EXPECT_EQ(slurp(a / "checkpoint_last.bin"), slurp(b / "checkpoint_last.bin"));
  EXPECT_TRUE(fs::exists(a / "checkpoint_best.bin"));
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  TempDir full("fit_full"), part("fit_part");
  const auto train = tiny_corpus(4), val = tiny_corpus(2, 2);
  const TrainConfig cfg = tiny_train(3, 2);
  {
    ScanNet<float> m(tiny_config(), 3);
    auto s = initial_state(m, cfg, train.size());
    fit(m, train, val, s, cfg, FitOptions{full.path(), -1, {}, {}});
  }
  {
    ScanNet<float> m(tiny_config(), 3);
    auto s = initial_state(m, cfg, train.size());
    const FitResult r = fit(m, train, val, s, cfg, FitOptions{part.path(), 3, {}, {}});  // mid-epoch stop
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(s.iteration, 3);
  }
  {
    ScanNet<float> m(tiny_config(), 77);
    TrainState<float> s;
    load_checkpoint(part / "checkpoint_last.bin", m, &s, cfg.fingerprint());
    EXPECT_EQ(s.iteration, 3);
    fit(m, train, val, s, cfg, FitOptions{part.path(), -1, {}, {}});
  }
  EXPECT_EQ(slurp(full / "train_log.txt"), slurp(part / "train_log.txt"));
  EXPECT_EQ(slurp(full / "metrics_log.txt"), slurp(part / "metrics_log.txt"));
  EXPECT_EQ(slurp(full / "checkpoint_last.bin"), slurp(part / "checkpoint_last.bin"));
  EXPECT_EQ(slurp(full / "checkpoint_best.bin"), slurp(part / "checkpoint_best.bin"));
}

TEST(Fit, BatchesAreDeterministicPerIteration) {
  const auto train = tiny_corpus(6);
  TrainConfig cfg = tiny_train(2, 3);
  ScanNet<float> m(tiny_config(), 1);
  auto s = initial_state(m, cfg, train.size());
  s.iteration = 3;
  const auto a = batch_for_iteration(train, s, cfg), b = batch_for_iteration(train, s, cfg);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].label1.classes, b[i].label1.classes);
  // every sample appears exactly once per epoch
  std::multiset<std::size_t> seen;
  for (auto i : epoch_order(5, 0, 6)) seen.insert(i);
  EXPECT_EQ(seen, (std::multiset<std::size_t>{0, 1, 2, 3, 4, 5}));
}
