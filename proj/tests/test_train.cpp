#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "test_util.hpp"
#include "trilevel/train.hpp"

using namespace trilevel;
using trilevel::testing::TempDir;

namespace {

RunConfig synthetic_config(const std::filesystem::path& out) {
  RunConfig c;
  c.model.image_size = 8;
  c.model.patch_size = 2;
  c.model.depth = 3;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.model.num_classes = 3;
  c.sparsity = SparsityConfig{};
  c.epochs = 3;
  c.batch_size = 7;
  c.lr_warmup_epochs = 1;
  c.base_lr = 2e-3;
  c.dataset = DatasetKind::synthetic;
  c.data_dir = "train=40,test=12";
  c.out_dir = out.string();
  c.seed = 3;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Train, EachActiveExampleOncePerEpoch) {
  TempDir dir;
  auto cfg = synthetic_config(dir.path());
  cfg.sparsity = SparsityConfig::tri_level(0.8, {2});
  cfg.sparsity.update_period_epochs = 1;
  cfg.epochs = 4;
  const auto r = train(cfg);
  std::size_t active_total = 0;
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.active_subset_size, 32u);
    active_total += m.active_subset_size;
  }
  EXPECT_EQ(r.training_forward_passes, active_total);
  std::size_t visits = 0;
  for (const auto& s : r.example_stats) visits += s.visits;
  EXPECT_EQ(visits, active_total);
  EXPECT_EQ(r.subset_log.size(), 4u);  // cap 5, four epoch boundaries
  EXPECT_EQ(r.subset_log.front().rfind("epoch=1 removed=2 restored=2 active=32 iteration=1", 0), 0u);
}

TEST(Train, OutputsAreWrittenAndParseable) {
  TempDir dir;
  auto cfg = synthetic_config(dir.path());
  train(cfg);
  for (const char* f : {"metrics.csv", "subset_log.txt", "examples_stats.csv", "checkpoint.bin", "cost_report.json",
                        "timing.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / f)) << f;
  std::istringstream csv(slurp(dir.path() / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7) << line;
    ++rows;
  }
  EXPECT_EQ(rows, cfg.epochs);
  EXPECT_TRUE(nlohmann::json::accept(slurp(dir.path() / "cost_report.json")));
}

TEST(Train, SameSeedSameBytes) {
  TempDir a, b;
  train(synthetic_config(a.path()));
  train(synthetic_config(b.path()));
  for (const char* f : {"metrics.csv", "subset_log.txt", "examples_stats.csv", "checkpoint.bin"})
    EXPECT_EQ(slurp(a.path() / f), slurp(b.path() / f)) << f;
}

TEST(Train, UnitRatiosReproduceDenseMetrics) {
  TempDir a, b;
  auto dense = synthetic_config(a.path());
  auto unit = synthetic_config(b.path());
  unit.sparsity.prune_layers = {2, 3};
  train(dense);
  train(unit);
  EXPECT_EQ(slurp(a.path() / "metrics.csv"), slurp(b.path() / "metrics.csv"));
  const auto ca = read_checkpoint_file(a.path() / "checkpoint.bin");
  const auto cb = read_checkpoint_file(b.path() / "checkpoint.bin");
  ASSERT_EQ(ca.tensors.size(), cb.tensors.size());
  for (std::size_t i = 0; i < ca.tensors.size(); ++i) EXPECT_EQ(ca.tensors[i].bytes, cb.tensors[i].bytes);
}

TEST(Train, SparseEpochsCostLessAfterWarmup) {
  TempDir a, b;
  auto dense = synthetic_config(a.path());
  auto tri = synthetic_config(b.path());
  tri.sparsity = SparsityConfig::tri_level(0.9, {2, 3});
  tri.sparsity.rt_warmup_epochs = 1;
  const auto rd = train(dense), rt = train(tri);
  for (std::size_t e = tri.sparsity.rt_warmup_epochs; e < tri.epochs; ++e)
    EXPECT_LT(rt.metrics[e].epoch_macs, rd.metrics[e].epoch_macs) << e;
  EXPECT_LT(rt.total_training_macs, rd.total_training_macs);
}

TEST(Train, DivergenceNamesTheStep) {
  TempDir dir;
  auto cfg = synthetic_config(dir.path());
  cfg.base_lr = 1e30;
  cfg.lr_warmup_epochs = 0;
  try {
    train(cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 1u);
  }
}

TEST(Train, BaselinePoliciesRun) {
  for (auto policy : {RemovalPolicy::random, RemovalPolicy::class_balanced}) {
    TempDir dir;
    auto cfg = synthetic_config(dir.path());
    cfg.sparsity = SparsityConfig::tri_level(0.8, {});
    cfg.sparsity.update_period_epochs = 1;
    TrainOptions opts;
    opts.removal_policy = policy;
    const auto r = train(cfg, opts);
    EXPECT_EQ(r.subset_log.size(), 3u);
  }
  EXPECT_THROW(parse_removal_policy("oldest"), ConfigError);
}

TEST(Train, DatasetGeometryMustMatchModel) {
  TempDir dir;
  const auto cfg = synthetic_config(dir.path());
  const DatasetSplit data{make_synthetic(4, 3, 16, 3, 1), make_synthetic(4, 3, 16, 3, 2)};
  EXPECT_THROW(train(cfg, data), ConfigError);
  const DatasetSplit many{make_synthetic(4, 5, 8, 3, 1), make_synthetic(4, 5, 8, 3, 2)};
  EXPECT_THROW(train(cfg, many), ConfigError);
}

TEST(Evaluate, DeterministicAndIdentityOverride) {
  TempDir dir;
  auto cfg = synthetic_config(dir.path());
  cfg.epochs = 8;
  cfg.data_dir = "train=60,test=12";
  const auto r = train(cfg);
  const auto ck = decode_checkpoint(r.checkpoint_bytes);
  const auto data = load_dataset(cfg);
  const double a = evaluate_checkpoint(ck, data.test), b = evaluate_checkpoint(ck, data.test);
  EXPECT_EQ(a, b);
  SparsityConfig unit;
  unit.prune_layers = {2};
  EXPECT_EQ(evaluate_checkpoint(ck, data.test, unit), a);
  EXPECT_GT(evaluate_checkpoint(ck, data.train), 1.0 / 3.0);
}
