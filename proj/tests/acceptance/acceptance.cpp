// Acceptance suite. Prints one "C<n> PASS|FAIL|SKIP ..." line per criterion.
// Exit status: 0 all ran criteria passed, 1 any failed, 77 everything requested was skipped.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "trilevel/trilevel.hpp"

namespace fs = std::filesystem;
using namespace trilevel;

namespace {

enum class Outcome { pass, fail, skip };

struct Verdict {
  Outcome outcome;
  std::string detail;
};

Verdict check(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path g_work = fs::temp_directory_path() / "trilevel_acceptance";

template <typename T>
std::vector<T> random_image(const ViTConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(c.image_numel());
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

ViTConfig deit_tiny() {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.depth = 12;
  c.d_model = 192;
  c.heads = 3;
  c.mlp_ratio = 4;
  c.num_classes = 1000;
  return c;
}

RunConfig synthetic_run(const fs::path& out) {
  RunConfig cfg;
  cfg.model.image_size = 16;
  cfg.model.patch_size = 4;
  cfg.model.channels = 3;
  cfg.model.depth = 3;
  cfg.model.d_model = 32;
  cfg.model.heads = 2;
  cfg.model.mlp_ratio = 2;
  cfg.model.num_classes = 4;
  cfg.sparsity = SparsityConfig::dense();
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.lr_warmup_epochs = 1;
  cfg.seed = 3;
  cfg.dataset = DatasetKind::synthetic;
  cfg.data_dir = "train=300,test=80";
  cfg.out_dir = out.string();
  return cfg;
}

// Gradient of the full 2-layer model against central differences.
Verdict c1() {
  ViTConfig c;
  c.image_size = 6;
  c.patch_size = 2;
  c.channels = 1;
  c.depth = 2;
  c.d_model = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  ViT<double> model(c, 11);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 0.3);
  std::vector<Tensor<double>> leaves;
  for (auto& p : model.parameters()) {
    for (auto& x : p.value.mutable_data()) x += n(rng);
    leaves.push_back(p.value);
  }
  std::vector<std::vector<double>> images;
  for (int i = 0; i < 3; ++i) images.push_back(random_image<double>(c, rng));
  const std::vector<int> labels{0, 2, 1};
  std::vector<std::span<const double>> views(images.begin(), images.end());

  SparsityConfig sparse;
  sparse.r_t = 0.7;
  sparse.r_a = 0.7;
  sparse.prune_layers = {2};
  double worst = 0;
  std::size_t checked = 0;
  for (const SparsityConfig* sp : std::vector<const SparsityConfig*>{nullptr, &sparse}) {
    auto loss = [&] { return ops::cross_entropy(model.forward(views, sp, 0), std::span<const int>(labels)); };
    const auto r = testing::grad_check(loss, leaves, 250, rng, 1e-5);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  return check(worst < 1e-4 && checked >= 200,
               "N=9 d=16 H=2 depth 2, dense and pruned paths, " + std::to_string(checked) +
                   " params, max rel err " + fmt("%.3g", worst));
}

// Unit ratios reproduce the dense model, per image and through training.
Verdict c2() {
  ViTConfig c;
  c.image_size = 12;
  c.patch_size = 3;
  c.channels = 2;
  c.depth = 4;
  c.d_model = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  ViT<float> model(c, 21);
  SparsityConfig unit;
  unit.prune_layers = {2, 3, 4};
  std::mt19937_64 rng(21);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto img = random_image<float>(c, rng);
    const auto dense = model.forward_image(img);
    const auto sparse = model.forward_image(img, &unit, 0);
    for (std::size_t j = 0; j < dense.numel(); ++j)
      worst = std::max(worst, static_cast<double>(std::abs(dense.data()[j] - sparse.data()[j])));
  }

  RunConfig dense_cfg = synthetic_run(g_work / "c2_dense");
  RunConfig unit_cfg = synthetic_run(g_work / "c2_unit");
  unit_cfg.sparsity.prune_layers = {2, 3};
  unit_cfg.sparsity.update_period_epochs = 1;
  train(dense_cfg);
  train(unit_cfg);
  const std::string a = slurp(fs::path(dense_cfg.out_dir) / "metrics.csv");
  const std::string b = slurp(fs::path(unit_cfg.out_dir) / "metrics.csv");
  const bool same = !a.empty() && a == b;
  return check(worst <= 1e-6 && same, "100 inputs max |dlogit| " + fmt("%.3g", worst) + ", 3-epoch metrics.csv " +
                                          (same ? "byte-identical" : "differs"));
}

// Live patch counts compound under the ceiling rule.
Verdict c3() {
  const auto deit = stage_token_counts(196, 0.7, 3);
  bool ok = deit == std::vector<std::size_t>{138, 97, 68};
  std::mt19937_64 rng(31);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint64_t q = 2 + rng() % 999, p = 1 + rng() % q;
    std::uint64_t n = 1 + rng() % 5000;
    const std::size_t stages = 1 + rng() % 6;
    const auto got = stage_token_counts(n, static_cast<double>(p) / static_cast<double>(q), stages);
    for (std::size_t s = 0; s < stages; ++s) {
      n = std::max<std::uint64_t>(1, (p * n + q - 1) / q);
      if (got[s] != n) ++mismatches;
    }
  }
  ok = ok && mismatches == 0;
  return check(ok, "196 @ 0.7 -> " + std::to_string(deit[0]) + "/" + std::to_string(deit[1]) + "/" +
                       std::to_string(deit[2]) + ", 100 random rational pairs, " + std::to_string(mismatches) +
                       " mismatches");
}

// Tracker counts against a direct recount of transitions.
Verdict c4() {
  std::mt19937_64 rng(41);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t len = rng() % 51;
    const double p = std::uniform_real_distribution<double>(0, 1)(rng);
    std::bernoulli_distribution coin(p);
    std::vector<bool> seq(len);
    for (std::size_t i = 0; i < len; ++i) seq[i] = coin(rng);
    ForgettingTracker t(1);
    for (bool c : seq) t.record(0, c, 0.0);
    std::size_t forget = 0, learn = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const bool before = i > 0 && seq[i - 1];
      if (before && !seq[i]) ++forget;
      if (!before && seq[i]) ++learn;
    }
    if (t[0].forget_count != forget || t[0].learn_count != learn || t[0].visits != len) ++mismatches;
  }
  ForgettingTracker all(1);
  for (int i = 0; i < 50; ++i) all.record(0, true, 0.0);
  const bool unforgettable = all[0].forget_count == 0 && all[0].ever_learned;
  return check(mismatches == 0 && unforgettable,
               "10000 sequences, " + std::to_string(mismatches) + " mismatches; all-correct forget_count " +
                   std::to_string(all[0].forget_count));
}

std::vector<std::size_t> firing_epochs(double r_e) {
  SparsityConfig cfg = SparsityConfig::tri_level(r_e, {});
  cfg.update_period_epochs = 30;
  SubsetState s = init_subset(1000, r_e, 0, cfg.removal_step_pct);
  std::vector<std::size_t> fired;
  for (std::size_t e = 1; e <= 300; ++e)
    if (schedule_hook(e, cfg, s)) {
      fired.push_back(e);
      remove_and_restore(s, s.active, cfg.removal_step_pct);
    }
  return fired;
}

// Remove-and-restore keeps a partition of constant active size; caps and firing epochs.
Verdict c5() {
  const std::size_t dataset = 1237;
  const double r_e = 0.8;
  SubsetState s = init_subset(dataset, r_e, 51);
  s.max_iterations = 100;
  const std::size_t want = static_cast<std::size_t>(std::llround(r_e * dataset));
  std::mt19937_64 rng(51);
  std::size_t violations = s.active.size() == want ? 0 : 1;
  for (int i = 0; i < 100; ++i) {
    std::vector<std::size_t> ranking = s.active;
    std::shuffle(ranking.begin(), ranking.end(), rng);
    remove_and_restore(s, ranking, 5.0);
    std::vector<std::size_t> all(s.active);
    all.insert(all.end(), s.pool.begin(), s.pool.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> ids(dataset);
    std::iota(ids.begin(), ids.end(), 0);
    if (all != ids || s.active.size() != want) ++violations;
  }
  const std::size_t cap9 = init_subset(1000, 0.9, 0).max_iterations;
  const std::size_t cap8 = init_subset(1000, 0.8, 0).max_iterations;
  const bool fire9 = firing_epochs(0.9) == std::vector<std::size_t>{30, 60, 90};
  const bool fire8 = firing_epochs(0.8) == std::vector<std::size_t>{30, 60, 90, 120, 150};
  return check(violations == 0 && cap9 == 3 && cap8 == 5 && fire9 && fire8,
               "100 iterations, " + std::to_string(violations) + " violations; caps " + std::to_string(cap9) + "/" +
                   std::to_string(cap8) + "; firing epochs " + (fire9 && fire8 ? "match" : "differ"));
}

// Counted MACs equal the closed form exactly.
Verdict c6() {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::size_t exact = 0, with_selectors = 0;
  for (int trial = 0; trial < 5; ++trial) {
    ViTConfig c;
    c.image_size = 16 + 8 * (rng() % 3);
    c.patch_size = 4;
    c.depth = 3 + rng() % 4;
    c.heads = 1 + rng() % 3;
    c.d_model = 8 * c.heads;
    c.mlp_ratio = 1 + rng() % 3;
    c.num_classes = 2 + rng() % 9;
    c.use_cls_token = trial != 3;
    SparsityConfig s;
    s.r_t = u(rng);
    s.r_a = u(rng);
    if (trial > 0) {
      for (std::size_t l = 2; l <= c.depth; ++l)
        if (rng() % 2) s.prune_layers.push_back(l);
      if (s.prune_layers.empty()) s.prune_layers.push_back(c.depth);
      ++with_selectors;
    }
    ViT<float> model(c, 60 + trial);
    const auto img = random_image<float>(c, rng);
    const auto counted = instrumented_count<float>(model, img, &s, 0);
    const auto analytic = s.has_selectors() ? sparse_macs(c, s) : dense_macs(c);
    try {
      require_equal_costs(analytic, counted);
      if (counted.total_per_image == analytic.total_per_image) ++exact;
    } catch (const AccountingError&) {
    }
  }
  const ViTConfig deit = deit_tiny();
  ViT<float> model(deit, 62);
  const auto img = random_image<float>(deit, rng);
  const auto counted = instrumented_count<float>(model, img);
  const auto analytic = dense_macs(deit);
  const double g = static_cast<double>(analytic.total_per_image) / 1e9;
  const bool deit_ok = counted.total_per_image == analytic.total_per_image && std::abs(g - 1.3) <= 0.05 * 1.3;
  return check(exact == 5 && with_selectors >= 1 && deit_ok,
               std::to_string(exact) + "/5 random configs exact (" + std::to_string(with_selectors) +
                   " with selectors); DeiT-T dense " + std::to_string(analytic.total_per_image) + " MACs (" +
                   fmt("%.4f", g) + " G), counted " + std::to_string(counted.total_per_image));
}

// Per-image saving of tri-level 0.7 on DeiT-T geometry.
Verdict c7() {
  const auto rep = sparse_macs(deit_tiny(), SparsityConfig::tri_level(0.7, {4, 7, 10}));
  const double pct = 100.0 * rep.saving_vs_dense;
  return check(std::abs(pct - 38.5) <= 6.0, "saving " + fmt("%.2f", pct) + "% vs 38.5% (" +
                                                std::to_string(rep.total_per_image) + " / " +
                                                std::to_string(rep.dense_per_image) + " MACs)");
}

RunConfig desk_config(const std::string& name, const std::string& data_dir, std::uint64_t seed) {
  RunConfig cfg = load_run_config(fs::path(TRILEVEL_SOURCE_DIR) / "configs" / name);
  cfg.data_dir = data_dir;
  cfg.seed = seed;
  return cfg;
}

// Desk-scale CIFAR-10 comparison over three seeds.
Verdict c8() {
  const char* env = std::getenv("TRILEVEL_CIFAR10_DIR");
  const std::string dir = env ? env : "data/cifar-10-batches-bin";
  if (!fs::exists(fs::path(dir) / "data_batch_1.bin"))
    return {Outcome::skip, "CIFAR-10 binaries not found in " + dir + " (set TRILEVEL_CIFAR10_DIR)"};
  double dense_acc = 0, tri_acc = 0, forget_acc = 0, random_acc = 0;
  double dense_macs_sum = 0, tri_macs_sum = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunConfig dense = desk_config("desk_dense.json", dir, seed);
    RunConfig tri = desk_config("desk_trilevel_0.9.json", dir, seed);
    RunConfig filter = dense;
    filter.sparsity.r_e = 0.8;
    filter.sparsity.update_period_epochs = tri.sparsity.update_period_epochs;
    const std::string tag = "_s" + std::to_string(seed);
    dense.out_dir = (g_work / ("c8_dense" + tag)).string();
    tri.out_dir = (g_work / ("c8_tri" + tag)).string();
    RunConfig random = filter;
    filter.out_dir = (g_work / ("c8_forget" + tag)).string();
    random.out_dir = (g_work / ("c8_random" + tag)).string();
    const DatasetSplit data = load_dataset(dense);
    const auto rd = train(dense, data);
    const auto rt = train(tri, data);
    const auto rf = train(filter, data);
    TrainOptions ro;
    ro.removal_policy = RemovalPolicy::random;
    const auto rr = train(random, data, ro);
    dense_acc += rd.final_val_acc / 3;
    tri_acc += rt.final_val_acc / 3;
    forget_acc += rf.final_val_acc / 3;
    random_acc += rr.final_val_acc / 3;
    dense_macs_sum += static_cast<double>(rd.total_training_macs);
    tri_macs_sum += static_cast<double>(rt.total_training_macs);
  }
  const bool a = 100 * tri_acc >= 100 * dense_acc - 2.0;
  const bool b = tri_macs_sum <= 0.90 * dense_macs_sum;
  const bool c = 100 * forget_acc >= 100 * random_acc - 0.5;
  return check(a && b && c, "(a) tri " + fmt("%.2f", 100 * tri_acc) + " vs dense " + fmt("%.2f", 100 * dense_acc) +
                                " (b) MACs ratio " + fmt("%.3f", tri_macs_sum / dense_macs_sum) + " (c) forgetting " +
                                fmt("%.2f", 100 * forget_acc) + " vs random " + fmt("%.2f", 100 * random_acc));
}

// Same seed, same bytes.
Verdict c9() {
  RunConfig cfg = synthetic_run(g_work / "c9");
  cfg.epochs = 6;
  cfg.sparsity = SparsityConfig::tri_level(0.8, {2, 3});
  cfg.sparsity.rt_warmup_epochs = 2;
  cfg.sparsity.update_period_epochs = 2;
  const char* files[] = {"metrics.csv", "subset_log.txt", "checkpoint.bin"};
  std::vector<std::string> first;
  train(cfg);
  for (const char* f : files) first.push_back(slurp(fs::path(cfg.out_dir) / f));
  train(cfg);
  std::string differing;
  for (std::size_t i = 0; i < std::size(files); ++i)
    if (first[i].empty() || first[i] != slurp(fs::path(cfg.out_dir) / files[i])) differing += std::string(" ") + files[i];
  const char* threads = std::getenv("TRILEVEL_THREADS");
  return check(differing.empty(), std::string("TRILEVEL_THREADS=") + (threads ? threads : "unset") +
                                      (differing.empty() ? ", metrics.csv subset_log.txt checkpoint.bin identical"
                                                         : ", differs:" + differing));
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc)
      only = std::atoi(argv[++i]);
    else if (a == "--work" && i + 1 < argc)
      g_work = argv[++i];
    else {
      std::cerr << "usage: acceptance [--only N] [--work DIR]\n";
      return 2;
    }
  }
  fs::create_directories(g_work);
  const std::vector<std::function<Verdict()>> criteria{c1, c2, c3, c4, c5, c6, c7, c8, c9};
  std::size_t ran = 0, failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* word = v.outcome == Outcome::pass ? "PASS" : v.outcome == Outcome::fail ? "FAIL" : "SKIP";
    std::cout << "C" << i + 1 << " " << word << "  " << v.detail << std::endl;
    if (v.outcome != Outcome::skip) ++ran;
    if (v.outcome == Outcome::fail) ++failed;
  }
  if (failed) return 1;
  return ran == 0 ? 77 : 0;
}
