#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trilevel/trilevel.hpp"

namespace fs = std::filesystem;
using namespace trilevel;

namespace {

int cmd_train(const std::string& config_path, const std::string& policy, const std::string& out_dir, bool quiet) {
  RunConfig cfg = load_run_config(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  TrainOptions opts;
  opts.removal_policy = parse_removal_policy(policy);
  opts.log = quiet ? nullptr : &std::cerr;
  const auto result = train(cfg, opts);
  std::cout << "final val_acc " << result.final_val_acc << "\n"
            << "training MACs " << result.total_training_macs << "\n"
            << "outputs in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& kind, const std::string& data_dir,
             const std::string& split, std::optional<double> r_t, std::optional<double> r_a, bool dense) {
  const Checkpoint ck = read_checkpoint_file(checkpoint_path);
  RunConfig cfg = config_from_meta(ck.meta);
  cfg.dataset = parse_dataset_kind(kind);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  const DatasetSplit data = load_dataset(cfg);
  std::optional<SparsityConfig> sp;
  if (dense) {
    sp = SparsityConfig{};
  } else if (r_t || r_a) {
    sp = cfg.sparsity;
    if (r_t) sp->r_t = *r_t;
    if (r_a) sp->r_a = *r_a;
  }
  const double acc = evaluate_checkpoint(ck, split == "train" ? data.train : data.test, sp);
  std::cout << "accuracy " << acc << "\n";
  return 0;
}

int cmd_macs(const std::string& config_path, std::size_t dataset_size) {
  const RunConfig cfg = load_run_config(config_path);
  CostReport rep = cfg.sparsity.has_selectors() ? sparse_macs(cfg.model, cfg.sparsity) : dense_macs(cfg.model);
  if (dataset_size > 0) rep = with_training(rep, cfg.model, cfg.sparsity, cfg.epochs, dataset_size);
  std::cout << format_report_text(rep) << "\n" << to_json(rep).dump(2) << "\n";
  return 0;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

int cmd_dump_stats(const fs::path& run, std::size_t top) {
  const auto stats = read_csv(run / "examples_stats.csv");
  std::map<long, std::size_t> histogram;
  std::size_t unforgettable = 0, never_learned = 0, unvisited = 0;
  std::vector<std::pair<long, std::string>> most;
  for (std::size_t i = 1; i < stats.size(); ++i) {
    const auto& r = stats[i];
    if (r.size() < 5) continue;
    const long forget = std::stol(r[1]), learn = std::stol(r[2]), visits = std::stol(r[4]);
    ++histogram[forget];
    if (visits == 0)
      ++unvisited;
    else if (learn == 0)
      ++never_learned;
    else if (forget == 0)
      ++unforgettable;
    most.emplace_back(forget, r[0]);
  }
  std::cout << "examples " << (stats.empty() ? 0 : stats.size() - 1) << "\n"
            << "unforgettable " << unforgettable << "\n"
            << "never_learned " << never_learned << "\n"
            << "unvisited " << unvisited << "\n"
            << "forget_count histogram:\n";
  for (const auto& [count, n] : histogram) std::cout << "  " << count << ": " << n << "\n";
  std::stable_sort(most.begin(), most.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::cout << "most forgotten:";
  for (std::size_t i = 0; i < std::min(top, most.size()); ++i)
    std::cout << " " << most[i].second << "(" << most[i].first << ")";
  std::cout << "\n";
  if (fs::exists(run / "metrics.csv")) {
    const auto metrics = read_csv(run / "metrics.csv");
    if (metrics.size() > 1) {
      const auto& last = metrics.back();
      std::cout << "epochs " << metrics.size() - 1 << ", last val_acc " << last.at(3) << ", last active "
                << last.at(6) << "\n";
    }
  }
  if (fs::exists(run / "subset_log.txt")) {
    std::ifstream log(run / "subset_log.txt");
    std::cout << "subset updates:\n";
    for (std::string line; std::getline(log, line);) std::cout << "  " << line << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-level sparse ViT training"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON run config");
  std::string train_config, policy = "forgetting", out_dir;
  bool quiet = false;
  train_cmd->add_option("--config", train_config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--removal-policy", policy, "forgetting | random | class_balanced");
  train_cmd->add_option("--out-dir", out_dir, "override out_dir from the config");
  train_cmd->add_flag("--quiet", quiet, "no per-epoch log on stderr");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string checkpoint, kind, data_dir, split = "test";
  std::optional<double> r_t, r_a;
  bool dense = false;
  eval_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dataset", kind, "mnist | cifar10 | synthetic")->required();
  eval_cmd->add_option("--data-dir", data_dir, "override the stored data_dir");
  eval_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--r-t", r_t, "token keep ratio override");
  eval_cmd->add_option("--r-a", r_a, "attention keep ratio override");
  eval_cmd->add_flag("--dense", dense, "evaluate without any pruning");

  auto* macs_cmd = app.add_subcommand("macs", "print the analytic cost report");
  std::string macs_config;
  std::size_t dataset_size = 0;
  macs_cmd->add_option("--config", macs_config)->required()->check(CLI::ExistingFile);
  macs_cmd->add_option("--dataset-size", dataset_size, "also report whole-training MACs for this many examples");

  auto* dump_cmd = app.add_subcommand("dump-stats", "summarize per-example statistics of a run");
  std::string run_dir;
  std::size_t top = 10;
  dump_cmd->add_option("--run", run_dir)->required()->check(CLI::ExistingDirectory);
  dump_cmd->add_option("--top", top, "how many of the most forgotten examples to list");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(train_config, policy, out_dir, quiet);
    if (*eval_cmd) return cmd_eval(checkpoint, kind, data_dir, split, r_t, r_a, dense);
    if (*macs_cmd) return cmd_macs(macs_config, dataset_size);
    if (*dump_cmd) return cmd_dump_stats(run_dir, top);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
