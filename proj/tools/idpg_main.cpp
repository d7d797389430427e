#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "idpg/analysis.hpp"
#include "idpg/gradcheck.hpp"
#include "idpg/runconfig.hpp"

namespace {

using idpg::Method;
using idpg::MethodSpec;
using idpg::ModelBundle;
using idpg::RunConfig;
using nlohmann::json;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string display_or_render(const idpg::BudgetComponent& c) {
  return c.reported.empty() ? idpg::render_display(c.count) : c.reported;
}

std::shared_ptr<const idpg::EmbeddingTable> load_vectors(
    const std::string& path) {
  if (path.empty()) return nullptr;
  return std::make_shared<idpg::EmbeddingTable>(
      idpg::EmbeddingTable::load(path));
}

// --- count-params ------------------------------------------------------------

struct CountArgs {
  std::string method;
  std::string format = "text";
  // 0 = keep the published reference value for that dimension
  std::size_t d = 0, N = 0, t = 0, m = 0, n = 0, enc_dim = 0;
  std::int64_t backbone_total = -1;
};

int run_count_params(const CountArgs& args) {
  const Method method = idpg::parse_method(args.method);
  MethodSpec spec = MethodSpec::reference(method);
  if (args.d) spec.dims.d = args.d;
  if (args.N) spec.dims.N = args.N;
  if (args.t) spec.dims.t = args.t;
  if (args.m) spec.dims.m = args.m;
  if (args.n) spec.dims.n = args.n;
  if (args.enc_dim) spec.dims.enc_dim = args.enc_dim;
  if (args.backbone_total >= 0) spec.dims.backbone_total = args.backbone_total;

  const idpg::ParamBudget budget = idpg::count(spec);

  if (args.format == "record") {
    json rec;
    rec["method"] = idpg::to_string(method);
    rec["dims"] = {{"d", spec.dims.d},     {"N", spec.dims.N},
                   {"t", spec.dims.t},     {"m", spec.dims.m},
                   {"n", spec.dims.n},     {"enc_dim", spec.dims.enc_dim}};
    if (method == Method::full_finetune) {
      rec["dims"]["backbone_total"] = spec.dims.backbone_total;
    }
    rec["components"] = json::array();
    for (const idpg::BudgetComponent& c : budget.components) {
      rec["components"].push_back({{"label", c.label},
                                   {"count", c.count},
                                   {"display", display_or_render(c)}});
    }
    rec["total"] = budget.total;
    rec["display"] = budget.reported;
    std::cout << rec.dump() << "\n";
    return 0;
  }

  std::printf("method: %s\n", idpg::to_string(method));
  std::printf("dims: d=%zu N=%zu t=%zu m=%zu n=%zu enc=%zu\n", spec.dims.d,
              spec.dims.N, spec.dims.t, spec.dims.m, spec.dims.n,
              spec.dims.enc_dim);
  std::printf("%-24s %12s  %s\n", "component", "exact", "display");
  for (const idpg::BudgetComponent& c : budget.components) {
    std::printf("%-24s %12lld  %s\n", c.label.c_str(),
                static_cast<long long>(c.count), display_or_render(c).c_str());
  }
  std::printf("%-24s %12lld  %s\n", "total",
              static_cast<long long>(budget.total), budget.reported.c_str());
  return 0;
}

// --- train -------------------------------------------------------------------

json history_record(const idpg::TrainResult& result) {
  json hist = json::array();
  for (const idpg::EpochLog& e : result.history) {
    json entry = {{"epoch", e.epoch},
                  {"train_loss", e.train_loss},
                  {"best", e.is_best}};
    for (const auto& [k, v] : e.dev_metrics) entry["dev_" + k] = v;
    hist.push_back(entry);
  }
  return hist;
}

int run_train(const std::string& config_path, bool sweep_lr,
              const std::string& format) {
  const RunConfig rc = RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();

  std::vector<double> lrs = {rc.train.lr};
  if (sweep_lr) lrs = {5e-3, 1e-3, 5e-4, 1e-4};

  json runs = json::array();
  double best_dev = 0.0, best_lr = lrs.front();
  bool have_best = false;
  std::string primary;

  for (double lr : lrs) {
    idpg::TrainConfig cfg = rc.train;
    cfg.lr = lr;
    std::string ckpt = rc.checkpoint_file;
    if (sweep_lr && !ckpt.empty()) ckpt += "." + fmt17(lr);

    ModelBundle bundle = rc.make_bundle(ds);
    std::ostringstream log;
    const idpg::TrainResult result = idpg::train(bundle, ds, cfg, ckpt, &log);
    primary = result.primary_metric;

    if (!rc.log_file.empty()) {
      std::string log_path = rc.log_file;
      if (sweep_lr) log_path += "." + fmt17(lr);
      std::ofstream out(log_path, std::ios::binary);
      if (!out) {
        throw idpg::ConfigError("cannot write log file '" + log_path + "'");
      }
      out << log.str();
    }
    if (format != "record" && !sweep_lr) std::cout << log.str();

    if (!have_best || result.best_dev > best_dev) {
      have_best = true;
      best_dev = result.best_dev;
      best_lr = lr;
    }
    if (format == "record") {
      runs.push_back({{"lr", lr},
                      {"best_epoch", result.best_epoch},
                      {"best_dev", result.best_dev},
                      {"primary_metric", result.primary_metric},
                      {"history", history_record(result)}});
    } else {
      std::printf("lr=%s best_epoch=%zu best_dev_%s=%s\n", fmt17(lr).c_str(),
                  result.best_epoch, result.primary_metric.c_str(),
                  fmt17(result.best_dev).c_str());
    }
  }

  if (format == "record") {
    json rec = {{"task", ds.name},
                {"method", idpg::to_string(rc.method)},
                {"primary_metric", primary},
                {"best_lr", best_lr},
                {"best_dev", best_dev},
                {"runs", runs}};
    std::cout << rec.dump() << "\n";
  } else if (sweep_lr) {
    std::printf("best: lr=%s best_dev_%s=%s\n", fmt17(best_lr).c_str(),
                primary.c_str(), fmt17(best_dev).c_str());
  }
  return 0;
}

// --- eval --------------------------------------------------------------------

int run_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& split, std::size_t batch_size,
             const std::string& vectors_path, const std::string& format) {
  const RunConfig rc = RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();
  const ModelBundle bundle = ModelBundle::from_checkpoint(
      idpg::Checkpoint::load(ckpt_path), load_vectors(vectors_path));
  if (bundle.task_type != ds.type) {
    throw idpg::ContractError(
        "checkpoint was trained on a different task shape");
  }

  const std::vector<idpg::Example>& examples =
      split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test;
  const auto metrics = idpg::evaluate(bundle, examples, 7, batch_size);

  if (format == "record") {
    json rec = {{"task", ds.name},
                {"split", split},
                {"method", idpg::to_string(bundle.method)},
                {"examples", examples.size()}};
    for (const auto& [k, v] : metrics) rec["metrics"][k] = v;
    std::cout << rec.dump() << "\n";
  } else {
    for (const auto& [k, v] : metrics) {
      std::printf("%s = %s\n", k.c_str(), fmt17(v).c_str());
    }
  }
  return 0;
}

// --- gradcheck / oracle-check --------------------------------------------------

int run_gradcheck_cmd(std::size_t seeds, double tol,
                      const std::string& format) {
  const idpg::GradReport report = idpg::run_gradcheck(seeds);
  if (format == "record") {
    json rec = {{"seeds", seeds},
                {"tolerance", tol},
                {"worst", report.worst},
                {"ok", report.ok(tol)}};
    rec["checks"] = json::array();
    for (const idpg::GradCheck& c : report.checks) {
      rec["checks"].push_back({{"name", c.name}, {"rel_err", c.rel_err}});
    }
    std::cout << rec.dump() << "\n";
  } else {
    for (const idpg::GradCheck& c : report.checks) {
      std::printf("%-34s %s\n", c.name.c_str(), fmt17(c.rel_err).c_str());
    }
    std::printf("worst relative error: %s (tolerance %s)\n",
                fmt17(report.worst).c_str(), fmt17(tol).c_str());
  }
  return report.ok(tol) ? 0 : 1;
}

int run_oracle_check(std::size_t configs, std::uint64_t seed, double tol,
                     const std::string& format) {
  const idpg::OracleReport report = idpg::run_phm_oracle(configs, seed);
  if (format == "record") {
    const json rec = {{"configs", report.configs},
                      {"tolerance", tol},
                      {"worst_abs_diff", report.worst_abs_diff},
                      {"ok", report.ok(tol)}};
    std::cout << rec.dump() << "\n";
  } else {
    std::printf("configs: %zu\nworst |block - materialized|: %s "
                "(tolerance %s)\n",
                report.configs, fmt17(report.worst_abs_diff).c_str(),
                fmt17(tol).c_str());
  }
  return report.ok(tol) ? 0 : 1;
}

// --- analyze-cosine ------------------------------------------------------------

json distribution_record(const std::vector<idpg::RankDistribution>& dists) {
  json arr = json::array();
  for (const idpg::RankDistribution& d : dists) {
    json counts;
    for (const auto& [group, count] : d.counts) counts[group] = count;
    arr.push_back({{"k", d.k}, {"counts", counts}});
  }
  return arr;
}

void print_distributions(const std::string& label,
                         const std::vector<idpg::RankDistribution>& dists) {
  std::printf("model: %s\n", label.c_str());
  for (const idpg::RankDistribution& d : dists) {
    std::printf("  k=%zu:", d.k);
    for (const auto& [group, count] : d.counts) {
      std::printf(" %s=%zu", group.c_str(), count);
    }
    std::printf("\n");
  }
}

int run_analyze_cosine(const std::string& config_path,
                       const std::string& baseline_path,
                       const std::string& tuned_path, const std::string& split,
                       std::vector<std::size_t> ks,
                       const std::string& vectors_path,
                       const std::string& format) {
  const RunConfig rc = RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();
  if (ds.type != idpg::TaskType::pair) {
    throw idpg::ContractError(
        "analyze-cosine needs a sentence-pair task; got a single-sentence "
        "one");
  }
  const std::vector<idpg::Example>& examples =
      split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test;
  const auto vectors = load_vectors(vectors_path);

  const ModelBundle baseline = ModelBundle::from_checkpoint(
      idpg::Checkpoint::load(baseline_path), vectors);
  const ModelBundle tuned = ModelBundle::from_checkpoint(
      idpg::Checkpoint::load(tuned_path), vectors);

  const std::vector<std::string> groups =
      idpg::gold_groups(examples, ds.objective);
  const auto baseline_scores = idpg::score_pairs(baseline, examples, groups);
  const auto tuned_scores = idpg::score_pairs(tuned, examples, groups);

  std::vector<idpg::RankDistribution> baseline_dists, tuned_dists;
  for (std::size_t k : ks) {
    baseline_dists.push_back(idpg::topk_distribution(baseline_scores, k));
    tuned_dists.push_back(idpg::topk_distribution(tuned_scores, k));
  }

  const std::string baseline_label = idpg::to_string(baseline.method);
  const std::string tuned_label = idpg::to_string(tuned.method);
  if (format == "record") {
    const json rec = {
        {"task", ds.name},
        {"split", split},
        {"pairs", examples.size()},
        {"baseline",
         {{"method", baseline_label},
          {"distributions", distribution_record(baseline_dists)}}},
        {"tuned",
         {{"method", tuned_label},
          {"distributions", distribution_record(tuned_dists)}}}};
    std::cout << rec.dump() << "\n";
  } else {
    std::printf("pairs: %zu (split %s)\n", examples.size(), split.c_str());
    print_distributions("baseline (" + baseline_label + ")", baseline_dists);
    print_distributions("tuned (" + tuned_label + ")", tuned_dists);
  }
  return 0;
}

// --- few-shot ------------------------------------------------------------------

int run_few_shot(const std::string& config_path, std::vector<std::size_t> ks,
                 std::size_t dev_size, std::size_t seeds,
                 const std::string& format) {
  const RunConfig rc = RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();

  json sweeps = json::array();
  for (std::size_t k : ks) {
    std::vector<double> devs;
    std::string primary;
    for (std::size_t seed = 0; seed < seeds; ++seed) {
      const idpg::FewShotSplit fs = idpg::few_shot_sample(ds, k, dev_size,
                                                          seed);
      idpg::TaskDataset sub = ds;
      sub.train = fs.train;
      sub.dev = fs.dev;

      RunConfig seeded = rc;
      seeded.train.seed = seed;
      seeded.bundle.seed = seed;
      ModelBundle bundle = seeded.make_bundle(sub);
      const idpg::TrainResult result =
          idpg::train(bundle, sub, seeded.train);
      devs.push_back(result.best_dev);
      primary = result.primary_metric;
    }
    double mean = 0.0;
    for (double v : devs) mean += v;
    mean /= static_cast<double>(devs.size());
    double var = 0.0;
    for (double v : devs) var += (v - mean) * (v - mean);
    const double stdev =
        devs.size() > 1 ? std::sqrt(var / static_cast<double>(devs.size() - 1))
                        : 0.0;

    if (format == "record") {
      sweeps.push_back({{"k", k},
                        {"seeds", seeds},
                        {"metric", primary},
                        {"mean", mean},
                        {"stdev", stdev},
                        {"values", devs}});
    } else {
      std::printf("K=%zu %s = %s +/- %s (%zu seeds)\n", k, primary.c_str(),
                  fmt17(mean).c_str(), fmt17(stdev).c_str(), seeds);
    }
  }
  if (format == "record") {
    const json rec = {{"task", ds.name},
                      {"method", idpg::to_string(rc.method)},
                      {"dev_size", dev_size},
                      {"sweeps", sweeps}};
    std::cout << rec.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parameter-efficient prompt-generation toolkit"};
  app.require_subcommand(1);

  const std::vector<std::string> formats = {"text", "record"};

  CountArgs count_args;
  CLI::App* count = app.add_subcommand(
      "count-params", "exact trainable-parameter budget for a method");
  count->add_option("--method", count_args.method, "method name")->required();
  count->add_option("--d", count_args.d, "backbone hidden size");
  count->add_option("--N", count_args.N, "backbone layers");
  count->add_option("--t", count_args.t, "prompt length");
  count->add_option("--m", count_args.m, "generator bottleneck");
  count->add_option("--n", count_args.n, "factorization order");
  count->add_option("--enc-dim", count_args.enc_dim, "sentence-rep dim");
  count->add_option("--backbone-total", count_args.backbone_total,
                    "declared backbone size (full-finetune)");
  count->add_option("--format", count_args.format, "output format")
      ->check(CLI::IsMember(formats));

  std::string train_config, train_format = "text";
  bool sweep_lr = false;
  CLI::App* train = app.add_subcommand("train", "train a method on a task");
  train->add_option("--config", train_config, "run config file")->required();
  train->add_flag("--sweep-lr", sweep_lr,
                  "sweep the published learning-rate grid");
  train->add_option("--format", train_format, "output format")
      ->check(CLI::IsMember(formats));

  std::string eval_config, eval_ckpt, eval_split = "test", eval_vectors,
              eval_format = "text";
  std::size_t eval_batch = 8;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", eval_config, "run config file")->required();
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--split", eval_split, "data split")
      ->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--batch-size", eval_batch, "0 = per-example");
  eval->add_option("--vectors", eval_vectors, "word-vector table");
  eval->add_option("--format", eval_format, "output format")
      ->check(CLI::IsMember(formats));

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  std::string gc_format = "text";
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seeds", gc_seeds, "random seeds");
  gradcheck->add_option("--tol", gc_tol, "max relative error");
  gradcheck->add_option("--format", gc_format, "output format")
      ->check(CLI::IsMember(formats));

  std::size_t oc_configs = 100;
  std::uint64_t oc_seed = 0;
  double oc_tol = 1e-10;
  std::string oc_format = "text";
  CLI::App* oracle = app.add_subcommand(
      "oracle-check", "factorized vs materialized forward equivalence");
  oracle->add_option("--configs", oc_configs, "random configurations");
  oracle->add_option("--seed", oc_seed, "rng seed");
  oracle->add_option("--tol", oc_tol, "max absolute difference");
  oracle->add_option("--format", oc_format, "output format")
      ->check(CLI::IsMember(formats));

  std::string ac_config, ac_baseline, ac_tuned, ac_split = "test", ac_vectors,
              ac_format = "text";
  std::vector<std::size_t> ac_ks = {100, 200, 300};
  CLI::App* cosine = app.add_subcommand(
      "analyze-cosine", "top-k cosine ranking of pair reps for two models");
  cosine->add_option("--config", ac_config, "run config file")->required();
  cosine->add_option("--baseline", ac_baseline, "baseline checkpoint")
      ->required();
  cosine->add_option("--tuned", ac_tuned, "tuned checkpoint")->required();
  cosine->add_option("--split", ac_split, "data split")
      ->check(CLI::IsMember({"train", "dev", "test"}));
  cosine->add_option("--k", ac_ks, "ranking depths")->delimiter(',');
  cosine->add_option("--vectors", ac_vectors, "word-vector table");
  cosine->add_option("--format", ac_format, "output format")
      ->check(CLI::IsMember(formats));

  std::string fs_config, fs_format = "text";
  std::vector<std::size_t> fs_ks = {100, 500, 1000};
  std::size_t fs_dev = 1000, fs_seeds = 5;
  CLI::App* fewshot = app.add_subcommand(
      "few-shot", "K-shot sweep with mean and stdev over seeds");
  fewshot->add_option("--config", fs_config, "run config file")->required();
  fewshot->add_option("--k", fs_ks, "shot counts")->delimiter(',');
  fewshot->add_option("--dev-size", fs_dev, "held-out dev examples");
  fewshot->add_option("--seeds", fs_seeds, "number of seeds");
  fewshot->add_option("--format", fs_format, "output format")
      ->check(CLI::IsMember(formats));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*count) return run_count_params(count_args);
    if (*train) return run_train(train_config, sweep_lr, train_format);
    if (*eval) {
      return run_eval(eval_config, eval_ckpt, eval_split, eval_batch,
                      eval_vectors, eval_format);
    }
    if (*gradcheck) return run_gradcheck_cmd(gc_seeds, gc_tol, gc_format);
    if (*oracle) return run_oracle_check(oc_configs, oc_seed, oc_tol,
                                         oc_format);
    if (*cosine) {
      return run_analyze_cosine(ac_config, ac_baseline, ac_tuned, ac_split,
                                ac_ks, ac_vectors, ac_format);
    }
    if (*fewshot) {
      return run_few_shot(fs_config, fs_ks, fs_dev, fs_seeds, fs_format);
    }
  } catch (const idpg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
