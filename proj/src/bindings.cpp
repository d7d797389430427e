#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <memory>
#include <sstream>

#include "idpg/analysis.hpp"
#include "idpg/gradcheck.hpp"
#include "idpg/runconfig.hpp"

#define STRINGIFY(x) #x
#define MACRO_STRINGIFY(x) STRINGIFY(x)

namespace py = pybind11;

namespace {

py::dict budget_dict(const idpg::ParamBudget& budget) {
  py::list components;
  for (const idpg::BudgetComponent& c : budget.components) {
    py::dict row;
    row["label"] = c.label;
    row["count"] = c.count;
    row["display"] = c.reported.empty() ? idpg::render_display(c.count)
                                        : c.reported;
    components.append(row);
  }
  py::dict out;
  out["components"] = components;
  out["total"] = budget.total;
  out["display"] = budget.reported;
  return out;
}

py::dict count_params(const std::string& method, std::size_t d, std::size_t N,
                      std::size_t t, std::size_t m, std::size_t n,
                      std::size_t enc_dim, std::int64_t backbone_total) {
  idpg::MethodSpec spec = idpg::MethodSpec::reference(
      idpg::parse_method(method));
  if (d) spec.dims.d = d;
  if (N) spec.dims.N = N;
  if (t) spec.dims.t = t;
  if (m) spec.dims.m = m;
  if (n) spec.dims.n = n;
  if (enc_dim) spec.dims.enc_dim = enc_dim;
  if (backbone_total >= 0) spec.dims.backbone_total = backbone_total;
  return budget_dict(idpg::count(spec));
}

py::dict oracle_dict(std::size_t configs, std::uint64_t seed, double tol) {
  const idpg::OracleReport r = idpg::run_phm_oracle(configs, seed);
  py::dict out;
  out["configs"] = r.configs;
  out["worst_abs_diff"] = r.worst_abs_diff;
  out["ok"] = r.ok(tol);
  return out;
}

py::dict gradcheck_dict(std::size_t seeds, double tol) {
  const idpg::GradReport r = idpg::run_gradcheck(seeds);
  py::dict checks;
  for (const idpg::GradCheck& c : r.checks) {
    checks[py::str(c.name)] = c.rel_err;
  }
  py::dict out;
  out["checks"] = checks;
  out["worst"] = r.worst;
  out["ok"] = r.ok(tol);
  return out;
}

py::dict train_from_config(const std::string& config_path) {
  const idpg::RunConfig rc = idpg::RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();
  idpg::ModelBundle bundle = rc.make_bundle(ds);
  std::ostringstream log;
  const idpg::TrainResult result =
      idpg::train(bundle, ds, rc.train, rc.checkpoint_file, &log);
  if (!rc.log_file.empty()) {
    std::ofstream out(rc.log_file, std::ios::binary);
    out << log.str();
  }
  py::list history;
  for (const idpg::EpochLog& e : result.history) {
    py::dict entry;
    entry["epoch"] = e.epoch;
    entry["train_loss"] = e.train_loss;
    entry["best"] = e.is_best;
    for (const auto& [k, v] : e.dev_metrics) {
      entry[py::str("dev_" + k)] = v;
    }
    history.append(entry);
  }
  py::dict out;
  out["task"] = ds.name;
  out["method"] = idpg::to_string(rc.method);
  out["primary_metric"] = result.primary_metric;
  out["best_epoch"] = result.best_epoch;
  out["best_dev"] = result.best_dev;
  out["history"] = history;
  out["log"] = log.str();
  return out;
}

py::dict evaluate_checkpoint(const std::string& config_path,
                             const std::string& checkpoint_path,
                             const std::string& split, std::size_t batch_size,
                             const std::string& vectors_path) {
  const idpg::RunConfig rc = idpg::RunConfig::load(config_path);
  const idpg::TaskDataset ds = rc.make_dataset();
  std::shared_ptr<const idpg::EmbeddingTable> vectors;
  if (!vectors_path.empty()) {
    vectors = std::make_shared<idpg::EmbeddingTable>(
        idpg::EmbeddingTable::load(vectors_path));
  }
  const idpg::ModelBundle bundle = idpg::ModelBundle::from_checkpoint(
      idpg::Checkpoint::load(checkpoint_path), vectors);
  if (bundle.task_type != ds.type) {
    throw idpg::ContractError(
        "checkpoint was trained on a different task shape");
  }
  const std::vector<idpg::Example>& examples =
      split == "train" ? ds.train : split == "dev" ? ds.dev : ds.test;
  py::dict metrics;
  for (const auto& [k, v] : idpg::evaluate(bundle, examples, 7, batch_size)) {
    metrics[py::str(k)] = v;
  }
  py::dict out;
  out["task"] = ds.name;
  out["split"] = split;
  out["method"] = idpg::to_string(bundle.method);
  out["examples"] = examples.size();
  out["metrics"] = metrics;
  return out;
}

py::dict topk(const std::vector<std::tuple<std::size_t, std::string, double>>&
                  pairs,
              std::size_t k) {
  std::vector<idpg::PairScore> scores;
  scores.reserve(pairs.size());
  for (const auto& [pair_id, group, score] : pairs) {
    scores.push_back({pair_id, group, score});
  }
  const idpg::RankDistribution dist = idpg::topk_distribution(scores, k);
  py::dict counts;
  for (const auto& [group, count] : dist.counts) {
    counts[py::str(group)] = count;
  }
  py::dict out;
  out["k"] = dist.k;
  out["counts"] = counts;
  return out;
}

std::vector<std::string> method_names() {
  std::vector<std::string> out;
  for (idpg::Method m : idpg::all_methods()) out.push_back(idpg::to_string(m));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Instance-dependent prompt generation toolkit";
#ifdef VERSION_INFO
  m.attr("__version__") = MACRO_STRINGIFY(VERSION_INFO);
#else
  m.attr("__version__") = "dev";
#endif

  py::register_exception<idpg::Error>(m, "IdpgError");

  m.def("methods", &method_names,
        "Names of every accountable fine-tuning method.");
  m.def("count_params", &count_params, py::arg("method"), py::arg("d") = 0,
        py::arg("N") = 0, py::arg("t") = 0, py::arg("m") = 0,
        py::arg("n") = 0, py::arg("enc_dim") = 0,
        py::arg("backbone_total") = -1,
        "Exact trainable-parameter budget; zero dims keep the published "
        "reference values.");
  m.def("render_display", &idpg::render_display, py::arg("count"),
        "Render an exact count in the K=1024 display convention.");
  m.def("display_consistent", &idpg::display_consistent, py::arg("count"),
        py::arg("display"),
        "Whether a display string is a faithful rounding of the count.");
  m.def("run_phm_oracle", &oracle_dict, py::arg("configs") = 100,
        py::arg("seed") = 0, py::arg("tol") = 1e-10,
        "Factorized vs materialized forward equivalence over random "
        "configurations.");
  m.def("run_gradcheck", &gradcheck_dict, py::arg("seeds") = 20,
        py::arg("tol") = 1e-4,
        "Central finite-difference verification of every analytic "
        "gradient.");
  m.def("train_from_config", &train_from_config, py::arg("config_path"),
        "Train per a run-config file; writes checkpoint/log when configured "
        "and returns the epoch history.");
  m.def("evaluate_checkpoint", &evaluate_checkpoint, py::arg("config_path"),
        py::arg("checkpoint_path"), py::arg("split") = "test",
        py::arg("batch_size") = 8, py::arg("vectors_path") = "",
        "Rebuild a model from a checkpoint and score a data split.");
  m.def("topk_distribution", &topk, py::arg("pairs"), py::arg("k"),
        "Group counts among the k best-scored (pair_id, group, score) "
        "triples.");
}
