#include "idpg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace idpg {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> example_words(const Example& ex) {
  std::vector<std::string> words = Vocab::tokenize(ex.s1);
  if (ex.s2) {
    const std::vector<std::string> more = Vocab::tokenize(*ex.s2);
    words.insert(words.end(), more.begin(), more.end());
  }
  return words;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
  if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 ||
      adam_beta2 >= 1.0) {
    throw ConfigError("train: betas must lie in (0, 1)");
  }
  if (adam_eps <= 0.0) throw ConfigError("train: adam_eps must be > 0");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  if (epochs == 0) throw ConfigError("train: epochs must be > 0");
  if (precision != 32 && precision != 64) {
    throw ConfigError("train: precision must be 32 or 64");
  }
  if (linear_decay && (warmup_fraction < 0.0 || warmup_fraction >= 1.0)) {
    throw ConfigError("train: warmup_fraction must lie in [0, 1)");
  }
}

bool decay_applies(const Tensor& t) { return t.rank() >= 2; }

void zero_grads(std::vector<NamedParam>& params) {
  for (NamedParam& p : params) p.tensor.zero_grad();
}

void adamw_step(std::vector<NamedParam>& params, OptimState& state,
                const TrainConfig& cfg, double lr_scale) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.size(), 0.0);
      state.v[i].assign(params[i].tensor.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adamw: state tracks " +
                        std::to_string(state.m.size()) + " tensors, got " +
                        std::to_string(params.size()));
  }
  state.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = cfg.lr * lr_scale;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    if (!t.has_grad()) {
      throw ContractError("adamw: gradient missing for " + params[i].path);
    }
    const std::vector<double>& g = t.grad();
    if (state.m[i].size() != g.size()) {
      throw ContractError("adamw: moment shape drifted for " + params[i].path);
    }
    const bool decay = cfg.weight_decay > 0.0 && decay_applies(t);
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw DivergenceError("adamw: non-finite gradient at " +
                              params[i].path);
      }
      state.m[i][j] = b1 * state.m[i][j] + (1.0 - b1) * g[j];
      state.v[i][j] = b2 * state.v[i][j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      double x = t.at(j) - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (decay) x -= lr * cfg.weight_decay * t.at(j);
      t.set(j, x);
    }
  }
}

namespace {

const char* task_type_name(TaskType type) {
  return type == TaskType::pair ? "pair" : "single";
}

const char* objective_name(Objective obj) {
  return obj == Objective::regression ? "regression" : "classification";
}

const std::string& require_meta(const Checkpoint& ckpt,
                                const std::string& key) {
  const std::string* v = ckpt.find_meta(key);
  if (!v) {
    throw ContractError("checkpoint is missing the '" + key + "' record");
  }
  return *v;
}

}  // namespace

static ModelBundle assemble_bundle(Method method, TaskType task_type,
                                   Objective objective,
                                   std::size_t num_labels, Vocab vocab,
                                   const BundleOptions& opts) {
  if (method == Method::adapter || method == Method::compacter) {
    throw ConfigError(std::string(to_string(method)) +
                      " is an accounting-only method; no runnable layer");
  }
  opts.backbone.validate();

  ModelBundle b;
  b.method = method;
  b.opts = opts;
  b.task_type = task_type;
  b.objective = objective;
  b.vocab = std::move(vocab);

  Rng rng(opts.seed);
  const bool full = method == Method::full_finetune;
  b.backbone = Transformer::init(opts.backbone, rng, opts.dtype, full);
  const HeadMode mode = objective == Objective::classification
                            ? HeadMode::classification
                            : HeadMode::regression;
  const std::size_t labels =
      mode == HeadMode::classification ? num_labels : 1;
  b.head = ClassifierHead::init(mode, labels, opts.backbone.hidden, rng,
                                opts.dtype);

  const std::size_t d = opts.backbone.hidden;
  switch (method) {
    case Method::full_finetune:
      break;
    case Method::prompt_tuning:
    case Method::prompt_tuning_134: {
      std::vector<double> v(opts.t * d);
      for (double& x : v) x = rng.normal(0.0, 0.02);
      b.bank = Tensor::from({opts.t, d}, std::move(v), opts.dtype, true);
      break;
    }
    case Method::p_tuning_v2: {
      for (std::size_t l = 0; l < opts.backbone.num_layers; ++l) {
        std::vector<double> v(opts.t * d);
        for (double& x : v) x = rng.normal(0.0, 0.02);
        b.deep_bank.push_back(
            Tensor::from({opts.t, d}, std::move(v), opts.dtype, true));
      }
      break;
    }
    case Method::s_idpg_phm:
    case Method::s_idpg_dnn:
    case Method::m_idpg_phm:
    case Method::m_idpg_dnn:
    case Method::m_idpg_phm_glove: {
      GeneratorConfig g;
      g.flavor = (method == Method::s_idpg_dnn || method == Method::m_idpg_dnn)
                     ? GenFlavor::dnn
                     : GenFlavor::phm;
      g.depth_mode =
          (method == Method::s_idpg_phm || method == Method::s_idpg_dnn)
              ? DepthMode::single
              : DepthMode::multi;
      g.t = opts.t;
      g.m = opts.m;
      g.d = d;
      g.n = opts.n;
      g.sharing = Sharing::M;
      g.num_layers = opts.backbone.num_layers;
      g.arch_variant = ArchVariant::plain;
      g.nonlinearity = opts.nonlinearity;
      if (method == Method::m_idpg_phm_glove) {
        if (!opts.vectors) {
          throw ConfigError("m-idpg-phm-glove requires a word-vector table");
        }
        g.encoder = RepEncoder::bag_of_vectors;
        g.enc_dim = opts.vectors->dim();
        g.input_source = InputSource::layer0;
      } else {
        g.encoder = RepEncoder::backbone_cls;
        g.enc_dim = d;
        g.input_source = g.depth_mode == DepthMode::multi ? opts.input_source
                                                          : InputSource::layer0;
      }
      b.generator = PromptGenerator::init(g, rng, opts.dtype);
      break;
    }
    case Method::adapter:
    case Method::compacter:
      break; // rejected above
  }
  return b;
}

ModelBundle ModelBundle::build(Method method, const TaskDataset& ds,
                               const BundleOptions& opts) {
  ds.validate();
  return assemble_bundle(method, ds.type, ds.objective, ds.num_labels,
                         Vocab::build(ds.train, opts.backbone.vocab_size),
                         opts);
}

ModelBundle ModelBundle::from_checkpoint(
    const Checkpoint& ckpt, std::shared_ptr<const EmbeddingTable> vectors) {
  const Method method = parse_method(require_meta(ckpt, "method"));
  BundleOptions opts;
  opts.backbone = ckpt.config;
  opts.t = std::stoull(require_meta(ckpt, "t"));
  opts.m = std::stoull(require_meta(ckpt, "m"));
  opts.n = std::stoull(require_meta(ckpt, "n"));
  opts.input_source = parse_input_source(require_meta(ckpt, "input_source"));
  opts.nonlinearity = parse_nonlinearity(require_meta(ckpt, "nonlinearity"));
  opts.position = parse_prompt_position(require_meta(ckpt, "position"));
  opts.dtype = require_meta(ckpt, "precision") == "32" ? DType::f32
                                                       : DType::f64;
  opts.vectors = std::move(vectors);

  const std::string& type_str = require_meta(ckpt, "task_type");
  const TaskType task_type =
      type_str == "pair" ? TaskType::pair : TaskType::single;
  const std::string& obj_str = require_meta(ckpt, "objective");
  const Objective objective = obj_str == "regression"
                                  ? Objective::regression
                                  : Objective::classification;
  const std::size_t num_labels = std::stoull(require_meta(ckpt, "num_labels"));

  ModelBundle b = assemble_bundle(method, task_type, objective, num_labels,
                                  Vocab::deserialize(require_meta(ckpt, "vocab")),
                                  opts);
  b.restore(ckpt);
  return b;
}

bool ModelBundle::uses_generator() const {
  switch (method) {
    case Method::s_idpg_phm:
    case Method::s_idpg_dnn:
    case Method::m_idpg_phm:
    case Method::m_idpg_dnn:
    case Method::m_idpg_phm_glove:
      return true;
    default:
      return false;
  }
}

TemplateTokens ModelBundle::make_template(const Example& ex) const {
  const std::vector<std::size_t> s1 = vocab.encode(ex.s1);
  if (task_type == TaskType::pair) {
    if (!ex.s2) throw ContractError("forward: pair task without s2");
    return TemplateTokens::pair(s1, vocab.encode(*ex.s2));
  }
  return TemplateTokens::single(s1);
}

SentenceRep ModelBundle::rep_for(const Example& ex, const TemplateTokens& tmpl,
                                 std::size_t split_id, RepCache* cache) const {
  const RepKey key{split_id, ex.id};
  if (cache) {
    if (const SentenceRep* hit = cache->find(key)) return *hit;
  }
  SentenceRep rep = make_instance_rep(generator.config(), backbone, tmpl.ids,
                                      example_words(ex),
                                      opts.vectors.get());
  if (cache) cache->put(key, rep);
  return rep;
}

ForwardResult ModelBundle::forward(Tape& tape, const Example& ex,
                                   std::size_t split_id, RepCache* cache,
                                   std::size_t pad_to) const {
  const TemplateTokens base = make_template(ex);
  const TemplateTokens tmpl = pad_to > 0 ? base.padded_to(pad_to) : base;
  switch (method) {
    case Method::full_finetune:
      return forward_plain(tape, backbone, head, tmpl);
    case Method::prompt_tuning:
    case Method::prompt_tuning_134:
      return forward_prompt_bank(tape, backbone, head, bank, tmpl,
                                 opts.position);
    case Method::p_tuning_v2:
      return forward_deep_prompt_bank(tape, backbone, head, deep_bank, tmpl,
                                      opts.position);
    default: {
      // the rep is a function of the real tokens, so key it off the
      // unpadded template
      const SentenceRep rep = rep_for(ex, base, split_id, cache);
      return forward_idpg(tape, backbone, head, generator, tmpl,
                          opts.position, rep);
    }
  }
}

Tensor ModelBundle::loss(Tape& tape, const ForwardResult& fr,
                         const Example& ex) const {
  if (objective == Objective::classification) {
    if (ex.label < 0 ||
        static_cast<std::size_t>(ex.label) >= head.num_labels()) {
      throw IndexError("loss: label " + std::to_string(ex.label) +
                       " outside head range");
    }
    return nll_loss(tape, fr.output, static_cast<std::size_t>(ex.label));
  }
  return mse_loss(tape, fr.output, ex.target);
}

int ModelBundle::predict_label(const ForwardResult& fr) const {
  if (objective != Objective::classification) {
    throw ContractError("predict: regression outputs have no label");
  }
  std::size_t arg = 0;
  for (std::size_t i = 1; i < fr.output.size(); ++i) {
    if (fr.output.at(i) > fr.output.at(arg)) arg = i;
  }
  return static_cast<int>(arg);
}

std::vector<NamedParam> ModelBundle::trainable() {
  std::vector<NamedParam> out;
  auto add = [&](const std::string& path, Tensor& t) {
    out.push_back({path, t});
  };
  switch (method) {
    case Method::full_finetune:
      backbone.visit_params(add);
      break;
    case Method::prompt_tuning:
    case Method::prompt_tuning_134:
      add("bank", bank);
      break;
    case Method::p_tuning_v2:
      for (std::size_t l = 0; l < deep_bank.size(); ++l) {
        add("bank." + std::to_string(l), deep_bank[l]);
      }
      break;
    default:
      generator.visit_params(add);
      break;
  }
  return out;
}

std::vector<NamedParam> ModelBundle::optimizer_params() {
  std::vector<NamedParam> out = trainable();
  head.visit_params([&](const std::string& path, Tensor& t) {
    out.push_back({path, t});
  });
  return out;
}

MethodSpec ModelBundle::spec() const {
  MethodSpec s;
  s.method = method;
  s.dims.d = opts.backbone.hidden;
  s.dims.N = opts.backbone.num_layers;
  s.dims.t = opts.t;
  s.dims.m = opts.m;
  s.dims.n = opts.n;
  s.dims.enc_dim = uses_generator() ? generator.config().enc_dim
                                    : opts.backbone.hidden;
  if (method == Method::full_finetune) {
    s.dims.backbone_total = backbone.param_count();
  }
  return s;
}

Checkpoint ModelBundle::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = opts.backbone;
  ckpt.add_meta("method", to_string(method));
  ckpt.add_meta("position", to_string(opts.position));
  ckpt.add_meta("t", std::to_string(opts.t));
  ckpt.add_meta("m", std::to_string(opts.m));
  ckpt.add_meta("n", std::to_string(opts.n));
  ckpt.add_meta("input_source", to_string(opts.input_source));
  ckpt.add_meta("nonlinearity", to_string(opts.nonlinearity));
  ckpt.add_meta("precision", opts.dtype == DType::f32 ? "32" : "64");
  ckpt.add_meta("task_type", task_type_name(task_type));
  ckpt.add_meta("objective", objective_name(objective));
  ckpt.add_meta("num_labels", std::to_string(head.num_labels()));
  ckpt.add_meta("vocab", vocab.serialize());
  ModelBundle& self = const_cast<ModelBundle&>(*this);
  self.backbone.visit_params([&](const std::string& path, Tensor& t) {
    ckpt.add(path, t);
  });
  self.head.visit_params([&](const std::string& path, Tensor& t) {
    ckpt.add(path, t);
  });
  if (method != Method::full_finetune) {
    for (NamedParam& p : self.trainable()) ckpt.add(p.path, p.tensor);
  }
  return ckpt;
}

void ModelBundle::restore(const Checkpoint& ckpt) {
  backbone.visit_params([&](const std::string& path, Tensor& t) {
    ckpt.restore(path, t);
  });
  head.visit_params([&](const std::string& path, Tensor& t) {
    ckpt.restore(path, t);
  });
  if (method != Method::full_finetune) {
    for (NamedParam& p : trainable()) ckpt.restore(p.path, p.tensor);
  }
  if (const std::string* v = ckpt.find_meta("vocab")) {
    vocab = Vocab::deserialize(*v);
  }
}

const char* primary_metric_name(Objective obj) {
  return obj == Objective::classification ? "accuracy" : "pearson";
}

std::map<std::string, double> evaluate(const ModelBundle& bundle,
                                       const std::vector<Example>& split,
                                       std::size_t split_id,
                                       std::size_t batch_size,
                                       RepCache* cache) {
  if (split.empty()) throw ContractError("evaluate: empty split");
  std::vector<int> pred_labels, gold_labels;
  std::vector<double> pred_values, gold_values;

  const std::size_t bs = batch_size == 0 ? 1 : batch_size;
  for (std::size_t start = 0; start < split.size(); start += bs) {
    const std::size_t end = std::min(split.size(), start + bs);
    std::size_t pad_to = 0;
    if (batch_size > 0) {
      for (std::size_t i = start; i < end; ++i) {
        pad_to = std::max(pad_to,
                          bundle.make_template(split[i]).ids.size());
      }
    }
    for (std::size_t i = start; i < end; ++i) {
      Tape tape(bundle.opts.dtype);
      const ForwardResult fr =
          bundle.forward(tape, split[i], split_id, cache, pad_to);
      if (bundle.objective == Objective::classification) {
        pred_labels.push_back(bundle.predict_label(fr));
        gold_labels.push_back(split[i].label);
      } else {
        pred_values.push_back(fr.output.at(0));
        gold_values.push_back(split[i].target);
      }
    }
  }

  std::map<std::string, double> out;
  if (bundle.objective == Objective::classification) {
    out["accuracy"] = accuracy(pred_labels, gold_labels);
    if (bundle.head.num_labels() == 2) {
      out["f1"] = f1_binary(pred_labels, gold_labels);
    }
  } else {
    out["pearson"] = pearson(pred_values, gold_values);
    out["spearman"] = spearman(pred_values, gold_values);
  }
  return out;
}

TrainResult train(ModelBundle& bundle, const TaskDataset& ds,
                  const TrainConfig& cfg, const std::string& checkpoint_path,
                  std::ostream* log) {
  cfg.validate();
  if (cfg.dtype() != bundle.opts.dtype) {
    throw ContractError("train: precision does not match the bundle dtype");
  }
  if (ds.train.empty()) throw ContractError("train: empty training split");
  if (cfg.freeze_backbone && bundle.method == Method::full_finetune) {
    throw ConfigError("train: full-finetune requires freeze_backbone=false");
  }
  if (!cfg.freeze_backbone && bundle.method != Method::full_finetune) {
    throw ConfigError("train: only full-finetune may unfreeze the backbone");
  }

  const AuditReport pre = audit(count(bundle.spec()),
                                const_cast<ModelBundle&>(bundle).trainable());
  if (!pre.ok) {
    throw ContractError("train: budget audit failed before step 0: " +
                        pre.message);
  }

  std::vector<std::vector<double>> frozen_snapshot;
  if (cfg.freeze_backbone) {
    bundle.backbone.visit_params([&](const std::string&, Tensor& t) {
      frozen_snapshot.push_back(t.values());
    });
  }

  std::vector<NamedParam> params = bundle.optimizer_params();
  OptimState state;
  RepCache cache;

  const std::size_t batches_per_epoch =
      (ds.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;
  const double warmup_steps = cfg.warmup_fraction * total_steps;

  TrainResult result;
  result.primary_metric = primary_metric_name(bundle.objective);
  double best = -2.0; // metrics live in [-1, 1] at worst
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(cfg.seed * 1000003ULL + epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = ds.train[order[i]];
        Tape tape(bundle.opts.dtype);
        const ForwardResult fr = bundle.forward(tape, ex, 0, &cache);
        Tensor loss = bundle.loss(tape, fr, ex);
        const double value = loss.at(0);
        if (!std::isfinite(value)) {
          throw DivergenceError("train: loss diverged at epoch " +
                                std::to_string(epoch) + " (example " +
                                std::to_string(ex.id) + ")");
        }
        loss_sum += value;
        tape.backward(tape.scale(loss, inv));
      }
      double lr_scale = 1.0;
      if (cfg.linear_decay) {
        const double s = static_cast<double>(step) + 1.0;
        lr_scale = warmup_steps > 0.0 && s <= warmup_steps
                       ? s / warmup_steps
                       : (total_steps - s + 1.0) /
                             std::max(1.0, total_steps - warmup_steps);
      }
      adamw_step(params, state, cfg, lr_scale);
      ++step;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(ds.train.size());
    entry.dev_metrics = ds.dev.empty()
                            ? std::map<std::string, double>{}
                            : evaluate(bundle, ds.dev, 1, 0, &cache);
    const double primary =
        ds.dev.empty() ? -entry.train_loss
                       : entry.dev_metrics.at(result.primary_metric);
    if (primary > best) {
      best = primary;
      entry.is_best = true;
      result.best_epoch = epoch;
      result.best_dev = primary;
      if (!checkpoint_path.empty()) {
        bundle.to_checkpoint().save(checkpoint_path);
      }
    }
    result.history.push_back(entry);

    if (log) {
      *log << "epoch=" << epoch
           << " train_loss=" << format_double(entry.train_loss);
      for (const auto& [k, v] : entry.dev_metrics) {
        *log << " dev_" << k << "=" << format_double(v);
      }
      *log << " best=" << (entry.is_best ? 1 : 0) << "\n";
    }
  }

  if (cfg.freeze_backbone) {
    std::size_t idx = 0;
    bool intact = true;
    bundle.backbone.visit_params([&](const std::string&, Tensor& t) {
      intact = intact && t.values() == frozen_snapshot[idx++];
    });
    if (!intact) {
      throw ContractError("train: frozen backbone changed during training");
    }
  }
  return result;
}

}  // namespace idpg
