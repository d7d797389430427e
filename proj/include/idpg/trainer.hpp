#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "idpg/accountant.hpp"
#include "idpg/checkpoint.hpp"
#include "idpg/dataset.hpp"
#include "idpg/generator.hpp"
#include "idpg/nn.hpp"

namespace idpg {

struct TrainConfig {
  double lr = 5e-4;
  bool linear_decay = false;     // fixed schedule by default
  double warmup_fraction = 0.06; // of total steps, when linear_decay
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  double weight_decay = 0.1;
  double adam_eps = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  bool freeze_backbone = true;
  std::uint64_t seed = 0;
  std::size_t precision = 64; // 32 or 64

  void validate() const;
  DType dtype() const { return precision == 32 ? DType::f32 : DType::f64; }
};

struct OptimState {
  // first/second moments aligned with the optimizer's parameter list
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// Decoupled weight decay applies to weight matrices only; biases and
// norm gains/shifts are the rank-1 tensors and are excluded.
bool decay_applies(const Tensor& t);

// One bias-corrected update from the accumulated gradients. lr_scale
// multiplies cfg.lr so schedules can anneal it. Missing gradients violate
// the contract; non-finite gradients abort naming the parameter.
void adamw_step(std::vector<NamedParam>& params, OptimState& state,
                const TrainConfig& cfg, double lr_scale = 1.0);

void zero_grads(std::vector<NamedParam>& params);

// Everything needed to run one method end to end on a task: backbone,
// head, vocabulary, and the method's own trainable pieces.
// Named methods pin the axes their budget formulas assume (multi-depth
// sharing M, plain generator arch); the generator API exposes the other
// variants directly. input_source and nonlinearity do not change counts.
struct BundleOptions {
  TransformerConfig backbone;
  std::size_t t = 5;
  std::size_t m = 16;
  std::size_t n = 4;
  InputSource input_source = InputSource::previous_layer;
  Nonlinearity nonlinearity = Nonlinearity::tanh;
  PromptPosition position = PromptPosition::pos0;
  DType dtype = DType::f64;
  std::uint64_t seed = 0;
  // GloVe-analog rep source; required by m-idpg-phm-glove, else ignored.
  std::shared_ptr<const EmbeddingTable> vectors;
};

struct ModelBundle {
  Method method = Method::prompt_tuning;
  BundleOptions opts;
  TaskType task_type = TaskType::single;
  Objective objective = Objective::classification;
  Vocab vocab;
  Transformer backbone;
  ClassifierHead head;
  PromptGenerator generator;      // idpg methods
  Tensor bank;                    // prompt tuning
  std::vector<Tensor> deep_bank;  // per-layer prompt tuning

  // Builds vocabulary from ds.train and initializes all modules from
  // opts.seed. Accounting-only methods (adapter, compacter) are rejected.
  static ModelBundle build(Method method, const TaskDataset& ds,
                           const BundleOptions& opts);
  // Rebuilds a trained model purely from a checkpoint's metadata and
  // tensors; vectors is required only for the word-vector method.
  static ModelBundle from_checkpoint(
      const Checkpoint& ckpt,
      std::shared_ptr<const EmbeddingTable> vectors = nullptr);

  bool uses_generator() const;
  TemplateTokens make_template(const Example& ex) const;
  // Instance rep for the generator source; cache may span epochs since
  // rep inputs are frozen. split_id keys the cache per split.
  SentenceRep rep_for(const Example& ex, const TemplateTokens& tmpl,
                      std::size_t split_id, RepCache* cache) const;
  // pad_to > 0 pads the template to that many token rows for batching.
  ForwardResult forward(Tape& tape, const Example& ex, std::size_t split_id,
                        RepCache* cache, std::size_t pad_to = 0) const;
  Tensor loss(Tape& tape, const ForwardResult& fr, const Example& ex) const;
  // argmax label for classification; for regression the raw output is in
  // ForwardResult.output.
  int predict_label(const ForwardResult& fr) const;

  // Method parameters, head excluded (it is budgeted separately).
  std::vector<NamedParam> trainable();
  // trainable() plus the head: the full optimizer set.
  std::vector<NamedParam> optimizer_params();
  // Dims of this bundle for the budget accountant.
  MethodSpec spec() const;

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ckpt);
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::map<std::string, double> dev_metrics;
  bool is_best = false;
};

struct TrainResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_dev = 0.0;
  std::string primary_metric;
};

const char* primary_metric_name(Objective obj);

// accuracy (+ f1 for binary classification), or pearson/spearman for
// regression. batch_size > 0 pads each batch to its longest template and
// masks the padding; predictions match the per-example path.
std::map<std::string, double> evaluate(const ModelBundle& bundle,
                                       const std::vector<Example>& split,
                                       std::size_t split_id,
                                       std::size_t batch_size = 0,
                                       RepCache* cache = nullptr);

// Audits the trainable set against the declared budget, then runs
// epoch-wise minibatch training with a per-epoch dev pass. The best-dev
// checkpoint is written to checkpoint_path when nonempty. A frozen
// backbone is verified bit-identical at the end.
TrainResult train(ModelBundle& bundle, const TaskDataset& ds,
                  const TrainConfig& cfg,
                  const std::string& checkpoint_path = "",
                  std::ostream* log = nullptr);

}  // namespace idpg
