#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "idpg/tensor.hpp"

namespace idpg {

// Reserved ids of the toy vocabulary.
inline constexpr std::size_t kClsId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kSepId = 2;
inline constexpr std::size_t kEosId = 3;
inline constexpr std::size_t kPadId = 4;
inline constexpr std::size_t kNumReservedIds = 5;

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn_inner = 64;
  std::size_t vocab_size = 1000;
  std::size_t max_seq = 64;
  double dropout = 0.0;

  void validate() const;
};

struct EncoderLayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_shift;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_gain, ln2_shift;
};

struct EncoderState {
  // num_layers + 1 entries; hidden[0] is the embedded input.
  std::vector<Tensor> hidden;
  // Position-0 row of the final layer.
  Tensor h_cls;
  // Per-layer, per-head attention probabilities when collected.
  std::vector<std::vector<Tensor>> attention;
};

// Observes or replaces the hidden sequence entering a layer; used to
// overwrite prompt slots in multi-depth injection.
using LayerHook = std::function<Tensor(Tape&, const Tensor&, std::size_t)>;

struct EncodeOptions {
  // true = position may be attended to; empty means all positions. [PAD]
  // slots get false so batched and per-example inference agree.
  std::vector<bool> key_mask;
  LayerHook layer_hook;
  bool collect_attention = false;
  bool train_mode = false;
  Rng* dropout_rng = nullptr;
};

// Post-norm encoder: h = LN(h + MHA(h)); h = LN(h + FFN(h)).
class Transformer {
 public:
  Transformer() = default;
  static Transformer init(const TransformerConfig& cfg, Rng& rng, DType dt,
                          bool trainable);

  const TransformerConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }
  bool trainable() const { return trainable_; }

  Tensor embed(Tape& tape, const std::vector<std::size_t>& ids) const;
  EncoderState encode_embedded(Tape& tape, Tensor h,
                               const EncodeOptions& opts = {}) const;
  EncoderState encode(Tape& tape, const std::vector<std::size_t>& ids,
                      const EncodeOptions& opts = {}) const;

  Tensor& token_table() { return tok_; }
  Tensor& position_table() { return pos_; }
  std::vector<EncoderLayerParams>& layers() { return layers_; }
  const std::vector<EncoderLayerParams>& layers() const { return layers_; }

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  std::int64_t param_count() const;

 private:
  TransformerConfig cfg_;
  DType dtype_ = DType::f64;
  Tensor tok_, pos_;
  std::vector<EncoderLayerParams> layers_;
  bool trainable_ = false;
};

enum class HeadMode { classification, regression };

// Linear readout of h_cls. Trains even when the backbone is frozen and is
// budgeted separately from the tuned method.
struct ClassifierHead {
  HeadMode mode = HeadMode::classification;
  Tensor w, b;

  static ClassifierHead init(HeadMode mode, std::size_t num_labels,
                             std::size_t hidden, Rng& rng, DType dt);
  // Log-probabilities [labels] for classification, raw [1] for regression.
  Tensor forward(Tape& tape, const Tensor& h_cls) const;
  std::size_t num_labels() const { return w.shape()[0]; }
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
};

Tensor nll_loss(Tape& tape, const Tensor& log_probs, std::size_t label);
Tensor mse_loss(Tape& tape, const Tensor& pred, double target);

}  // namespace idpg
