#include "idpg/nn.hpp"

#include <cmath>

namespace idpg {

namespace {

constexpr double kMaskPenalty = -1e9;

Tensor xavier(Shape shape, Rng& rng, DType dt, bool trainable) {
  const std::size_t fan_in = shape[0], fan_out = shape.back();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), dt, trainable);
}

Tensor gaussian(Shape shape, double stddev, Rng& rng, DType dt, bool trainable) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), dt, trainable);
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng) {
  std::vector<double> mask(x.size());
  const double keep = 1.0 - rate;
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return tape.mul(x, tape.constant(x.shape(), std::move(mask)));
}

}  // namespace

void TransformerConfig::validate() const {
  if (num_layers == 0 || hidden == 0 || heads == 0 || ffn_inner == 0) {
    throw ConfigError("transformer: all dimensions must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("transformer: heads=" + std::to_string(heads) +
                      " must divide hidden=" + std::to_string(hidden));
  }
  if (vocab_size <= kNumReservedIds) {
    throw ConfigError("transformer: vocab_size=" + std::to_string(vocab_size) +
                      " leaves no room after the " +
                      std::to_string(kNumReservedIds) + " reserved ids");
  }
  if (max_seq == 0) throw ConfigError("transformer: max_seq must be positive");
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("transformer: dropout rate " + std::to_string(dropout) +
                      " outside [0, 1)");
  }
}

Transformer Transformer::init(const TransformerConfig& cfg, Rng& rng, DType dt,
                              bool trainable) {
  cfg.validate();
  Transformer tr;
  tr.cfg_ = cfg;
  tr.dtype_ = dt;
  tr.trainable_ = trainable;
  const std::size_t d = cfg.hidden;
  tr.tok_ = gaussian({cfg.vocab_size, d}, 0.5, rng, dt, trainable);
  tr.pos_ = gaussian({cfg.max_seq, d}, 0.5, rng, dt, trainable);
  tr.layers_.resize(cfg.num_layers);
  for (EncoderLayerParams& l : tr.layers_) {
    l.wq = xavier({d, d}, rng, dt, trainable);
    l.bq = Tensor::zeros({d}, dt, trainable);
    l.wk = xavier({d, d}, rng, dt, trainable);
    l.bk = Tensor::zeros({d}, dt, trainable);
    l.wv = xavier({d, d}, rng, dt, trainable);
    l.bv = Tensor::zeros({d}, dt, trainable);
    l.wo = xavier({d, d}, rng, dt, trainable);
    l.bo = Tensor::zeros({d}, dt, trainable);
    l.ln1_gain = Tensor::full({d}, 1.0, dt, trainable);
    l.ln1_shift = Tensor::zeros({d}, dt, trainable);
    l.ffn_w1 = xavier({d, cfg.ffn_inner}, rng, dt, trainable);
    l.ffn_b1 = Tensor::zeros({cfg.ffn_inner}, dt, trainable);
    l.ffn_w2 = xavier({cfg.ffn_inner, d}, rng, dt, trainable);
    l.ffn_b2 = Tensor::zeros({d}, dt, trainable);
    l.ln2_gain = Tensor::full({d}, 1.0, dt, trainable);
    l.ln2_shift = Tensor::zeros({d}, dt, trainable);
  }
  return tr;
}

Tensor Transformer::embed(Tape& tape, const std::vector<std::size_t>& ids) const {
  if (ids.empty()) throw DimensionError("embed: empty sequence");
  if (ids.size() > cfg_.max_seq) {
    throw DimensionError("embed: sequence length " + std::to_string(ids.size()) +
                         " exceeds max_seq " + std::to_string(cfg_.max_seq));
  }
  for (std::size_t id : ids) {
    if (id >= cfg_.vocab_size) {
      throw IndexError("embed: token id " + std::to_string(id) +
                       " outside vocab of size " +
                       std::to_string(cfg_.vocab_size));
    }
  }
  Tensor tok_rows = tape.gather_rows(tok_, ids);
  Tensor pos_rows = tape.slice_rows(pos_, 0, ids.size());
  return tape.add(tok_rows, pos_rows);
}

EncoderState Transformer::encode_embedded(Tape& tape, Tensor h,
                                          const EncodeOptions& opts) const {
  if (!h.defined() || h.rank() != 2 || h.dim(1) != cfg_.hidden) {
    throw DimensionError("encode: embedded input " +
                         (h.defined() ? shape_str(h.shape()) : "(undefined)") +
                         " does not match hidden " + std::to_string(cfg_.hidden));
  }
  const std::size_t seq = h.dim(0), d = cfg_.hidden;
  if (seq == 0) throw DimensionError("encode: empty sequence");
  if (seq > cfg_.max_seq) {
    throw DimensionError("encode: sequence length " + std::to_string(seq) +
                         " exceeds max_seq " + std::to_string(cfg_.max_seq));
  }
  if (!opts.key_mask.empty() && opts.key_mask.size() != seq) {
    throw DimensionError("encode: key mask size " +
                         std::to_string(opts.key_mask.size()) +
                         " does not match sequence length " +
                         std::to_string(seq));
  }
  const bool drop = opts.train_mode && cfg_.dropout > 0.0;
  if (drop && opts.dropout_rng == nullptr) {
    throw ContractError("encode: dropout requires an rng in train mode");
  }

  Tensor mask_row;
  if (!opts.key_mask.empty()) {
    std::vector<double> mv(seq, 0.0);
    for (std::size_t j = 0; j < seq; ++j)
      if (!opts.key_mask[j]) mv[j] = kMaskPenalty;
    mask_row = tape.constant({seq}, std::move(mv));
  }

  const std::size_t heads = cfg_.heads, dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  EncoderState state;
  state.hidden.reserve(cfg_.num_layers + 1);
  state.hidden.push_back(h);
  if (opts.collect_attention) state.attention.resize(cfg_.num_layers);

  for (std::size_t li = 0; li < cfg_.num_layers; ++li) {
    if (opts.layer_hook) {
      h = opts.layer_hook(tape, h, li);
      if (h.dim(0) != seq || h.dim(1) != d) {
        throw DimensionError("encode: layer hook changed shape to " +
                             shape_str(h.shape()));
      }
    }
    const EncoderLayerParams& l = layers_[li];
    Tensor q = tape.add_row(tape.matmul(h, l.wq), l.bq);
    Tensor k = tape.add_row(tape.matmul(h, l.wk), l.bk);
    Tensor v = tape.add_row(tape.matmul(h, l.wv), l.bv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t hi = 0; hi < heads; ++hi) {
      Tensor qh = tape.slice_cols(q, hi * dk, dk);
      Tensor kh = tape.slice_cols(k, hi * dk, dk);
      Tensor vh = tape.slice_cols(v, hi * dk, dk);
      Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dk);
      if (mask_row.defined()) scores = tape.add_row(scores, mask_row);
      Tensor probs = tape.softmax(scores, 1);
      if (opts.collect_attention) state.attention[li].push_back(probs);
      if (drop) probs = dropout(tape, probs, cfg_.dropout, *opts.dropout_rng);
      head_outs.push_back(tape.matmul(probs, vh));
    }
    Tensor attn = tape.add_row(tape.matmul(tape.concat_cols(head_outs), l.wo), l.bo);
    if (drop) attn = dropout(tape, attn, cfg_.dropout, *opts.dropout_rng);
    h = tape.layer_norm(tape.add(h, attn), l.ln1_gain, l.ln1_shift);

    Tensor f = tape.gelu(tape.add_row(tape.matmul(h, l.ffn_w1), l.ffn_b1));
    f = tape.add_row(tape.matmul(f, l.ffn_w2), l.ffn_b2);
    if (drop) f = dropout(tape, f, cfg_.dropout, *opts.dropout_rng);
    h = tape.layer_norm(tape.add(h, f), l.ln2_gain, l.ln2_shift);
    state.hidden.push_back(h);
  }
  state.h_cls = tape.row(state.hidden.back(), 0);
  return state;
}

EncoderState Transformer::encode(Tape& tape, const std::vector<std::size_t>& ids,
                                 const EncodeOptions& opts) const {
  return encode_embedded(tape, embed(tape, ids), opts);
}

void Transformer::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("backbone/tok_embed", tok_);
  fn("backbone/pos_embed", pos_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "backbone/layer." + std::to_string(i) + "/";
    EncoderLayerParams& l = layers_[i];
    fn(p + "attn.wq", l.wq);
    fn(p + "attn.bq", l.bq);
    fn(p + "attn.wk", l.wk);
    fn(p + "attn.bk", l.bk);
    fn(p + "attn.wv", l.wv);
    fn(p + "attn.bv", l.bv);
    fn(p + "attn.wo", l.wo);
    fn(p + "attn.bo", l.bo);
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.shift", l.ln1_shift);
    fn(p + "ffn.w1", l.ffn_w1);
    fn(p + "ffn.b1", l.ffn_b1);
    fn(p + "ffn.w2", l.ffn_w2);
    fn(p + "ffn.b2", l.ffn_b2);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.shift", l.ln2_shift);
  }
}

std::int64_t Transformer::param_count() const {
  std::int64_t total = 0;
  auto add = [&total](const Tensor& t) { total += t.size(); };
  add(tok_);
  add(pos_);
  for (const EncoderLayerParams& l : layers_) {
    for (const Tensor* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                            &l.bo, &l.ln1_gain, &l.ln1_shift, &l.ffn_w1,
                            &l.ffn_b1, &l.ffn_w2, &l.ffn_b2, &l.ln2_gain,
                            &l.ln2_shift}) {
      add(*t);
    }
  }
  return total;
}

ClassifierHead ClassifierHead::init(HeadMode mode, std::size_t num_labels,
                                    std::size_t hidden, Rng& rng, DType dt) {
  if (mode == HeadMode::regression) {
    num_labels = 1;
  } else if (num_labels < 2) {
    throw ConfigError("head: classification needs at least 2 labels");
  }
  ClassifierHead head;
  head.mode = mode;
  head.w = xavier({num_labels, hidden}, rng, dt, true);
  head.b = Tensor::zeros({num_labels}, dt, true);
  return head;
}

Tensor ClassifierHead::forward(Tape& tape, const Tensor& h_cls) const {
  Tensor logits = tape.add(tape.matmul(w, h_cls), b);
  if (mode == HeadMode::regression) return logits;
  return tape.log_softmax(logits, 0);
}

void ClassifierHead::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("head/w", w);
  fn("head/b", b);
}

Tensor nll_loss(Tape& tape, const Tensor& log_probs, std::size_t label) {
  if (label >= log_probs.size()) {
    throw IndexError("nll_loss: label " + std::to_string(label) +
                     " out of range for " + std::to_string(log_probs.size()) +
                     " classes");
  }
  return tape.scale(tape.pick(log_probs, label), -1.0);
}

Tensor mse_loss(Tape& tape, const Tensor& pred, double target) {
  if (pred.size() != 1) {
    throw DimensionError("mse_loss: prediction must be scalar, got " +
                         shape_str(pred.shape()));
  }
  Tensor diff = tape.sub(pred, tape.constant({1}, {target}));
  return tape.mul(diff, diff);
}

}  // namespace idpg
