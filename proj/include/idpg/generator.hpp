#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "idpg/nn.hpp"
#include "idpg/phm.hpp"
#include "idpg/tensor.hpp"

namespace idpg {

enum class GenFlavor { dnn, phm };
enum class DepthMode { single, multi };
// What the multi-depth generators share across backbone layers: everything
// (S), projection weights only with per-layer up biases (M), nothing (L).
enum class Sharing { S, M, L };
enum class InputSource { layer0, previous_layer };
enum class RepEncoder { backbone_cls, bag_of_vectors };
enum class ArchVariant { plain, residual, layernorm, residual_layernorm };
enum class Nonlinearity { tanh, relu, gelu };

const char* to_string(GenFlavor v);
const char* to_string(DepthMode v);
const char* to_string(Sharing v);
const char* to_string(InputSource v);
const char* to_string(RepEncoder v);
const char* to_string(ArchVariant v);
const char* to_string(Nonlinearity v);

GenFlavor parse_gen_flavor(const std::string& s);
DepthMode parse_depth_mode(const std::string& s);
Sharing parse_sharing(const std::string& s);
InputSource parse_input_source(const std::string& s);
RepEncoder parse_rep_encoder(const std::string& s);
ArchVariant parse_arch_variant(const std::string& s);
Nonlinearity parse_nonlinearity(const std::string& s);

struct GeneratorConfig {
  GenFlavor flavor = GenFlavor::phm;
  std::size_t t = 5;        // prompt rows
  std::size_t m = 16;       // bottleneck width
  std::size_t d = 32;       // backbone hidden size
  std::size_t enc_dim = 32; // sentence-rep size; == d for backbone_cls
  std::size_t n = 4;        // PHM factor count
  DepthMode depth_mode = DepthMode::multi;
  Sharing sharing = Sharing::M;                        // multi only
  InputSource input_source = InputSource::previous_layer; // multi only
  RepEncoder encoder = RepEncoder::backbone_cls;
  ArchVariant arch_variant = ArchVariant::plain;
  Nonlinearity nonlinearity = Nonlinearity::tanh;
  std::size_t num_layers = 2; // backbone depth, used by multi mode

  void validate() const;
};

// Dense affine with a bias bank, mirroring PhmLinear's interface so the
// two generator flavors are drop-in substitutes.
struct DenseLinear {
  std::string name;
  Tensor w; // [out, in]
  std::vector<Tensor> biases;

  static DenseLinear init(std::string name, std::size_t in_dim,
                          std::size_t out_dim, std::size_t num_biases,
                          Rng& rng, DType dt, bool trainable);
  Tensor forward(Tape& tape, const Tensor& x, std::size_t bias_index) const;
  std::int64_t param_count() const;
};

struct SentenceRep {
  Tensor vector; // [enc_dim] leaf, detached from any tape
  RepEncoder source = RepEncoder::backbone_cls;
};

// Word-vector table in the common text layout: one line per token,
// "token v1 v2 ... v_dim", dimension fixed by the first line, duplicate
// tokens resolved last-wins.
class EmbeddingTable {
 public:
  static EmbeddingTable load(const std::string& path);
  static EmbeddingTable parse(std::istream& is, const std::string& origin);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vecs_.size(); }
  const std::vector<double>* find(const std::string& token) const;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> vecs_;
};

// Two-layer bottleneck prompt generator: down-project the sentence rep to
// m, apply the nonlinearity, up-project to t*d, reshape to [t, d] prompt
// rows, then apply the arch variant (residual rep add and/or row-wise
// layer norm).
class PromptGenerator {
 public:
  PromptGenerator() = default;
  static PromptGenerator init(const GeneratorConfig& cfg, Rng& rng, DType dt,
                              bool trainable = true);

  Tensor generate(Tape& tape, const Tensor& rep, std::size_t layer_index) const;

  const GeneratorConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  // Unique scalars across all owned tensors; shared pools counted once.
  std::int64_t param_count() const;

  const std::shared_ptr<SharedA>& pool_down() const { return pool_down_; }
  const std::shared_ptr<SharedA>& pool_up() const { return pool_up_; }
  std::vector<PhmLinear>& phm_down() { return phm_down_; }
  std::vector<PhmLinear>& phm_up() { return phm_up_; }
  std::vector<DenseLinear>& dnn_down() { return dnn_down_; }
  std::vector<DenseLinear>& dnn_up() { return dnn_up_; }

 private:
  GeneratorConfig cfg_;
  DType dtype_ = DType::f64;
  std::shared_ptr<SharedA> pool_down_, pool_up_; // same object in single depth
  std::vector<PhmLinear> phm_down_, phm_up_;     // one entry, or N under L
  std::vector<DenseLinear> dnn_down_, dnn_up_;
  Tensor res_map_; // [d, enc_dim] when a residual variant must change dims
  Tensor ln_tok_gain_, ln_tok_shift_;
  Tensor ln_rep_gain_, ln_rep_shift_;
  Tensor ln_out_gain_, ln_out_shift_;
};

// Closed-form budget of the dense generator:
//   S (and single depth): m(d_enc+1) + t*d*(m+1)
//   M: m(d_enc+1) + t*d*m + t*d*N
//   L: N copies of the S count
std::int64_t dnn_generator_param_count(std::size_t m, std::size_t d_enc,
                                       std::size_t t, std::size_t d,
                                       Sharing sharing, std::size_t N);
// PHM counterpart: B factors shrink by n, plus one factor pool in single
// depth and one per projection in multi depth.
std::int64_t phm_generator_param_count(std::size_t n, std::size_t m,
                                       std::size_t d_enc, std::size_t t,
                                       std::size_t d, DepthMode depth,
                                       Sharing sharing, std::size_t N);

// --- sentence encoders -----------------------------------------------------

// Final-layer position-0 hidden state of a bare (prompt-free) pass.
SentenceRep encode_backbone_cls(const Transformer& bk,
                                const std::vector<std::size_t>& ids);
// Mean of the embedded rows of a bare pass; the depth-0 source for
// multi-depth generation (the position-0 embedding alone would be the
// same for every input).
SentenceRep embedding_level_rep(const Transformer& bk,
                                const std::vector<std::size_t>& ids);
// Mean of per-token table vectors; tokens missing from the table
// contribute zero vectors but still count toward the denominator.
SentenceRep encode_bag_of_vectors(const std::vector<std::string>& tokens,
                                  const EmbeddingTable& table, DType dt);

// Rep selection for a config: external bag vector, final CLS (single
// depth), or embedding-level rep (multi depth).
SentenceRep make_instance_rep(const GeneratorConfig& cfg, const Transformer& bk,
                              const std::vector<std::size_t>& ids,
                              const std::vector<std::string>& words,
                              const EmbeddingTable* table);

struct RepKey {
  std::uint64_t dataset_id = 0;
  std::uint64_t example_id = 0;
  bool operator<(const RepKey& o) const {
    return dataset_id != o.dataset_id ? dataset_id < o.dataset_id
                                      : example_id < o.example_id;
  }
};

// Reps are pure functions of frozen weights and the input, so they are
// computed once per example and reused across epochs and tapes.
class RepCache {
 public:
  const SentenceRep* find(const RepKey& key) const;
  const SentenceRep& put(const RepKey& key, SentenceRep rep);
  std::size_t size() const { return map_.size(); }

 private:
  std::map<RepKey, SentenceRep> map_;
};

// --- input assembly and forward passes --------------------------------------

enum class PromptPosition { pos0, pos1, pos2, pos3, pos4 };

const char* to_string(PromptPosition v);
PromptPosition parse_prompt_position(const std::string& s);

// [CLS] s1 [EOS] or [CLS] s1 [SEP] s2 [EOS], optionally followed by
// [PAD] rows that batched inference masks out of attention.
struct TemplateTokens {
  std::vector<std::size_t> ids;
  std::size_t len1 = 0, len2 = 0;
  std::size_t pad = 0; // trailing [PAD] count included in ids
  bool is_pair = false;

  static TemplateTokens single(const std::vector<std::size_t>& s1);
  static TemplateTokens pair(const std::vector<std::size_t>& s1,
                             const std::vector<std::size_t>& s2);
  // Copy with [PAD] ids appended until ids.size() == total.
  TemplateTokens padded_to(std::size_t total) const;
};

// Row at which prompt rows are spliced in:
//   pos0 after [CLS]; pos1 after s1; pos2 after [SEP]; pos3 after s2;
//   pos4 after [EOS]. Single-sentence inputs admit {pos0, pos1, pos4}.
std::size_t splice_index(const TemplateTokens& tmpl, PromptPosition pos);

// Embeds the real tokens with their pre-splice positional rows and inserts
// the prompt rows (which get no positional component). Null prompt gives
// the plain embedded sequence.
Tensor assemble_input(Tape& tape, const Transformer& bk,
                      const TemplateTokens& tmpl, const Tensor* prompt,
                      PromptPosition pos);

struct ForwardResult {
  Tensor output; // head output: log-probabilities, or [1] regression value
  Tensor h_cls;
  std::size_t prompt_start = 0;
};

// Prompt-free baseline pass.
ForwardResult forward_plain(Tape& tape, const Transformer& bk,
                            const ClassifierHead& head,
                            const TemplateTokens& tmpl);

// Instance-dependent pass. Single depth splices one generated prompt at
// the embedding layer; multi depth overwrites the prompt rows entering
// every layer with that layer's generated prompt. rep must match the
// config's encoder/input_source choice (see make_instance_rep).
ForwardResult forward_idpg(Tape& tape, const Transformer& bk,
                           const ClassifierHead& head, const PromptGenerator& g,
                           const TemplateTokens& tmpl, PromptPosition pos,
                           const SentenceRep& rep);

// Constant learned prompt spliced at the embedding layer.
ForwardResult forward_prompt_bank(Tape& tape, const Transformer& bk,
                                  const ClassifierHead& head,
                                  const Tensor& prompt,
                                  const TemplateTokens& tmpl,
                                  PromptPosition pos);

// Per-layer constant prompts: bank[l] overwrites the prompt rows entering
// layer l, exactly like the multi-depth instance-dependent path.
ForwardResult forward_deep_prompt_bank(Tape& tape, const Transformer& bk,
                                       const ClassifierHead& head,
                                       const std::vector<Tensor>& bank,
                                       const TemplateTokens& tmpl,
                                       PromptPosition pos);

}  // namespace idpg
