#include "idpg/generator.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace idpg {

namespace {

template <typename T>
T parse_enum(const std::string& s, const char* what,
             std::initializer_list<T> values) {
  for (T v : values) {
    if (s == to_string(v)) return v;
  }
  std::string options;
  for (T v : values) {
    if (!options.empty()) options += ", ";
    options += to_string(v);
  }
  throw ParseError(std::string(what) + ": unknown value '" + s +
                   "' (expected one of " + options + ")");
}

Tensor xavier(Shape shape, Rng& rng, DType dt, bool trainable) {
  std::size_t fan = 0;
  for (std::size_t s : shape) fan += s;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan));
  std::vector<double> v(shape[0] * shape[1]);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), dt, trainable);
}

Tensor detach_values(const Tensor& t, DType dt) {
  return Tensor::from({t.size()}, t.values(), dt);
}

}  // namespace

const char* to_string(GenFlavor v) {
  return v == GenFlavor::dnn ? "dnn" : "phm";
}
const char* to_string(DepthMode v) {
  return v == DepthMode::single ? "single" : "multi";
}
const char* to_string(Sharing v) {
  switch (v) {
    case Sharing::S: return "S";
    case Sharing::M: return "M";
    case Sharing::L: return "L";
  }
  return "?";
}
const char* to_string(InputSource v) {
  return v == InputSource::layer0 ? "layer0" : "previous_layer";
}
const char* to_string(RepEncoder v) {
  return v == RepEncoder::backbone_cls ? "backbone_cls" : "bag_of_vectors";
}
const char* to_string(ArchVariant v) {
  switch (v) {
    case ArchVariant::plain: return "plain";
    case ArchVariant::residual: return "residual";
    case ArchVariant::layernorm: return "layernorm";
    case ArchVariant::residual_layernorm: return "residual_layernorm";
  }
  return "?";
}
const char* to_string(Nonlinearity v) {
  switch (v) {
    case Nonlinearity::tanh: return "tanh";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::gelu: return "gelu";
  }
  return "?";
}
const char* to_string(PromptPosition v) {
  switch (v) {
    case PromptPosition::pos0: return "pos0";
    case PromptPosition::pos1: return "pos1";
    case PromptPosition::pos2: return "pos2";
    case PromptPosition::pos3: return "pos3";
    case PromptPosition::pos4: return "pos4";
  }
  return "?";
}

GenFlavor parse_gen_flavor(const std::string& s) {
  return parse_enum(s, "flavor", {GenFlavor::dnn, GenFlavor::phm});
}
DepthMode parse_depth_mode(const std::string& s) {
  return parse_enum(s, "depth_mode", {DepthMode::single, DepthMode::multi});
}
Sharing parse_sharing(const std::string& s) {
  return parse_enum(s, "sharing", {Sharing::S, Sharing::M, Sharing::L});
}
InputSource parse_input_source(const std::string& s) {
  return parse_enum(s, "input_source",
                    {InputSource::layer0, InputSource::previous_layer});
}
RepEncoder parse_rep_encoder(const std::string& s) {
  return parse_enum(s, "encoder",
                    {RepEncoder::backbone_cls, RepEncoder::bag_of_vectors});
}
ArchVariant parse_arch_variant(const std::string& s) {
  return parse_enum(s, "arch_variant",
                    {ArchVariant::plain, ArchVariant::residual,
                     ArchVariant::layernorm, ArchVariant::residual_layernorm});
}
Nonlinearity parse_nonlinearity(const std::string& s) {
  return parse_enum(
      s, "nonlinearity",
      {Nonlinearity::tanh, Nonlinearity::relu, Nonlinearity::gelu});
}
PromptPosition parse_prompt_position(const std::string& s) {
  return parse_enum(s, "position",
                    {PromptPosition::pos0, PromptPosition::pos1,
                     PromptPosition::pos2, PromptPosition::pos3,
                     PromptPosition::pos4});
}

void GeneratorConfig::validate() const {
  if (t == 0) throw ConfigError("generator: prompt length t must be >= 1");
  if (m == 0 || d == 0 || enc_dim == 0) {
    throw ConfigError("generator: m, d and enc_dim must be positive");
  }
  if (flavor == GenFlavor::phm) {
    if (n == 0) throw ConfigError("generator: PHM factor n must be positive");
    if (m % n != 0 || d % n != 0 || enc_dim % n != 0) {
      throw ConfigError("generator: n=" + std::to_string(n) +
                        " must divide m=" + std::to_string(m) + ", d=" +
                        std::to_string(d) + " and enc_dim=" +
                        std::to_string(enc_dim));
    }
  }
  if (encoder == RepEncoder::backbone_cls && enc_dim != d) {
    throw ConfigError("generator: backbone_cls rep has enc_dim == d, got " +
                      std::to_string(enc_dim) + " vs " + std::to_string(d));
  }
  if (depth_mode == DepthMode::multi) {
    if (num_layers == 0) {
      throw ConfigError("generator: multi depth needs num_layers >= 1");
    }
    if (encoder == RepEncoder::bag_of_vectors &&
        input_source == InputSource::previous_layer) {
      throw ConfigError(
          "generator: an external bag_of_vectors rep is fixed across depths; "
          "previous_layer input is only available with backbone_cls");
    }
  }
}

DenseLinear DenseLinear::init(std::string name, std::size_t in_dim,
                              std::size_t out_dim, std::size_t num_biases,
                              Rng& rng, DType dt, bool trainable) {
  if (in_dim == 0 || out_dim == 0) {
    throw ConfigError("dense: zero-sized layer (in=" + std::to_string(in_dim) +
                      ", out=" + std::to_string(out_dim) + ")");
  }
  if (num_biases == 0) throw ConfigError("dense: at least one bias vector");
  DenseLinear layer;
  layer.name = std::move(name);
  layer.w = xavier({out_dim, in_dim}, rng, dt, trainable);
  layer.biases.reserve(num_biases);
  for (std::size_t i = 0; i < num_biases; ++i) {
    layer.biases.push_back(Tensor::zeros({out_dim}, dt, trainable));
  }
  return layer;
}

Tensor DenseLinear::forward(Tape& tape, const Tensor& x,
                            std::size_t bias_index) const {
  if (bias_index >= biases.size()) {
    throw IndexError("dense " + name + ": bias index " +
                     std::to_string(bias_index) + " out of " +
                     std::to_string(biases.size()));
  }
  return tape.add(tape.matmul(w, x), biases[bias_index]);
}

std::int64_t DenseLinear::param_count() const {
  std::int64_t total = static_cast<std::int64_t>(w.size());
  for (const Tensor& b : biases) total += static_cast<std::int64_t>(b.size());
  return total;
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("vectors: cannot open '" + path + "'");
  return parse(is, path);
}

EmbeddingTable EmbeddingTable::parse(std::istream& is,
                                     const std::string& origin) {
  EmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<double> values;
    double v = 0.0;
    while (ls >> v) values.push_back(v);
    if (!ls.eof()) {
      throw ParseError("vectors " + origin + " line " +
                       std::to_string(line_no) + ": non-numeric value");
    }
    if (values.empty()) {
      throw ParseError("vectors " + origin + " line " +
                       std::to_string(line_no) + ": token without values");
    }
    if (table.dim_ == 0) {
      table.dim_ = values.size();
    } else if (values.size() != table.dim_) {
      throw ParseError("vectors " + origin + " line " +
                       std::to_string(line_no) + ": expected " +
                       std::to_string(table.dim_) + " values, got " +
                       std::to_string(values.size()));
    }
    table.vecs_[token] = std::move(values); // duplicates: last wins
  }
  if (table.vecs_.empty()) {
    throw ParseError("vectors " + origin + ": empty table");
  }
  return table;
}

const std::vector<double>* EmbeddingTable::find(const std::string& token) const {
  auto it = vecs_.find(token);
  return it == vecs_.end() ? nullptr : &it->second;
}

PromptGenerator PromptGenerator::init(const GeneratorConfig& cfg, Rng& rng,
                                      DType dt, bool trainable) {
  cfg.validate();
  PromptGenerator g;
  g.cfg_ = cfg;
  g.dtype_ = dt;
  const bool multi = cfg.depth_mode == DepthMode::multi;
  const std::size_t layer_copies =
      multi && cfg.sharing == Sharing::L ? cfg.num_layers : 1;
  const std::size_t up_biases =
      multi && cfg.sharing == Sharing::M ? cfg.num_layers : 1;
  const std::size_t out = cfg.t * cfg.d;

  if (cfg.flavor == GenFlavor::phm) {
    if (multi) {
      g.pool_down_ = SharedA::init("gen.pool_down", cfg.n, rng, dt, trainable);
      g.pool_up_ = SharedA::init("gen.pool_up", cfg.n, rng, dt, trainable);
    } else {
      g.pool_down_ = SharedA::init("gen.pool", cfg.n, rng, dt, trainable);
      g.pool_up_ = g.pool_down_;
    }
    for (std::size_t l = 0; l < layer_copies; ++l) {
      const std::string tag =
          layer_copies > 1 ? "." + std::to_string(l) : std::string();
      g.phm_down_.push_back(PhmLinear::init("gen.down" + tag, cfg.enc_dim,
                                            cfg.m, g.pool_down_, 1, rng, dt,
                                            trainable));
    }
    for (std::size_t l = 0; l < layer_copies; ++l) {
      const std::string tag =
          layer_copies > 1 ? "." + std::to_string(l) : std::string();
      g.phm_up_.push_back(PhmLinear::init("gen.up" + tag, cfg.m, out,
                                          g.pool_up_, up_biases, rng, dt,
                                          trainable));
    }
  } else {
    for (std::size_t l = 0; l < layer_copies; ++l) {
      const std::string tag =
          layer_copies > 1 ? "." + std::to_string(l) : std::string();
      g.dnn_down_.push_back(DenseLinear::init("gen.down" + tag, cfg.enc_dim,
                                              cfg.m, 1, rng, dt, trainable));
    }
    for (std::size_t l = 0; l < layer_copies; ++l) {
      const std::string tag =
          layer_copies > 1 ? "." + std::to_string(l) : std::string();
      g.dnn_up_.push_back(DenseLinear::init("gen.up" + tag, cfg.m, out,
                                            up_biases, rng, dt, trainable));
    }
  }

  const bool residual = cfg.arch_variant == ArchVariant::residual ||
                        cfg.arch_variant == ArchVariant::residual_layernorm;
  if (residual && cfg.enc_dim != cfg.d) {
    g.res_map_ = xavier({cfg.d, cfg.enc_dim}, rng, dt, trainable);
  }
  if (cfg.arch_variant == ArchVariant::layernorm ||
      cfg.arch_variant == ArchVariant::residual_layernorm) {
    g.ln_out_gain_ = Tensor::full({cfg.d}, 1.0, dt, trainable);
    g.ln_out_shift_ = Tensor::zeros({cfg.d}, dt, trainable);
  }
  if (cfg.arch_variant == ArchVariant::residual_layernorm) {
    g.ln_tok_gain_ = Tensor::full({cfg.d}, 1.0, dt, trainable);
    g.ln_tok_shift_ = Tensor::zeros({cfg.d}, dt, trainable);
    g.ln_rep_gain_ = Tensor::full({cfg.d}, 1.0, dt, trainable);
    g.ln_rep_shift_ = Tensor::zeros({cfg.d}, dt, trainable);
  }
  return g;
}

Tensor PromptGenerator::generate(Tape& tape, const Tensor& rep,
                                 std::size_t layer_index) const {
  const bool multi = cfg_.depth_mode == DepthMode::multi;
  const std::size_t depths = multi ? cfg_.num_layers : 1;
  if (layer_index >= depths) {
    throw IndexError("generator: layer index " + std::to_string(layer_index) +
                     " out of " + std::to_string(depths));
  }
  if (rep.shape().size() != 1 || rep.shape()[0] != cfg_.enc_dim) {
    throw DimensionError("generator: rep must be [" +
                         std::to_string(cfg_.enc_dim) + "]");
  }
  const std::size_t copy =
      multi && cfg_.sharing == Sharing::L ? layer_index : 0;
  const std::size_t up_bias =
      multi && cfg_.sharing == Sharing::M ? layer_index : 0;

  Tensor h = cfg_.flavor == GenFlavor::phm
                 ? phm_down_[copy].forward(tape, rep, 0)
                 : dnn_down_[copy].forward(tape, rep, 0);
  switch (cfg_.nonlinearity) {
    case Nonlinearity::tanh: h = tape.tanh(h); break;
    case Nonlinearity::relu: h = tape.relu(h); break;
    case Nonlinearity::gelu: h = tape.gelu(h); break;
  }
  Tensor raw = cfg_.flavor == GenFlavor::phm
                   ? phm_up_[copy].forward(tape, h, up_bias)
                   : dnn_up_[copy].forward(tape, h, up_bias);
  Tensor prompt = tape.reshape(raw, {cfg_.t, cfg_.d});

  if (cfg_.arch_variant == ArchVariant::plain) return prompt;
  if (cfg_.arch_variant == ArchVariant::layernorm) {
    return tape.layer_norm(prompt, ln_out_gain_, ln_out_shift_);
  }
  Tensor rep_d = cfg_.enc_dim == cfg_.d ? rep : tape.matmul(res_map_, rep);
  if (cfg_.arch_variant == ArchVariant::residual) {
    return tape.add_row(prompt, rep_d);
  }
  // residual_layernorm: normalize both sides, add, normalize again
  Tensor tok = tape.layer_norm(prompt, ln_tok_gain_, ln_tok_shift_);
  Tensor rep_row = tape.layer_norm(tape.reshape(rep_d, {1, cfg_.d}),
                                   ln_rep_gain_, ln_rep_shift_);
  Tensor summed = tape.add_row(tok, tape.reshape(rep_row, {cfg_.d}));
  return tape.layer_norm(summed, ln_out_gain_, ln_out_shift_);
}

void PromptGenerator::visit_params(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  if (cfg_.flavor == GenFlavor::phm) {
    if (pool_down_ == pool_up_) {
      for (std::size_t i = 0; i < pool_down_->mats.size(); ++i) {
        fn("gen/pool/a." + std::to_string(i), pool_down_->mats[i]);
      }
    } else {
      for (std::size_t i = 0; i < pool_down_->mats.size(); ++i) {
        fn("gen/pool_down/a." + std::to_string(i), pool_down_->mats[i]);
      }
      for (std::size_t i = 0; i < pool_up_->mats.size(); ++i) {
        fn("gen/pool_up/a." + std::to_string(i), pool_up_->mats[i]);
      }
    }
    auto visit_phm = [&fn](const char* which, std::size_t idx, bool tagged,
                           PhmLinear& layer) {
      const std::string base = std::string("gen/") + which +
                               (tagged ? "." + std::to_string(idx) : "");
      for (std::size_t i = 0; i < layer.b_factors().size(); ++i) {
        fn(base + "/b." + std::to_string(i), layer.b_factors()[i]);
      }
      for (std::size_t i = 0; i < layer.biases().size(); ++i) {
        fn(base + "/bias." + std::to_string(i), layer.biases()[i]);
      }
    };
    for (std::size_t l = 0; l < phm_down_.size(); ++l) {
      visit_phm("down", l, phm_down_.size() > 1, phm_down_[l]);
    }
    for (std::size_t l = 0; l < phm_up_.size(); ++l) {
      visit_phm("up", l, phm_up_.size() > 1, phm_up_[l]);
    }
  } else {
    auto visit_dnn = [&fn](const char* which, std::size_t idx, bool tagged,
                           DenseLinear& layer) {
      const std::string base = std::string("gen/") + which +
                               (tagged ? "." + std::to_string(idx) : "");
      fn(base + "/w", layer.w);
      for (std::size_t i = 0; i < layer.biases.size(); ++i) {
        fn(base + "/bias." + std::to_string(i), layer.biases[i]);
      }
    };
    for (std::size_t l = 0; l < dnn_down_.size(); ++l) {
      visit_dnn("down", l, dnn_down_.size() > 1, dnn_down_[l]);
    }
    for (std::size_t l = 0; l < dnn_up_.size(); ++l) {
      visit_dnn("up", l, dnn_up_.size() > 1, dnn_up_[l]);
    }
  }
  const bool residual = cfg_.arch_variant == ArchVariant::residual ||
                        cfg_.arch_variant == ArchVariant::residual_layernorm;
  if (residual && cfg_.enc_dim != cfg_.d) fn("gen/res_map", res_map_);
  if (cfg_.arch_variant == ArchVariant::layernorm ||
      cfg_.arch_variant == ArchVariant::residual_layernorm) {
    fn("gen/ln_out.gain", ln_out_gain_);
    fn("gen/ln_out.shift", ln_out_shift_);
  }
  if (cfg_.arch_variant == ArchVariant::residual_layernorm) {
    fn("gen/ln_tok.gain", ln_tok_gain_);
    fn("gen/ln_tok.shift", ln_tok_shift_);
    fn("gen/ln_rep.gain", ln_rep_gain_);
    fn("gen/ln_rep.shift", ln_rep_shift_);
  }
}

std::int64_t PromptGenerator::param_count() const {
  std::set<const void*> seen;
  std::int64_t total = 0;
  auto& self = const_cast<PromptGenerator&>(*this);
  self.visit_params([&seen, &total](const std::string&, Tensor& t) {
    if (seen.insert(t.id()).second) total += static_cast<std::int64_t>(t.size());
  });
  return total;
}

std::int64_t dnn_generator_param_count(std::size_t m, std::size_t d_enc,
                                       std::size_t t, std::size_t d,
                                       Sharing sharing, std::size_t N) {
  if (m == 0 || d_enc == 0 || t == 0 || d == 0 || N == 0) {
    throw ConfigError("generator count: dimensions must be positive");
  }
  const std::int64_t im = m, ienc = d_enc, itd = static_cast<std::int64_t>(t) * d,
                     in = N;
  const std::int64_t single = im * (ienc + 1) + itd * (im + 1);
  switch (sharing) {
    case Sharing::S: return single;
    case Sharing::M: return im * (ienc + 1) + itd * im + itd * in;
    case Sharing::L: return in * single;
  }
  throw ConfigError("generator count: bad sharing variant");
}

std::int64_t phm_generator_param_count(std::size_t n, std::size_t m,
                                       std::size_t d_enc, std::size_t t,
                                       std::size_t d, DepthMode depth,
                                       Sharing sharing, std::size_t N) {
  if (m == 0 || d_enc == 0 || t == 0 || d == 0 || N == 0) {
    throw ConfigError("generator count: dimensions must be positive");
  }
  if (n == 0 || m % n != 0 || d % n != 0 || d_enc % n != 0) {
    throw ConfigError("generator count: n=" + std::to_string(n) +
                      " must divide m, d and enc_dim");
  }
  const std::int64_t in3 = static_cast<std::int64_t>(n) * n * n;
  const std::int64_t pools = depth == DepthMode::single ? in3 : 2 * in3;
  const std::int64_t im = m, itd = static_cast<std::int64_t>(t) * d, iN = N;
  const std::int64_t down = im * static_cast<std::int64_t>(d_enc) / n + im;
  const std::int64_t up_w = itd * im / n;
  if (depth == DepthMode::single) return pools + down + up_w + itd;
  switch (sharing) {
    case Sharing::S: return pools + down + up_w + itd;
    case Sharing::M: return pools + down + up_w + itd * iN;
    case Sharing::L: return pools + iN * (down + up_w + itd);
  }
  throw ConfigError("generator count: bad sharing variant");
}

SentenceRep encode_backbone_cls(const Transformer& bk,
                                const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw DimensionError("encode: empty input");
  Tape tape(bk.dtype());
  EncoderState st = bk.encode(tape, ids);
  return {detach_values(st.h_cls, bk.dtype()), RepEncoder::backbone_cls};
}

SentenceRep embedding_level_rep(const Transformer& bk,
                                const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw DimensionError("encode: empty input");
  Tape tape(bk.dtype());
  Tensor mean = tape.mean_rows(bk.embed(tape, ids));
  return {detach_values(mean, bk.dtype()), RepEncoder::backbone_cls};
}

SentenceRep encode_bag_of_vectors(const std::vector<std::string>& tokens,
                                  const EmbeddingTable& table, DType dt) {
  if (tokens.empty()) throw DimensionError("encode: empty input");
  std::vector<double> sum(table.dim(), 0.0);
  for (const std::string& token : tokens) {
    if (const std::vector<double>* v = table.find(token)) {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*v)[i];
    }
  }
  const double k = static_cast<double>(tokens.size());
  for (double& x : sum) x /= k;
  return {Tensor::from({table.dim()}, std::move(sum), dt),
          RepEncoder::bag_of_vectors};
}

SentenceRep make_instance_rep(const GeneratorConfig& cfg, const Transformer& bk,
                              const std::vector<std::size_t>& ids,
                              const std::vector<std::string>& words,
                              const EmbeddingTable* table) {
  if (cfg.encoder == RepEncoder::bag_of_vectors) {
    if (table == nullptr) {
      throw ConfigError("generator: bag_of_vectors needs an embedding table");
    }
    if (table->dim() != cfg.enc_dim) {
      throw ConfigError("generator: enc_dim " + std::to_string(cfg.enc_dim) +
                        " != table dimension " + std::to_string(table->dim()));
    }
    return encode_bag_of_vectors(words, *table, bk.dtype());
  }
  return cfg.depth_mode == DepthMode::single ? encode_backbone_cls(bk, ids)
                                             : embedding_level_rep(bk, ids);
}

const SentenceRep* RepCache::find(const RepKey& key) const {
  auto it = map_.find(key);
  return it == map_.end() ? nullptr : &it->second;
}

const SentenceRep& RepCache::put(const RepKey& key, SentenceRep rep) {
  return map_[key] = std::move(rep);
}

TemplateTokens TemplateTokens::single(const std::vector<std::size_t>& s1) {
  TemplateTokens t;
  t.ids.push_back(kClsId);
  t.ids.insert(t.ids.end(), s1.begin(), s1.end());
  t.ids.push_back(kEosId);
  t.len1 = s1.size();
  return t;
}

TemplateTokens TemplateTokens::pair(const std::vector<std::size_t>& s1,
                                    const std::vector<std::size_t>& s2) {
  TemplateTokens t;
  t.ids.push_back(kClsId);
  t.ids.insert(t.ids.end(), s1.begin(), s1.end());
  t.ids.push_back(kSepId);
  t.ids.insert(t.ids.end(), s2.begin(), s2.end());
  t.ids.push_back(kEosId);
  t.len1 = s1.size();
  t.len2 = s2.size();
  t.is_pair = true;
  return t;
}

TemplateTokens TemplateTokens::padded_to(std::size_t total) const {
  if (total < ids.size()) {
    throw ContractError("pad: target length " + std::to_string(total) +
                        " below template length " + std::to_string(ids.size()));
  }
  TemplateTokens out = *this;
  out.pad += total - ids.size();
  out.ids.resize(total, kPadId);
  return out;
}

std::size_t splice_index(const TemplateTokens& tmpl, PromptPosition pos) {
  if (!tmpl.is_pair &&
      (pos == PromptPosition::pos2 || pos == PromptPosition::pos3)) {
    throw ConfigError(std::string("position ") + to_string(pos) +
                      " requires a sentence pair");
  }
  switch (pos) {
    case PromptPosition::pos0: return 1;
    case PromptPosition::pos1: return 1 + tmpl.len1;
    case PromptPosition::pos2: return 2 + tmpl.len1;
    case PromptPosition::pos3: return 2 + tmpl.len1 + tmpl.len2;
    case PromptPosition::pos4: return tmpl.ids.size() - tmpl.pad;
  }
  throw ConfigError("position: bad value");
}

Tensor assemble_input(Tape& tape, const Transformer& bk,
                      const TemplateTokens& tmpl, const Tensor* prompt,
                      PromptPosition pos) {
  Tensor real = bk.embed(tape, tmpl.ids);
  if (prompt == nullptr) return real;
  if (prompt->shape().size() != 2 ||
      prompt->shape()[1] != bk.config().hidden) {
    throw DimensionError("assemble: prompt must be [t, " +
                         std::to_string(bk.config().hidden) + "]");
  }
  const std::size_t s = splice_index(tmpl, pos);
  const std::size_t total = tmpl.ids.size();
  std::vector<Tensor> parts;
  if (s > 0) parts.push_back(tape.slice_rows(real, 0, s));
  parts.push_back(*prompt);
  if (s < total) parts.push_back(tape.slice_rows(real, s, total - s));
  return tape.concat_rows(parts);
}

namespace {

ForwardResult finish(Tape& tape, const ClassifierHead& head,
                     const EncoderState& st, std::size_t prompt_start) {
  return {head.forward(tape, st.h_cls), st.h_cls, prompt_start};
}

// Attention mask hiding the trailing [PAD] rows; empty when unpadded.
std::vector<bool> pad_mask(const TemplateTokens& tmpl, std::size_t rows) {
  if (tmpl.pad == 0) return {};
  std::vector<bool> mask(rows, true);
  for (std::size_t i = rows - tmpl.pad; i < rows; ++i) mask[i] = false;
  return mask;
}

// Splices placeholder rows at the prompt slot, then lets a layer hook
// overwrite those rows entering every layer.
ForwardResult run_deep(Tape& tape, const Transformer& bk,
                       const ClassifierHead& head, const TemplateTokens& tmpl,
                       PromptPosition pos, std::size_t t,
                       const std::function<Tensor(Tape&, const Tensor&,
                                                  std::size_t, std::size_t)>&
                           make_prompt) {
  const std::size_t s = splice_index(tmpl, pos);
  Tensor slot = tape.constant({t, bk.config().hidden},
                              std::vector<double>(t * bk.config().hidden, 0.0));
  Tensor x = assemble_input(tape, bk, tmpl, &slot, pos);
  EncodeOptions opts;
  opts.key_mask = pad_mask(tmpl, x.dim(0));
  opts.layer_hook = [&](Tape& tp, const Tensor& h, std::size_t layer) {
    return tp.overwrite_rows(h, make_prompt(tp, h, layer, s), s);
  };
  EncoderState st = bk.encode_embedded(tape, x, opts);
  return finish(tape, head, st, s);
}

}  // namespace

ForwardResult forward_plain(Tape& tape, const Transformer& bk,
                            const ClassifierHead& head,
                            const TemplateTokens& tmpl) {
  EncodeOptions opts;
  opts.key_mask = pad_mask(tmpl, tmpl.ids.size());
  EncoderState st = bk.encode(tape, tmpl.ids, opts);
  return finish(tape, head, st, 0);
}

ForwardResult forward_idpg(Tape& tape, const Transformer& bk,
                           const ClassifierHead& head, const PromptGenerator& g,
                           const TemplateTokens& tmpl, PromptPosition pos,
                           const SentenceRep& rep) {
  const GeneratorConfig& cfg = g.config();
  if (cfg.d != bk.config().hidden) {
    throw ContractError("forward: generator d=" + std::to_string(cfg.d) +
                        " != backbone hidden " +
                        std::to_string(bk.config().hidden));
  }
  if (cfg.depth_mode == DepthMode::single) {
    Tensor prompt = g.generate(tape, rep.vector, 0);
    Tensor x = assemble_input(tape, bk, tmpl, &prompt, pos);
    EncodeOptions opts;
    opts.key_mask = pad_mask(tmpl, x.dim(0));
    EncoderState st = bk.encode_embedded(tape, x, opts);
    return finish(tape, head, st, splice_index(tmpl, pos));
  }
  if (cfg.num_layers != bk.config().num_layers) {
    throw ContractError("forward: generator num_layers=" +
                        std::to_string(cfg.num_layers) + " != backbone depth " +
                        std::to_string(bk.config().num_layers));
  }
  const bool fixed_source = cfg.input_source == InputSource::layer0 ||
                            cfg.encoder == RepEncoder::bag_of_vectors;
  return run_deep(tape, bk, head, tmpl, pos, cfg.t,
                  [&](Tape& tp, const Tensor& h, std::size_t layer,
                      std::size_t) {
                    Tensor src = fixed_source || layer == 0 ? rep.vector
                                                            : tp.row(h, 0);
                    return g.generate(tp, src, layer);
                  });
}

ForwardResult forward_prompt_bank(Tape& tape, const Transformer& bk,
                                  const ClassifierHead& head,
                                  const Tensor& prompt,
                                  const TemplateTokens& tmpl,
                                  PromptPosition pos) {
  Tensor x = assemble_input(tape, bk, tmpl, &prompt, pos);
  EncodeOptions opts;
  opts.key_mask = pad_mask(tmpl, x.dim(0));
  EncoderState st = bk.encode_embedded(tape, x, opts);
  return finish(tape, head, st, splice_index(tmpl, pos));
}

ForwardResult forward_deep_prompt_bank(Tape& tape, const Transformer& bk,
                                       const ClassifierHead& head,
                                       const std::vector<Tensor>& bank,
                                       const TemplateTokens& tmpl,
                                       PromptPosition pos) {
  if (bank.size() != bk.config().num_layers) {
    throw ContractError("forward: bank has " + std::to_string(bank.size()) +
                        " prompts for " +
                        std::to_string(bk.config().num_layers) + " layers");
  }
  for (const Tensor& p : bank) {
    if (p.shape() != bank.front().shape()) {
      throw DimensionError("forward: bank prompts must share one shape");
    }
  }
  const std::size_t t = bank.front().shape()[0];
  return run_deep(tape, bk, head, tmpl, pos, t,
                  [&bank](Tape&, const Tensor&, std::size_t layer,
                          std::size_t) { return bank[layer]; });
}

}  // namespace idpg
