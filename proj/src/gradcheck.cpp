#include "idpg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "idpg/generator.hpp"
#include "idpg/nn.hpp"
#include "idpg/phm.hpp"

namespace idpg {

namespace {

std::vector<double> random_values(Rng& rng, std::size_t count,
                                  double stddev = 1.0) {
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

// Scalar readout with distinct weights per element so no gradient
// component can hide behind a symmetric reduction.
Tensor weighted_sum(Tape& tape, const Tensor& y, const std::vector<double>& w) {
  const Tensor c = tape.constant(y.shape(), w);
  return tape.sum(tape.mul(y, c));
}

}  // namespace

double finite_diff_rel_err(const std::function<Tensor(Tape&)>& loss_fn,
                           std::vector<NamedParam> params, double h) {
  auto eval = [&]() {
    Tape tape(DType::f64);
    return loss_fn(tape).at(0);
  };

  double worst = 0.0;
  Tape grad_tape(DType::f64);
  for (NamedParam& p : params) p.tensor.zero_grad();
  grad_tape.backward(loss_fn(grad_tape));

  for (NamedParam& p : params) {
    if (!p.tensor.has_grad()) {
      throw ContractError("gradcheck: no gradient reached " + p.path);
    }
    const std::vector<double> analytic = p.tensor.grad();
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      const double keep = p.tensor.at(i);
      p.tensor.set(i, keep + h);
      const double up = eval();
      p.tensor.set(i, keep - h);
      const double down = eval();
      p.tensor.set(i, keep);
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1.0});
      worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
  }
  return worst;
}

namespace {

GradCheck check_phm_linear(Rng& rng) {
  auto pool = SharedA::init("pool", 2, rng, DType::f64, true);
  PhmLinear layer = PhmLinear::init("lin", 8, 6, pool, 2, rng, DType::f64,
                                    true);
  const std::vector<double> x = random_values(rng, 8);
  const std::vector<double> w0 = random_values(rng, 6);
  const std::vector<double> w1 = random_values(rng, 6);

  std::vector<NamedParam> params;
  for (std::size_t i = 0; i < pool->mats.size(); ++i) {
    params.push_back({"pool/a." + std::to_string(i), pool->mats[i]});
  }
  for (std::size_t i = 0; i < layer.b_factors().size(); ++i) {
    params.push_back({"lin/b." + std::to_string(i), layer.b_factors()[i]});
  }
  for (std::size_t i = 0; i < layer.biases().size(); ++i) {
    params.push_back({"lin/bias." + std::to_string(i), layer.biases()[i]});
  }

  const double err = finite_diff_rel_err(
      [&](Tape& tape) {
        // route through both bias slots so every parameter sees gradient
        const Tensor input = tape.constant({8}, x);
        return tape.add(weighted_sum(tape, layer.forward(tape, input, 0), w0),
                        weighted_sum(tape, layer.forward(tape, input, 1), w1));
      },
      params);
  return {"phm-linear", err};
}

GradCheck check_generator(Rng& rng, GenFlavor flavor, ArchVariant arch,
                          DepthMode depth) {
  GeneratorConfig cfg;
  cfg.flavor = flavor;
  cfg.depth_mode = depth;
  cfg.t = 2;
  cfg.m = 4;
  cfg.d = 8;
  cfg.n = 2;
  cfg.enc_dim = 4; // != d so residual variants map the rep
  cfg.sharing = Sharing::M;
  cfg.num_layers = 2;
  cfg.arch_variant = arch;
  cfg.encoder = RepEncoder::bag_of_vectors;
  cfg.input_source = InputSource::layer0;
  PromptGenerator gen = PromptGenerator::init(cfg, rng, DType::f64);

  SentenceRep rep;
  rep.vector = Tensor::from({4}, random_values(rng, 4), DType::f64);
  rep.source = RepEncoder::bag_of_vectors;
  std::vector<std::vector<double>> w;
  const std::size_t depth_count = depth == DepthMode::multi ? cfg.num_layers : 1;
  for (std::size_t l = 0; l < depth_count; ++l) {
    w.push_back(random_values(rng, cfg.t * cfg.d));
  }

  std::vector<NamedParam> params;
  gen.visit_params([&](const std::string& path, Tensor& t) {
    params.push_back({path, t});
  });

  const double err = finite_diff_rel_err(
      [&](Tape& tape) {
        // sum over depths so per-layer biases all see gradient
        Tensor loss = weighted_sum(tape, gen.generate(tape, rep.vector, 0),
                                   w[0]);
        for (std::size_t l = 1; l < depth_count; ++l) {
          loss = tape.add(loss,
                          weighted_sum(tape, gen.generate(tape, rep.vector, l),
                                       w[l]));
        }
        return loss;
      },
      params);

  std::string name = flavor == GenFlavor::phm ? "phm-generator" : "dnn-generator";
  name += depth == DepthMode::multi ? "-multi-" : "-";
  name += to_string(arch);
  return {name, err};
}

GradCheck check_encoder(Rng& rng) {
  TransformerConfig cfg;
  cfg.num_layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_inner = 16;
  cfg.vocab_size = 12;
  cfg.max_seq = 8;
  Transformer bk = Transformer::init(cfg, rng, DType::f64, true);
  const std::vector<std::size_t> ids{0, 7, 5, 9, 3};
  const std::vector<double> w = random_values(rng, ids.size() * cfg.hidden);

  std::vector<NamedParam> params;
  bk.visit_params([&](const std::string& path, Tensor& t) {
    params.push_back({path, t});
  });

  const double err = finite_diff_rel_err(
      [&](Tape& tape) {
        const EncoderState state = bk.encode(tape, ids);
        return weighted_sum(tape, state.hidden.back(), w);
      },
      params);
  return {"attention-layer-norm", err};
}

GradCheck check_head_loss(Rng& rng, HeadMode mode) {
  TransformerConfig cfg;
  cfg.num_layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_inner = 16;
  cfg.vocab_size = 12;
  cfg.max_seq = 8;
  Transformer bk = Transformer::init(cfg, rng, DType::f64, true);
  const std::size_t labels = mode == HeadMode::classification ? 3 : 1;
  ClassifierHead head = ClassifierHead::init(mode, labels, cfg.hidden, rng,
                                             DType::f64);
  const std::vector<std::size_t> ids{0, 4, 11, 3};

  std::vector<NamedParam> params;
  bk.visit_params([&](const std::string& path, Tensor& t) {
    params.push_back({path, t});
  });
  head.visit_params([&](const std::string& path, Tensor& t) {
    params.push_back({path, t});
  });

  const double err = finite_diff_rel_err(
      [&](Tape& tape) {
        const EncoderState state = bk.encode(tape, ids);
        const Tensor out = head.forward(tape, state.h_cls);
        return mode == HeadMode::classification ? nll_loss(tape, out, 1)
                                                : mse_loss(tape, out, 0.37);
      },
      params);
  return {mode == HeadMode::classification ? "classifier-nll"
                                           : "regression-mse",
          err};
}

}  // namespace

GradReport run_gradcheck(std::size_t seeds) {
  GradReport report;
  auto merge = [&](const GradCheck& check) {
    for (GradCheck& existing : report.checks) {
      if (existing.name == check.name) {
        existing.rel_err = std::max(existing.rel_err, check.rel_err);
        report.worst = std::max(report.worst, check.rel_err);
        return;
      }
    }
    report.checks.push_back(check);
    report.worst = std::max(report.worst, check.rel_err);
  };

  for (std::size_t seed = 0; seed < seeds; ++seed) {
    Rng rng(seed * 7919 + 11);
    merge(check_phm_linear(rng));
    for (GenFlavor flavor : {GenFlavor::dnn, GenFlavor::phm}) {
      for (ArchVariant arch :
           {ArchVariant::plain, ArchVariant::residual, ArchVariant::layernorm,
            ArchVariant::residual_layernorm}) {
        merge(check_generator(rng, flavor, arch, DepthMode::single));
      }
      merge(check_generator(rng, flavor, ArchVariant::plain, DepthMode::multi));
    }
    merge(check_encoder(rng));
    merge(check_head_loss(rng, HeadMode::classification));
    merge(check_head_loss(rng, HeadMode::regression));
  }
  return report;
}

OracleReport run_phm_oracle(std::size_t configs, std::uint64_t seed) {
  Rng rng(seed * 104729 + 1);
  const std::size_t n_choices[] = {1, 2, 4, 8, 16};
  OracleReport report;
  report.configs = configs;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::size_t n = n_choices[rng.next_u64() % 5];
    const std::size_t max_mult = 64 / n;
    const std::size_t in = n * (1 + rng.next_u64() % max_mult);
    const std::size_t out = n * (1 + rng.next_u64() % max_mult);
    const std::size_t biases = 1 + rng.next_u64() % 3;

    auto pool = SharedA::init("pool", n, rng, DType::f64, true);
    const PhmLinear layer = PhmLinear::init("oracle", in, out, pool, biases,
                                            rng, DType::f64, true);
    const std::vector<double> x = random_values(rng, in);
    const std::size_t bias_index = rng.next_u64() % biases;

    Tape tape(DType::f64);
    const Tensor input = tape.constant({in}, x);
    const Tensor via_block =
        layer.forward(tape, input, bias_index, PhmPath::block);
    const Tensor via_mat =
        layer.forward(tape, input, bias_index, PhmPath::materialize);
    for (std::size_t i = 0; i < out; ++i) {
      report.worst_abs_diff = std::max(
          report.worst_abs_diff, std::abs(via_block.at(i) - via_mat.at(i)));
    }
  }
  return report;
}

}  // namespace idpg
