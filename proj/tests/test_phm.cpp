#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "idpg/phm.hpp"

using idpg::DType;
using idpg::PhmLinear;
using idpg::PhmPath;
using idpg::Rng;
using idpg::SharedA;
using idpg::Tape;
using idpg::Tensor;

namespace {

PhmLinear make_layer(std::size_t n, std::size_t in, std::size_t out,
                     std::size_t num_biases, std::uint64_t seed,
                     bool trainable = false) {
  Rng rng(seed);
  auto pool = SharedA::init("pool", n, rng, DType::f64, trainable);
  return PhmLinear::init("layer", in, out, pool, num_biases, rng, DType::f64,
                         trainable);
}

std::int64_t live_param_count(const PhmLinear& layer) {
  std::int64_t total = 0;
  for (const Tensor& t : layer.pool()->mats) total += t.size();
  for (const Tensor& t : layer.b_factors()) total += t.size();
  for (const Tensor& t : layer.biases()) total += t.size();
  return total;
}

}  // namespace

TEST_CASE("worked 2x2 sum of kronecker products") {
  PhmLinear layer = make_layer(2, 2, 2, 1, 1);
  layer.pool()->mats[0].fill({1, 0, 0, 1});
  layer.pool()->mats[1].fill({0, 1, 1, 0});
  layer.b_factors()[0].fill({2});
  layer.b_factors()[1].fill({3});

  Tape tape(DType::f64);
  Tensor w = layer.materialize_weight(tape);
  CHECK(w.at(0, 0) == 2.0);
  CHECK(w.at(0, 1) == 3.0);
  CHECK(w.at(1, 0) == 3.0);
  CHECK(w.at(1, 1) == 2.0);

  Tensor x = Tensor::from({2}, {1, 1}, DType::f64);
  for (PhmPath path : {PhmPath::materialize, PhmPath::block}) {
    Tensor y = layer.forward(tape, x, 0, path);
    CHECK(y.at(0) == 5.0);
    CHECK(y.at(1) == 5.0);
  }
}

TEST_CASE("parameter count formula matches live tensors") {
  CHECK(idpg::phm_param_count(2, 4, 6, 1) == 8 + 12 + 6);
  // the full-layer rule n^3 + out*in/n plus biases
  for (auto [n, in, out, nb] :
       {std::array<std::size_t, 4>{1, 3, 5, 1}, {2, 8, 4, 2}, {4, 16, 8, 3},
        {8, 64, 32, 1}, {16, 64, 16, 2}}) {
    const std::int64_t expect = idpg::phm_param_count(n, in, out, nb);
    PhmLinear layer = make_layer(n, in, out, nb, 7);
    CHECK(live_param_count(layer) == expect);
    CHECK(layer.own_param_count() + layer.pool()->param_count() == expect);
  }
}

TEST_CASE("indivisible dims raise a config error naming n and the dims") {
  CHECK_THROWS_AS(idpg::phm_param_count(3, 4, 6, 1), idpg::ConfigError);
  try {
    idpg::phm_param_count(3, 4, 6, 1);
  } catch (const idpg::ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("n=3") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
    CHECK(msg.find("6") != std::string::npos);
  }
  Rng rng(1);
  auto pool = SharedA::init("p", 3, rng, DType::f64, false);
  CHECK_THROWS_AS(
      PhmLinear::init("l", 4, 6, pool, 1, rng, DType::f64, false),
      idpg::ConfigError);
}

TEST_CASE("materialized and block forwards agree on random configs") {
  Rng rng(99);
  const std::size_t ns[] = {1, 2, 4, 8, 16};
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = ns[rng.below(5)];
    const std::size_t in = n * (1 + rng.below(64 / n));
    const std::size_t out = n * (1 + rng.below(64 / n));
    PhmLinear layer = make_layer(n, in, out, 1, 1000 + trial);
    std::vector<double> xv(in);
    for (double& v : xv) v = rng.normal();
    Tensor x = Tensor::from({in}, xv, DType::f64);
    Tape tape(DType::f64);
    Tensor ym = layer.forward(tape, x, 0, PhmPath::materialize);
    Tensor yb = layer.forward(tape, x, 0, PhmPath::block);
    Tensor ya = layer.forward(tape, x, 0);
    REQUIRE(ym.size() == out);
    for (std::size_t i = 0; i < out; ++i) {
      CHECK(std::fabs(ym.at(i) - yb.at(i)) <= 1e-10);
      CHECK(ya.at(i) == (out * in <= 4096 ? ym.at(i) : yb.at(i)));
    }
  }
}

TEST_CASE("order-1 phm with unit A collapses to its dense factor") {
  PhmLinear layer = make_layer(1, 5, 3, 1, 4);
  layer.pool()->mats[0].fill({1.0});
  Tape tape(DType::f64);
  Tensor w = layer.materialize_weight(tape);
  const Tensor& b = layer.b_factors()[0];
  REQUIRE(w.shape() == b.shape());
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.at(i) == b.at(i));
}

TEST_CASE("zero factors degenerate to the bias, bitwise") {
  PhmLinear layer = make_layer(4, 8, 12, 3, 5);
  for (Tensor& b : layer.b_factors())
    b.fill(std::vector<double>(b.size(), 0.0));
  std::vector<double> bias(12);
  Rng rng(2);
  for (double& v : bias) v = rng.normal();
  layer.biases()[1].fill(bias);
  Tensor x = Tensor::from({8}, {1, -2, 3, -4, 5, -6, 7, -8}, DType::f64);
  Tape tape(DType::f64);
  for (PhmPath path : {PhmPath::materialize, PhmPath::block}) {
    Tensor y = layer.forward(tape, x, 1, path);
    for (std::size_t i = 0; i < 12; ++i) CHECK(y.at(i) == layer.biases()[1].at(i));
  }
}

TEST_CASE("forward contract errors") {
  PhmLinear layer = make_layer(2, 4, 6, 2, 8);
  Tape tape(DType::f64);
  Tensor bad = Tensor::zeros({5}, DType::f64);
  CHECK_THROWS_AS(layer.forward(tape, bad, 0), idpg::DimensionError);
  Tensor x = Tensor::zeros({4}, DType::f64);
  CHECK_THROWS_AS(layer.forward(tape, x, 2), idpg::IndexError);
}

TEST_CASE("gradients flow through both forward paths") {
  for (PhmPath path : {PhmPath::materialize, PhmPath::block}) {
    PhmLinear layer = make_layer(2, 6, 4, 1, 21, true);
    Tensor x = Tensor::from({6}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6}, DType::f64, true);
    std::vector<Tensor> params{x};
    for (const Tensor& t : layer.pool()->mats) params.push_back(t);
    for (const Tensor& t : layer.b_factors()) params.push_back(t);
    params.push_back(layer.biases()[0]);

    auto forward = [&](Tape& t) {
      Tensor y = layer.forward(t, x, 0, path);
      std::vector<double> w(y.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.21 * double(i);
      return t.sum(t.mul(y, t.constant(y.shape(), std::move(w))));
    };

    Tape tape(DType::f64);
    Tensor loss = forward(tape);
    tape.backward(loss);
    const double h = 1e-5;
    double worst = 0.0;
    for (Tensor& p : params) {
      REQUIRE(p.has_grad());
      const std::vector<double> analytic = p.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p.at(i);
        p.set(i, orig + h);
        Tape tp(DType::f64);
        const double up = forward(tp).at(0);
        p.set(i, orig - h);
        Tape tm(DType::f64);
        const double dn = forward(tm).at(0);
        p.set(i, orig);
        const double fd = (up - dn) / (2 * h);
        const double err = std::fabs(analytic[i] - fd) /
                           std::max({std::fabs(analytic[i]), std::fabs(fd), 1.0});
        worst = std::max(worst, err);
      }
      p.zero_grad();
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("a pool shared by two layers is one set of tensors") {
  Rng rng(31);
  auto pool = SharedA::init("shared", 2, rng, DType::f64, true);
  PhmLinear down = PhmLinear::init("down", 8, 4, pool, 1, rng, DType::f64, true);
  PhmLinear up = PhmLinear::init("up", 4, 6, pool, 1, rng, DType::f64, true);
  REQUIRE(down.pool().get() == up.pool().get());
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(down.pool()->mats[i].id() == up.pool()->mats[i].id());
  CHECK(pool.use_count() == 3);
}

TEST_CASE("init is deterministic under the seed") {
  PhmLinear a = make_layer(4, 16, 8, 1, 77);
  PhmLinear b = make_layer(4, 16, 8, 1, 77);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < a.pool()->mats[i].size(); ++j)
      CHECK(a.pool()->mats[i].at(j) == b.pool()->mats[i].at(j));
    for (std::size_t j = 0; j < a.b_factors()[i].size(); ++j)
      CHECK(a.b_factors()[i].at(j) == b.b_factors()[i].at(j));
  }
}
