#include "idpg/phm.hpp"

#include <cmath>

namespace idpg {

namespace {

void check_divisible(std::size_t n, std::size_t in_dim, std::size_t out_dim) {
  if (n == 0) throw ConfigError("phm: n must be positive");
  if (in_dim == 0 || out_dim == 0) {
    throw ConfigError("phm: zero-sized layer (in=" + std::to_string(in_dim) +
                      ", out=" + std::to_string(out_dim) + ")");
  }
  if (in_dim % n != 0 || out_dim % n != 0) {
    throw ConfigError("phm: n=" + std::to_string(n) + " must divide in=" +
                      std::to_string(in_dim) + " and out=" +
                      std::to_string(out_dim));
  }
}

}  // namespace

std::shared_ptr<SharedA> SharedA::init(std::string name, std::size_t n,
                                       Rng& rng, DType dt, bool trainable) {
  if (n == 0) throw ConfigError("phm: pool order n must be positive");
  auto pool = std::make_shared<SharedA>();
  pool->name = std::move(name);
  pool->n = n;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(n));
  pool->mats.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(n * n);
    for (double& x : v) x = rng.normal(0.0, stddev);
    pool->mats.push_back(Tensor::from({n, n}, std::move(v), dt, trainable));
  }
  return pool;
}

PhmLinear PhmLinear::init(std::string name, std::size_t in_dim,
                          std::size_t out_dim, std::shared_ptr<SharedA> pool,
                          std::size_t num_biases, Rng& rng, DType dt,
                          bool trainable) {
  if (!pool) throw ConfigError("phm: layer needs an A pool");
  check_divisible(pool->n, in_dim, out_dim);
  if (num_biases == 0) throw ConfigError("phm: at least one bias vector");
  PhmLinear layer;
  layer.name_ = std::move(name);
  layer.in_dim_ = in_dim;
  layer.out_dim_ = out_dim;
  layer.pool_ = std::move(pool);
  const std::size_t n = layer.pool_->n;
  const std::size_t br = out_dim / n, bc = in_dim / n;
  const double bound = std::sqrt(6.0 / static_cast<double>(bc + br));
  layer.b_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(br * bc);
    for (double& x : v) x = rng.uniform(-bound, bound);
    layer.b_.push_back(Tensor::from({br, bc}, std::move(v), dt, trainable));
  }
  layer.biases_.reserve(num_biases);
  for (std::size_t j = 0; j < num_biases; ++j) {
    layer.biases_.push_back(Tensor::zeros({out_dim}, dt, trainable));
  }
  return layer;
}

Tensor PhmLinear::materialize_weight(Tape& tape) const {
  Tensor w;
  for (std::size_t i = 0; i < pool_->n; ++i) {
    Tensor term = tape.kron(pool_->mats[i], b_[i]);
    w = i == 0 ? term : tape.add(w, term);
  }
  return w;
}

Tensor PhmLinear::forward(Tape& tape, const Tensor& x, std::size_t bias_index,
                          PhmPath path) const {
  if (!x.defined() || x.rank() != 1 || x.dim(0) != in_dim_) {
    throw DimensionError("phm " + name_ + ": input " +
                         (x.defined() ? shape_str(x.shape()) : "(undefined)") +
                         " does not match in_dim " + std::to_string(in_dim_));
  }
  if (bias_index >= biases_.size()) {
    throw IndexError("phm " + name_ + ": bias index " +
                     std::to_string(bias_index) + " out of range for " +
                     std::to_string(biases_.size()) + " biases");
  }
  if (path == PhmPath::auto_select) {
    path = out_dim_ * in_dim_ <= 4096 ? PhmPath::materialize : PhmPath::block;
  }
  Tensor y;
  if (path == PhmPath::materialize) {
    y = tape.matmul(materialize_weight(tape), x);
  } else {
    const std::size_t n = pool_->n;
    Tensor xr = tape.reshape(x, {n, in_dim_ / n});
    Tensor acc;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor term =
          tape.matmul(tape.matmul(pool_->mats[i], xr), tape.transpose(b_[i]));
      acc = i == 0 ? term : tape.add(acc, term);
    }
    y = tape.reshape(acc, {out_dim_});
  }
  return tape.add(y, biases_[bias_index]);
}

std::int64_t PhmLinear::own_param_count() const {
  const auto n = static_cast<std::int64_t>(pool_->n);
  const auto in = static_cast<std::int64_t>(in_dim_);
  const auto out = static_cast<std::int64_t>(out_dim_);
  return out * in / n + static_cast<std::int64_t>(biases_.size()) * out;
}

std::int64_t phm_param_count(std::size_t n, std::size_t in_dim,
                             std::size_t out_dim, std::size_t num_biases) {
  check_divisible(n, in_dim, out_dim);
  const auto nn = static_cast<std::int64_t>(n);
  return nn * nn * nn +
         static_cast<std::int64_t>(out_dim) * static_cast<std::int64_t>(in_dim) / nn +
         static_cast<std::int64_t>(num_biases) * static_cast<std::int64_t>(out_dim);
}

}  // namespace idpg
