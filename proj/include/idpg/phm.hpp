#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "idpg/tensor.hpp"

namespace idpg {

// Pool of n Kronecker factors A_i, each [n, n]. Layers hold the pool by
// shared_ptr, so sharing across projections or depths is explicit and a
// pool's parameters can be deduplicated by tensor identity when counting
// or serializing.
struct SharedA {
  std::string name;
  std::size_t n = 0;
  std::vector<Tensor> mats;

  static std::shared_ptr<SharedA> init(std::string name, std::size_t n,
                                       Rng& rng, DType dt, bool trainable);
  std::int64_t param_count() const {
    return static_cast<std::int64_t>(n) * n * n;
  }
};

enum class PhmPath { auto_select, materialize, block };

// Parameterized hypercomplex linear map
//   y = (sum_i kron(A_i, B_i)) x + bias[bias_index]
// with A_i [n, n] from the pool and B_i [out/n, in/n] owned by the layer.
// Several bias vectors may be attached so depth-shared layers can keep a
// per-depth bias.
class PhmLinear {
 public:
  PhmLinear() = default;

  static PhmLinear init(std::string name, std::size_t in_dim, std::size_t out_dim,
                        std::shared_ptr<SharedA> pool, std::size_t num_biases,
                        Rng& rng, DType dt, bool trainable);

  // Picks the dense materialized product for small layers (out*in <= 4096)
  // and the reshaped block formulation above that; both routes are exact
  // up to float rounding and are tested against each other.
  Tensor forward(Tape& tape, const Tensor& x, std::size_t bias_index,
                 PhmPath path = PhmPath::auto_select) const;

  // sum_i kron(A_i, B_i) as an explicit [out, in] tensor.
  Tensor materialize_weight(Tape& tape) const;

  const std::string& name() const { return name_; }
  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  std::size_t n() const { return pool_ ? pool_->n : 0; }
  std::size_t num_biases() const { return biases_.size(); }
  const std::shared_ptr<SharedA>& pool() const { return pool_; }
  std::vector<Tensor>& b_factors() { return b_; }
  const std::vector<Tensor>& b_factors() const { return b_; }
  std::vector<Tensor>& biases() { return biases_; }
  const std::vector<Tensor>& biases() const { return biases_; }

  // Layer-owned parameters (B factors and biases), excluding the pool.
  std::int64_t own_param_count() const;

 private:
  std::string name_;
  std::size_t in_dim_ = 0;
  std::size_t out_dim_ = 0;
  std::shared_ptr<SharedA> pool_;
  std::vector<Tensor> b_;
  std::vector<Tensor> biases_;
};

// Exact size of one PHM layer with a private pool:
//   n^3 + out*in/n + num_biases*out.
// Rejects indivisible dimensions.
std::int64_t phm_param_count(std::size_t n, std::size_t in_dim,
                             std::size_t out_dim, std::size_t num_biases);

}  // namespace idpg
