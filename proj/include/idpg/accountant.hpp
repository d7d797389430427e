#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "idpg/common.hpp"
#include "idpg/tensor.hpp"

namespace idpg {

// Rows of the trainable-parameter efficiency table.
enum class Method {
  full_finetune,
  adapter,
  compacter,
  prompt_tuning,
  prompt_tuning_134,
  p_tuning_v2,
  s_idpg_phm,
  s_idpg_dnn,
  m_idpg_phm_glove,
  m_idpg_phm,
  m_idpg_dnn,
};

const char* to_string(Method m);
Method parse_method(const std::string& s);
std::vector<Method> all_methods();

struct MethodDims {
  std::size_t d = 1024;       // backbone hidden size
  std::size_t N = 24;         // backbone depth
  std::size_t t = 5;          // prompt length
  std::size_t m = 16;         // generator / adapter bottleneck
  std::size_t n = 16;         // kronecker factor count
  std::size_t enc_dim = 1024; // generator input dim
  std::size_t adapters_per_layer = 2;
  // Declared backbone total for full finetuning; the reference table keeps
  // the backbone's own published size as a rendering constant instead.
  std::int64_t backbone_total = 0;
};

struct MethodSpec {
  Method method = Method::m_idpg_phm;
  MethodDims dims;

  // Dims behind the reference table's published figures.
  static MethodSpec reference(Method m);
  // Required dims present and divisibility constraints hold.
  void validate() const;
};

struct BudgetComponent {
  std::string label;
  std::int64_t count = 0;
  std::string reported; // published display figure when one exists
};

struct ParamBudget {
  std::vector<BudgetComponent> components;
  std::int64_t total = 0;
  std::string reported; // published total figure, e.g. "134K" with K = 1024
};

// Exact trainable-parameter budget, classification head excluded.
ParamBudget count(const MethodSpec& spec);

// Renders an exact count in the table's K = 1024 convention, flooring to
// two decimals and trimming trailing zeros (e.g. 137232 -> "134.01K").
std::string render_display(std::int64_t exact);

// Does the display string round to the exact count under K = 1024, within
// half a unit of its last printed decimal? ("105K" vs 107776 holds since
// 107776/1024 = 105.25.)
bool display_consistent(std::int64_t exact, const std::string& reported);

struct NamedParam {
  std::string path;
  Tensor tensor;
};

struct AuditRow {
  std::string label;
  std::int64_t declared = 0;
  std::int64_t live = 0;
};

struct AuditReport {
  std::vector<AuditRow> rows;
  std::int64_t declared_total = 0;
  std::int64_t live_total = 0;
  bool ok = false;
  std::string message; // per-component deltas when the audit fails
};

// Compares a live trainable set (shared tensors counted once, frozen and
// head parameters expected to be absent) against a declared budget.
AuditReport audit(const ParamBudget& budget,
                  const std::vector<NamedParam>& trainable);

}  // namespace idpg
