#include "idpg/accountant.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace idpg {

namespace {

constexpr std::int64_t kKilo = 1024;
constexpr std::int64_t kMega = kKilo * kKilo;

std::int64_t i64(std::size_t v) { return static_cast<std::int64_t>(v); }

// a / b with an error naming the violated divisibility constraint.
std::size_t exact_div(std::size_t a, std::size_t b, const char* method,
                      const char* what) {
  if (b == 0 || a % b != 0) {
    throw ConfigError(std::string(method) + " requires n | " + what + " (n=" +
                      std::to_string(b) + ", " + what + "=" +
                      std::to_string(a) + ")");
  }
  return a / b;
}

void require_positive(std::size_t v, const char* method, const char* what) {
  if (v == 0) {
    throw ConfigError(std::string(method) + " requires " + what + " > 0");
  }
}

bool is_reference_dims(const MethodSpec& spec) {
  const MethodDims& a = spec.dims;
  const MethodDims& b = MethodSpec::reference(spec.method).dims;
  return a.d == b.d && a.N == b.N && a.t == b.t && a.m == b.m && a.n == b.n &&
         a.enc_dim == b.enc_dim && a.adapters_per_layer == b.adapters_per_layer;
}

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kNames[] = {
    {Method::full_finetune, "full-finetune"},
    {Method::adapter, "adapter"},
    {Method::compacter, "compacter"},
    {Method::prompt_tuning, "prompt-tuning"},
    {Method::prompt_tuning_134, "prompt-tuning-134"},
    {Method::p_tuning_v2, "p-tuning-v2"},
    {Method::s_idpg_phm, "s-idpg-phm"},
    {Method::s_idpg_dnn, "s-idpg-dnn"},
    {Method::m_idpg_phm_glove, "m-idpg-phm-glove"},
    {Method::m_idpg_phm, "m-idpg-phm"},
    {Method::m_idpg_dnn, "m-idpg-dnn"},
};

}  // namespace

const char* to_string(Method m) {
  for (const MethodName& e : kNames) {
    if (e.method == m) return e.name;
  }
  throw ConfigError("method: bad value");
}

Method parse_method(const std::string& s) {
  std::string options;
  for (const MethodName& e : kNames) {
    if (s == e.name) return e.method;
    if (!options.empty()) options += ", ";
    options += e.name;
  }
  throw ParseError("method: got \"" + s + "\", expected one of " + options);
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const MethodName& e : kNames) out.push_back(e.method);
  return out;
}

MethodSpec MethodSpec::reference(Method m) {
  MethodSpec spec;
  spec.method = m;
  MethodDims& d = spec.dims; // d=1024, N=24, t=5, 2 adapters per layer
  switch (m) {
    case Method::full_finetune:
      break;
    case Method::adapter:
      d.m = 16;
      break;
    case Method::compacter:
      d.m = 16;
      d.n = 4;
      break;
    case Method::prompt_tuning:
      break;
    case Method::prompt_tuning_134:
      d.t = 134;
      break;
    case Method::p_tuning_v2:
      break;
    case Method::s_idpg_phm:
      d.m = 256;
      d.n = 16;
      break;
    case Method::s_idpg_dnn:
      d.m = 256;
      break;
    case Method::m_idpg_phm_glove:
      d.m = 16;
      d.n = 4;
      d.enc_dim = 300;
      break;
    case Method::m_idpg_phm:
      d.m = 16;
      d.n = 16;
      break;
    case Method::m_idpg_dnn:
      d.m = 16;
      break;
  }
  return spec;
}

void MethodSpec::validate() const {
  const char* name = to_string(method);
  require_positive(dims.d, name, "d");
  switch (method) {
    case Method::full_finetune:
      if (dims.backbone_total < 0) {
        throw ConfigError("full-finetune backbone total must be >= 0");
      }
      break;
    case Method::adapter:
      require_positive(dims.m, name, "m");
      require_positive(dims.N, name, "N");
      require_positive(dims.adapters_per_layer, name, "adapters_per_layer");
      break;
    case Method::compacter:
      require_positive(dims.m, name, "m");
      require_positive(dims.N, name, "N");
      require_positive(dims.adapters_per_layer, name, "adapters_per_layer");
      exact_div(dims.d, dims.n, name, "d");
      exact_div(dims.m, dims.n, name, "m");
      break;
    case Method::prompt_tuning:
    case Method::prompt_tuning_134:
      require_positive(dims.t, name, "t");
      break;
    case Method::p_tuning_v2:
      require_positive(dims.t, name, "t");
      require_positive(dims.N, name, "N");
      break;
    case Method::s_idpg_phm:
    case Method::m_idpg_phm:
    case Method::m_idpg_phm_glove:
      require_positive(dims.t, name, "t");
      require_positive(dims.m, name, "m");
      require_positive(dims.enc_dim, name, "enc_dim");
      exact_div(dims.enc_dim, dims.n, name, "enc_dim");
      exact_div(dims.m, dims.n, name, "m");
      exact_div(dims.t * dims.d, dims.n, name, "t*d");
      if (method != Method::s_idpg_phm) require_positive(dims.N, name, "N");
      break;
    case Method::s_idpg_dnn:
    case Method::m_idpg_dnn:
      require_positive(dims.t, name, "t");
      require_positive(dims.m, name, "m");
      require_positive(dims.enc_dim, name, "enc_dim");
      if (method == Method::m_idpg_dnn) require_positive(dims.N, name, "N");
      break;
  }
}

ParamBudget count(const MethodSpec& spec) {
  spec.validate();
  const MethodDims& dm = spec.dims;
  const std::int64_t d = i64(dm.d), N = i64(dm.N), t = i64(dm.t),
                     m = i64(dm.m), n = i64(dm.n), enc = i64(dm.enc_dim),
                     a = i64(dm.adapters_per_layer);
  const bool ref = is_reference_dims(spec);
  auto mark = [&](const char* display) { return ref ? display : ""; };

  ParamBudget budget;
  switch (spec.method) {
    case Method::full_finetune:
      budget.components = {{"backbone (declared)", dm.backbone_total, ""}};
      break;
    case Method::adapter:
      budget.components = {
          {"adapters", (d * m + m + m * d + d) * N * a, ""}};
      break;
    case Method::compacter:
      budget.components = {
          {"down s", (d / n) * n * N * a, mark("48K")},
          {"down t", (m / n) * n * N * a, mark("0.75K")},
          {"hidden bias", m * N * a, mark("0.75K")},
          {"up s", (d / n) * n * N * a, mark("48K")},
          {"up t", (m / n) * n * N * a, mark("0.75K")},
          {"output bias", d * N * a, mark("48K")},
          {"shared A", n * n * n * N * a, mark("3K")},
      };
      break;
    case Method::prompt_tuning:
      budget.components = {{"prompt", t * d, ""}};
      break;
    case Method::prompt_tuning_134:
      budget.components = {{"prompt", t * d, ""}};
      break;
    case Method::p_tuning_v2:
      budget.components = {{"per-layer prompts", t * N * d, ""}};
      break;
    case Method::s_idpg_phm:
      budget.components = {
          {"W1", m * enc / n + m, mark("16.25K")},
          {"W2", t * d * m / n + t * d, mark("85K")},
          {"A", n * n * n, mark("4K")},
      };
      break;
    case Method::s_idpg_dnn:
      budget.components = {
          {"W1", enc * m + m, ""},
          {"W2", m * t * d + t * d, ""},
      };
      break;
    case Method::m_idpg_phm_glove:
      budget.components = {
          {"W1", m * enc / n + m, mark("1216")},
          {"W2", t * d * m / n + t * d * N, mark("140K")},
          {"A", 2 * n * n * n, mark("128")},
      };
      break;
    case Method::m_idpg_phm:
      budget.components = {
          {"W1", m * enc / n + m, mark("1K")},
          {"W2", t * d * m / n + t * d * N, mark("125K")},
          {"shared A", 2 * n * n * n, mark("8K")},
      };
      break;
    case Method::m_idpg_dnn:
      budget.components = {
          {"W1", enc * m + m, ""},
          {"W2", m * t * d + t * d * N, ""},
      };
      break;
  }

  for (const BudgetComponent& c : budget.components) budget.total += c.count;

  if (ref) {
    switch (spec.method) {
      case Method::full_finetune: budget.reported = "355M"; break;
      case Method::adapter: budget.reported = "1.55M"; break;
      case Method::compacter: budget.reported = "149.25K"; break;
      case Method::prompt_tuning: budget.reported = "5K"; break;
      case Method::prompt_tuning_134: budget.reported = "134K"; break;
      case Method::p_tuning_v2: budget.reported = "120K"; break;
      case Method::s_idpg_phm: budget.reported = "105K"; break;
      case Method::s_idpg_dnn: budget.reported = "1.5M"; break;
      case Method::m_idpg_phm_glove: budget.reported = "141K"; break;
      case Method::m_idpg_phm: budget.reported = "134K"; break;
      case Method::m_idpg_dnn: budget.reported = "216K"; break;
    }
  } else {
    budget.reported = render_display(budget.total);
  }
  return budget;
}

std::string render_display(std::int64_t exact) {
  if (exact < 0) throw ConfigError("display: negative count");
  if (exact < kKilo) return std::to_string(exact);
  const std::int64_t unit = exact < kMega ? kKilo : kMega;
  const char suffix = exact < kMega ? 'K' : 'M';
  // floor to 2 decimals of the unit
  std::int64_t scaled = exact * 100 / unit;
  std::string digits = std::to_string(scaled / 100);
  const std::int64_t frac = scaled % 100;
  if (frac != 0) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), ".%02lld", static_cast<long long>(frac));
    std::string tail = buf;
    while (tail.back() == '0') tail.pop_back();
    digits += tail;
  }
  digits += suffix;
  return digits;
}

bool display_consistent(std::int64_t exact, const std::string& reported) {
  if (reported.empty()) return false;
  std::string num = reported;
  std::int64_t unit = 1;
  if (num.back() == 'K') {
    unit = kKilo;
    num.pop_back();
  } else if (num.back() == 'M') {
    unit = kMega;
    num.pop_back();
  }
  if (num.empty()) return false;
  std::int64_t scaled = 0, pow10 = 1;
  bool seen_dot = false, seen_digit = false;
  for (char c : num) {
    if (c == '.') {
      if (seen_dot) return false;
      seen_dot = true;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      scaled = scaled * 10 + (c - '0');
      if (seen_dot) pow10 *= 10;
      seen_digit = true;
    } else {
      return false;
    }
  }
  if (!seen_digit) return false;
  // |exact / unit - scaled / pow10| <= 0.5 / pow10, in integers
  const std::int64_t lhs = 2 * exact * pow10;
  const std::int64_t rhs = 2 * scaled * unit;
  return std::llabs(lhs - rhs) <= unit;
}

AuditReport audit(const ParamBudget& budget,
                  const std::vector<NamedParam>& trainable) {
  auto label_for = [&](const std::string& path) -> std::string {
    auto has = [&](const char* sub) {
      return path.find(sub) != std::string::npos;
    };
    auto budget_has = [&](const std::string& label) {
      for (const BudgetComponent& c : budget.components) {
        if (c.label == label) return true;
      }
      return false;
    };
    if (budget.components.size() == 1) return budget.components[0].label;
    if (has("pool")) {
      if (budget_has("shared A")) return "shared A";
      if (budget_has("A")) return "A";
    }
    if (has("down") && budget_has("W1")) return "W1";
    if (has("up") && budget_has("W2")) return "W2";
    return "unbudgeted";
  };

  std::map<std::string, std::int64_t> live;
  std::set<const void*> seen;
  std::int64_t live_total = 0;
  for (const NamedParam& p : trainable) {
    if (!p.tensor.defined()) {
      throw ContractError("audit: undefined tensor at " + p.path);
    }
    if (!seen.insert(p.tensor.id()).second) continue; // shared: counted once
    const std::int64_t sz = i64(p.tensor.size());
    live[label_for(p.path)] += sz;
    live_total += sz;
  }

  AuditReport report;
  report.declared_total = budget.total;
  report.live_total = live_total;
  for (const BudgetComponent& c : budget.components) {
    report.rows.push_back({c.label, c.count, live[c.label]});
    live.erase(c.label);
  }
  for (const auto& [label, sz] : live) report.rows.push_back({label, 0, sz});

  report.ok = true;
  std::ostringstream msg;
  for (const AuditRow& r : report.rows) {
    if (r.live != r.declared) {
      report.ok = false;
      msg << (msg.tellp() > 0 ? "; " : "") << r.label << ": declared "
          << r.declared << ", live " << r.live << " (delta "
          << r.live - r.declared << ")";
    }
  }
  report.message = report.ok ? "audit ok" : msg.str();
  return report;
}

}  // namespace idpg
