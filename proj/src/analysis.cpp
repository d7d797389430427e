#include "idpg/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace idpg {

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine: length mismatch (" +
                         std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()) + ")");
  }
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) {
    throw MetricError("cosine: undefined for a zero vector");
  }
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

RankDistribution topk_distribution(std::vector<PairScore> pairs,
                                   std::size_t k) {
  if (k > pairs.size()) {
    throw ContractError("topk: k = " + std::to_string(k) + " exceeds " +
                        std::to_string(pairs.size()) + " pairs");
  }
  std::sort(pairs.begin(), pairs.end(),
            [](const PairScore& a, const PairScore& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.pair_id < b.pair_id;
            });
  RankDistribution dist;
  dist.k = k;
  for (std::size_t i = 0; i < k; ++i) dist.counts[pairs[i].group] += 1;
  return dist;
}

std::vector<std::string> gold_groups(const std::vector<Example>& pairs,
                                     Objective objective) {
  std::vector<std::string> groups;
  groups.reserve(pairs.size());
  if (objective == Objective::classification) {
    for (const Example& ex : pairs) {
      groups.push_back("label=" + std::to_string(ex.label));
    }
    return groups;
  }
  if (pairs.empty()) return groups;
  std::vector<double> sorted;
  sorted.reserve(pairs.size());
  for (const Example& ex : pairs) sorted.push_back(ex.target);
  std::sort(sorted.begin(), sorted.end());
  const double q25 = sorted[sorted.size() / 4];
  const double q50 = sorted[sorted.size() / 2];
  const double q75 = sorted[3 * sorted.size() / 4];
  for (const Example& ex : pairs) {
    if (ex.target < q25) groups.push_back("q1");
    else if (ex.target < q50) groups.push_back("q2");
    else if (ex.target < q75) groups.push_back("q3");
    else groups.push_back("q4");
  }
  return groups;
}

std::vector<double> encode_sentence(const ModelBundle& bundle,
                                    const std::string& text) {
  const TemplateTokens tmpl = TemplateTokens::single(bundle.vocab.encode(text));
  Tape tape(bundle.opts.dtype);
  ForwardResult fr;
  switch (bundle.method) {
    case Method::full_finetune:
      fr = forward_plain(tape, bundle.backbone, bundle.head, tmpl);
      break;
    case Method::prompt_tuning:
    case Method::prompt_tuning_134:
      fr = forward_prompt_bank(tape, bundle.backbone, bundle.head, bundle.bank,
                               tmpl, bundle.opts.position);
      break;
    case Method::p_tuning_v2:
      fr = forward_deep_prompt_bank(tape, bundle.backbone, bundle.head,
                                    bundle.deep_bank, tmpl,
                                    bundle.opts.position);
      break;
    default: {
      const SentenceRep rep = make_instance_rep(
          bundle.generator.config(), bundle.backbone, tmpl.ids,
          Vocab::tokenize(text), bundle.opts.vectors.get());
      fr = forward_idpg(tape, bundle.backbone, bundle.head, bundle.generator,
                        tmpl, bundle.opts.position, rep);
      break;
    }
  }
  return fr.h_cls.values();
}

std::vector<PairScore> score_pairs(const ModelBundle& bundle,
                                   const std::vector<Example>& pairs,
                                   const std::vector<std::string>& groups) {
  if (pairs.size() != groups.size()) {
    throw ContractError("score_pairs: " + std::to_string(pairs.size()) +
                        " pairs vs " + std::to_string(groups.size()) +
                        " groups");
  }
  std::vector<PairScore> scored;
  scored.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Example& ex = pairs[i];
    if (!ex.s2) {
      throw ContractError("score_pairs: example " + std::to_string(ex.id) +
                          " has no second sentence");
    }
    PairScore ps;
    ps.pair_id = ex.id;
    ps.group = groups[i];
    ps.score = cosine(encode_sentence(bundle, ex.s1),
                      encode_sentence(bundle, *ex.s2));
    scored.push_back(ps);
  }
  return scored;
}

}  // namespace idpg
