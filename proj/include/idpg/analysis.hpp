#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "idpg/trainer.hpp"

namespace idpg {

// One sentence pair scored by a model: cosine similarity of the two
// sentences' [CLS] representations, each sentence encoded alone.
struct PairScore {
  std::size_t pair_id = 0;
  std::string group; // gold bucket the pair belongs to
  double score = 0.0;
};

// How many of the top-k ranked pairs fall into each gold group.
struct RankDistribution {
  std::size_t k = 0;
  std::map<std::string, std::size_t> counts;
};

// u.v / (|u||v|); lengths must match and both vectors must be nonzero.
double cosine(const std::vector<double>& u, const std::vector<double>& v);

// Sorts descending by score, ties broken by ascending pair id, and counts
// the gold groups of the first k entries. Sum of counts == k.
RankDistribution topk_distribution(std::vector<PairScore> pairs,
                                   std::size_t k);

// Gold buckets for the ranking analysis: classification pairs group by
// label; regression pairs by gold-target quartile, q1 lowest to q4
// highest.
std::vector<std::string> gold_groups(const std::vector<Example>& pairs,
                                     Objective objective);

// h_CLS of one sentence encoded alone under the bundle's method; prompt
// machinery stays active for prompted methods.
std::vector<double> encode_sentence(const ModelBundle& bundle,
                                    const std::string& text);

// Scores every pair with cosine(h_CLS(s1), h_CLS(s2)). groups must align
// with pairs; every example needs s2.
std::vector<PairScore> score_pairs(const ModelBundle& bundle,
                                   const std::vector<Example>& pairs,
                                   const std::vector<std::string>& groups);

}  // namespace idpg
