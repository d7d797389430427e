#include <cmath>

#include "doctest.h"
#include "idpg/analysis.hpp"

using namespace idpg;

namespace {

std::vector<PairScore> abab() {
  return {
      {0, "A", 0.9},
      {1, "B", 0.5},
      {2, "A", 0.1},
      {3, "B", -0.2},
  };
}

TransformerConfig mini_backbone() {
  TransformerConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn_inner = 32;
  cfg.vocab_size = 96;
  cfg.max_seq = 32;
  return cfg;
}

BundleOptions mini_options() {
  BundleOptions opts;
  opts.backbone = mini_backbone();
  opts.t = 2;
  opts.m = 8;
  opts.n = 4;
  return opts;
}

}  // namespace

TEST_CASE("cosine matches hand values") {
  const std::vector<double> x{0.3, -1.2, 2.5};
  CHECK(cosine(x, x) == doctest::Approx(1.0));
  CHECK(cosine({1, 0}, {0, 1}) == doctest::Approx(0.0));
  CHECK(cosine({1, 2}, {3, 4}) == doctest::Approx(0.98386991).epsilon(1e-8));
  CHECK(cosine({1, 1}, {-1, -1}) == doctest::Approx(-1.0));
}

TEST_CASE("cosine rejects zero vectors and mismatched lengths") {
  CHECK_THROWS_AS(cosine({0, 0}, {1, 2}), MetricError);
  CHECK_THROWS_AS(cosine({1, 2}, {0, 0}), MetricError);
  CHECK_THROWS_AS(cosine({1, 2, 3}, {1, 2}), DimensionError);
}

TEST_CASE("top-k over all pairs returns the full group sizes") {
  const RankDistribution dist = topk_distribution(abab(), 4);
  CHECK(dist.k == 4);
  CHECK(dist.counts.at("A") == 2);
  CHECK(dist.counts.at("B") == 2);
}

TEST_CASE("top-2 of a hand-sorted list keeps one pair per group") {
  std::vector<PairScore> pairs = {
      {0, "A", 0.9}, {1, "B", 0.5}, {2, "A", 0.1}};
  const RankDistribution dist = topk_distribution(pairs, 2);
  CHECK(dist.counts.at("A") == 1);
  CHECK(dist.counts.at("B") == 1);
}

TEST_CASE("equal scores rank by ascending pair id") {
  std::vector<PairScore> pairs;
  for (std::size_t i = 0; i < 5; ++i) {
    pairs.push_back({4 - i, "g" + std::to_string(4 - i), 0.7});
  }
  const RankDistribution dist = topk_distribution(pairs, 2);
  CHECK(dist.counts.size() == 2);
  CHECK(dist.counts.at("g0") == 1);
  CHECK(dist.counts.at("g1") == 1);
}

TEST_CASE("top-k counts always sum to k") {
  Rng rng(7);
  std::vector<PairScore> pairs;
  for (std::size_t i = 0; i < 40; ++i) {
    pairs.push_back({i, "g" + std::to_string(rng.next_u64() % 4),
                     rng.normal()});
  }
  for (std::size_t k : {0, 1, 7, 39, 40}) {
    const RankDistribution dist = topk_distribution(pairs, k);
    std::size_t total = 0;
    for (const auto& [group, count] : dist.counts) total += count;
    CHECK(total == k);
  }
  CHECK_THROWS_AS(topk_distribution(pairs, 41), ContractError);
}

TEST_CASE("gold groups bucket classification by label and regression by quartile") {
  std::vector<Example> cls(4);
  for (std::size_t i = 0; i < 4; ++i) {
    cls[i].id = i;
    cls[i].label = static_cast<int>(i % 2);
  }
  CHECK(gold_groups(cls, Objective::classification) ==
        std::vector<std::string>{"label=0", "label=1", "label=0", "label=1"});

  std::vector<Example> reg(8);
  for (std::size_t i = 0; i < 8; ++i) {
    reg[i].id = i;
    reg[i].target = static_cast<double>(8 - i); // 8,7,...,1
  }
  const auto groups = gold_groups(reg, Objective::regression);
  CHECK(groups == std::vector<std::string>{"q4", "q4", "q3", "q3", "q2", "q2",
                                           "q1", "q1"});
}

TEST_CASE("pair scoring is deterministic, so identical models give identical rankings") {
  const TaskDataset ds = synth_task(SynthKind::pair_overlap, 24, 12, 12, 21);
  ModelBundle bundle = ModelBundle::build(Method::m_idpg_phm, ds, mini_options());
  const auto groups = gold_groups(ds.test, ds.objective);

  const auto a = score_pairs(bundle, ds.test, groups);
  const auto b = score_pairs(bundle, ds.test, groups);
  REQUIRE(a.size() == ds.test.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].pair_id == b[i].pair_id);
    CHECK(a[i].score == b[i].score);
    CHECK(std::abs(a[i].score) <= 1.0 + 1e-9);
  }
  for (std::size_t k : {4, 8, 12}) {
    const RankDistribution da = topk_distribution(a, k);
    const RankDistribution db = topk_distribution(b, k);
    CHECK(da.counts == db.counts);
  }
}

TEST_CASE("prompted and plain encoders produce different sentence representations") {
  const TaskDataset ds = synth_task(SynthKind::pair_overlap, 24, 8, 8, 22);
  BundleOptions opts = mini_options();
  ModelBundle prompted = ModelBundle::build(Method::m_idpg_phm, ds, opts);
  ModelBundle plain = ModelBundle::build(Method::full_finetune, ds, opts);

  const std::string text = ds.test.front().s1;
  const auto h_prompted = encode_sentence(prompted, text);
  const auto h_plain = encode_sentence(plain, text);
  REQUIRE(h_prompted.size() == h_plain.size());
  double delta = 0.0;
  for (std::size_t i = 0; i < h_prompted.size(); ++i) {
    delta += std::abs(h_prompted[i] - h_plain[i]);
  }
  CHECK(delta > 1e-6);
}

TEST_CASE("pair scoring rejects misaligned groups and missing sentences") {
  const TaskDataset ds = synth_task(SynthKind::pair_overlap, 16, 4, 4, 23);
  ModelBundle bundle = ModelBundle::build(Method::prompt_tuning, ds, mini_options());
  auto groups = gold_groups(ds.test, ds.objective);
  groups.pop_back();
  CHECK_THROWS_AS(score_pairs(bundle, ds.test, groups), ContractError);

  std::vector<Example> broken = ds.test;
  groups = gold_groups(broken, ds.objective);
  broken.back().s2.reset();
  CHECK_THROWS_AS(score_pairs(bundle, broken, groups), ContractError);
}
