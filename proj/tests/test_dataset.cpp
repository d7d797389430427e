#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "idpg/dataset.hpp"
#include "idpg/nn.hpp"

using idpg::Example;
using idpg::FewShotSplit;
using idpg::Objective;
using idpg::SplitSchema;
using idpg::SynthKind;
using idpg::TaskDataset;
using idpg::TaskType;
using idpg::Vocab;

namespace {

std::string tmp_path(const char* stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

double recompute_jaccard(const Example& ex) {
  const auto ta = Vocab::tokenize(ex.s1);
  const auto tb = Vocab::tokenize(*ex.s2);
  const std::set<std::string> sa(ta.begin(), ta.end());
  const std::set<std::string> sb(tb.begin(), tb.end());
  std::size_t inter = 0;
  for (const auto& t : sa) inter += sb.count(t);
  return static_cast<double>(inter) /
         static_cast<double>(sa.size() + sb.size() - inter);
}

std::map<int, std::size_t> label_counts(const std::vector<Example>& v) {
  std::map<int, std::size_t> counts;
  for (const Example& ex : v) ++counts[ex.label];
  return counts;
}

TaskDataset coin_task(std::size_t zeros, std::size_t ones) {
  TaskDataset ds;
  ds.name = "coin";
  std::size_t id = 0;
  for (std::size_t i = 0; i < zeros; ++i) {
    ds.train.push_back({id, "zero sentence " + std::to_string(id), {}, 0, 0.0});
    ++id;
  }
  for (std::size_t i = 0; i < ones; ++i) {
    ds.train.push_back({id, "one sentence " + std::to_string(id), {}, 1, 1.0});
    ++id;
  }
  return ds;
}

}  // namespace

TEST_CASE("tsv writes and reloads classification pairs unchanged") {
  SplitSchema schema{TaskType::pair, Objective::classification, 2};
  std::vector<Example> examples = {
      {0, "A cat sat", std::string("the mat"), 1, 1.0},
      {1, "dogs bark", std::string("cats meow"), 0, 0.0},
  };
  const std::string path = tmp_path("idpg_pairs.tsv");
  idpg::write_tsv(path, examples, schema);
  const auto back = idpg::load_tsv(path, schema);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == i);
    CHECK(back[i].s1 == examples[i].s1);
    CHECK(*back[i].s2 == *examples[i].s2);
    CHECK(back[i].label == examples[i].label);
  }
  std::filesystem::remove(path);
}

TEST_CASE("tsv regression targets survive a round trip exactly") {
  SplitSchema schema{TaskType::single, Objective::regression, 2};
  std::vector<Example> examples = {
      {0, "short", {}, 0, 0.1},
      {1, "slightly longer text", {}, 0, 1.0 / 3.0},
      {2, "x", {}, 0, -2.5e-7},
  };
  const std::string path = tmp_path("idpg_reg.tsv");
  idpg::write_tsv(path, examples, schema);
  const auto back = idpg::load_tsv(path, schema);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].target == examples[i].target);
    CHECK_FALSE(back[i].s2.has_value());
  }
  std::filesystem::remove(path);
}

TEST_CASE("tsv loader skips comments and blanks and strips CR") {
  const std::string path = tmp_path("idpg_comments.tsv");
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("# header comment\n", f);
    std::fputs("\n", f);
    std::fputs("1\thello world\r\n", f);
    std::fputs("  # indented comment\n", f);
    std::fputs("0\tsecond line\n", f);
    std::fclose(f);
  }
  const auto back =
      idpg::load_tsv(path, {TaskType::single, Objective::classification, 2});
  REQUIRE(back.size() == 2);
  CHECK(back[0].label == 1);
  CHECK(back[0].s1 == "hello world");
  CHECK(back[1].label == 0);
  std::filesystem::remove(path);
}

TEST_CASE("tsv loader reports the offending line") {
  const std::string path = tmp_path("idpg_bad.tsv");
  auto write_and_load = [&](const char* body) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs(body, f);
    std::fclose(f);
    return idpg::load_tsv(path,
                          {TaskType::single, Objective::classification, 2});
  };

  CHECK_THROWS_WITH_AS(write_and_load("1\tok\n0\tok\nonly one column\n"),
                       doctest::Contains("line 3"), idpg::ParseError);
  CHECK_THROWS_WITH_AS(write_and_load("1\tok\nx7\tbad label\n"),
                       doctest::Contains("line 2"), idpg::ParseError);
  CHECK_THROWS_WITH_AS(write_and_load("3\tout of range\n"),
                       doctest::Contains("outside [0, 2)"), idpg::ParseError);
  CHECK_THROWS_AS(idpg::load_tsv(tmp_path("idpg_nonexistent.tsv"),
                                 {TaskType::single,
                                  Objective::classification, 2}),
                  idpg::ParseError);
  std::filesystem::remove(path);

  const std::string reg = tmp_path("idpg_badreg.tsv");
  std::FILE* f = std::fopen(reg.c_str(), "wb");
  REQUIRE(f != nullptr);
  std::fputs("0.5\tok\nnotanumber\tbad\n", f);
  std::fclose(f);
  CHECK_THROWS_WITH_AS(
      idpg::load_tsv(reg, {TaskType::single, Objective::regression, 2}),
      doctest::Contains("line 2"), idpg::ParseError);
  std::filesystem::remove(reg);
}

TEST_CASE("vocab lowercases, ranks by frequency, and reserves ids 0-4") {
  std::vector<Example> examples = {
      {0, "Red red RED blue", {}, 0, 0.0},
      {1, "blue green", {}, 0, 0.0},
      {2, "green red", std::string("azure Blue"), 0, 0.0},
  };
  // counts: red 4, blue 3, green 2, azure 1
  const Vocab v = Vocab::build(examples, 1000);
  REQUIRE(v.tokens() == std::vector<std::string>{"red", "blue", "green", "azure"});
  CHECK(v.size() == Vocab::kNumReserved + 4);

  const auto ids = v.encode("red Blue azure unseen");
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == 5);
  CHECK(ids[1] == 6);
  CHECK(ids[2] == 8);
  CHECK(ids[3] == idpg::kUnkId);

  // frequency ties break lexicographically
  const Vocab tied = Vocab::build({{0, "pear apple pear apple", {}, 0, 0.0}}, 1000);
  CHECK(tied.tokens() == std::vector<std::string>{"apple", "pear"});

  const Vocab truncated = Vocab::build(examples, Vocab::kNumReserved + 2);
  CHECK(truncated.tokens() == std::vector<std::string>{"red", "blue"});
  CHECK(truncated.encode("green")[0] == idpg::kUnkId);

  CHECK_THROWS_AS(Vocab::build(examples, Vocab::kNumReserved),
                  idpg::ConfigError);
}

TEST_CASE("vocab serialization reproduces the same encoding") {
  const auto ds = idpg::synth_task(SynthKind::pair_overlap, 30, 10, 10, 9);
  const Vocab v = Vocab::build(ds.train, 200);
  const Vocab back = Vocab::deserialize(v.serialize());
  CHECK(back.size() == v.size());
  for (const Example& ex : ds.dev) {
    CHECK(back.encode(ex.s1) == v.encode(ex.s1));
    CHECK(back.encode(*ex.s2) == v.encode(*ex.s2));
  }
}

TEST_CASE("few-shot sampling stratifies labels and stays disjoint") {
  const TaskDataset ds = coin_task(50, 50);
  const FewShotSplit split = idpg::few_shot_sample(ds, 32, 16, 7);
  REQUIRE(split.train.size() == 32);
  REQUIRE(split.dev.size() == 16);
  const auto counts = label_counts(split.train);
  CHECK(counts.at(0) == 16);
  CHECK(counts.at(1) == 16);

  std::set<std::size_t> train_ids;
  for (const Example& ex : split.train) train_ids.insert(ex.id);
  CHECK(train_ids.size() == 32);
  for (const Example& ex : split.dev) CHECK(train_ids.count(ex.id) == 0);

  // odd k hands the extra example to the lowest label
  const auto odd = idpg::few_shot_sample(ds, 33, 0, 7);
  const auto odd_counts = label_counts(odd.train);
  CHECK(odd_counts.at(0) == 17);
  CHECK(odd_counts.at(1) == 16);
}

TEST_CASE("few-shot sampling is seed-deterministic") {
  const TaskDataset ds = coin_task(40, 60);
  const auto a = idpg::few_shot_sample(ds, 16, 8, 123);
  const auto b = idpg::few_shot_sample(ds, 16, 8, 123);
  const auto c = idpg::few_shot_sample(ds, 16, 8, 124);
  REQUIRE(a.train.size() == b.train.size());
  bool same = true;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    same = same && a.train[i].id == b.train[i].id;
  for (std::size_t i = 0; i < a.dev.size(); ++i)
    same = same && a.dev[i].id == b.dev[i].id;
  CHECK(same);
  bool differs = a.train.size() != c.train.size();
  for (std::size_t i = 0; !differs && i < a.train.size(); ++i)
    differs = a.train[i].id != c.train[i].id;
  CHECK(differs);
}

TEST_CASE("few-shot sampling redistributes from exhausted label buckets") {
  const TaskDataset ds = coin_task(2, 50);
  const auto split = idpg::few_shot_sample(ds, 10, 0, 3);
  const auto counts = label_counts(split.train);
  CHECK(counts.at(0) == 2);
  CHECK(counts.at(1) == 8);
}

TEST_CASE("few-shot sampling rejects impossible requests") {
  const TaskDataset ds = coin_task(4, 4);
  CHECK_THROWS_AS(idpg::few_shot_sample(ds, 0, 0, 1), idpg::ContractError);
  CHECK_THROWS_AS(idpg::few_shot_sample(ds, 6, 3, 1), idpg::ContractError);
  CHECK_NOTHROW(idpg::few_shot_sample(ds, 6, 2, 1));
}

TEST_CASE("few-shot sampling on regression ignores labels") {
  TaskDataset ds;
  ds.objective = Objective::regression;
  for (std::size_t i = 0; i < 30; ++i)
    ds.train.push_back({i, "t " + std::to_string(i), {}, 0,
                        static_cast<double>(i)});
  const auto split = idpg::few_shot_sample(ds, 8, 4, 5);
  CHECK(split.train.size() == 8);
  CHECK(split.dev.size() == 4);
}

TEST_CASE("synthetic task labels agree with their own definitions") {
  const auto kw = idpg::synth_task(SynthKind::keyword_presence, 60, 20, 20, 11);
  CHECK(kw.type == TaskType::single);
  CHECK(kw.objective == Objective::classification);
  std::size_t positives = 0;
  for (const Example& ex : kw.train) {
    const auto tokens = Vocab::tokenize(ex.s1);
    const bool has =
        std::find(tokens.begin(), tokens.end(), "zoq") != tokens.end();
    CHECK(ex.label == static_cast<int>(has));
    positives += ex.label;
  }
  CHECK(positives == 30);

  const auto pr = idpg::synth_task(SynthKind::pair_overlap, 60, 20, 20, 12);
  CHECK(pr.type == TaskType::pair);
  for (const Example& ex : pr.train) {
    REQUIRE(ex.s2.has_value());
    CHECK(ex.label == static_cast<int>(recompute_jaccard(ex) > 0.5));
  }
  const auto pr_counts = label_counts(pr.train);
  CHECK(pr_counts.at(0) == 30);
  CHECK(pr_counts.at(1) == 30);

  const std::size_t max_seq = 64;
  const auto lr =
      idpg::synth_task(SynthKind::length_regression, 40, 10, 10, 13, max_seq);
  CHECK(lr.objective == Objective::regression);
  for (const Example& ex : lr.train) {
    const double len = static_cast<double>(Vocab::tokenize(ex.s1).size());
    CHECK(ex.target == len / static_cast<double>(max_seq));
    CHECK(len >= 2);
    CHECK(len <= 48);
  }

  // sentences shrink with max_seq so template plus prompt rows still fit
  const auto small =
      idpg::synth_task(SynthKind::length_regression, 40, 10, 10, 13, 32);
  for (const Example& ex : small.train) {
    CHECK(Vocab::tokenize(ex.s1).size() <= 22);
  }
}

TEST_CASE("synthetic tasks are seed-deterministic") {
  for (SynthKind kind : {SynthKind::keyword_presence, SynthKind::pair_overlap,
                         SynthKind::length_regression}) {
    const auto a = idpg::synth_task(kind, 20, 8, 8, 42);
    const auto b = idpg::synth_task(kind, 20, 8, 8, 42);
    const auto c = idpg::synth_task(kind, 20, 8, 8, 43);
    REQUIRE(a.train.size() == b.train.size());
    bool same = true;
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      same = same && a.train[i].s1 == b.train[i].s1 &&
             a.train[i].s2 == b.train[i].s2 &&
             a.train[i].label == b.train[i].label &&
             a.train[i].target == b.train[i].target;
      differs = differs || a.train[i].s1 != c.train[i].s1;
    }
    CHECK(same);
    CHECK(differs);
    CHECK(a.name == idpg::synth_kind_name(kind));
  }
}

TEST_CASE("dataset validation catches shape and label violations") {
  TaskDataset ds;
  ds.name = "broken";
  ds.type = TaskType::single;
  ds.train.push_back({0, "has s2", std::string("oops"), 0, 0.0});
  CHECK_THROWS_AS(ds.validate(), idpg::ConfigError);

  TaskDataset pairless;
  pairless.name = "pairless";
  pairless.type = TaskType::pair;
  pairless.train.push_back({0, "only one", {}, 0, 0.0});
  CHECK_THROWS_AS(pairless.validate(), idpg::ConfigError);

  TaskDataset range;
  range.name = "range";
  range.num_labels = 2;
  range.train.push_back({0, "fine", {}, 2, 0.0});
  CHECK_THROWS_AS(range.validate(), idpg::ConfigError);

  TaskDataset onelabel;
  onelabel.name = "onelabel";
  onelabel.num_labels = 1;
  CHECK_THROWS_AS(onelabel.validate(), idpg::ConfigError);
}

TEST_CASE("classification metrics match hand-computed values") {
  CHECK(idpg::accuracy({1, 0, 1, 1}, {1, 0, 0, 1}) == doctest::Approx(0.75));
  CHECK(idpg::accuracy({0}, {0}) == 1.0);

  // tp=1 fp=1 fn=1: p = r = 0.5
  CHECK(idpg::f1_binary({1, 1, 0, 0}, {1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(idpg::f1_binary({1, 1}, {1, 1}) == 1.0);
  CHECK(idpg::f1_binary({0, 0}, {1, 1}) == 0.0);

  CHECK_THROWS_AS(idpg::accuracy({1}, {1, 0}), idpg::MetricError);
  CHECK_THROWS_AS(idpg::accuracy({}, {}), idpg::MetricError);
  CHECK_THROWS_AS(idpg::f1_binary({1}, {}), idpg::MetricError);
}

TEST_CASE("correlation metrics match hand-computed values") {
  const std::vector<double> x = {1, 2, 3, 4};
  const std::vector<double> y = {2, 4, 6, 8};
  const std::vector<double> yr = {8, 6, 4, 2};
  CHECK(idpg::pearson(x, y) == doctest::Approx(1.0));
  CHECK(idpg::pearson(x, yr) == doctest::Approx(-1.0));
  CHECK(idpg::spearman(x, yr) == doctest::Approx(-1.0));
  // monotone but nonlinear: rank correlation saturates, pearson does not
  const std::vector<double> cubic = {1, 8, 27, 64};
  CHECK(idpg::spearman(x, cubic) == doctest::Approx(1.0));
  CHECK(idpg::pearson(x, cubic) < 1.0);

  // tied pair in b gets the average rank 2.5
  const std::vector<double> tied = {1, 2, 2, 3};
  CHECK(idpg::spearman(x, tied) ==
        doctest::Approx(std::sqrt(0.9)).epsilon(1e-12));

  CHECK_THROWS_AS(idpg::pearson({1.0}, {1.0}), idpg::MetricError);
  CHECK_THROWS_AS(idpg::pearson({1.0, 2.0}, {1.0}), idpg::MetricError);
  CHECK_THROWS_AS(idpg::pearson({1.0, 2.0}, {3.0, 3.0}), idpg::MetricError);
  CHECK_THROWS_AS(idpg::spearman({1.0, 2.0}, {3.0, 3.0}), idpg::MetricError);
}

TEST_CASE("pair swapping doubles train with fresh ids and swapped sides") {
  auto ds = idpg::synth_task(SynthKind::pair_overlap, 10, 4, 4, 21);
  const auto doubled = idpg::swap_pairs_and_concat(ds);
  REQUIRE(doubled.train.size() == 20);
  CHECK(doubled.dev.size() == ds.dev.size());
  CHECK(doubled.test.size() == ds.test.size());
  std::set<std::size_t> ids;
  for (const Example& ex : doubled.train) ids.insert(ex.id);
  CHECK(ids.size() == 20);
  for (std::size_t i = 0; i < 10; ++i) {
    const Example& orig = doubled.train[i];
    const Example& swapped = doubled.train[10 + i];
    CHECK(swapped.s1 == *orig.s2);
    CHECK(*swapped.s2 == orig.s1);
    CHECK(swapped.label == orig.label);
  }

  const auto single = idpg::synth_task(SynthKind::keyword_presence, 4, 2, 2, 1);
  CHECK_THROWS_AS(idpg::swap_pairs_and_concat(single), idpg::ConfigError);
}
