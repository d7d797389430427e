#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idpg/common.hpp"

namespace idpg {

enum class TaskType { single, pair };
enum class Objective { classification, regression };

struct Example {
  std::size_t id = 0;
  std::string s1;
  std::optional<std::string> s2;
  int label = 0;
  double target = 0.0;
};

struct TaskDataset {
  std::string name;
  TaskType type = TaskType::single;
  Objective objective = Objective::classification;
  std::size_t num_labels = 2;
  std::vector<Example> train, dev, test;

  void validate() const;
};

// Lowercasing whitespace tokenizer over a train-built vocabulary. Ids 0-4
// are reserved ([CLS] [UNK] [SEP] [EOS] [PAD]); unseen tokens map to [UNK].
class Vocab {
 public:
  static std::vector<std::string> tokenize(const std::string& text);
  // Most frequent tokens first (ties lexicographic), truncated to
  // max_size total ids including the reserved block.
  static Vocab build(const std::vector<Example>& examples, std::size_t max_size);

  std::vector<std::size_t> encode(const std::string& text) const;
  std::size_t size() const { return kNumReserved + tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string serialize() const;
  static Vocab deserialize(const std::string& data);

  static constexpr std::size_t kNumReserved = 5;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

struct SplitSchema {
  TaskType type = TaskType::single;
  Objective objective = Objective::classification;
  std::size_t num_labels = 2;
};

// Tab-separated `label s1 [s2]`; lines starting with '#' are comments.
std::vector<Example> load_tsv(const std::string& path, const SplitSchema& schema);
void write_tsv(const std::string& path, const std::vector<Example>& examples,
               const SplitSchema& schema);

struct FewShotSplit {
  std::vector<Example> train, dev;
};

// Deterministic K-shot sample plus a disjoint dev set. Classification
// stratifies by label with the remainder spread round-robin over the
// label buckets in ascending label order; regression samples one bucket.
FewShotSplit few_shot_sample(const TaskDataset& ds, std::size_t k,
                             std::size_t dev_size, std::uint64_t seed);

enum class SynthKind { keyword_presence, pair_overlap, length_regression };

// Self-labeling toy tasks: a trigger-word detector, a token-overlap pair
// classifier (Jaccard > 0.5), and sequence-length regression scaled by
// max_seq.
TaskDataset synth_task(SynthKind kind, std::size_t train_size,
                       std::size_t dev_size, std::size_t test_size,
                       std::uint64_t seed, std::size_t max_seq = 64);

const char* synth_kind_name(SynthKind kind);

double accuracy(const std::vector<int>& pred, const std::vector<int>& gold);
double f1_binary(const std::vector<int>& pred, const std::vector<int>& gold);
double pearson(const std::vector<double>& a, const std::vector<double>& b);
// Ties receive average ranks.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Appends an (s2, s1)-swapped copy of every train example with fresh ids;
// dev and test are left alone.
TaskDataset swap_pairs_and_concat(const TaskDataset& ds);

}  // namespace idpg
