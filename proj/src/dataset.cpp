#include "idpg/dataset.hpp"

#include "idpg/nn.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace idpg {

namespace {

std::string word(const char* prefix, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%s%02zu", prefix, i);
  return buf;
}

std::vector<std::string> pool(const char* prefix, std::size_t count) {
  std::vector<std::string> words;
  words.reserve(count);
  for (std::size_t i = 1; i <= count; ++i) words.push_back(word(prefix, i));
  return words;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> draw_distinct(const std::vector<std::string>& from,
                                       std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(from.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(from[idx[i]]);
  return out;
}

double jaccard(const std::string& a, const std::string& b) {
  const auto ta = Vocab::tokenize(a);
  const auto tb = Vocab::tokenize(b);
  const std::set<std::string> sa(ta.begin(), ta.end());
  const std::set<std::string> sb(tb.begin(), tb.end());
  std::size_t inter = 0;
  for (const auto& t : sa) inter += sb.count(t);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<Example> synth_split(SynthKind kind, std::size_t count,
                                 std::size_t max_seq, Rng& rng) {
  const auto fillers = pool("w", 40);
  const auto left = pool("a", 16);
  const auto right = pool("b", 16);

  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Example ex;
    ex.id = i;
    switch (kind) {
      case SynthKind::keyword_presence: {
        auto tokens = draw_distinct(fillers, 5 + rng.below(4), rng);
        const bool positive = i % 2 == 0;
        if (positive) {
          // presence, not count, sets the label; a second plant (which may
          // land on the same slot) keeps the cue salient in longer sentences
          tokens[rng.below(tokens.size())] = "zoq";
          if (rng.uniform() < 0.5) tokens[rng.below(tokens.size())] = "zoq";
        }
        ex.s1 = join(tokens);
        const auto check = Vocab::tokenize(ex.s1);
        ex.label = std::find(check.begin(), check.end(), "zoq") != check.end();
        break;
      }
      case SynthKind::pair_overlap: {
        // s1 always draws from the left pool; a near-copy shares its tokens
        // while a fresh right-pool draw shares none, so the overlap label is
        // carried by token identity rather than by counting repeats
        auto s1 = draw_distinct(left, 4 + rng.below(2), rng);
        std::vector<std::string> s2;
        if (i % 2 == 0) {
          s2 = s1;
          rng.shuffle(s2);
          if (rng.uniform() < 0.5) {
            // swap one token for an unused one; overlap stays above 1/2
            std::vector<std::string> unused;
            for (const auto& w : left)
              if (std::find(s1.begin(), s1.end(), w) == s1.end())
                unused.push_back(w);
            s2[rng.below(s2.size())] = unused[rng.below(unused.size())];
          }
        } else {
          s2 = draw_distinct(right, 4 + rng.below(2), rng);
        }
        ex.s1 = join(s1);
        ex.s2 = join(s2);
        ex.label = jaccard(ex.s1, *ex.s2) > 0.5;
        break;
      }
      case SynthKind::length_regression: {
        // leave room for [CLS]/[EOS] plus spliced prompt rows
        const std::size_t cap =
            max_seq > 12 ? std::min<std::size_t>(48, max_seq - 10) : 2;
        const std::size_t len = 2 + rng.below(cap - 1);
        std::vector<std::string> tokens;
        tokens.reserve(len);
        for (std::size_t j = 0; j < len; ++j)
          tokens.push_back(fillers[rng.below(fillers.size())]);
        ex.s1 = join(tokens);
        ex.target = static_cast<double>(Vocab::tokenize(ex.s1).size()) /
                    static_cast<double>(max_seq);
        break;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

int parse_int_label(const std::string& field, std::size_t num_labels,
                    std::size_t line_no) {
  std::size_t pos = 0;
  int value = 0;
  try {
    value = std::stoi(field, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != field.size() || field.empty()) {
    throw ParseError("tsv line " + std::to_string(line_no) +
                     ": label '" + field + "' is not an integer");
  }
  if (value < 0 || static_cast<std::size_t>(value) >= num_labels) {
    throw ParseError("tsv line " + std::to_string(line_no) + ": label " +
                     std::to_string(value) + " outside [0, " +
                     std::to_string(num_labels) + ")");
  }
  return value;
}

double parse_target(const std::string& field, std::size_t line_no) {
  std::size_t pos = 0;
  double value = 0.0;
  try {
    value = std::stod(field, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != field.size() || field.empty()) {
    throw ParseError("tsv line " + std::to_string(line_no) + ": target '" +
                     field + "' is not a number");
  }
  return value;
}

}  // namespace

void TaskDataset::validate() const {
  if (objective == Objective::classification && num_labels < 2) {
    throw ConfigError("dataset " + name + ": classification needs >= 2 labels");
  }
  auto check_split = [this](const std::vector<Example>& split, const char* which) {
    for (const Example& ex : split) {
      if ((type == TaskType::pair) != ex.s2.has_value()) {
        throw ConfigError("dataset " + name + ": " + which + " example " +
                          std::to_string(ex.id) +
                          (ex.s2 ? " has an s2 on a single-sentence task"
                                 : " lacks s2 on a pair task"));
      }
      if (objective == Objective::classification &&
          (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_labels)) {
        throw ConfigError("dataset " + name + ": " + which + " example " +
                          std::to_string(ex.id) + " label " +
                          std::to_string(ex.label) + " outside [0, " +
                          std::to_string(num_labels) + ")");
      }
    }
  };
  check_split(train, "train");
  check_split(dev, "dev");
  check_split(test, "test");
}

std::vector<std::string> Vocab::tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocab Vocab::build(const std::vector<Example>& examples, std::size_t max_size) {
  if (max_size <= kNumReserved) {
    throw ConfigError("vocab: max_size " + std::to_string(max_size) +
                      " leaves no room after " + std::to_string(kNumReserved) +
                      " reserved ids");
  }
  std::map<std::string, std::size_t> counts;
  for (const Example& ex : examples) {
    for (const auto& t : tokenize(ex.s1)) ++counts[t];
    if (ex.s2) {
      for (const auto& t : tokenize(*ex.s2)) ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(),
                                                           counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  Vocab v;
  const std::size_t limit = max_size - kNumReserved;
  for (const auto& [token, count] : ordered) {
    if (v.tokens_.size() == limit) break;
    v.index_[token] = kNumReserved + v.tokens_.size();
    v.tokens_.push_back(token);
  }
  return v;
}

std::vector<std::size_t> Vocab::encode(const std::string& text) const {
  std::vector<std::size_t> ids;
  for (const auto& t : tokenize(text)) {
    auto it = index_.find(t);
    ids.push_back(it == index_.end() ? kUnkId : it->second);
  }
  return ids;
}

std::string Vocab::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocab Vocab::deserialize(const std::string& data) {
  Vocab v;
  std::istringstream is(data);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    v.index_[line] = kNumReserved + v.tokens_.size();
    v.tokens_.push_back(line);
  }
  return v;
}

std::vector<Example> load_tsv(const std::string& path, const SplitSchema& schema) {
  std::ifstream is(path);
  if (!is) throw ParseError("tsv: cannot open '" + path + "'");
  const std::size_t want_cols = schema.type == TaskType::pair ? 3 : 2;
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != want_cols) {
      throw ParseError("tsv line " + std::to_string(line_no) + ": expected " +
                       std::to_string(want_cols) + " tab-separated columns, got " +
                       std::to_string(cols.size()));
    }
    Example ex;
    ex.id = out.size();
    if (schema.objective == Objective::classification) {
      ex.label = parse_int_label(cols[0], schema.num_labels, line_no);
      ex.target = ex.label;
    } else {
      ex.target = parse_target(cols[0], line_no);
    }
    ex.s1 = cols[1];
    if (schema.type == TaskType::pair) ex.s2 = cols[2];
    out.push_back(std::move(ex));
  }
  return out;
}

void write_tsv(const std::string& path, const std::vector<Example>& examples,
               const SplitSchema& schema) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ParseError("tsv: cannot open '" + path + "' for writing");
  for (const Example& ex : examples) {
    if (schema.objective == Objective::classification) {
      os << ex.label;
    } else {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", ex.target);
      os << buf;
    }
    os << '\t' << ex.s1;
    if (schema.type == TaskType::pair) {
      os << '\t' << (ex.s2 ? *ex.s2 : std::string());
    }
    os << '\n';
  }
  if (!os) throw ParseError("tsv: write to '" + path + "' failed");
}

FewShotSplit few_shot_sample(const TaskDataset& ds, std::size_t k,
                             std::size_t dev_size, std::uint64_t seed) {
  if (k == 0) throw ContractError("few_shot_sample: k must be positive");
  if (k + dev_size > ds.train.size()) {
    throw ContractError("few_shot_sample: k + dev_size = " +
                        std::to_string(k + dev_size) + " exceeds train size " +
                        std::to_string(ds.train.size()));
  }
  std::map<int, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const int key =
        ds.objective == Objective::classification ? ds.train[i].label : 0;
    buckets[key].push_back(i);
  }
  Rng rng(seed);
  for (auto& [label, idx] : buckets) rng.shuffle(idx);

  const std::size_t nb = buckets.size();
  std::vector<std::vector<std::size_t>*> order;
  order.reserve(nb);
  for (auto& [label, idx] : buckets) order.push_back(&idx);

  std::vector<std::size_t> quota(nb, k / nb);
  for (std::size_t b = 0; b < k % nb; ++b) ++quota[b];

  std::vector<std::size_t> taken_per(nb, 0);
  std::size_t taken = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    taken_per[b] = std::min(quota[b], order[b]->size());
    taken += taken_per[b];
  }
  // buckets smaller than their quota push the shortfall round-robin onto
  // the ones that still have examples
  std::size_t cursor = 0;
  while (taken < k) {
    if (taken_per[cursor] < order[cursor]->size()) {
      ++taken_per[cursor];
      ++taken;
    }
    cursor = (cursor + 1) % nb;
  }

  FewShotSplit split;
  std::vector<bool> used(ds.train.size(), false);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < taken_per[b]; ++i) {
      split.train.push_back(ds.train[(*order[b])[i]]);
      used[(*order[b])[i]] = true;
    }
  }
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    if (!used[i]) rest.push_back(i);
  rng.shuffle(rest);
  for (std::size_t i = 0; i < dev_size; ++i)
    split.dev.push_back(ds.train[rest[i]]);
  return split;
}

const char* synth_kind_name(SynthKind kind) {
  switch (kind) {
    case SynthKind::keyword_presence: return "keyword-presence";
    case SynthKind::pair_overlap: return "pair-overlap";
    case SynthKind::length_regression: return "length-regression";
  }
  return "unknown";
}

TaskDataset synth_task(SynthKind kind, std::size_t train_size,
                       std::size_t dev_size, std::size_t test_size,
                       std::uint64_t seed, std::size_t max_seq) {
  TaskDataset ds;
  ds.name = synth_kind_name(kind);
  ds.type = kind == SynthKind::pair_overlap ? TaskType::pair : TaskType::single;
  ds.objective = kind == SynthKind::length_regression
                     ? Objective::regression
                     : Objective::classification;
  ds.num_labels = 2;
  Rng rng(seed);
  ds.train = synth_split(kind, train_size, max_seq, rng);
  ds.dev = synth_split(kind, dev_size, max_seq, rng);
  ds.test = synth_split(kind, test_size, max_seq, rng);
  ds.validate();
  return ds;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.size() != gold.size()) {
    throw MetricError("accuracy: " + std::to_string(pred.size()) +
                      " predictions vs " + std::to_string(gold.size()) +
                      " golds");
  }
  if (pred.empty()) throw MetricError("accuracy: empty inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double f1_binary(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.size() != gold.size()) {
    throw MetricError("f1: " + std::to_string(pred.size()) +
                      " predictions vs " + std::to_string(gold.size()) +
                      " golds");
  }
  if (pred.empty()) throw MetricError("f1: empty inputs");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && gold[i] == 1) ++tp;
    if (pred[i] == 1 && gold[i] != 1) ++fp;
    if (pred[i] != 1 && gold[i] == 1) ++fn;
  }
  const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw MetricError("pearson: size mismatch " + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw MetricError("pearson: needs at least 2 points");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) {
    throw MetricError("pearson: zero variance input");
  }
  return cov / std::sqrt(va * vb);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size(), 0.0);
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw MetricError("spearman: size mismatch " + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw MetricError("spearman: needs at least 2 points");
  return pearson(average_ranks(a), average_ranks(b));
}

TaskDataset swap_pairs_and_concat(const TaskDataset& ds) {
  if (ds.type != TaskType::pair) {
    throw ConfigError("swap_pairs_and_concat: '" + ds.name +
                      "' is not a pair task");
  }
  TaskDataset out = ds;
  std::size_t next_id = 0;
  for (const Example& ex : ds.train) next_id = std::max(next_id, ex.id + 1);
  for (const Example& ex : ds.train) {
    Example sw = ex;
    sw.id = next_id++;
    sw.s1 = *ex.s2;
    sw.s2 = ex.s1;
    out.train.push_back(std::move(sw));
  }
  return out;
}

}  // namespace idpg
