#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "idpg/trainer.hpp"

namespace idpg {

// Minimal INI reader: [section] headers, key = value lines, '#' or ';'
// comments, whitespace trimmed. Duplicate keys and keys outside any
// section are parse errors carrying the line number.
class IniFile {
 public:
  static IniFile parse(std::istream& is, const std::string& origin);
  static IniFile load(const std::string& path);

  const std::string* find(const std::string& section,
                          const std::string& key) const;
  bool has_section(const std::string& section) const;
  std::vector<std::string> section_names() const;
  std::vector<std::string> keys(const std::string& section) const;
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// A full run description: where the data comes from ([task]), which
// method with what generator settings ([method]), backbone and generator
// dimensions ([dims]), and the optimizer surface ([train]). Unknown
// sections or keys are rejected so typos cannot silently fall back to
// defaults.
struct RunConfig {
  // [task] either a synthetic generator ...
  bool synthetic = true;
  SynthKind kind = SynthKind::keyword_presence;
  std::size_t train_size = 64, dev_size = 32, test_size = 32;
  std::uint64_t task_seed = 1;
  // ... or explicit TSV files under a schema.
  std::string train_file, dev_file, test_file;
  SplitSchema schema;
  std::string task_name;

  Method method = Method::m_idpg_phm;
  BundleOptions bundle; // backbone dims, t/m/n, position, seed, dtype
  std::string vectors_file;

  TrainConfig train;
  std::string checkpoint_file;
  std::string log_file;

  static RunConfig from_ini(const IniFile& ini);
  static RunConfig load(const std::string& path);

  TaskDataset make_dataset() const;
  // Loads vectors_file when the method needs it.
  ModelBundle make_bundle(const TaskDataset& ds) const;
};

}  // namespace idpg
