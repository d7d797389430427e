#include "idpg/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace idpg {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string strip_comment(const std::string& line) {
  const std::size_t pos = line.find_first_of("#;");
  return pos == std::string::npos ? line : line.substr(0, pos);
}

[[noreturn]] void fail(const std::string& origin, std::size_t line_no,
                       const std::string& what) {
  throw ParseError(origin + " line " + std::to_string(line_no) + ": " + what);
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "keyword-presence") return SynthKind::keyword_presence;
  if (s == "pair-overlap") return SynthKind::pair_overlap;
  if (s == "length-regression") return SynthKind::length_regression;
  throw ParseError("unknown synthetic task '" + s +
                   "' (options: keyword-presence, pair-overlap, "
                   "length-regression)");
}

TaskType parse_task_type(const std::string& s) {
  if (s == "single") return TaskType::single;
  if (s == "pair") return TaskType::pair;
  throw ParseError("unknown task type '" + s + "' (options: single, pair)");
}

Objective parse_objective(const std::string& s) {
  if (s == "classification") return Objective::classification;
  if (s == "regression") return Objective::regression;
  throw ParseError("unknown objective '" + s +
                   "' (options: classification, regression)");
}

// Typed readers over one section; every consumed key is recorded so the
// caller can reject leftovers.
class SectionReader {
 public:
  SectionReader(const IniFile& ini, std::string section)
      : ini_(ini), section_(std::move(section)) {}

  template <typename Fn>
  void take(const std::string& key, Fn&& fn) {
    if (const std::string* v = ini_.find(section_, key)) {
      seen_.insert(key);
      try {
        fn(*v);
      } catch (const ParseError&) {
        throw;
      } catch (const Error& e) {
        throw ParseError(ini_.origin() + ": [" + section_ + "] " + key +
                         ": " + e.what());
      }
    }
  }

  void number(const std::string& key, std::size_t& out) {
    take(key, [&](const std::string& v) { out = to_count(key, v); });
  }
  void real(const std::string& key, double& out) {
    take(key, [&](const std::string& v) {
      std::size_t used = 0;
      double parsed = 0.0;
      try {
        parsed = std::stod(v, &used);
      } catch (const std::exception&) {
        bad(key, v, "a real number");
      }
      if (used != v.size()) bad(key, v, "a real number");
      out = parsed;
    });
  }
  void flag(const std::string& key, bool& out) {
    take(key, [&](const std::string& v) {
      if (v == "true" || v == "1") out = true;
      else if (v == "false" || v == "0") out = false;
      else bad(key, v, "true or false");
    });
  }
  void text(const std::string& key, std::string& out) {
    take(key, [&](const std::string& v) { out = v; });
  }

  void finish() const {
    for (const std::string& key : ini_.keys(section_)) {
      if (!seen_.count(key)) {
        throw ParseError(ini_.origin() + ": unknown key '" + key +
                         "' in [" + section_ + "]");
      }
    }
  }

 private:
  std::uint64_t to_count(const std::string& key, const std::string& v) {
    // stoull silently wraps a leading minus, so gate on digits only
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      bad(key, v, "a nonnegative integer");
    }
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      bad(key, v, "a nonnegative integer");
    }
  }
  [[noreturn]] void bad(const std::string& key, const std::string& v,
                        const std::string& want) {
    throw ParseError(ini_.origin() + ": [" + section_ + "] " + key + " = '" +
                     v + "' is not " + want);
  }

  const IniFile& ini_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

IniFile IniFile::parse(std::istream& is, const std::string& origin) {
  IniFile ini;
  ini.origin_ = origin;
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') fail(origin, line_no, "unterminated section");
      section = trim(body.substr(1, body.size() - 2));
      if (section.empty()) fail(origin, line_no, "empty section name");
      ini.sections_[section]; // a section may be present yet empty
      continue;
    }
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      fail(origin, line_no, "expected key = value, got '" + body + "'");
    }
    if (section.empty()) {
      fail(origin, line_no, "key outside any [section]");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) fail(origin, line_no, "empty key");
    if (!ini.sections_[section].emplace(key, value).second) {
      fail(origin, line_no, "duplicate key '" + key + "' in [" + section + "]");
    }
  }
  return ini;
}

IniFile IniFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file '" + path + "'");
  return parse(in, path);
}

const std::string* IniFile::find(const std::string& section,
                                 const std::string& key) const {
  const auto sit = sections_.find(section);
  if (sit == sections_.end()) return nullptr;
  const auto kit = sit->second.find(key);
  return kit == sit->second.end() ? nullptr : &kit->second;
}

bool IniFile::has_section(const std::string& section) const {
  return sections_.count(section) > 0;
}

std::vector<std::string> IniFile::section_names() const {
  std::vector<std::string> out;
  for (const auto& [name, keys] : sections_) out.push_back(name);
  return out;
}

std::vector<std::string> IniFile::keys(const std::string& section) const {
  std::vector<std::string> out;
  const auto sit = sections_.find(section);
  if (sit == sections_.end()) return out;
  for (const auto& [key, value] : sit->second) out.push_back(key);
  return out;
}

RunConfig RunConfig::from_ini(const IniFile& ini) {
  const std::set<std::string> known = {"task", "method", "dims", "train"};
  for (const std::string& section : ini.section_names()) {
    if (!known.count(section)) {
      throw ParseError(ini.origin() + ": unknown section [" + section + "]");
    }
  }

  RunConfig rc;

  SectionReader task(ini, "task");
  std::string kind_str, type_str, objective_str;
  task.text("kind", kind_str);
  task.number("train_size", rc.train_size);
  task.number("dev_size", rc.dev_size);
  task.number("test_size", rc.test_size);
  task.number("seed", rc.task_seed);
  task.text("train_file", rc.train_file);
  task.text("dev_file", rc.dev_file);
  task.text("test_file", rc.test_file);
  task.text("type", type_str);
  task.text("objective", objective_str);
  task.number("num_labels", rc.schema.num_labels);
  task.text("name", rc.task_name);
  task.finish();

  if (!kind_str.empty() && !rc.train_file.empty()) {
    throw ParseError(ini.origin() +
                     ": [task] sets both kind and train_file; choose a "
                     "synthetic task or files, not both");
  }
  if (!kind_str.empty()) {
    rc.synthetic = true;
    rc.kind = parse_synth_kind(kind_str);
  } else if (!rc.train_file.empty()) {
    rc.synthetic = false;
    if (rc.dev_file.empty() || rc.test_file.empty()) {
      throw ParseError(ini.origin() +
                       ": [task] file mode needs train_file, dev_file and "
                       "test_file");
    }
    if (!type_str.empty()) rc.schema.type = parse_task_type(type_str);
    if (!objective_str.empty()) {
      rc.schema.objective = parse_objective(objective_str);
    }
  } else {
    throw ParseError(ini.origin() +
                     ": [task] needs either kind = <synthetic task> or "
                     "train_file/dev_file/test_file");
  }

  SectionReader method(ini, "method");
  std::string method_str, position_str, source_str, nonlin_str;
  method.text("name", method_str);
  method.text("position", position_str);
  method.text("input_source", source_str);
  method.text("nonlinearity", nonlin_str);
  method.text("vectors_file", rc.vectors_file);
  method.finish();
  if (method_str.empty()) {
    throw ParseError(ini.origin() + ": [method] needs name = <method>");
  }
  rc.method = parse_method(method_str);
  if (!position_str.empty()) {
    rc.bundle.position = parse_prompt_position(position_str);
  }
  if (!source_str.empty()) {
    rc.bundle.input_source = parse_input_source(source_str);
  }
  if (!nonlin_str.empty()) {
    rc.bundle.nonlinearity = parse_nonlinearity(nonlin_str);
  }

  SectionReader dims(ini, "dims");
  dims.number("hidden", rc.bundle.backbone.hidden);
  dims.number("layers", rc.bundle.backbone.num_layers);
  dims.number("heads", rc.bundle.backbone.heads);
  dims.number("ffn", rc.bundle.backbone.ffn_inner);
  dims.number("vocab", rc.bundle.backbone.vocab_size);
  dims.number("max_seq", rc.bundle.backbone.max_seq);
  dims.number("t", rc.bundle.t);
  dims.number("m", rc.bundle.m);
  dims.number("n", rc.bundle.n);
  dims.finish();

  SectionReader train(ini, "train");
  train.real("lr", rc.train.lr);
  train.flag("linear_decay", rc.train.linear_decay);
  train.real("warmup_fraction", rc.train.warmup_fraction);
  train.number("batch_size", rc.train.batch_size);
  train.number("epochs", rc.train.epochs);
  train.real("weight_decay", rc.train.weight_decay);
  train.real("adam_eps", rc.train.adam_eps);
  train.real("beta1", rc.train.adam_beta1);
  train.real("beta2", rc.train.adam_beta2);
  train.flag("freeze_backbone", rc.train.freeze_backbone);
  train.number("seed", rc.train.seed);
  train.number("precision", rc.train.precision);
  train.text("checkpoint", rc.checkpoint_file);
  train.text("log", rc.log_file);
  train.finish();

  rc.bundle.seed = rc.train.seed;
  rc.bundle.dtype = rc.train.dtype();
  rc.train.validate();
  if (rc.method == Method::full_finetune) rc.train.freeze_backbone = false;
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  return from_ini(IniFile::load(path));
}

TaskDataset RunConfig::make_dataset() const {
  if (synthetic) {
    return synth_task(kind, train_size, dev_size, test_size, task_seed,
                      bundle.backbone.max_seq);
  }
  TaskDataset ds;
  ds.name = task_name.empty() ? train_file : task_name;
  ds.type = schema.type;
  ds.objective = schema.objective;
  ds.num_labels = schema.num_labels;
  ds.train = load_tsv(train_file, schema);
  ds.dev = load_tsv(dev_file, schema);
  ds.test = load_tsv(test_file, schema);
  // file ids restart per split; renumber so split ids stay disjoint
  std::size_t next = 0;
  for (std::vector<Example>* split : {&ds.train, &ds.dev, &ds.test}) {
    for (Example& ex : *split) ex.id = next++;
  }
  ds.validate();
  return ds;
}

ModelBundle RunConfig::make_bundle(const TaskDataset& ds) const {
  BundleOptions opts = bundle;
  if (method == Method::m_idpg_phm_glove) {
    if (vectors_file.empty()) {
      throw ConfigError("m-idpg-phm-glove needs [method] vectors_file");
    }
    opts.vectors = std::make_shared<EmbeddingTable>(
        EmbeddingTable::load(vectors_file));
  }
  return ModelBundle::build(method, ds, opts);
}

}  // namespace idpg
