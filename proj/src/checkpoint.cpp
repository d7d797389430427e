#include "idpg/checkpoint.hpp"

#include <fstream>

namespace idpg {

namespace {

constexpr char kMagic[8] = {'I', 'D', 'P', 'G', 'C', 'K', 'P', '1'};

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError(std::string("checkpoint: truncated ") + what);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* what) {
  const auto len = read_pod<std::uint64_t>(is, what);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw ParseError(std::string("checkpoint: truncated ") + what);
  return s;
}

}  // namespace

void Checkpoint::add(const std::string& path, const Tensor& t) {
  Entry e;
  e.path = path;
  e.dtype = t.dtype();
  e.shape = t.shape();
  e.values = t.values();
  entries.push_back(std::move(e));
}

void Checkpoint::add_meta(std::string key, std::string value) {
  meta.emplace_back(std::move(key), std::move(value));
}

const Checkpoint::Entry* Checkpoint::find(const std::string& path) const {
  for (const Entry& e : entries)
    if (e.path == path) return &e;
  return nullptr;
}

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

void Checkpoint::restore(const std::string& path, Tensor& t) const {
  const Entry* e = find(path);
  if (e == nullptr) {
    throw ParseError("checkpoint: no entry for path '" + path + "'");
  }
  if (e->shape != t.shape()) {
    throw DimensionError("checkpoint: entry '" + path + "' has shape " +
                         shape_str(e->shape) + ", tensor expects " +
                         shape_str(t.shape()));
  }
  if (e->dtype != t.dtype()) {
    throw ContractError("checkpoint: entry '" + path + "' is " +
                        dtype_name(e->dtype) + ", tensor expects " +
                        dtype_name(t.dtype()));
  }
  t.fill(e->values);
}

void Checkpoint::save(const std::string& file) const {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw ParseError("checkpoint: cannot open '" + file + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(os, version);
  write_pod<std::uint64_t>(os, config.num_layers);
  write_pod<std::uint64_t>(os, config.hidden);
  write_pod<std::uint64_t>(os, config.heads);
  write_pod<std::uint64_t>(os, config.ffn_inner);
  write_pod<std::uint64_t>(os, config.vocab_size);
  write_pod<std::uint64_t>(os, config.max_seq);
  write_pod<double>(os, config.dropout);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    write_string(os, k);
    write_string(os, v);
  }
  write_pod<std::uint64_t>(os, entries.size());
  for (const Entry& e : entries) {
    write_string(os, e.path);
    write_pod<std::uint8_t>(os, e.dtype == DType::f32 ? 0 : 1);
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) write_pod<std::uint64_t>(os, d);
    if (e.dtype == DType::f32) {
      for (double v : e.values) write_pod<float>(os, static_cast<float>(v));
    } else {
      for (double v : e.values) write_pod<double>(os, v);
    }
  }
  if (!os) throw ParseError("checkpoint: write to '" + file + "' failed");
}

Checkpoint Checkpoint::load(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ParseError("checkpoint: cannot open '" + file + "'");
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(std::begin(magic), std::end(magic), kMagic)) {
    throw ParseError("checkpoint: '" + file + "' has a bad magic header");
  }
  Checkpoint ck;
  ck.version = read_pod<std::uint32_t>(is, "version");
  if (ck.version != 1) {
    throw ParseError("checkpoint: unsupported format version " +
                     std::to_string(ck.version));
  }
  ck.config.num_layers = read_pod<std::uint64_t>(is, "config");
  ck.config.hidden = read_pod<std::uint64_t>(is, "config");
  ck.config.heads = read_pod<std::uint64_t>(is, "config");
  ck.config.ffn_inner = read_pod<std::uint64_t>(is, "config");
  ck.config.vocab_size = read_pod<std::uint64_t>(is, "config");
  ck.config.max_seq = read_pod<std::uint64_t>(is, "config");
  ck.config.dropout = read_pod<double>(is, "config");
  const auto meta_count = read_pod<std::uint32_t>(is, "meta count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = read_string(is, "meta key");
    std::string v = read_string(is, "meta value");
    ck.meta.emplace_back(std::move(k), std::move(v));
  }
  const auto count = read_pod<std::uint64_t>(is, "entry count");
  ck.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.path = read_string(is, "entry path");
    const auto dt = read_pod<std::uint8_t>(is, "entry dtype");
    if (dt > 1) {
      throw ParseError("checkpoint: entry '" + e.path + "' has unknown dtype " +
                       std::to_string(dt));
    }
    e.dtype = dt == 0 ? DType::f32 : DType::f64;
    const auto rank = read_pod<std::uint8_t>(is, "entry rank");
    e.shape.resize(rank);
    for (auto& d : e.shape)
      d = read_pod<std::uint64_t>(is, "entry shape");
    const std::size_t n = shape_size(e.shape);
    e.values.resize(n);
    if (e.dtype == DType::f32) {
      for (double& v : e.values)
        v = static_cast<double>(read_pod<float>(is, "entry values"));
    } else {
      for (double& v : e.values) v = read_pod<double>(is, "entry values");
    }
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace idpg
