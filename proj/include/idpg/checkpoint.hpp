#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "idpg/nn.hpp"
#include "idpg/tensor.hpp"

namespace idpg {

// On-disk model snapshot: format version, the backbone configuration,
// ordered metadata strings (run config, vocabulary), and ordered tensor
// entries path -> {dtype, shape, row-major values}. Writing is
// deterministic, so identical states produce byte-identical files, and
// the round trip is bit-exact for both precisions.
struct Checkpoint {
  struct Entry {
    std::string path;
    DType dtype = DType::f64;
    Shape shape;
    std::vector<double> values;
  };

  std::uint32_t version = 1;
  TransformerConfig config;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Entry> entries;

  void add(const std::string& path, const Tensor& t);
  void add_meta(std::string key, std::string value);
  const Entry* find(const std::string& path) const;
  const std::string* find_meta(const std::string& key) const;

  // Copies a stored entry into an existing tensor; shape and dtype must
  // match exactly.
  void restore(const std::string& path, Tensor& t) const;

  void save(const std::string& file) const;
  static Checkpoint load(const std::string& file);
};

}  // namespace idpg
