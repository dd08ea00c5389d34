#pragma once

#include "ost/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace ost {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// A checkpoint is a pair of files sharing a prefix: <prefix>.json holds the
// manifest (name, shape, byte offset per parameter, in file order) and
// <prefix>.bin holds the values as flat little-endian float64.
void save_checkpoint(const std::string& prefix, const std::vector<NamedParam>& params);

// Loads values into `params`, matching by name. Throws if a name is missing,
// a shape differs, or the binary payload size disagrees with the manifest.
void load_checkpoint(const std::string& prefix, std::vector<NamedParam>& params);

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::uint64_t byte_offset = 0;
};

std::vector<ManifestEntry> read_checkpoint_manifest(const std::string& prefix);

Index checkpoint_element_count(const std::string& prefix);

}  // namespace ost
