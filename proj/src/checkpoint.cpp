#include "ost/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace ost {

namespace {

using nlohmann::json;

std::string manifest_path(const std::string& prefix) { return prefix + ".json"; }
std::string payload_path(const std::string& prefix) { return prefix + ".bin"; }

}  // namespace

void save_checkpoint(const std::string& prefix, const std::vector<NamedParam>& params) {
  json manifest = json::array();
  std::ofstream bin(payload_path(prefix), std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open " + payload_path(prefix) + " for writing");
  std::uint64_t offset = 0;
  for (const NamedParam& p : params) {
    const ArrayX& v = p.tensor.values();
    manifest.push_back({{"name", p.name},
                        {"shape", p.tensor.shape()},
                        {"byte_offset", offset}});
    bin.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
    offset += static_cast<std::uint64_t>(v.size()) * sizeof(double);
  }
  if (!bin) throw std::runtime_error("failed writing " + payload_path(prefix));
  bin.close();

  std::ofstream mf(manifest_path(prefix), std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot open " + manifest_path(prefix) + " for writing");
  mf << manifest.dump(2) << '\n';
  if (!mf) throw std::runtime_error("failed writing " + manifest_path(prefix));
}

std::vector<ManifestEntry> read_checkpoint_manifest(const std::string& prefix) {
  std::ifstream mf(manifest_path(prefix));
  if (!mf) throw std::runtime_error("cannot open " + manifest_path(prefix));
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path(prefix) + ": " + e.what());
  }
  if (!manifest.is_array()) throw std::runtime_error("manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  out.reserve(manifest.size());
  for (const json& item : manifest) {
    ManifestEntry e;
    e.name = item.at("name").get<std::string>();
    for (const json& d : item.at("shape")) e.shape.push_back(d.get<Index>());
    e.byte_offset = item.at("byte_offset").get<std::uint64_t>();
    out.push_back(std::move(e));
  }
  return out;
}

Index checkpoint_element_count(const std::string& prefix) {
  Index total = 0;
  for (const ManifestEntry& e : read_checkpoint_manifest(prefix)) total += shape_numel(e.shape);
  return total;
}

void load_checkpoint(const std::string& prefix, std::vector<NamedParam>& params) {
  auto manifest = read_checkpoint_manifest(prefix);

  std::ifstream bin(payload_path(prefix), std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + payload_path(prefix));
  bin.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(bin.tellg());
  std::uint64_t expect = 0;
  for (const ManifestEntry& e : manifest) {
    expect += static_cast<std::uint64_t>(shape_numel(e.shape)) * sizeof(double);
  }
  if (file_size != expect) {
    throw std::runtime_error("checkpoint payload is " + std::to_string(file_size) +
                             " bytes, manifest expects " + std::to_string(expect));
  }

  for (NamedParam& p : params) {
    const ManifestEntry* entry = nullptr;
    for (const ManifestEntry& e : manifest) {
      if (e.name == p.name) {
        entry = &e;
        break;
      }
    }
    if (!entry) throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
    if (entry->shape != p.tensor.shape()) {
      throw std::runtime_error("parameter '" + p.name + "' has shape " +
                               shape_str(p.tensor.shape()) + " but checkpoint holds " +
                               shape_str(entry->shape));
    }
    const Index n = shape_numel(entry->shape);
    bin.seekg(static_cast<std::streamoff>(entry->byte_offset));
    bin.read(reinterpret_cast<char*>(p.tensor.leaf_values().data()),
             static_cast<std::streamsize>(n * sizeof(double)));
    if (!bin) throw std::runtime_error("failed reading values for '" + p.name + "'");
  }
}

}  // namespace ost
