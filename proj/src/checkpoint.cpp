#include "mpdt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include "json.hpp"

namespace mpdt {

namespace {

using nlohmann::json;

void append_f32_le(std::string& out, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float read_f32_le(const std::string& blob, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + i])) << (8 * i);
  }
  float value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint file " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset;
  std::size_t count;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path,
                                         std::size_t blob_size) {
  json doc;
  try {
    doc = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw CheckpointError("malformed checkpoint manifest " + manifest_path.string() + ": " +
                          e.what());
  }
  if (doc.value("dtype", "") != "float32" || doc.value("byte_order", "") != "little") {
    throw CheckpointError("checkpoint manifest must declare float32 little-endian data");
  }
  std::vector<ManifestEntry> out;
  try {
    for (const auto& p : doc.at("parameters")) {
      ManifestEntry e{p.at("name").get<std::string>(), p.at("shape").get<Shape>(),
                      p.at("offset").get<std::size_t>(), p.at("count").get<std::size_t>()};
      if (e.count != shape_numel(e.shape)) {
        throw CheckpointError("parameter '" + e.name + "': count does not match shape " +
                              shape_str(e.shape));
      }
      if (e.offset + 4 * e.count > blob_size) {
        throw CheckpointError("parameter '" + e.name + "' extends past end of blob");
      }
      out.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest entry: " + std::string(e.what()));
  }
  return out;
}

}  // namespace

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& blob_path) {
  std::string blob;
  blob.reserve(4 * store.total_elements());
  json params = json::array();
  for (const auto& [name, t] : store.entries()) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()},
                      {"count", t.numel()}});
    for (T v : t.values()) append_f32_le(blob, static_cast<float>(v));
  }
  json manifest = {{"format", "mpdt-checkpoint-v1"},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"blob", blob_path.filename().string()},
                   {"parameters", std::move(params)}};

  std::ofstream blob_out(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob_out) throw CheckpointError("cannot write " + blob_path.string());
  blob_out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream man_out(manifest_path, std::ios::trunc);
  if (!man_out) throw CheckpointError("cannot write " + manifest_path.string());
  man_out << manifest.dump(2) << '\n';
}

ParamStore<float> load_checkpoint(const std::filesystem::path& manifest_path,
                                  const std::filesystem::path& blob_path) {
  const std::string blob = read_file(blob_path);
  ParamStore<float> store;
  for (const auto& e : read_manifest(manifest_path, blob.size())) {
    std::vector<float> values(e.count);
    for (std::size_t i = 0; i < e.count; ++i) values[i] = read_f32_le(blob, e.offset + 4 * i);
    store.add(e.name, Tensor<float>(e.shape, std::move(values)));
  }
  return store;
}

template <typename T>
void load_checkpoint_into(ParamStore<T>& store, const std::filesystem::path& manifest_path,
                          const std::filesystem::path& blob_path) {
  const std::string blob = read_file(blob_path);
  const auto manifest = read_manifest(manifest_path, blob.size());
  if (manifest.size() != store.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(manifest.size()) +
                          " parameters, model expects " + std::to_string(store.size()));
  }
  for (std::size_t p = 0; p < manifest.size(); ++p) {
    const auto& e = manifest[p];
    auto& [name, t] = store.entries()[p];
    if (e.name != name || e.shape != t.shape()) {
      throw CheckpointError("checkpoint parameter '" + e.name + "' " + shape_str(e.shape) +
                            " does not match model parameter '" + name + "' " +
                            shape_str(t.shape()));
    }
    auto values = t.values_mut();
    for (std::size_t i = 0; i < e.count; ++i) {
      values[i] = static_cast<T>(read_f32_le(blob, e.offset + 4 * i));
    }
  }
}

template void save_checkpoint<float>(const ParamStore<float>&, const std::filesystem::path&,
                                     const std::filesystem::path&);
template void save_checkpoint<double>(const ParamStore<double>&, const std::filesystem::path&,
                                      const std::filesystem::path&);
template void load_checkpoint_into<float>(ParamStore<float>&, const std::filesystem::path&,
                                          const std::filesystem::path&);
template void load_checkpoint_into<double>(ParamStore<double>&, const std::filesystem::path&,
                                           const std::filesystem::path&);

}  // namespace mpdt
