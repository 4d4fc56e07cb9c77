#include "mvdiff/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "mvdiff/error.hpp"

namespace mvdiff::numerics {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& dir, const ParameterStore& params, const nlohmann::json& hyperparameters) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["schema_version"] = kCheckpointSchema;
  manifest["dtype"] = "float32";
  manifest["parameters"] = nlohmann::json::array();
  for (const auto& p : params) {
    manifest["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape()}, {"trainable", p.trainable}});
  }
  manifest["hyperparameters"] = hyperparameters;

  std::ofstream weights(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!weights) throw Error("cannot write " + (dir / "weights.bin").string());
  for (const auto& p : params) {
    for (double v : p.value.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      weights.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
  if (!weights) throw Error("short write to " + (dir / "weights.bin").string());

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, std::string("checkpoint manifest: ") + e.what());
  }
  if (manifest.value("schema_version", 0) != kCheckpointSchema) {
    throw ValidationError("checkpoint: unsupported schema version");
  }
  if (manifest.value("dtype", "") != "float32") throw ValidationError("checkpoint: unsupported dtype");

  std::ifstream weights(dir / "weights.bin", std::ios::binary);
  if (!weights) throw Error("cannot read " + (dir / "weights.bin").string());

  Checkpoint ck;
  ck.hyperparameters = manifest.value("hyperparameters", nlohmann::json::object());
  for (const auto& entry : manifest.at("parameters")) {
    auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    Tensor t(shape);
    for (auto& v : t.values()) {
      unsigned char bytes[4];
      if (!weights.read(reinterpret_cast<char*>(bytes), 4)) {
        throw ValidationError("checkpoint: weights.bin shorter than manifest");
      }
      const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      v = static_cast<double>(std::bit_cast<float>(bits));
    }
    ck.params.add(entry.at("name").get<std::string>(), std::move(t), entry.value("trainable", true));
  }
  if (weights.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("checkpoint: weights.bin longer than manifest");
  }
  return ck;
}

void round_to_float32(ParameterStore& params) {
  for (auto& p : params)
    for (auto& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace mvdiff::numerics
