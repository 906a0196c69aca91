#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "ofit/lora.hpp"
#include "ofit/params.hpp"

namespace ofit::ckpt {

inline constexpr char kMagic[8] = {'O', 'F', 'I', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

// Base weights plus optional adapters. `meta` is written to the JSON sidecar
// only (configs, seeds, provenance) and never affects the binary payload.
struct Checkpoint {
  model::Params<float> base;
  std::optional<lora::Adapters<float>> adapters;
  nlohmann::json meta = nlohmann::json::object();
};

std::string serialize(const Checkpoint& checkpoint);
// Throws ParseError on malformed input.
Checkpoint deserialize(std::string_view bytes);

// Writes `path` and `path.json`.
void save(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Reads the binary; the sidecar, when present, fills `meta`.
Checkpoint load(const std::filesystem::path& path);

nlohmann::json to_json(const model::ModelConfig& config);
nlohmann::json to_json(const lora::LoraConfig& config);

std::filesystem::path sidecar_path(const std::filesystem::path& path);

}  // namespace ofit::ckpt
