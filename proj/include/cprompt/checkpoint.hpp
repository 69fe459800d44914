#pragma once

// Binary checkpoint container.
//
//   "CPLM" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
//   records: u32 name length | name | u8 dtype | u8 rank | rank x u64 dims |
//            u64 payload bytes | payload
//   32-byte SHA-256 of everything before it
//
// All integers little-endian. dtype 0 = f32, 1 = packed unsigned codes,
// 2 = bit mask.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cprompt/compress.hpp"
#include "cprompt/model.hpp"
#include "cprompt/prompt.hpp"

namespace cprompt::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, packed_uint = 1, bitmask = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape dims;
  std::vector<std::uint8_t> payload;

  static TensorRecord from_tensor(std::string name, const Tensor& t);
  Tensor to_tensor() const;  // f32 records only
};

struct Container {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord& find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes);

// Writes via a temporary file and rename, so a crash never leaves a partial
// checkpoint under the final name.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Typed artifacts. `extra` metadata is stored under "extra" and returned on load.
void save_model(const std::filesystem::path& path, const model::ModelWeights& w,
                const nlohmann::json& extra = nlohmann::json::object());
model::ModelWeights load_model(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

void save_compressed(const std::filesystem::path& path, const compress::CompressedModel& m,
                     const nlohmann::json& extra = nlohmann::json::object());
compress::CompressedModel load_compressed(const std::filesystem::path& path,
                                          nlohmann::json* extra = nullptr);

void save_prompt(const std::filesystem::path& path, const prompt::SoftPrompt& p,
                 const prompt::TrainHistory* history = nullptr,
                 const nlohmann::json& extra = nlohmann::json::object());
prompt::SoftPrompt load_prompt(const std::filesystem::path& path,
                               prompt::TrainHistory* history = nullptr,
                               nlohmann::json* extra = nullptr);

// Kind recorded in the metadata ("model", "compressed-model" or "prompt").
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace cprompt::harness
