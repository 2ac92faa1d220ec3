#pragma once

// Portable matrix container used for weights and stage checkpoints.
//
//   char[4] magic "CSMX"; u32 version (1); u64 header_bytes;
//   header: UTF-8 JSON object, header_bytes long, with
//           "matrices": [{"name": str, "rows": int, "cols": int}, ...]
//           and an arbitrary "meta" object;
//   then, for each listed matrix in order, rows*cols f64 values, row-major.
//
// All integers and floats are little-endian. Nothing may follow the last matrix.

#include "csil/csil_learner.hpp"
#include "csil/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace csil {

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MatrixArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> matrices;

  const Matrix& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_archive(const MatrixArchive& archive, const std::filesystem::path& path);
MatrixArchive read_archive(const std::filesystem::path& path);

/// Model weights plus, optionally, the context of the stage that produced them.
struct Checkpoint {
  Model model;
  std::optional<StageContext> context;
  nlohmann::json meta = nlohmann::json::object();  // caller data, stored verbatim
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Weights only.
void export_weights(const Model& model, const std::filesystem::path& path);
Model import_weights(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace csil
