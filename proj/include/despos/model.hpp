#pragma once

// The full parameter set of the pipeline, its training configuration, and the
// checkpoint container (JSON manifest + little-endian float32 array file).

#include "despos/config.hpp"
#include "despos/fine_localizer.hpp"
#include "despos/pc_encoder.hpp"
#include "despos/text_encoder.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace despos {

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelConfig {
  PcEncoderConfig pc;
  TextEncoderConfig text;
  FineConfig fine;
  int teacher_dim = 64;
  std::uint64_t teacher_seed = 7;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Phase { Ste1, Coarse, Fine };
std::string_view to_string(Phase p);
std::optional<Phase> parse_phase(std::string_view s);

struct TrainConfig {
  Phase phase = Phase::Coarse;
  int batch_size = 64;
  double learning_rate = 5e-4;
  int epochs = 20;
  double temperature = 0.07;
  std::uint64_t seed = 0;
  /// "adam" or "sgd" (with momentum).
  std::string optimizer = "adam";
  double momentum = 0.9;
  /// Widths and depths; `cra_depth` and `pool_stride` keys land here.
  ModelConfig model;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Per-phase defaults: ste1 32 / 1e-3 / 20, coarse 64 / 5e-4 / 20, fine 32 / 3e-4 / 35.
TrainConfig default_config(Phase phase);

/// Parses `key = value` lines (`#` starts a comment) on top of `base`.
/// Unknown keys and malformed values throw DataError naming the line.
TrainConfig parse_config(const std::string& text, TrainConfig base);
TrainConfig parse_config_entries(const std::vector<ConfigEntry>& entries, TrainConfig base,
                                 const std::string& source = "<config>");
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base);
/// Round-trips through parse_config.
std::string format_config(const TrainConfig& c);

struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  Vocabulary vocab;
  PcEncoder pc;
  SteModel text;
  FineLocalizer fine;

  /// Fresh, seeded parameters. The text backbone starts frozen.
  static Model create(const ModelConfig& config, std::uint64_t seed, const Vocabulary& vocab);
  static Model create(const ModelConfig& config, std::uint64_t seed, const Palette& palette = default_palette());

  ParamList params();
  ConstParamList params() const;
  RandomTransformerTeacher teacher() const;
};

struct Checkpoint {
  Model model;
  TrainConfig config;
  int epoch = 0;
  std::vector<double> loss_history;
  /// Phases completed so far, in order.
  std::vector<std::string> phases;
  /// Non-fatal training observations (e.g. a non-monotone loss curve).
  std::vector<std::string> flags;
  /// Named scalar diagnostics recorded by the last phase.
  std::map<std::string, double> metrics;

  bool has_phase(Phase p) const;
};

Checkpoint init_checkpoint(const TrainConfig& config, const Palette& palette = default_palette());

/// Writes `dir`/manifest.json and `dir`/params.bin.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Validates every parameter name and shape against the manifest.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Bytes of every parameter value, concatenated in collection order.
std::string parameter_bytes(const ConstParamList& params);

}  // namespace despos
