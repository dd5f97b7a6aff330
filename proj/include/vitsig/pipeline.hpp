#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitsig/attacks.hpp"
#include "vitsig/dataset.hpp"
#include "vitsig/signatures.hpp"
#include "vitsig/stats.hpp"
#include "vitsig/vit.hpp"

namespace vitsig {

// Failure categories map to CLI exit codes (config 2, data 3, numeric 4).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";
  int threads = 0;  // 0 = all hardware threads
  DatasetSpec dataset;
  int patch_side = 8;
  int depth = 4;
  int heads = 4;
  int embed_dim = 64;
  int mlp_hidden = 128;
  TrainParams train;
  std::vector<AttackSpec> attacks;  // defaults to the standard grid
  int phi = 0;                      // 0 -> image side
  int cka_m = 4;
  int eval_count = 500;
  std::string refine_mode = "full";
  int histogram_bins = 100;

  static RunConfig defaults();
  /// Flat key=value file, '#' comments; unknown keys are rejected.
  static RunConfig from_file(const std::string& path);
  void apply_override(const std::string& key, const std::string& value);

  ViTConfig vit_config() const;
  int effective_threads() const;
  int effective_phi() const;
};

/// Default attack grid: FGSM eps {0.031, 0.062}; PGD eps {0.001, 0.003,
/// 0.005, 0.01} with alpha 0.025 and 40 iterations; CW c=1e-4.
std::vector<AttackSpec> default_attack_grid();

void save_checkpoint(const std::string& dir, const ViTWeights& w);
ViTWeights load_checkpoint(const std::string& dir);

void cmd_gen_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_build_reference(const RunConfig& cfg);
void cmd_attack(const RunConfig& cfg);
void cmd_extract(const RunConfig& cfg);
void cmd_compare(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);
/// attack -> extract -> compare -> report.
void run_grid(const RunConfig& cfg);
/// Every stage in order, starting from dataset generation.
void run_all(const RunConfig& cfg);

}  // namespace vitsig
