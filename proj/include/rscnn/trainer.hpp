// Copyright 2026 The rscnn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rscnn/data.hpp"
#include "rscnn/networks.hpp"
#include "rscnn/optim.hpp"

namespace rscnn {

/// Everything one experiment needs. Text form is `key = value` lines; see
/// format_config for the full key list.
struct ExperimentConfig {
  Task task = Task::classification;
  std::string preset = "default";  // default | miniature
  std::size_t points = 256;        // nominal input size; sets the level point counts

  // Ablation switches, applied to every convolution level.
  RelationKind relation = RelationKind::full();
  ReduceKind aggregation = ReduceKind::max;
  std::size_t mapping_depth = 3;
  NeighborMode neighbor_mode = NeighborMode::random_in_ball;
  CentroidMode centroid_mode = CentroidMode::sampled_point;
  double relation_cut = 0;
  std::size_t scales = 3;  // keeps the largest-radius scales of each level
  ScaleFusion scale_fusion = ScaleFusion::elementwise_max;
  bool rotation_robust = false;
  double dropout = 0.5;
  bool onehot = true;  // segmentation only

  ScheduleConfig schedule;
  AugmentationConfig augmentation;
  std::size_t min_keep = 32;  // input dropout never goes below this many points
  std::size_t votes = 1;
  std::uint64_t seed = 0;
  int checkpoint_every = 1;

  DatasetSpec data;

  void validate() const;
  NetworkConfig network_config() const;
  /// Output classes (classification) or parts (segmentation).
  std::size_t output_count() const;
};

/// Throws ConfigError naming the origin and line.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
/// Applies one `key = value` setting; throws ConfigError for unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Canonical text with every key, in a fixed order.
std::string format_config(const ExperimentConfig& cfg);
/// 16 hex digits of FNV-1a over format_config.
std::string config_fingerprint(const ExperimentConfig& cfg);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochMetrics {
  int epoch = 0;
  std::string split;  // train | test
  double loss = 0;
  double accuracy = 0;
};

struct EvalResult {
  double loss = 0;
  /// Classification: sample accuracy. Segmentation: point accuracy.
  /// Normals: fraction of points within 20 degrees.
  double accuracy = 0;
  double mean_angle_deg = 0;  // normals only
  std::vector<int> predictions;  // classification only
};

struct RunReport {
  std::vector<EpochMetrics> rows;
  EvalResult final_train, final_test;
  double wall_seconds = 0;
  std::string fingerprint;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  std::optional<std::filesystem::path> resume;
  int stop_after_epoch = -1;      // last epoch to run, -1 runs the full schedule
  bool evaluate_test = true;      // per-epoch test rows
  bool stop_when_train_perfect = false;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Model and optimizer together, as saved in a checkpoint.
struct TrainState {
  explicit TrainState(const ExperimentConfig& cfg);
  Network<float> net;
  OptimizerState<float> opt;
  int next_epoch = 0;
};

void save_state(const std::filesystem::path& path, const TrainState& state);
void load_state(const std::filesystem::path& path, TrainState& state);

/// Runs (or resumes) training. Writes metrics.csv, checkpoint.ckpt,
/// config.txt and report.json under out_dir when set.
RunReport train(const ExperimentConfig& cfg, const std::vector<PointCloud>& train_set,
                const std::vector<PointCloud>& test_set, const TrainOptions& options,
                TrainState* state = nullptr);

/// Eval-mode metrics. Classification with votes > 1 averages scaled copies.
EvalResult evaluate(Network<float>& net, const ExperimentConfig& cfg,
                    const std::vector<PointCloud>& clouds, std::size_t votes = 1,
                    std::uint64_t seed = 0);

struct InvarianceRow {
  std::string transform;
  double accuracy = 0;
  double max_rel_logit_diff = 0;  // against the clean logits
};

/// Clean, random permutation, random translation within +-0.2 per axis,
/// and rotations of 90 and 180 degrees about y.
std::vector<InvarianceRow> invariance_harness(Network<float>& net, const ExperimentConfig& cfg,
                                              const std::vector<PointCloud>& clouds,
                                              std::uint64_t seed);

struct DensityRow {
  std::size_t count = 0;
  double accuracy = 0;
};

/// Accuracy after keeping `count` random points of every cloud, averaged over
/// `repeats` independent draws.
std::vector<DensityRow> density_harness(Network<float>& net, const ExperimentConfig& cfg,
                                        const std::vector<PointCloud>& clouds,
                                        const std::vector<std::size_t>& counts, std::uint64_t seed,
                                        std::size_t repeats = 1);

/// Eval-mode logits ([B x K]) of a classification network, in batches.
Tensor<float> classification_logits(Network<float>& net, const std::vector<PointCloud>& clouds,
                                    std::size_t batch = 32);

std::string metrics_csv(const std::vector<EpochMetrics>& rows);
std::string report_json(const RunReport& report, const ExperimentConfig& cfg);

}  // namespace rscnn
