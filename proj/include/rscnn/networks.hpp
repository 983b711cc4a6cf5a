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
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rscnn/geometry.hpp"
#include "rscnn/layers.hpp"
#include "rscnn/parameters.hpp"
#include "rscnn/relation_conv.hpp"
#include "rscnn/tensor.hpp"

namespace rscnn {

enum class Task { classification, segmentation, normal_estimation };

std::string task_name(Task t);
Task parse_task(const std::string& s);

struct LevelConfig {
  std::size_t points = 0;  // N_l; clamped to the previous level's count at run time
  RSConvLayerConfig conv;
};

struct NetworkConfig {
  Task task = Task::classification;
  std::vector<LevelConfig> layers;
  std::vector<std::size_t> fc_widths{256, 128};  // hidden FC widths before the class layer
  double dropout = 0.5;
  std::vector<std::size_t> fp_widths;    // per upsampling stage, coarsest first
  std::vector<std::size_t> head_widths{128};  // hidden per-point head widths
  std::size_t num_classes = 4;  // classes, or object categories for the one-hot input
  std::size_t num_parts = 2;
  bool use_onehot = false;
  /// First-layer inputs are neighbor coordinates in per-centroid local frames
  /// and every relation is distance-only. Classification with normals only.
  bool rotation_robust = false;

  void validate() const;
  /// Smallest input cloud the hierarchy accepts.
  std::size_t min_points() const { return layers.empty() ? 1 : layers.back().points; }
};

/// 3 levels N/4 -> N/16 -> 1 with channels 64 -> 128 -> 256 and FC 256 -> 128 -> K.
NetworkConfig default_classifier_config(std::size_t classes, std::size_t points = 256);
/// 4 levels N/2 .. N/16 and matching upsampling stages.
NetworkConfig default_segmenter_config(std::size_t parts, std::size_t categories, bool onehot,
                                       std::size_t points = 256);
NetworkConfig default_normals_config(std::size_t points = 256);
/// N = 32 with levels 16 -> 8 -> 4 and widths <= 16, for gradient checks.
NetworkConfig miniature_classifier_config(std::size_t classes);

/// Per-cloud bookkeeping of one level.
struct LayerState {
  std::vector<std::size_t> sampled;  // indices into the previous level
  NeighborhoodIndex nbhd;            // over the previous level's points
  std::vector<Vec3> coords;          // the sampled points
  std::vector<Vec3> normals;
  std::vector<std::vector<LocalFrame>> frames;  // rotation-robust first level only
};

template <typename T>
struct ForwardTrace {
  std::vector<std::vector<LayerState>> samples;  // [cloud][level]
  std::vector<Tensor<T>> features;               // [level], rows of all clouds stacked
  std::vector<std::vector<std::size_t>> offsets;  // [level], per-cloud row offsets
};

struct ForwardContext {
  bool training = false;
  /// One per cloud; seeds the cloud's sampling stream. Empty means all zero.
  std::span<const std::uint64_t> sample_seeds;
  /// Dropout and relation cut; required in training when either is active.
  std::mt19937_64* rng = nullptr;
};

template <typename T>
struct Network {
  explicit Network(NetworkConfig cfg);

  NetworkConfig config;
  ParameterSet<T> params;
  std::vector<RSConvLayerParams<T>> convs;
  std::vector<DenseLayer<T>> fc;    // classification hidden layers
  std::vector<DenseLayer<T>> fp;    // upsampling mixers, coarsest first
  std::vector<DenseLayer<T>> head;  // per-point hidden layers
  DenseLayer<T> out;                // final affine layer
};

/// [B x K] logits.
template <typename T>
Tensor<T> classify_forward(Network<T>& net, std::span<const PointCloud> clouds,
                           const ForwardContext& ctx, ForwardTrace<T>* trace = nullptr);

/// [sum N_b x parts] logits. `categories` holds one object category per cloud
/// and is required exactly when the config uses the one-hot input.
template <typename T>
Tensor<T> segment_forward(Network<T>& net, std::span<const PointCloud> clouds,
                          std::span<const int> categories, const ForwardContext& ctx,
                          ForwardTrace<T>* trace = nullptr);

/// [sum N_b x 3] unit vectors.
template <typename T>
Tensor<T> normals_forward(Network<T>& net, std::span<const PointCloud> clouds,
                          const ForwardContext& ctx, ForwardTrace<T>* trace = nullptr);

// Feature propagation -------------------------------------------------------------

inline constexpr double kInterpolationEpsilon = 1e-8;

/// Sparse interpolation matrix: fine point f draws from
/// sources[offsets[f] .. offsets[f+1]) with the matching weights.
struct InterpolationWeights {
  std::vector<std::size_t> sources;
  std::vector<double> weights;
  std::vector<std::size_t> offsets;
};

/// Up to 3 nearest coarse points per fine point, weights proportional to
/// 1 / (d^2 + eps) and normalized to sum to one.
InterpolationWeights interpolation_weights(std::span<const Vec3> fine, std::span<const Vec3> coarse);

/// [fine x C] interpolated from [coarse x C].
template <typename T>
Tensor<T> interpolate(const Tensor<T>& coarse_features, const InterpolationWeights& w);

/// Interpolation, concatenation with the skip features (when defined) and the
/// shared mixing layer.
template <typename T>
Tensor<T> feature_propagation(const DenseLayer<T>& mixer, std::span<const Vec3> fine,
                              std::span<const Vec3> coarse, const Tensor<T>& coarse_features,
                              const Tensor<T>& skip_features, bool training);

}  // namespace rscnn
