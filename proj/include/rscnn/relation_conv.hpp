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
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rscnn/geometry.hpp"
#include "rscnn/layers.hpp"
#include "rscnn/parameters.hpp"
#include "rscnn/tensor.hpp"

namespace rscnn {

enum class ScaleFusion { elementwise_max, elementwise_sum };

struct ScaleSpec {
  double radius = 0;
  std::size_t k = 0;
};

struct RSConvLayerConfig {
  std::size_t in_channels = 3;
  RelationKind relation_kind = RelationKind::full();
  /// Output width of every layer of the relation MLP; the last must equal
  /// in_channels. Empty selects default_relation_widths(in_channels, 3).
  std::vector<std::size_t> relation_mlp_widths;
  std::size_t out_channels = 64;
  std::vector<ScaleSpec> scales;
  ReduceKind aggregation = ReduceKind::max;
  double relation_cut_ratio = 0;
  CentroidMode centroid_mode = CentroidMode::sampled_point;
  NeighborMode neighbor_mode = NeighborMode::random_in_ball;
  ScaleFusion scale_fusion = ScaleFusion::elementwise_max;

  /// Widths actually used (defaults resolved).
  std::vector<std::size_t> mlp_widths() const;
  std::vector<double> radii() const;
  std::vector<std::size_t> ks() const;
  /// Throws std::invalid_argument on a broken invariant.
  void validate() const;
};

/// Relation-MLP widths of the given depth (2, 3 or 4 layers) ending in `c_in`:
/// 16 -> 64 -> c_in when c_in >= 64, otherwise c_in at every layer.
std::vector<std::size_t> default_relation_widths(std::size_t c_in, std::size_t depth = 3);

template <typename T>
struct RSConvLayerParams {
  std::vector<DenseLayer<T>> relation_mlp;  // hidden layers carry batch norm
  DenseLayer<T> channel_raise;
};

template <typename T>
RSConvLayerParams<T> make_rsconv_params(const RSConvLayerConfig& config, ParameterSet<T>& set,
                                        const std::string& prefix);

/// w = M(h) for a [rows x h_channels] relation block. Hidden layers apply
/// affine, batch norm (over the rows) and ReLU; the last layer is affine.
/// Rows whose cut_mask entry is non-zero come out as zero vectors.
template <typename T>
Tensor<T> relation_weights(const RSConvLayerParams<T>& params, const Tensor<T>& relations,
                           bool training, std::span<const std::uint8_t> cut_mask = {});

/// One cloud of a batch as seen by a convolution layer.
struct ConvSample {
  std::span<const Vec3> coords;
  std::span<const Vec3> normals;  // empty unless the relation needs them
  const NeighborhoodIndex* nbhd = nullptr;
  /// Optional per-scale, per-centroid frames; when present both relation
  /// endpoints (and normals) are expressed in the centroid's frame.
  const std::vector<std::vector<LocalFrame>>* frames = nullptr;
};

/// Relation vectors for scale `s` of every sample, stacked in sample, then
/// centroid, then neighbor order: [(sum S_b K) x channels]. `view` selects the
/// projection plane for planar fusion.
std::vector<double> relation_block(const RelationKind& kind, std::span<const ConvSample> batch,
                                   std::size_t s, std::size_t view = 0);

/// Maps stacked relation vectors to per-neighbor weights, row for row.
template <typename T>
using RelationMapping = std::function<Tensor<T>(const Tensor<T>& relations)>;

/// Core of the operator: per scale, gather neighbor features, weight them by
/// mapping(h), aggregate over the neighbors, optionally apply ReLU, then fuse
/// the scales. The mapping sees the relations of all scales and views in one
/// call, stacked scale-major. Features are the concatenation of every sample's rows.
/// `gathered`, when given, supplies per-scale neighbor features directly as
/// [(sum S_b K) x C] blocks (features may then be undefined).
/// Returns [(sum S_b) x C].
template <typename T>
Tensor<T> relation_aggregate(const RelationKind& kind, ReduceKind aggregation,
                             ScaleFusion fusion, const Tensor<T>& features,
                             std::span<const ConvSample> batch, const RelationMapping<T>& mapping,
                             bool activate, const std::vector<Tensor<T>>* gathered = nullptr);

/// Full layer: relation_aggregate with the learned mapping and ReLU, then
/// the channel-raising affine + batch norm + ReLU. `rng` drives relation cut
/// in training and may be null when the cut ratio is zero.
template <typename T>
Tensor<T> rs_conv_forward(const RSConvLayerConfig& config, const RSConvLayerParams<T>& params,
                          const Tensor<T>& features, std::span<const ConvSample> batch,
                          bool training, std::mt19937_64* rng = nullptr,
                          const std::vector<Tensor<T>>* gathered = nullptr);

template <typename T>
Tensor<T> rs_conv_forward(const RSConvLayerConfig& config, const RSConvLayerParams<T>& params,
                          const Tensor<T>& features, const PointCloud& cloud,
                          const NeighborhoodIndex& nbhd, bool training,
                          std::mt19937_64* rng = nullptr);

// Grid-convolution equivalence ---------------------------------------------------

struct GridConvResult {
  std::vector<double> rs_conv;  // (H-2) x (W-2), via offset lookup
  std::vector<double> dense;    // (H-2) x (W-2), direct cross-correlation
  double max_abs_diff = 0;
};

/// Valid-mode 3x3 cross-correlation summed over channels. Map is H x W x C
/// and kernel 3 x 3 x C, both row-major.
std::vector<double> dense_conv3x3(std::span<const double> map, std::size_t h, std::size_t w,
                                  std::size_t c, std::span<const double> kernel);

/// Embeds the map as points on the z = 0 unit grid, builds exact 3x3 stencils
/// by 9-nearest-neighbor search and runs the relation operator with the
/// mapping replaced by a lookup from grid offset to kernel slice, sum
/// aggregation and no activation. `positions` (row-major, H*W) overrides the
/// grid embedding; a stencil offset that is not a grid offset throws.
GridConvResult grid_conv_check(std::span<const double> kernel, std::span<const double> map,
                               std::size_t h, std::size_t w, std::size_t c,
                               std::span<const Vec3> positions = {});

}  // namespace rscnn
