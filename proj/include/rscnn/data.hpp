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

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rscnn/geometry.hpp"
#include "rscnn/networks.hpp"

namespace rscnn {

enum class ShapeFamily { sphere, cube, cylinder, torus, cone };

std::string family_name(ShapeFamily f);
ShapeFamily parse_family(const std::string& s);

/// size meaning per family: sphere {radius}; cube {half-extents x, y, z};
/// cylinder {radius, half-height}; torus {ring radius, tube radius};
/// cone {base radius, height}. Unused entries are ignored.
struct ShapeSpec {
  ShapeFamily family = ShapeFamily::sphere;
  std::array<double, 3> size{1, 1, 1};
  std::size_t points = 256;
  std::uint64_t seed = 0;
  bool cube_face_labels = true;  // per-face part labels, else a single part

  void validate() const;
  /// Number of distinct part labels the family produces.
  std::size_t part_count() const;
};

/// Area-uniform surface samples with exact unit normals and part labels
/// (cylinder side 0 / caps 1, cone side 0 / base 1, cube faces 0..5).
PointCloud generate(const ShapeSpec& spec);

struct AugmentationConfig {
  double scale_low = 0.66, scale_high = 1.5;
  double translation = 0.2;
  double input_dropout = 0.0;  // maximum fraction of points removed per sample

  void validate() const;
};

/// Independent per-axis scale from [scale_low, scale_high], then a per-axis
/// translation from [-translation, translation]. Normals follow the inverse
/// transpose and are renormalized. Input dropout is not applied here.
PointCloud augment(const PointCloud& cloud, const AugmentationConfig& config, std::mt19937_64& rng);

/// Removes a random fraction in [0, max_ratio] of the points, never going
/// below `min_keep`.
PointCloud input_dropout(const PointCloud& cloud, double max_ratio, std::size_t min_keep,
                         std::mt19937_64& rng);

/// Uniform subsample of `keep` points without replacement, original order kept.
PointCloud density_dropout(const PointCloud& cloud, std::size_t keep, std::mt19937_64& rng);

/// Averages softmax outputs over `votes` copies, each with an independent
/// per-axis random scale from [scale_low, scale_high].
template <typename T>
std::vector<double> vote_predict(Network<T>& net, const PointCloud& cloud, std::size_t votes,
                                 std::mt19937_64& rng, double scale_low = 0.66,
                                 double scale_high = 1.5, std::uint64_t sample_seed = 0);

// Synthetic datasets ------------------------------------------------------------

enum class Split { train, test };

struct DatasetSpec {
  std::vector<ShapeFamily> classes{ShapeFamily::sphere, ShapeFamily::cube, ShapeFamily::cylinder,
                                   ShapeFamily::torus};
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t points = 256;
  std::uint64_t seed = 0;
  bool cube_face_labels = false;
  bool random_spin = true;  // random rotation about the z axis per shape
};

/// Shape seed of sample `index` of class slot `cls`; the train and test
/// splits draw from disjoint seed ranges.
std::uint64_t shape_seed(const DatasetSpec& spec, Split split, std::size_t cls, std::size_t index);

/// Randomized size parameters and pose, normalized to the unit sphere;
/// shape_label is the class slot.
PointCloud make_sample(const DatasetSpec& spec, Split split, std::size_t cls, std::size_t index);

std::vector<PointCloud> make_split(const DatasetSpec& spec, Split split);

inline constexpr const char* kManifestHeader = "RSCNN-MANIFEST v1";

struct ManifestEntry {
  std::filesystem::path path;  // as written; relative paths resolve against the manifest
  int label = 0;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Writes one point file per cloud under `dir` plus `dir/<name>.manifest`.
/// Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& name,
                                    const std::vector<PointCloud>& clouds);

/// Loads every cloud of a manifest; each cloud's shape_label is the manifest label.
std::vector<PointCloud> load_dataset(const std::filesystem::path& manifest);

}  // namespace rscnn
