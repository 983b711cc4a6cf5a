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
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rscnn {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline double dist2(Vec3 a, Vec3 b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}
/// Strict lexicographic order on (x, y, z).
inline bool lex_less(Vec3 a, Vec3 b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

struct PointCloud {
  std::vector<Vec3> coords;
  std::vector<Vec3> normals;     // empty or one per point
  std::vector<int> point_labels;  // empty or one per point
  std::optional<int> shape_label;

  std::size_t size() const { return coords.size(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_point_labels() const { return !point_labels.empty(); }
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
  /// Subset in the given order, carrying normals and labels.
  PointCloud select(std::span<const std::size_t> indices) const;
};

// Global normalization --------------------------------------------------------

/// Mean of the coordinates, summed per axis in sorted order so the result
/// does not depend on point order.
Vec3 order_independent_mean(std::span<const Vec3> pts);

/// Centers on the mean and scales the farthest point onto the unit sphere.
PointCloud normalize_global(const PointCloud& cloud);

// Sampling ----------------------------------------------------------------------

/// Greedy max-min selection starting at `start`; ties go to the lowest index.
std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> pts, std::size_t count,
                                               std::size_t start = 0);

/// The point farthest from the cloud mean; exact ties resolve to the
/// lexicographically smallest coordinates. Invariant to point order and to
/// rigid motions of the cloud.
std::size_t geometric_start(std::span<const Vec3> pts);

// Neighborhoods ---------------------------------------------------------------

enum class NeighborMode { random_in_ball, knn };
enum class CentroidMode { sampled_point, neighborhood_mean, random_member };

struct ScaleNeighborhood {
  double radius = 0;  // +inf in knn mode
  std::size_t k = 0;
  std::vector<std::size_t> indices;       // S*K, row-major per centroid
  std::vector<std::size_t> valid_counts;  // genuine neighbors per centroid, first in each row
  std::vector<Vec3> reference;            // relation reference point per centroid

  std::span<const std::size_t> row(std::size_t s) const {
    return std::span<const std::size_t>(indices).subspan(s * k, k);
  }
};

struct NeighborhoodIndex {
  std::vector<std::size_t> centroid_indices;
  std::vector<ScaleNeighborhood> scales;
};

/// Candidates inside the open ball, in canonical geometric order: by squared
/// distance, then coordinates, then index. Uses a uniform grid.
std::vector<std::size_t> ball_candidates(std::span<const Vec3> pts, Vec3 center, double radius);

/// Per centroid and scale, K neighbor indices. random_in_ball picks uniformly
/// without replacement among in-ball points (canonical order), padding by
/// repeating genuine neighbors; knn takes the K nearest. A centroid with an
/// empty ball falls back to itself.
NeighborhoodIndex build_neighborhoods(std::span<const Vec3> pts,
                                      std::span<const std::size_t> centroids,
                                      std::span<const double> radii,
                                      std::span<const std::size_t> ks, NeighborMode mode,
                                      CentroidMode centroid_mode, std::mt19937_64& rng);

NeighborhoodIndex build_neighborhoods(std::span<const Vec3> pts,
                                      std::span<const std::size_t> centroids,
                                      std::span<const double> radii, std::size_t k,
                                      NeighborMode mode, CentroidMode centroid_mode,
                                      std::mt19937_64& rng);

/// Per scale, S*K offsets x_j - reference_i.
std::vector<std::vector<Vec3>> normalize_local(std::span<const Vec3> pts,
                                               const NeighborhoodIndex& nbhd);

// Local frames ------------------------------------------------------------------

struct LocalFrame {
  Vec3 origin;
  std::array<Vec3, 3> rotation;  // rows; world -> local is rotation * (p - origin)

  Vec3 to_local(Vec3 p) const {
    const Vec3 d = p - origin;
    return {dot(rotation[0], d), dot(rotation[1], d), dot(rotation[2], d)};
  }
};

/// Frame whose third axis is the unit normal. The first axis comes from
/// `tangent_hint` projected onto the tangent plane when that projection is
/// non-degenerate; otherwise from a fixed axis (y, or z near the y poles).
LocalFrame make_local_frame(Vec3 origin, Vec3 normal, std::optional<Vec3> tangent_hint = {});

/// Frame at a cloud point. With neighbors, the tangent hint is the mean
/// offset of those neighbors, which makes the frame follow any rotation of
/// the cloud. Throws if the cloud has no normals.
LocalFrame local_frame(const PointCloud& cloud, std::size_t centroid,
                       std::span<const std::size_t> neighbors = {});

// Relations -------------------------------------------------------------------

enum class Plane { xy, xz, yz };

struct RelationKind {
  enum class Variant { dist_only, dist_diff, full, normal_cos, planar, planar_fusion };
  Variant variant = Variant::full;
  Plane plane = Plane::xy;

  static RelationKind dist_only() { return {Variant::dist_only, Plane::xy}; }
  static RelationKind dist_diff() { return {Variant::dist_diff, Plane::xy}; }
  static RelationKind full() { return {Variant::full, Plane::xy}; }
  static RelationKind normal_cos() { return {Variant::normal_cos, Plane::xy}; }
  static RelationKind planar(Plane p) { return {Variant::planar, p}; }
  static RelationKind planar_fusion() { return {Variant::planar_fusion, Plane::xy}; }

  /// Channels of one relation vector (per view for planar fusion).
  std::size_t channels() const;
  /// Number of views sharing the relation mapping (3 for planar fusion).
  std::size_t views() const { return variant == Variant::planar_fusion ? 3 : 1; }
  bool needs_normals() const { return variant == Variant::normal_cos; }

  std::string name() const;
  static RelationKind parse(const std::string& s);
  friend bool operator==(const RelationKind&, const RelationKind&) = default;
};

/// Writes channels() values into `out`. For planar fusion `view` picks the
/// projection plane (0: XY, 1: XZ, 2: YZ).
void compute_relation(const RelationKind& kind, Vec3 xi, Vec3 xj, const Vec3* ni,
                      const Vec3* nj, std::span<double> out, std::size_t view = 0);

std::vector<double> compute_relation(const RelationKind& kind, Vec3 xi, Vec3 xj,
                                     std::optional<Vec3> ni = {}, std::optional<Vec3> nj = {});

// Rigid transforms used by the robustness harnesses ------------------------------

using Mat3 = std::array<Vec3, 3>;  // rows
Vec3 apply(const Mat3& m, Vec3 v);
Mat3 rotation_about_y(double radians);
Mat3 random_rotation(std::mt19937_64& rng);
PointCloud transform_cloud(const PointCloud& cloud, const Mat3& rotation, Vec3 translation);

// Point-cloud file --------------------------------------------------------------

/// Header "N F" with F in {3,4,6,7}; rows "x y z [nx ny nz] [label]"; optional
/// trailing "LABEL k". Values are written with 17 significant digits.
void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_point_cloud(const std::filesystem::path& path);
std::string format_point_cloud(const PointCloud& cloud);
PointCloud parse_point_cloud(const std::string& text, const std::string& origin = "<memory>");

}  // namespace rscnn
