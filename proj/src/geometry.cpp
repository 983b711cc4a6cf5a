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

#include "rscnn/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "rscnn/fileio.hpp"

namespace rscnn {

void PointCloud::validate() const {
  if (coords.empty()) throw std::invalid_argument("point cloud must contain at least one point");
  for (const auto& p : coords)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw std::invalid_argument("point cloud has a non-finite coordinate");
  if (!normals.empty()) {
    if (normals.size() != coords.size())
      throw std::invalid_argument("normal count differs from point count");
    for (const auto& n : normals)
      if (std::abs(norm(n) - 1.0) > 1e-6) throw std::invalid_argument("normal is not unit length");
  }
  if (!point_labels.empty() && point_labels.size() != coords.size())
    throw std::invalid_argument("label count differs from point count");
}

PointCloud PointCloud::select(std::span<const std::size_t> indices) const {
  PointCloud out;
  out.shape_label = shape_label;
  out.coords.reserve(indices.size());
  for (auto i : indices) {
    out.coords.push_back(coords.at(i));
    if (has_normals()) out.normals.push_back(normals[i]);
    if (has_point_labels()) out.point_labels.push_back(point_labels[i]);
  }
  return out;
}

Vec3 order_independent_mean(std::span<const Vec3> pts) {
  if (pts.empty()) throw std::invalid_argument("mean of an empty point set");
  Vec3 m;
  std::vector<double> axis(pts.size());
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < pts.size(); ++i) axis[i] = pts[i][a];
    std::sort(axis.begin(), axis.end());
    double s = 0;
    for (double v : axis) s += v;
    m[a] = s / static_cast<double>(pts.size());
  }
  return m;
}

PointCloud normalize_global(const PointCloud& cloud) {
  if (cloud.coords.empty()) throw std::invalid_argument("normalize_global: empty cloud");
  const Vec3 c = order_independent_mean(cloud.coords);
  double max_norm = 0;
  for (const auto& p : cloud.coords) max_norm = std::max(max_norm, norm(p - c));
  const double s = 1.0 / std::max(max_norm, 1e-12);
  PointCloud out = cloud;
  for (auto& p : out.coords) p = s * (p - c);
  return out;
}

std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> pts, std::size_t count,
                                               std::size_t start) {
  const std::size_t n = pts.size();
  if (count == 0 || count > n) {
    throw std::invalid_argument("farthest_point_sample: cannot pick " + std::to_string(count) +
                                " of " + std::to_string(n) + " points");
  }
  if (start >= n) throw std::invalid_argument("farthest_point_sample: start out of range");
  std::vector<std::size_t> picked{start};
  picked.reserve(count);
  std::vector<char> taken(n, 0);
  taken[start] = 1;
  std::vector<double> min_d2(n);
  for (std::size_t i = 0; i < n; ++i) min_d2[i] = dist2(pts[i], pts[start]);
  while (picked.size() < count) {
    std::size_t best = n;
    double best_d = -1;
    for (std::size_t i = 0; i < n; ++i)
      if (!taken[i] && min_d2[i] > best_d) {
        best_d = min_d2[i];
        best = i;
      }
    picked.push_back(best);
    taken[best] = 1;
    const Vec3 q = pts[best];
    for (std::size_t i = 0; i < n; ++i) min_d2[i] = std::min(min_d2[i], dist2(pts[i], q));
  }
  return picked;
}

std::size_t geometric_start(std::span<const Vec3> pts) {
  const Vec3 m = order_independent_mean(pts);
  std::size_t best = 0;
  double best_d = dist2(pts[0], m);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double d = dist2(pts[i], m);
    if (d > best_d || (d == best_d && lex_less(pts[i], pts[best]))) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

namespace {

using CellKey = std::array<std::int64_t, 3>;

struct CellHash {
  std::size_t operator()(const CellKey& c) const {
    std::uint64_t h = static_cast<std::uint64_t>(c[0]) * 0x9E3779B97F4A7C15ull;
    h ^= static_cast<std::uint64_t>(c[1]) * 0xC2B2AE3D27D4EB4Full + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(c[2]) * 0x165667B19E3779F9ull + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

// Hash grid with cubic cells of edge `cell`; a radius-`cell` ball touches at
// most the 27 cells around its center.
class UniformGrid {
 public:
  // The cell is padded slightly so rounding in p / cell can never push an
  // in-ball point two cells away.
  UniformGrid(std::span<const Vec3> pts, double radius) : pts_(pts), cell_(radius * (1 + 1e-9)) {
    for (std::size_t i = 0; i < pts.size(); ++i) cells_[cell_of(pts[i])].push_back(i);
  }

  // Appends every index with squared distance < r2 to `out` (unordered).
  void query(Vec3 c, double r2, std::vector<std::size_t>& out) const {
    const auto base = cell_of(c);
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find({base[0] + dx, base[1] + dy, base[2] + dz});
          if (it == cells_.end()) continue;
          for (auto i : it->second)
            if (dist2(c, pts_[i]) < r2) out.push_back(i);
        }
  }

 private:
  CellKey cell_of(Vec3 p) const {
    return {static_cast<std::int64_t>(std::floor(p.x / cell_)),
            static_cast<std::int64_t>(std::floor(p.y / cell_)),
            static_cast<std::int64_t>(std::floor(p.z / cell_))};
  }

  std::span<const Vec3> pts_;
  double cell_;
  std::unordered_map<CellKey, std::vector<std::size_t>, CellHash> cells_;
};

void canonical_sort(std::span<const Vec3> pts, Vec3 center, std::vector<std::size_t>& idx) {
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double da = dist2(center, pts[a]), db = dist2(center, pts[b]);
    if (da != db) return da < db;
    if (pts[a] != pts[b]) return lex_less(pts[a], pts[b]);
    return a < b;
  });
}

std::vector<std::size_t> grid_ball(const UniformGrid& grid, std::span<const Vec3> pts,
                                   Vec3 center, double radius) {
  std::vector<std::size_t> out;
  grid.query(center, radius * radius, out);
  canonical_sort(pts, center, out);
  return out;
}

}  // namespace

std::vector<std::size_t> ball_candidates(std::span<const Vec3> pts, Vec3 center, double radius) {
  if (!(radius > 0)) return {};
  UniformGrid grid(pts, radius);
  return grid_ball(grid, pts, center, radius);
}

NeighborhoodIndex build_neighborhoods(std::span<const Vec3> pts,
                                      std::span<const std::size_t> centroids,
                                      std::span<const double> radii,
                                      std::span<const std::size_t> ks, NeighborMode mode,
                                      CentroidMode centroid_mode, std::mt19937_64& rng) {
  if (radii.empty() || radii.size() != ks.size()) {
    throw std::invalid_argument("build_neighborhoods: need one K per radius");
  }
  for (std::size_t s = 0; s < radii.size(); ++s) {
    if (ks[s] == 0) throw std::invalid_argument("build_neighborhoods: K must be >= 1");
    if (!(radii[s] > 0)) throw std::invalid_argument("build_neighborhoods: radius must be > 0");
    if (s > 0 && !(radii[s] > radii[s - 1]))
      throw std::invalid_argument("build_neighborhoods: radii must be strictly increasing");
  }
  for (auto c : centroids)
    if (c >= pts.size()) throw std::invalid_argument("build_neighborhoods: centroid out of range");

  NeighborhoodIndex out;
  out.centroid_indices.assign(centroids.begin(), centroids.end());

  std::vector<std::size_t> all(pts.size());
  std::iota(all.begin(), all.end(), std::size_t{0});

  for (std::size_t s = 0; s < radii.size(); ++s) {
    const std::size_t k = ks[s];
    ScaleNeighborhood sc;
    sc.k = k;
    sc.radius = mode == NeighborMode::knn ? std::numeric_limits<double>::infinity() : radii[s];
    sc.indices.reserve(centroids.size() * k);
    std::optional<UniformGrid> grid;
    if (mode == NeighborMode::random_in_ball) grid.emplace(pts, radii[s]);

    for (auto c : centroids) {
      const Vec3 center = pts[c];
      std::vector<std::size_t> genuine;
      if (mode == NeighborMode::random_in_ball) {
        auto cand = grid_ball(*grid, pts, center, radii[s]);
        if (cand.size() <= k) {
          genuine = std::move(cand);
        } else {
          std::vector<std::size_t> pos(cand.size());
          std::iota(pos.begin(), pos.end(), std::size_t{0});
          for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pos.size() - 1);
            std::swap(pos[i], pos[pick(rng)]);
          }
          pos.resize(k);
          std::sort(pos.begin(), pos.end());
          for (auto p : pos) genuine.push_back(cand[p]);
        }
      } else {
        auto order = all;
        canonical_sort(pts, center, order);
        order.resize(std::min(k, order.size()));
        genuine = std::move(order);
      }
      if (genuine.empty()) genuine.push_back(c);

      const std::size_t valid = genuine.size();
      sc.valid_counts.push_back(valid);
      for (auto g : genuine) sc.indices.push_back(g);
      for (std::size_t i = valid; i < k; ++i) {
        if (mode == NeighborMode::random_in_ball) {
          std::uniform_int_distribution<std::size_t> pick(0, valid - 1);
          sc.indices.push_back(genuine[pick(rng)]);
        } else {
          sc.indices.push_back(genuine[i % valid]);
        }
      }

      switch (centroid_mode) {
        case CentroidMode::sampled_point:
          sc.reference.push_back(center);
          break;
        case CentroidMode::neighborhood_mean: {
          Vec3 m;
          for (auto g : genuine) m = m + pts[g];
          sc.reference.push_back((1.0 / static_cast<double>(valid)) * m);
          break;
        }
        case CentroidMode::random_member: {
          std::uniform_int_distribution<std::size_t> pick(0, valid - 1);
          sc.reference.push_back(pts[genuine[pick(rng)]]);
          break;
        }
      }
    }
    out.scales.push_back(std::move(sc));
  }
  return out;
}

NeighborhoodIndex build_neighborhoods(std::span<const Vec3> pts,
                                      std::span<const std::size_t> centroids,
                                      std::span<const double> radii, std::size_t k,
                                      NeighborMode mode, CentroidMode centroid_mode,
                                      std::mt19937_64& rng) {
  std::vector<std::size_t> ks(radii.size(), k);
  return build_neighborhoods(pts, centroids, radii, ks, mode, centroid_mode, rng);
}

std::vector<std::vector<Vec3>> normalize_local(std::span<const Vec3> pts,
                                               const NeighborhoodIndex& nbhd) {
  std::vector<std::vector<Vec3>> out;
  for (const auto& sc : nbhd.scales) {
    std::vector<Vec3> rel;
    rel.reserve(sc.indices.size());
    for (std::size_t s = 0; s < nbhd.centroid_indices.size(); ++s)
      for (auto j : sc.row(s)) rel.push_back(pts[j] - sc.reference[s]);
    out.push_back(std::move(rel));
  }
  return out;
}

LocalFrame make_local_frame(Vec3 origin, Vec3 normal, std::optional<Vec3> tangent_hint) {
  const double nn = norm(normal);
  if (!(nn > 0)) throw std::invalid_argument("local frame needs a non-zero normal");
  const Vec3 n = (1.0 / nn) * normal;
  Vec3 t1;
  bool have = false;
  if (tangent_hint) {
    const Vec3 h = *tangent_hint - dot(*tangent_hint, n) * n;
    const double hn = norm(h);
    if (hn > 1e-9) {
      t1 = (1.0 / hn) * h;
      have = true;
    }
  }
  if (!have) {
    const Vec3 a = std::abs(n.y) > 0.9 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
    const Vec3 c = cross(a, n);
    t1 = (1.0 / norm(c)) * c;
  }
  const Vec3 t2 = cross(n, t1);
  return {origin, {t1, t2, n}};
}

LocalFrame local_frame(const PointCloud& cloud, std::size_t centroid,
                       std::span<const std::size_t> neighbors) {
  if (!cloud.has_normals()) {
    throw std::invalid_argument(
        "local frames need per-point normals; disable rotation-robust mode for clouds without "
        "normals");
  }
  const Vec3 o = cloud.coords.at(centroid);
  std::optional<Vec3> hint;
  if (!neighbors.empty()) {
    Vec3 m;
    for (auto j : neighbors) m = m + (cloud.coords.at(j) - o);
    hint = (1.0 / static_cast<double>(neighbors.size())) * m;
  }
  return make_local_frame(o, cloud.normals[centroid], hint);
}

std::size_t RelationKind::channels() const {
  switch (variant) {
    case Variant::dist_only: return 1;
    case Variant::dist_diff: return 4;
    case Variant::normal_cos: return 7;
    case Variant::full:
    case Variant::planar:
    case Variant::planar_fusion: return 10;
  }
  return 0;
}

std::string RelationKind::name() const {
  switch (variant) {
    case Variant::dist_only: return "dist";
    case Variant::dist_diff: return "distdiff";
    case Variant::full: return "full";
    case Variant::normal_cos: return "normalcos";
    case Variant::planar_fusion: return "planar_fusion";
    case Variant::planar:
      return plane == Plane::xy ? "planar_xy" : (plane == Plane::xz ? "planar_xz" : "planar_yz");
  }
  return "?";
}

RelationKind RelationKind::parse(const std::string& s) {
  if (s == "dist") return dist_only();
  if (s == "distdiff") return dist_diff();
  if (s == "full") return full();
  if (s == "normalcos") return normal_cos();
  if (s == "planar_xy") return planar(Plane::xy);
  if (s == "planar_xz") return planar(Plane::xz);
  if (s == "planar_yz") return planar(Plane::yz);
  if (s == "planar_fusion") return planar_fusion();
  throw std::invalid_argument("unknown relation kind '" + s + "'");
}

namespace {

Vec3 project(Vec3 p, Plane plane) {
  switch (plane) {
    case Plane::xy: p.z = 0; break;
    case Plane::xz: p.y = 0; break;
    case Plane::yz: p.x = 0; break;
  }
  return p;
}

void full_relation(Vec3 xi, Vec3 xj, std::span<double> out) {
  const Vec3 d = xi - xj;
  out[0] = std::sqrt(dist2(xi, xj));
  out[1] = d.x, out[2] = d.y, out[3] = d.z;
  out[4] = xi.x, out[5] = xi.y, out[6] = xi.z;
  out[7] = xj.x, out[8] = xj.y, out[9] = xj.z;
}

}  // namespace

void compute_relation(const RelationKind& kind, Vec3 xi, Vec3 xj, const Vec3* ni,
                      const Vec3* nj, std::span<double> out, std::size_t view) {
  if (out.size() < kind.channels()) throw std::invalid_argument("relation buffer too small");
  using V = RelationKind::Variant;
  switch (kind.variant) {
    case V::dist_only:
      out[0] = std::sqrt(dist2(xi, xj));
      return;
    case V::dist_diff: {
      const Vec3 d = xi - xj;
      out[0] = std::sqrt(dist2(xi, xj));
      out[1] = d.x, out[2] = d.y, out[3] = d.z;
      return;
    }
    case V::full:
      full_relation(xi, xj, out);
      return;
    case V::normal_cos: {
      if (!ni || !nj) throw std::invalid_argument("normal-cosine relation requires normals");
      const double den = norm(*ni) * norm(*nj);
      out[0] = den > 0 ? dot(*ni, *nj) / den : 0.0;
      out[1] = ni->x, out[2] = ni->y, out[3] = ni->z;
      out[4] = nj->x, out[5] = nj->y, out[6] = nj->z;
      return;
    }
    case V::planar:
      full_relation(project(xi, kind.plane), project(xj, kind.plane), out);
      return;
    case V::planar_fusion: {
      if (view > 2) throw std::invalid_argument("planar fusion view must be 0, 1 or 2");
      const Plane p = view == 0 ? Plane::xy : (view == 1 ? Plane::xz : Plane::yz);
      full_relation(project(xi, p), project(xj, p), out);
      return;
    }
  }
}

std::vector<double> compute_relation(const RelationKind& kind, Vec3 xi, Vec3 xj,
                                     std::optional<Vec3> ni, std::optional<Vec3> nj) {
  std::vector<double> out(kind.channels());
  compute_relation(kind, xi, xj, ni ? &*ni : nullptr, nj ? &*nj : nullptr, out);
  return out;
}

Vec3 apply(const Mat3& m, Vec3 v) { return {dot(m[0], v), dot(m[1], v), dot(m[2], v)}; }

Mat3 rotation_about_y(double radians) {
  const double c = std::cos(radians), s = std::sin(radians);
  return {Vec3{c, 0, s}, Vec3{0, 1, 0}, Vec3{-s, 0, c}};
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  double w, x, y, z, n;
  do {
    w = g(rng), x = g(rng), y = g(rng), z = g(rng);
    n = std::sqrt(w * w + x * x + y * y + z * z);
  } while (n < 1e-6);
  w /= n, x /= n, y /= n, z /= n;
  return {Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
          Vec3{2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
          Vec3{2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
}

PointCloud transform_cloud(const PointCloud& cloud, const Mat3& rotation, Vec3 translation) {
  PointCloud out = cloud;
  for (auto& p : out.coords) p = apply(rotation, p) + translation;
  for (auto& n : out.normals) n = apply(rotation, n);
  return out;
}

// ---------------------------------------------------------------------------

std::string format_point_cloud(const PointCloud& cloud) {
  cloud.validate();
  const std::size_t fields =
      3 + (cloud.has_normals() ? 3 : 0) + (cloud.has_point_labels() ? 1 : 0);
  std::string out = std::to_string(cloud.size()) + " " + std::to_string(fields) + "\n";
  char buf[64];
  auto put = [&](double v) {
    auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    out.append(buf, r.ptr);
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.coords[i];
    put(p.x), out += ' ', put(p.y), out += ' ', put(p.z);
    if (cloud.has_normals()) {
      const Vec3& n = cloud.normals[i];
      out += ' ', put(n.x), out += ' ', put(n.y), out += ' ', put(n.z);
    }
    if (cloud.has_point_labels()) out += ' ' + std::to_string(cloud.point_labels[i]);
    out += '\n';
  }
  if (cloud.shape_label) out += "LABEL " + std::to_string(*cloud.shape_label) + "\n";
  return out;
}

PointCloud parse_point_cloud(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  auto fail = [&](const std::string& what) { throw FormatError(origin + ": " + what); };
  if (!std::getline(in, line)) fail("empty file");
  std::size_t n = 0, f = 0;
  {
    std::istringstream h(line);
    if (!(h >> n >> f)) fail("bad header '" + line + "'");
  }
  if (f != 3 && f != 4 && f != 6 && f != 7) fail("field count must be 3, 4, 6 or 7");
  if (n == 0) fail("point count must be >= 1");
  PointCloud cloud;
  cloud.coords.reserve(n);
  const bool normals = f >= 6;
  const bool labels = f == 4 || f == 7;
  std::vector<double> vals(f);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) fail("expected " + std::to_string(n) + " points");
    const char* p = line.data();
    const char* end = p + line.size();
    for (std::size_t k = 0; k < f; ++k) {
      while (p < end && *p == ' ') ++p;
      auto r = std::from_chars(p, end, vals[k]);
      if (r.ec != std::errc()) fail("bad value on point line " + std::to_string(i + 1));
      p = r.ptr;
    }
    while (p < end && (*p == ' ' || *p == '\r')) ++p;
    if (p != end) fail("extra fields on point line " + std::to_string(i + 1));
    cloud.coords.push_back({vals[0], vals[1], vals[2]});
    if (normals) cloud.normals.push_back({vals[3], vals[4], vals[5]});
    if (labels) cloud.point_labels.push_back(static_cast<int>(vals[f - 1]));
  }
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream l(line);
    std::string tag;
    int k = 0;
    if (!(l >> tag >> k) || tag != "LABEL") fail("unexpected trailing line '" + line + "'");
    cloud.shape_label = k;
  }
  try {
    cloud.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  return cloud;
}

void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file_atomic(path, format_point_cloud(cloud));
}

PointCloud load_point_cloud(const std::filesystem::path& path) {
  return parse_point_cloud(read_file(path), path.string());
}

}  // namespace rscnn
