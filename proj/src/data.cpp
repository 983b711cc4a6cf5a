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


#include "rscnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rscnn/fileio.hpp"

namespace rscnn {

std::string family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::sphere: return "sphere";
    case ShapeFamily::cube: return "cube";
    case ShapeFamily::cylinder: return "cylinder";
    case ShapeFamily::torus: return "torus";
    case ShapeFamily::cone: return "cone";
  }
  return "?";
}

ShapeFamily parse_family(const std::string& s) {
  for (auto f : {ShapeFamily::sphere, ShapeFamily::cube, ShapeFamily::cylinder, ShapeFamily::torus,
                 ShapeFamily::cone})
    if (family_name(f) == s) return f;
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

void ShapeSpec::validate() const {
  auto fail = [&](const std::string& m) {
    throw std::invalid_argument(family_name(family) + ": " + m);
  };
  if (points < 8) fail("needs at least 8 points");
  auto positive = [&](std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(size[i] > 0) || !std::isfinite(size[i])) fail("size parameters must be positive");
  };
  switch (family) {
    case ShapeFamily::sphere: positive(1); break;
    case ShapeFamily::cube: positive(3); break;
    case ShapeFamily::cylinder:
    case ShapeFamily::cone: positive(2); break;
    case ShapeFamily::torus:
      positive(2);
      if (!(size[1] < size[0])) fail("tube radius must be smaller than the ring radius");
      break;
  }
}

std::size_t ShapeSpec::part_count() const {
  switch (family) {
    case ShapeFamily::cube: return cube_face_labels ? 6 : 1;
    case ShapeFamily::cylinder:
    case ShapeFamily::cone: return 2;
    default: return 1;
  }
}

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

Vec3 unit(Vec3 v) { return (1.0 / norm(v)) * v; }

void add_point(PointCloud& c, Vec3 p, Vec3 n, int label) {
  c.coords.push_back(p);
  c.normals.push_back(unit(n));
  c.point_labels.push_back(label);
}

// Picks a patch with probability proportional to its area.
std::size_t pick_patch(std::span<const double> areas, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> d(areas.begin(), areas.end());
  return d(rng);
}

}  // namespace

PointCloud generate(const ShapeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud c;
  const auto& s = spec.size;
  for (std::size_t i = 0; i < spec.points; ++i) {
    switch (spec.family) {
      case ShapeFamily::sphere: {
        std::normal_distribution<double> g(0.0, 1.0);
        Vec3 d;
        do d = {g(rng), g(rng), g(rng)};
        while (norm(d) < 1e-12);
        d = unit(d);
        add_point(c, s[0] * d, d, 0);
        break;
      }
      case ShapeFamily::cube: {
        // Faces ordered +x, -x, +y, -y, +z, -z.
        const double ax = s[1] * s[2], ay = s[0] * s[2], az = s[0] * s[1];
        const std::array<double, 6> areas{ax, ax, ay, ay, az, az};
        const std::size_t f = pick_patch(areas, rng);
        const std::size_t axis = f / 2;
        const double sign = f % 2 == 0 ? 1.0 : -1.0;
        Vec3 p, n;
        for (std::size_t a = 0; a < 3; ++a) p[a] = (2 * u(rng) - 1) * s[a];
        p[axis] = sign * s[axis];
        n[axis] = sign;
        add_point(c, p, n, spec.cube_face_labels ? static_cast<int>(f) : 0);
        break;
      }
      case ShapeFamily::cylinder: {
        const double r = s[0], h = s[1];
        const std::array<double, 3> areas{kTwoPi * r * 2 * h, std::numbers::pi * r * r,
                                          std::numbers::pi * r * r};
        const std::size_t patch = pick_patch(areas, rng);
        const double phi = kTwoPi * u(rng);
        if (patch == 0) {
          const double z = (2 * u(rng) - 1) * h;
          add_point(c, {r * std::cos(phi), r * std::sin(phi), z}, {std::cos(phi), std::sin(phi), 0}, 0);
        } else {
          const double rho = r * std::sqrt(u(rng));
          const double sign = patch == 1 ? 1.0 : -1.0;
          add_point(c, {rho * std::cos(phi), rho * std::sin(phi), sign * h}, {0, 0, sign}, 1);
        }
        break;
      }
      case ShapeFamily::torus: {
        const double big = s[0], small = s[1];
        // Area element is proportional to (big + small cos theta).
        double theta;
        do theta = kTwoPi * u(rng);
        while (u(rng) * (big + small) > big + small * std::cos(theta));
        const double phi = kTwoPi * u(rng);
        const double ring = big + small * std::cos(theta);
        add_point(c, {ring * std::cos(phi), ring * std::sin(phi), small * std::sin(theta)},
                  {std::cos(theta) * std::cos(phi), std::cos(theta) * std::sin(phi), std::sin(theta)}, 0);
        break;
      }
      case ShapeFamily::cone: {
        // Apex at z = +h/2, base disk at z = -h/2.
        const double r = s[0], h = s[1];
        const double slant = std::sqrt(r * r + h * h);
        const std::array<double, 2> areas{std::numbers::pi * r * slant, std::numbers::pi * r * r};
        const double phi = kTwoPi * u(rng);
        if (pick_patch(areas, rng) == 0) {
          const double t = std::sqrt(u(rng));  // fraction of the way from apex to base
          add_point(c, {r * t * std::cos(phi), r * t * std::sin(phi), h / 2 - h * t},
                    {h * std::cos(phi), h * std::sin(phi), r}, 0);
        } else {
          const double rho = r * std::sqrt(u(rng));
          add_point(c, {rho * std::cos(phi), rho * std::sin(phi), -h / 2}, {0, 0, -1}, 1);
        }
        break;
      }
    }
  }
  return c;
}

void AugmentationConfig::validate() const {
  if (!(scale_low > 0) || !(scale_high >= scale_low)) {
    throw std::invalid_argument("augmentation scale range must satisfy 0 < low <= high");
  }
  if (!(translation >= 0)) throw std::invalid_argument("translation range must be >= 0");
  if (!(input_dropout >= 0 && input_dropout < 1)) {
    throw std::invalid_argument("input dropout must be in [0, 1)");
  }
}

PointCloud augment(const PointCloud& cloud, const AugmentationConfig& config, std::mt19937_64& rng) {
  config.validate();
  std::uniform_real_distribution<double> scale(config.scale_low, config.scale_high);
  std::uniform_real_distribution<double> shift(-config.translation, config.translation);
  Vec3 s, t;
  for (std::size_t a = 0; a < 3; ++a) s[a] = scale(rng);
  for (std::size_t a = 0; a < 3; ++a) t[a] = shift(rng);
  PointCloud out = cloud;
  for (auto& p : out.coords) p = Vec3{p.x * s.x, p.y * s.y, p.z * s.z} + t;
  for (auto& n : out.normals) n = unit({n.x / s.x, n.y / s.y, n.z / s.z});
  return out;
}

PointCloud input_dropout(const PointCloud& cloud, double max_ratio, std::size_t min_keep,
                         std::mt19937_64& rng) {
  if (max_ratio <= 0) return cloud;
  const double ratio = std::uniform_real_distribution<double>(0.0, max_ratio)(rng);
  std::bernoulli_distribution drop(ratio);
  std::vector<std::size_t> kept, dropped;
  for (std::size_t i = 0; i < cloud.size(); ++i) (drop(rng) ? dropped : kept).push_back(i);
  // Restore points in random order until the floor is met.
  std::shuffle(dropped.begin(), dropped.end(), rng);
  while (kept.size() < std::min(min_keep, cloud.size())) {
    kept.push_back(dropped.back());
    dropped.pop_back();
  }
  std::sort(kept.begin(), kept.end());
  return cloud.select(kept);
}

PointCloud density_dropout(const PointCloud& cloud, std::size_t keep, std::mt19937_64& rng) {
  if (keep < 1 || keep > cloud.size()) {
    throw std::invalid_argument("density_dropout: cannot keep " + std::to_string(keep) + " of " +
                                std::to_string(cloud.size()) + " points");
  }
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return cloud.select(idx);
}

template <typename T>
std::vector<double> vote_predict(Network<T>& net, const PointCloud& cloud, std::size_t votes,
                                 std::mt19937_64& rng, double scale_low, double scale_high,
                                 std::uint64_t sample_seed) {
  if (votes == 0) throw std::invalid_argument("vote_predict: need at least one vote");
  AugmentationConfig scaling{scale_low, scale_high, 0.0, 0.0};
  std::vector<PointCloud> copies;
  for (std::size_t v = 0; v < votes; ++v) copies.push_back(augment(cloud, scaling, rng));
  std::vector<std::uint64_t> seeds(votes, sample_seed);
  const auto logits = classify_forward<T>(net, copies, {false, seeds, nullptr});
  const std::size_t k = logits.dim(1);
  std::vector<double> avg(k, 0.0);
  for (std::size_t v = 0; v < votes; ++v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits.at(v * k + j)));
    double z = 0;
    std::vector<double> e(k);
    for (std::size_t j = 0; j < k; ++j) z += e[j] = std::exp(static_cast<double>(logits.at(v * k + j)) - mx);
    for (std::size_t j = 0; j < k; ++j) avg[j] += e[j] / z;
  }
  for (auto& p : avg) p /= static_cast<double>(votes);
  return avg;
}

template std::vector<double> vote_predict(Network<float>&, const PointCloud&, std::size_t,
                                          std::mt19937_64&, double, double, std::uint64_t);
template std::vector<double> vote_predict(Network<double>&, const PointCloud&, std::size_t,
                                          std::mt19937_64&, double, double, std::uint64_t);

std::uint64_t shape_seed(const DatasetSpec& spec, Split split, std::size_t cls, std::size_t index) {
  if (cls >= 50 || index >= 1'000'000) throw std::invalid_argument("dataset too large for seed layout");
  return spec.seed * 100'000'000ull + (split == Split::test ? 50'000'000ull : 0ull) +
         cls * 1'000'000ull + index;
}

PointCloud make_sample(const DatasetSpec& spec, Split split, std::size_t cls, std::size_t index) {
  std::mt19937_64 rng(shape_seed(spec, split, cls, index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  ShapeSpec shape;
  shape.family = spec.classes.at(cls);
  shape.points = spec.points;
  shape.cube_face_labels = spec.cube_face_labels;
  switch (shape.family) {
    case ShapeFamily::sphere: shape.size = {between(0.5, 1.5), 0, 0}; break;
    case ShapeFamily::cube: shape.size = {between(0.5, 1.0), between(0.5, 1.0), between(0.5, 1.0)}; break;
    case ShapeFamily::cylinder: shape.size = {between(0.35, 0.7), between(0.6, 1.0), 0}; break;
    case ShapeFamily::torus: shape.size = {1.0, between(0.2, 0.45), 0}; break;
    case ShapeFamily::cone: shape.size = {between(0.5, 0.9), between(1.2, 2.0), 0}; break;
  }
  shape.seed = rng();
  PointCloud cloud = generate(shape);
  if (spec.random_spin) {
    const double a = kTwoPi * u(rng);
    const double c = std::cos(a), s = std::sin(a);
    cloud = transform_cloud(cloud, {Vec3{c, -s, 0}, Vec3{s, c, 0}, Vec3{0, 0, 1}}, {});
  }
  cloud = normalize_global(cloud);
  cloud.shape_label = static_cast<int>(cls);
  return cloud;
}

std::vector<PointCloud> make_split(const DatasetSpec& spec, Split split) {
  const std::size_t per = split == Split::train ? spec.train_per_class : spec.test_per_class;
  std::vector<PointCloud> out;
  out.reserve(per * spec.classes.size());
  // Interleave classes so any prefix stays balanced.
  for (std::size_t i = 0; i < per; ++i)
    for (std::size_t c = 0; c < spec.classes.size(); ++c) out.push_back(make_sample(spec, split, c, i));
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& e : entries) {
    const auto p = e.path.generic_string();
    if (p.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("manifest paths cannot contain whitespace: " + p);
    }
    out += p + " " + std::to_string(e.label) + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw FormatError(path.string() + ": missing '" + kManifestHeader + "' header");
  }
  std::vector<ManifestEntry> entries;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream l(line);
    std::string p, extra;
    int label = 0;
    if (!(l >> p >> label) || (l >> extra)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'path label'");
    }
    entries.push_back({p, label});
  }
  return entries;
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::string& name,
                                    const std::vector<PointCloud>& clouds) {
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    char file[64];
    std::snprintf(file, sizeof(file), "%06zu.pts", i);
    const auto rel = std::filesystem::path(name) / file;
    save_point_cloud(dir / rel, clouds[i]);
    entries.push_back({rel, clouds[i].shape_label.value_or(0)});
  }
  const auto manifest = dir / (name + ".manifest");
  write_manifest(manifest, entries);
  return manifest;
}

std::vector<PointCloud> load_dataset(const std::filesystem::path& manifest) {
  const auto base = manifest.parent_path();
  std::vector<PointCloud> clouds;
  for (const auto& e : read_manifest(manifest)) {
    auto cloud = load_point_cloud(e.path.is_absolute() ? e.path : base / e.path);
    cloud.shape_label = e.label;
    clouds.push_back(std::move(cloud));
  }
  return clouds;
}

}  // namespace rscnn
