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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "rscnn/data.hpp"
#include "rscnn/fileio.hpp"
#include "rscnn/optim.hpp"

namespace rscnn {
namespace {

ShapeSpec shape(ShapeFamily f, std::array<double, 3> size, std::uint64_t seed = 1) {
  ShapeSpec s;
  s.family = f;
  s.size = size;
  s.seed = seed;
  return s;
}

TEST(Shapes, SpherePointsAndNormals) {
  const auto c = generate(shape(ShapeFamily::sphere, {0.7, 0, 0}));
  ASSERT_EQ(c.size(), 256u);
  ASSERT_NO_THROW(c.validate());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(norm(c.coords[i]), 0.7, 1e-12);
    EXPECT_NEAR(norm(c.normals[i]), 1.0, 1e-12);
    EXPECT_NEAR(dot(c.normals[i], (1 / 0.7) * c.coords[i]), 1.0, 1e-12);
  }
}

TEST(Shapes, CubeFacesMatchLabelsAndNormals) {
  const auto c = generate(shape(ShapeFamily::cube, {1, 1, 1}));
  for (std::size_t i = 0; i < c.size(); ++i) {
    const int f = c.point_labels[i];
    ASSERT_GE(f, 0);
    ASSERT_LT(f, 6);
    const std::size_t axis = static_cast<std::size_t>(f) / 2;
    const double sign = f % 2 == 0 ? 1 : -1;
    EXPECT_EQ(c.coords[i][axis], sign);
    EXPECT_EQ(c.normals[i][axis], sign);
    for (std::size_t a = 0; a < 3; ++a) EXPECT_LE(std::abs(c.coords[i][a]), 1.0);
  }
}

TEST(Shapes, CubeFaceCountsAreAreaUniform) {
  std::array<double, 6> counts{};
  double n = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (int f : generate(shape(ShapeFamily::cube, {1, 1, 1}, seed)).point_labels) {
      counts[static_cast<std::size_t>(f)] += 1;
      n += 1;
    }
  }
  const double p = 1.0 / 6, sigma = std::sqrt(n * p * (1 - p));
  for (double c : counts) EXPECT_LE(std::abs(c - n * p), 4 * sigma);
}

TEST(Shapes, CylinderSideToCapRatioFollowsArea) {
  const double r = 0.5, h = 1.0;
  double side = 0, n = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto c = generate(shape(ShapeFamily::cylinder, {r, h, 0}, seed));
    for (std::size_t i = 0; i < c.size(); ++i) {
      n += 1;
      const auto p = c.coords[i];
      if (c.point_labels[i] == 0) {
        side += 1;
        EXPECT_NEAR(std::hypot(p.x, p.y), r, 1e-12);
        EXPECT_LE(std::abs(p.z), h);
        EXPECT_EQ(c.normals[i].z, 0.0);
      } else {
        EXPECT_EQ(std::abs(p.z), h);
        EXPECT_LE(std::hypot(p.x, p.y), r + 1e-12);
        EXPECT_EQ(c.normals[i].z, p.z > 0 ? 1.0 : -1.0);
      }
    }
  }
  const double ps = (2 * M_PI * r * 2 * h) / (2 * M_PI * r * 2 * h + 2 * M_PI * r * r);
  EXPECT_LE(std::abs(side - n * ps), 4 * std::sqrt(n * ps * (1 - ps)));
}

TEST(Shapes, TorusAndConeLieOnTheirSurfaces) {
  const auto t = generate(shape(ShapeFamily::torus, {1.0, 0.3, 0}));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto p = t.coords[i];
    const double ring = std::hypot(p.x, p.y) - 1.0;
    EXPECT_NEAR(ring * ring + p.z * p.z, 0.09, 1e-12);
    // The normal points from the tube center line to the point.
    const double s = std::hypot(p.x, p.y);
    const Vec3 center{p.x / s, p.y / s, 0};
    EXPECT_NEAR(dot(t.normals[i], (1 / 0.3) * (p - center)), 1.0, 1e-9);
  }
  const double r = 0.6, h = 1.5;
  const auto c = generate(shape(ShapeFamily::cone, {r, h, 0}));
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto p = c.coords[i];
    EXPECT_NEAR(norm(c.normals[i]), 1.0, 1e-12);
    if (c.point_labels[i] == 0) {
      // Radius shrinks linearly from r at the base to 0 at the apex.
      EXPECT_NEAR(std::hypot(p.x, p.y), r * (h / 2 - p.z) / h, 1e-12);
      const Vec3 apex{0, 0, h / 2};
      EXPECT_NEAR(dot(c.normals[i], p - apex), 0.0, 1e-12);
    } else {
      EXPECT_EQ(p.z, -h / 2);
      EXPECT_EQ(c.normals[i].z, -1.0);
    }
  }
}

TEST(Shapes, DeterministicPerSeed) {
  const auto a = generate(shape(ShapeFamily::torus, {1, 0.4, 0}, 9));
  const auto b = generate(shape(ShapeFamily::torus, {1, 0.4, 0}, 9));
  const auto c = generate(shape(ShapeFamily::torus, {1, 0.4, 0}, 10));
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_EQ(a.normals, b.normals);
  EXPECT_NE(a.coords, c.coords);
}

TEST(Shapes, InvalidSpecsAreRejected) {
  EXPECT_THROW(generate(shape(ShapeFamily::sphere, {-1, 0, 0})), std::invalid_argument);
  EXPECT_THROW(generate(shape(ShapeFamily::torus, {0.3, 0.5, 0})), std::invalid_argument);
  EXPECT_THROW(parse_family("blob"), std::invalid_argument);
  EXPECT_EQ(parse_family("cone"), ShapeFamily::cone);
}

TEST(Augment, IdentitySettingsLeaveCloudUnchanged) {
  const auto c = generate(shape(ShapeFamily::cube, {1, 0.5, 0.8}));
  std::mt19937_64 rng(3);
  const auto out = augment(c, {1.0, 1.0, 0.0, 0.0}, rng);
  EXPECT_EQ(out.coords, c.coords);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t a = 0; a < 3; ++a) EXPECT_NEAR(out.normals[i][a], c.normals[i][a], 1e-15);
}

TEST(Augment, TranslationOnlyIsAnIsometry) {
  const auto c = generate(shape(ShapeFamily::sphere, {1, 0, 0}));
  std::mt19937_64 rng(4);
  const auto out = augment(c, {1.0, 1.0, 0.2, 0.0}, rng);
  const Vec3 shift = out.coords[0] - c.coords[0];
  for (std::size_t a = 0; a < 3; ++a) EXPECT_LE(std::abs(shift[a]), 0.2);
  for (std::size_t i = 1; i < c.size(); ++i)
    EXPECT_NEAR(dist2(out.coords[i], out.coords[0]), dist2(c.coords[i], c.coords[0]), 1e-12);
}

TEST(Augment, ScaleStretchesExtentAndKeepsNormalsOnSurface) {
  const auto c = generate(shape(ShapeFamily::sphere, {1, 0, 0}));
  std::mt19937_64 rng(5);
  const auto out = augment(c, {2.0, 2.0, 0.0, 0.0}, rng);
  auto extent = [](const PointCloud& p) {
    double lo = 1e9, hi = -1e9;
    for (auto v : p.coords) lo = std::min(lo, v.x), hi = std::max(hi, v.x);
    return hi - lo;
  };
  EXPECT_NEAR(extent(out), 2 * extent(c), 1e-12);
  // Non-uniform scales: normals stay perpendicular to the ellipsoid.
  std::mt19937_64 rng2(6);
  const auto e = augment(c, {0.5, 1.5, 0.0, 0.0}, rng2);
  const Vec3 p = e.coords[0];
  const Vec3 s{p.x / c.coords[0].x, p.y / c.coords[0].y, p.z / c.coords[0].z};
  for (std::size_t i = 0; i < e.size(); ++i) {
    const Vec3 q = e.coords[i];
    const Vec3 grad{q.x / (s.x * s.x), q.y / (s.y * s.y), q.z / (s.z * s.z)};
    EXPECT_NEAR(dot(e.normals[i], (1 / norm(grad)) * grad), 1.0, 1e-9);
  }
}

TEST(Dropout, DensitySubsetKeepsOrderAndRange) {
  const auto c = generate(shape(ShapeFamily::cylinder, {0.5, 1, 0}));
  std::mt19937_64 rng(7);
  const auto d = density_dropout(c, 64, rng);
  ASSERT_EQ(d.size(), 64u);
  std::size_t last = 0;
  bool first = true;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto it = std::find(c.coords.begin(), c.coords.end(), d.coords[i]);
    ASSERT_NE(it, c.coords.end());
    const auto idx = static_cast<std::size_t>(it - c.coords.begin());
    if (!first) EXPECT_GT(idx, last);
    first = false;
    last = idx;
    EXPECT_EQ(d.point_labels[i], c.point_labels[idx]);
    EXPECT_EQ(d.normals[i], c.normals[idx]);
  }
  EXPECT_EQ(density_dropout(c, 1, rng).size(), 1u);
  EXPECT_EQ(density_dropout(c, c.size(), rng).coords, c.coords);
  EXPECT_THROW(density_dropout(c, 0, rng), std::invalid_argument);
  EXPECT_THROW(density_dropout(c, c.size() + 1, rng), std::invalid_argument);
}

TEST(Dropout, InputDropoutRespectsFloor) {
  const auto c = generate(shape(ShapeFamily::sphere, {1, 0, 0}));
  std::mt19937_64 rng(8);
  std::size_t smallest = c.size();
  for (int t = 0; t < 50; ++t) {
    const auto d = input_dropout(c, 0.875, 200, rng);
    EXPECT_GE(d.size(), 200u);
    smallest = std::min(smallest, d.size());
  }
  EXPECT_LT(smallest, c.size());
  EXPECT_EQ(input_dropout(c, 0.0, 1, rng).coords, c.coords);
}

TEST(Voting, SingleUnscaledVoteMatchesPlainForward) {
  Network<double> net(miniature_classifier_config(3));
  std::mt19937_64 init(1);
  he_init(net.params, init);
  const auto cloud = normalize_global(generate(shape(ShapeFamily::cube, {1, 0.6, 0.4})));
  std::mt19937_64 rng(2);
  const auto p = vote_predict(net, cloud, 1, rng, 1.0, 1.0, 5);
  const std::uint64_t seed = 5;
  const auto logits = classify_forward<double>(
      net, std::span<const PointCloud>(&cloud, 1), {false, std::span<const std::uint64_t>(&seed, 1), nullptr});
  double mx = -1e300, z = 0;
  for (std::size_t j = 0; j < 3; ++j) mx = std::max(mx, logits.at(j));
  for (std::size_t j = 0; j < 3; ++j) z += std::exp(logits.at(j) - mx);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(p[j], std::exp(logits.at(j) - mx) / z, 1e-12);

  const auto many = vote_predict(net, cloud, 12, rng);
  double total = 0;
  for (double v : many) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_THROW(vote_predict(net, cloud, 0, rng), std::invalid_argument);
}

TEST(Datasets, SplitsAreBalancedDeterministicAndDisjoint) {
  DatasetSpec spec;
  spec.train_per_class = 5;
  spec.test_per_class = 3;
  spec.points = 64;
  spec.seed = 11;
  const auto train = make_split(spec, Split::train);
  const auto again = make_split(spec, Split::train);
  const auto test = make_split(spec, Split::test);
  ASSERT_EQ(train.size(), 20u);
  ASSERT_EQ(test.size(), 12u);
  std::array<int, 4> per{};
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(train[i].coords, again[i].coords);
    per[static_cast<std::size_t>(*train[i].shape_label)]++;
    double r = 0;
    for (auto v : train[i].coords) r = std::max(r, norm(v));
    EXPECT_NEAR(r, 1.0, 1e-12);
  }
  for (int n : per) EXPECT_EQ(n, 5);
  std::set<std::uint64_t> seeds;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 5; ++i) {
      seeds.insert(shape_seed(spec, Split::train, c, i));
      seeds.insert(shape_seed(spec, Split::test, c, i));
    }
  EXPECT_EQ(seeds.size(), 40u);
}

TEST(Datasets, ManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "rscnn_test_manifest";
  std::filesystem::remove_all(dir);
  DatasetSpec spec;
  spec.train_per_class = 2;
  spec.points = 32;
  const auto clouds = make_split(spec, Split::train);
  const auto manifest = write_dataset(dir, "train", clouds);
  const auto loaded = load_dataset(manifest);
  ASSERT_EQ(loaded.size(), clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    EXPECT_EQ(loaded[i].coords, clouds[i].coords);
    EXPECT_EQ(loaded[i].normals, clouds[i].normals);
    EXPECT_EQ(loaded[i].shape_label, clouds[i].shape_label);
  }
  write_file_atomic(dir / "bad.manifest", "RSCNN-MANIFEST v1\ntrain/000000.pts\n");
  EXPECT_THROW(read_manifest(dir / "bad.manifest"), FormatError);
  write_file_atomic(dir / "bad2.manifest", "nonsense\n");
  EXPECT_THROW(read_manifest(dir / "bad2.manifest"), FormatError);
  EXPECT_THROW(write_manifest(dir / "x.manifest", {{"has space.pts", 0}}), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace rscnn
