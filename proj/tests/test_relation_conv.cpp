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
#include <numbers>
#include <random>

#include "rscnn/gradcheck.hpp"
#include "rscnn/optim.hpp"
#include "rscnn/relation_conv.hpp"
#include "support/oracles.hpp"

namespace rscnn {
namespace {

using T64 = Tensor<double>;

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
  return pts;
}

T64 random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, bool grad = false) {
  std::normal_distribution<double> g(0, 1);
  std::vector<double> v(r * c);
  for (auto& x : v) x = g(rng);
  return T64::from({r, c}, std::move(v), grad);
}

RSConvLayerConfig small_config(std::size_t c_in, std::size_t c_out) {
  RSConvLayerConfig cfg;
  cfg.in_channels = c_in;
  cfg.out_channels = c_out;
  cfg.scales = {{0.5, 4}, {0.9, 6}};
  return cfg;
}

// Randomizes every parameter, including batch-norm affine terms and running
// statistics, so no path is trivially zero or identity.
void randomize(ParameterSet<double>& set, std::mt19937_64& rng) {
  he_init(set, rng);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& p : set.params()) {
    if (p.role == Parameter<double>::Role::bias || p.role == Parameter<double>::Role::bn_shift)
      for (auto& x : p.tensor.data()) x = u(rng) - 1.0;
    if (p.role == Parameter<double>::Role::bn_scale)
      for (auto& x : p.tensor.data()) x = u(rng);
  }
  for (auto& [name, bn] : set.batchnorms())
    for (std::size_t j = 0; j < bn->channels(); ++j) {
      bn->running_mean[j] = u(rng) - 1.0;
      bn->running_var[j] = u(rng);
    }
}

std::vector<GradCheckLeaf> leaves_of(ParameterSet<double>& set) {
  std::vector<GradCheckLeaf> out;
  for (auto& p : set.params()) out.push_back({p.name, p.tensor});
  return out;
}

TEST(RSConvConfig, DefaultWidthsAndValidation) {
  EXPECT_EQ(default_relation_widths(64), (std::vector<std::size_t>{16, 64, 64}));
  EXPECT_EQ(default_relation_widths(128), (std::vector<std::size_t>{16, 64, 128}));
  EXPECT_EQ(default_relation_widths(3), (std::vector<std::size_t>{3, 3, 3}));
  EXPECT_EQ(default_relation_widths(128, 2), (std::vector<std::size_t>{16, 128}));
  EXPECT_EQ(default_relation_widths(128, 4), (std::vector<std::size_t>{16, 64, 64, 128}));

  auto cfg = small_config(8, 16);
  EXPECT_NO_THROW(cfg.validate());
  cfg.relation_mlp_widths = {16, 9};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config(8, 16);
  cfg.scales = {{0.5, 4}, {0.5, 4}};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.scales.clear();
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config(8, 16);
  cfg.relation_cut_ratio = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(RelationWeights, ZeroMappingGivesZeroWeights) {
  ParameterSet<double> set;
  auto params = make_rsconv_params(small_config(8, 16), set, "l0");
  std::mt19937_64 rng(1);
  auto rel = random_matrix(12, 10, rng);
  auto w = relation_weights(params, rel, true);
  EXPECT_EQ(w.shape(), (Shape{12, 8}));
  for (double x : w.values()) EXPECT_EQ(x, 0.0);
}

TEST(RelationWeights, SharedMappingAndRowPermutation) {
  ParameterSet<double> set;
  auto params = make_rsconv_params(small_config(8, 16), set, "l0");
  std::mt19937_64 rng(2);
  randomize(set, rng);
  auto rel = random_matrix(10, 10, rng);
  // Rows 3 and 7 carry the same relation.
  auto d = rel.data();
  std::copy(d.begin() + 30, d.begin() + 40, d.begin() + 70);
  auto w = relation_weights(params, rel, false);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(w.at(3 * 8 + c), w.at(7 * 8 + c));

  std::vector<std::size_t> perm{9, 2, 5, 0, 1, 8, 3, 7, 4, 6};
  auto wp = relation_weights(params, gather_rows(rel, perm), false);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(wp.at(r * 8 + c), w.at(perm[r] * 8 + c));

  // Batch statistics are order-independent up to summation rounding.
  auto wt = relation_weights(params, rel, true);
  auto wtp = relation_weights(params, gather_rows(rel, perm), true);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(wtp.at(r * 8 + c), wt.at(perm[r] * 8 + c), 1e-12);
}

TEST(RelationWeights, CutMaskZeroesRowsAndWidthIsChecked) {
  ParameterSet<double> set;
  auto params = make_rsconv_params(small_config(8, 16), set, "l0");
  std::mt19937_64 rng(3);
  randomize(set, rng);
  auto rel = random_matrix(4, 10, rng);
  std::vector<std::uint8_t> mask{0, 1, 0, 1};
  auto w = relation_weights(params, rel, false, mask);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(w.at(8 + c), 0.0);
    EXPECT_EQ(w.at(24 + c), 0.0);
  }
  EXPECT_THROW(relation_weights(params, random_matrix(4, 7, rng), false), DimensionError);
}

TEST(RSConv, SelfNeighborhoodMatchesHandTrace) {
  auto cfg = small_config(2, 3);
  cfg.scales = {{0.5, 1}};
  cfg.relation_mlp_widths = {2, 2};
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(4);
  randomize(set, rng);

  PointCloud cloud;
  cloud.coords = {{0, 0, 0}};
  std::vector<std::size_t> c{0};
  std::vector<double> radii{0.5};
  auto nbhd = build_neighborhoods(cloud.coords, c, radii, 1, NeighborMode::random_in_ball,
                                  CentroidMode::sampled_point, rng);
  auto f = T64::from({1, 2}, {0.7, -1.3});
  auto out = rs_conv_forward(cfg, params, f, cloud, nbhd, false);

  // h = 0, so the first relation layer sees only its bias.
  auto bn_apply = [](const BatchNormState<double>& bn, std::size_t j, double x) {
    return (x - bn.running_mean[j]) / std::sqrt(bn.running_var[j] + kBatchNormEpsilon) *
               bn.scale.at(j) + bn.shift.at(j);
  };
  const auto& l0 = params.relation_mlp[0];
  const auto& l1 = params.relation_mlp[1];
  std::vector<double> hidden(2), w(2), agg(2);
  for (std::size_t j = 0; j < 2; ++j) hidden[j] = std::max(0.0, bn_apply(*l0.bn, j, l0.bias.at(j)));
  for (std::size_t j = 0; j < 2; ++j) {
    w[j] = l1.bias.at(j);
    for (std::size_t i = 0; i < 2; ++i) w[j] += hidden[i] * l1.weight.at(i * 2 + j);
    agg[j] = std::max(0.0, w[j] * f.at(j));
  }
  const auto& raise = params.channel_raise;
  for (std::size_t o = 0; o < 3; ++o) {
    double z = raise.bias.at(o);
    for (std::size_t j = 0; j < 2; ++j) z += agg[j] * raise.weight.at(j * 3 + o);
    EXPECT_NEAR(out.at(o), std::max(0.0, bn_apply(*raise.bn, o, z)), 1e-12);
  }
}

struct Toy {
  PointCloud cloud;
  std::vector<std::size_t> centroids;
  NeighborhoodIndex nbhd;
};

Toy make_toy(std::size_t n, std::size_t s, const RSConvLayerConfig& cfg, std::mt19937_64& rng) {
  Toy t;
  t.cloud.coords = random_points(n, rng);
  t.centroids = farthest_point_sample(t.cloud.coords, s, geometric_start(t.cloud.coords));
  t.nbhd = build_neighborhoods(t.cloud.coords, t.centroids, cfg.radii(), cfg.ks(),
                               cfg.neighbor_mode, cfg.centroid_mode, rng);
  return t;
}

TEST(RSConv, OutputShapeFollowsConfig) {
  auto cfg = small_config(5, 11);
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(5);
  randomize(set, rng);
  auto toy = make_toy(30, 7, cfg, rng);
  auto out = rs_conv_forward(cfg, params, random_matrix(30, 5, rng), toy.cloud, toy.nbhd, true);
  EXPECT_EQ(out.shape(), (Shape{7, 11}));
  EXPECT_THROW(rs_conv_forward(cfg, params, random_matrix(29, 5, rng), toy.cloud, toy.nbhd, true),
               DimensionError);
  EXPECT_THROW(rs_conv_forward(cfg, params, random_matrix(30, 4, rng), toy.cloud, toy.nbhd, true),
               DimensionError);
}

TEST(RSConv, NeighborOrderDoesNotMatter) {
  for (auto agg : {ReduceKind::max, ReduceKind::sum, ReduceKind::mean}) {
    auto cfg = small_config(6, 9);
    cfg.aggregation = agg;
    ParameterSet<double> set;
    auto params = make_rsconv_params(cfg, set, "l0");
    std::mt19937_64 rng(6);
    randomize(set, rng);
    auto toy = make_toy(40, 8, cfg, rng);
    auto f = random_matrix(40, 6, rng);
    auto base = rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, false);
    for (int trial = 0; trial < 10; ++trial) {
      auto shuffled = toy.nbhd;
      for (auto& sc : shuffled.scales)
        for (std::size_t i = 0; i < shuffled.centroid_indices.size(); ++i)
          std::shuffle(sc.indices.begin() + i * sc.k, sc.indices.begin() + (i + 1) * sc.k, rng);
      auto out = rs_conv_forward(cfg, params, f, toy.cloud, shuffled, false);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (agg == ReduceKind::max)
          EXPECT_EQ(out.at(i), base.at(i));
        else
          EXPECT_NEAR(out.at(i), base.at(i), 1e-9);
      }
    }
  }
}

TEST(RSConv, DistanceRelationIsRigidInvariant) {
  auto cfg = small_config(4, 8);
  cfg.relation_kind = RelationKind::dist_only();
  cfg.relation_mlp_widths = {4, 4, 4};
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(7);
  randomize(set, rng);
  PointCloud cloud;
  cloud.coords = random_points(50, rng);
  auto f = random_matrix(50, 4, rng);  // features travel with their points
  auto run = [&](const PointCloud& c) {
    auto cent = farthest_point_sample(c.coords, 10, geometric_start(c.coords));
    std::mt19937_64 r(99);
    auto nb = build_neighborhoods(c.coords, cent, cfg.radii(), cfg.ks(), cfg.neighbor_mode,
                                  cfg.centroid_mode, r);
    return rs_conv_forward(cfg, params, f, c, nb, false);
  };
  auto base = run(cloud);
  for (int t = 0; t < 10; ++t) {
    auto moved = transform_cloud(cloud, random_rotation(rng), {0.2, -0.2, 0.1});
    auto out = run(moved);
    for (std::size_t i = 0; i < out.size(); ++i)
      EXPECT_LE(std::abs(out.at(i) - base.at(i)), 1e-5 * std::max(1.0, std::abs(base.at(i))));
  }
}

TEST(RSConv, LayerGradientsMatchFiniteDifferences) {
  for (auto kind : {RelationKind::full(), RelationKind::planar_fusion()}) {
    auto cfg = small_config(3, 5);
    cfg.relation_kind = kind;
    ParameterSet<double> set;
    auto params = make_rsconv_params(cfg, set, "l0");
    std::mt19937_64 rng(8);
    randomize(set, rng);
    auto toy = make_toy(24, 6, cfg, rng);
    auto f = random_matrix(24, 3, rng, true);
    auto probe = random_matrix(6, 5, rng);
    auto leaves = leaves_of(set);
    leaves.push_back({"features", f});
    auto r = check_gradients(leaves, [&] {
      return sum_all(mul(rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, true), probe));
    });
    EXPECT_TRUE(r.ok()) << kind.name() << ": " << r.failures << "/" << r.checked << " "
                        << r.worst_entry;
  }
}

TEST(RSConv, SharedMappingAccumulatesEveryApplication) {
  auto cfg = small_config(3, 4);
  cfg.scales = {{0.8, 3}};
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(9);
  randomize(set, rng);
  auto toy = make_toy(12, 2, cfg, rng);
  auto f = random_matrix(12, 3, rng);
  auto probe = random_matrix(2, 3, rng);
  ConvSample sample{toy.cloud.coords, {}, &toy.nbhd, nullptr};
  RelationMapping<double> mapping = [&](const T64& rel) {
    return relation_weights(params, rel, false);
  };

  set.zero_grads();
  backward(sum_all(mul(relation_aggregate<double>(cfg.relation_kind, ReduceKind::sum,
                                                  cfg.scale_fusion, f,
                                                  std::span<const ConvSample>(&sample, 1), mapping,
                                                  false),
                       probe)));
  std::vector<std::vector<double>> joint;
  for (auto& p : set.params())
    joint.emplace_back(p.tensor.has_grad() ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                                           : std::vector<double>(p.tensor.size(), 0.0));

  // One graph per (centroid, neighbor); gradients accumulate across them.
  set.zero_grads();
  const auto& sc = toy.nbhd.scales[0];
  for (std::size_t i = 0; i < 2; ++i)
    for (auto j : sc.row(i)) {
      auto h = compute_relation(cfg.relation_kind, sc.reference[i], toy.cloud.coords[j]);
      auto w = relation_weights(params, T64::from({1, 10}, h), false);
      std::vector<std::size_t> row{j}, prow{i};
      backward(sum_all(mul(mul(w, gather_rows(f, row)), gather_rows(probe, prow))));
    }
  std::size_t touched = 0;
  for (std::size_t k = 0; k < set.params().size(); ++k) {
    auto& p = set.params()[k];
    if (p.name.find("raise") != std::string::npos) continue;
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    for (std::size_t e = 0; e < p.tensor.size(); ++e) {
      EXPECT_NEAR(p.tensor.grad()[e], joint[k][e], 1e-12) << p.name;
      touched += p.tensor.grad()[e] != 0;
    }
  }
  EXPECT_GT(touched, 0u);
}

TEST(RSConv, MappingGradientDependsOnCentroidPosition) {
  auto cfg = small_config(3, 4);
  cfg.scales = {{1.5, 4}};
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(10);
  randomize(set, rng);
  auto toy = make_toy(10, 1, cfg, rng);
  auto f = random_matrix(10, 3, rng);
  const std::size_t c = toy.centroids[0];
  const Vec3 saved = toy.cloud.coords[c];
  auto grad_at = [&](double dx) {
    toy.cloud.coords[c] = saved + Vec3{dx, 0, 0};
    toy.nbhd.scales[0].reference[0] = toy.cloud.coords[c];
    set.zero_grads();
    backward(sum_all(rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, false)));
    auto g = params.relation_mlp[0].weight.grad();
    return std::vector<double>(g.begin(), g.end());
  };
  const double h = 1e-5;
  auto up = grad_at(h), down = grad_at(-h);
  double sensitivity = 0;
  for (std::size_t i = 0; i < up.size(); ++i) sensitivity = std::max(sensitivity, std::abs(up[i] - down[i]) / (2 * h));
  EXPECT_GT(sensitivity, 1e-3);
}

TEST(RSConv, PartialNeighborhoodsStayFinite) {
  auto cfg = small_config(4, 6);
  cfg.scales = {{0.3, 8}};
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(11);
  randomize(set, rng);
  auto toy = make_toy(40, 20, cfg, rng);
  std::set<std::size_t> counts(toy.nbhd.scales[0].valid_counts.begin(),
                               toy.nbhd.scales[0].valid_counts.end());
  EXPECT_GT(counts.size(), 2u) << "expected a spread of neighborhood sizes";
  auto out = rs_conv_forward(cfg, params, random_matrix(40, 4, rng), toy.cloud, toy.nbhd, true);
  for (double x : out.values()) EXPECT_TRUE(std::isfinite(x));
}

TEST(RSConv, ScaleFusionModes) {
  auto cfg = small_config(3, 4);
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(12);
  randomize(set, rng);
  auto toy = make_toy(20, 5, cfg, rng);
  auto f = random_matrix(20, 3, rng);
  ConvSample sample{toy.cloud.coords, {}, &toy.nbhd, nullptr};
  std::span<const ConvSample> batch(&sample, 1);
  RelationMapping<double> mapping = [&](const T64& rel) {
    return relation_weights(params, rel, false);
  };
  auto mx = relation_aggregate<double>(cfg.relation_kind, ReduceKind::max,
                                       ScaleFusion::elementwise_max, f, batch, mapping, true);
  auto sm = relation_aggregate<double>(cfg.relation_kind, ReduceKind::max,
                                       ScaleFusion::elementwise_sum, f, batch, mapping, true);
  for (std::size_t i = 0; i < mx.size(); ++i) {
    EXPECT_GE(mx.at(i), 0.0);
    EXPECT_GE(sm.at(i) + 1e-15, mx.at(i));  // sum of non-negative terms bounds their max
  }
}

TEST(RSConv, SharedMappingNormalizesAllScalesTogether) {
  auto cfg = small_config(3, 4);
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(21);
  randomize(set, rng);
  set.set_bn_momentum(1.0);  // running stats become the last batch's stats
  auto toy = make_toy(20, 5, cfg, rng);
  auto f = random_matrix(20, 3, rng);
  ConvSample sample{toy.cloud.coords, {}, &toy.nbhd, nullptr};
  std::span<const ConvSample> batch(&sample, 1);
  rs_conv_forward<double>(cfg, params, f, batch, true);

  // Oracle: mean of the first mapping layer over the relations of both scales.
  const auto& first = params.relation_mlp[0];
  std::vector<double> mean(first.out(), 0.0);
  std::size_t rows = 0;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    const auto block = relation_block(cfg.relation_kind, batch, s);
    const std::size_t ch = cfg.relation_kind.channels();
    for (std::size_t r = 0; r < block.size() / ch; ++r, ++rows)
      for (std::size_t o = 0; o < first.out(); ++o) {
        double v = first.bias.at(o);
        for (std::size_t i = 0; i < ch; ++i) v += block[r * ch + i] * first.weight.at(i * first.out() + o);
        mean[o] += v;
      }
  }
  for (std::size_t o = 0; o < first.out(); ++o)
    EXPECT_NEAR(first.bn->running_mean[o], mean[o] / static_cast<double>(rows), 1e-12);
}

TEST(RSConv, RelationCutNeedsStreamAndOnlyActsInTraining) {
  auto cfg = small_config(3, 4);
  cfg.relation_cut_ratio = 0.5;
  ParameterSet<double> set;
  auto params = make_rsconv_params(cfg, set, "l0");
  std::mt19937_64 rng(13);
  randomize(set, rng);
  auto toy = make_toy(20, 5, cfg, rng);
  auto f = random_matrix(20, 3, rng);
  EXPECT_THROW(rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, true), std::invalid_argument);
  EXPECT_NO_THROW(rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, false));
  std::mt19937_64 r1(1), r2(1);
  auto a = rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, true, &r1);
  auto b = rs_conv_forward(cfg, params, f, toy.cloud, toy.nbhd, true, &r2);
  EXPECT_EQ(std::vector<double>(a.values().begin(), a.values().end()),
            std::vector<double>(b.values().begin(), b.values().end()));
}

TEST(GridConv, CountingAndIdentityKernels) {
  std::vector<double> ones(16, 1.0), kernel(9, 1.0);
  auto r = grid_conv_check(kernel, ones, 4, 4, 1);
  ASSERT_EQ(r.rs_conv.size(), 4u);
  for (double v : r.rs_conv) EXPECT_EQ(v, 9.0);

  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> map(25);
  for (auto& v : map) v = u(rng);
  std::vector<double> ident(9, 0.0);
  ident[4] = 1.0;
  r = grid_conv_check(ident, map, 5, 5, 1);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ(r.rs_conv[y * 3 + x], map[(y + 1) * 5 + x + 1]);
}

TEST(GridConv, MatchesDenseConvolutionOracle) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t c = 1 + t % 4;
    std::vector<double> map(25 * c), kernel(9 * c);
    for (auto& v : map) v = u(rng);
    for (auto& v : kernel) v = u(rng);
    auto r = grid_conv_check(kernel, map, 5, 5, c);
    auto want = oracle::dense_conv3x3(map, 5, 5, c, kernel);
    ASSERT_EQ(r.rs_conv.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(r.rs_conv[i], want[i], 1e-9);
    EXPECT_LE(r.max_abs_diff, 1e-9);
  }
}

TEST(GridConv, RejectsOffGridPositions) {
  std::vector<double> map(16, 1.0), kernel(9, 1.0);
  std::vector<Vec3> pos;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) pos.push_back({x * 1.3, y * 1.0, 0.0});
  EXPECT_THROW(grid_conv_check(kernel, map, 4, 4, 1, pos), std::invalid_argument);
}

}  // namespace
}  // namespace rscnn
