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


#include "rscnn/selfcheck.hpp"

#include <random>

#include "rscnn/data.hpp"
#include "rscnn/networks.hpp"
#include "rscnn/optim.hpp"
#include "rscnn/relation_conv.hpp"

namespace rscnn {

namespace {

using T64 = Tensor<double>;

T64 random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = d(rng);
  return T64::from(std::move(shape), std::move(v), true);
}

// Fixed random weights turn any tensor into a scalar with a generic gradient.
T64 probe(const T64& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> w(t.size());
  for (auto& x : w) x = u(rng);
  return sum_all(mul(t, T64::from(t.shape(), std::move(w))));
}

PointCloud surface(std::size_t n, std::uint64_t seed) {
  DatasetSpec spec;
  spec.points = n;
  spec.seed = seed;
  return make_sample(spec, Split::train, seed % 4, 0);
}

void perturb_non_weights(ParameterSet<double>& set, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& p : set.params())
    if (p.role != Parameter<double>::Role::weight)
      for (auto& x : p.tensor.data()) x += u(rng);
}

}  // namespace

std::vector<SelfCheckRow> gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SelfCheckRow> rows;
  auto run = [&](const std::string& name, std::vector<GradCheckLeaf> leaves,
                 const std::function<T64()>& f) { rows.push_back({name, check_gradients(leaves, f)}); };

  {
    auto a = random_tensor({4, 3}, rng), b = random_tensor({3, 5}, rng);
    run("matmul", {{"a", a}, {"b", b}}, [=] { return probe(matmul(a, b), 1); });
  }
  {
    auto a = random_tensor({4, 3}, rng), b = random_tensor({1, 3}, rng);
    run("add_broadcast", {{"a", a}, {"b", b}}, [=] { return probe(add(a, b), 2); });
    run("mul_broadcast", {{"a", a}, {"b", b}}, [=] { return probe(mul(a, b), 3); });
    run("relu", {{"a", a}}, [=] { return probe(relu(a), 4); });
    run("scale", {{"a", a}}, [=] { return probe(scale(a, 1.7), 5); });
  }
  {
    auto t = random_tensor({3, 4, 2}, rng);
    for (auto kind : {ReduceKind::max, ReduceKind::mean, ReduceKind::sum})
      for (std::size_t axis = 0; axis < 3; ++axis) {
        const std::string name = std::string("reduce_") +
                                 (kind == ReduceKind::max ? "max" : kind == ReduceKind::mean ? "mean" : "sum") +
                                 "_axis" + std::to_string(axis);
        run(name, {{"t", t}}, [=] { return probe(reduce(kind, t, axis), 6 + axis); });
      }
  }
  {
    auto t = random_tensor({7, 3}, rng);
    const std::vector<std::size_t> offsets{0, 2, 3, 7};
    run("segment_max", {{"t", t}}, [=] { return probe(segment_reduce(ReduceKind::max, t, offsets), 9); });
    run("segment_mean", {{"t", t}}, [=] { return probe(segment_reduce(ReduceKind::mean, t, offsets), 10); });
    const std::vector<std::size_t> idx{3, 0, 3, 6, 1};
    run("gather_rows", {{"t", t}}, [=] { return probe(gather_rows(t, idx), 11); });
    run("reshape", {{"t", t}}, [=] { return probe(reshape(t, {3, 7}), 12); });
    auto u = random_tensor({7, 2}, rng);
    run("concat_cols", {{"t", t}, {"u", u}}, [=] {
      const std::vector<T64> parts{t, u};
      return probe(concat_cols<double>(parts), 13);
    });
    run("normalize_rows", {{"t", t}}, [=] { return probe(normalize_rows(t), 14); });
    run("dropout", {{"t", t}}, [=] {
      std::mt19937_64 mask(15);
      return probe(dropout(t, 0.4, true, mask), 16);
    });
  }
  {
    auto x = random_tensor({6, 3}, rng);
    auto bn = std::make_shared<BatchNormState<double>>(3);
    auto gamma = bn->scale.data();
    for (std::size_t j = 0; j < gamma.size(); ++j) gamma[j] = 0.5 + static_cast<double>(j);
    run("batchnorm", {{"x", x}, {"scale", bn->scale}, {"shift", bn->shift}},
        [=] { return probe(batchnorm(x, *bn, true), 17); });
  }
  {
    auto logits = random_tensor({5, 4}, rng);
    const std::vector<int> y{0, 3, 1, 1, 2};
    run("softmax_cross_entropy", {{"logits", logits}}, [=] { return softmax_cross_entropy(logits, y); });
    auto pred = random_tensor({5, 3}, rng);
    auto target = normalize_rows(random_tensor({5, 3}, rng));
    auto fixed = T64::from(target.shape(), std::vector<double>(target.values().begin(), target.values().end()));
    run("cosine_loss", {{"pred", pred}}, [=] { return cosine_loss(pred, fixed); });
  }
  {
    RSConvLayerConfig cfg;
    cfg.in_channels = 4;
    cfg.out_channels = 5;
    cfg.scales = {{0.5, 4}, {0.9, 6}};
    ParameterSet<double> set;
    auto params = make_rsconv_params(cfg, set, "conv");
    he_init(set, rng);
    perturb_non_weights(set, rng);
    const auto cloud = surface(24, seed);
    std::mt19937_64 nrng(seed + 1);
    const std::vector<std::size_t> centroids{0, 5, 9, 13, 20};
    const auto nbhd = build_neighborhoods(cloud.coords, centroids, cfg.radii(), cfg.ks(),
                                          cfg.neighbor_mode, cfg.centroid_mode, nrng);
    auto features = random_tensor({24, 4}, rng);
    std::vector<GradCheckLeaf> leaves{{"features", features}};
    for (auto& p : set.params()) leaves.push_back({p.name, p.tensor});
    run("rs_conv_layer", leaves, [&, features] {
      return probe(rs_conv_forward<double>(cfg, params, features, cloud, nbhd, true), 18);
    });
  }
  {
    ParameterSet<double> set;
    auto mixer = make_dense(set, "mix", 6, 4, true);
    he_init(set, rng);
    perturb_non_weights(set, rng);
    const auto fine = surface(12, seed + 2).coords;
    const std::vector<Vec3> coarse(fine.begin(), fine.begin() + 4);
    auto coarse_f = random_tensor({4, 4}, rng);
    auto skip = random_tensor({12, 2}, rng);
    std::vector<GradCheckLeaf> leaves{{"coarse", coarse_f}, {"skip", skip}};
    for (auto& p : set.params()) leaves.push_back({p.name, p.tensor});
    run("feature_propagation", leaves, [&, coarse_f, skip] {
      return probe(feature_propagation<double>(mixer, fine, coarse, coarse_f, skip, true), 19);
    });
  }
  {
    Network<double> net(miniature_classifier_config(3));
    he_init(net.params, rng);
    perturb_non_weights(net.params, rng);
    std::vector<PointCloud> clouds{surface(32, seed + 3), surface(32, seed + 4)};
    const std::vector<int> labels{0, 2};
    const std::vector<std::uint64_t> seeds{seed + 5, seed + 6};
    std::vector<GradCheckLeaf> leaves;
    for (auto& p : net.params.params()) leaves.push_back({p.name, p.tensor});
    run("miniature_classifier", leaves, [&] {
      std::mt19937_64 drop(seed + 7);  // same dropout mask on every evaluation
      ForwardContext ctx{true, seeds, &drop};
      return softmax_cross_entropy(classify_forward<double>(net, clouds, ctx), labels);
    });
  }
  return rows;
}

std::vector<GridConvRow> gridconv_suite(std::uint64_t seed, std::size_t instances, std::size_t size) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> channels(1, 4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<GridConvRow> rows;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t c = channels(rng);
    std::vector<double> map(size * size * c), kernel(9 * c);
    for (auto& v : map) v = g(rng);
    for (auto& v : kernel) v = g(rng);
    const auto r = grid_conv_check(kernel, map, size, size, c);
    rows.push_back({size, size, c, r.max_abs_diff});
  }
  return rows;
}

}  // namespace rscnn
