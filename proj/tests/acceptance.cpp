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

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Arguments select a subset by number.

#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rscnn/data.hpp"
#include "rscnn/geometry.hpp"
#include "rscnn/relation_conv.hpp"
#include "rscnn/selfcheck.hpp"
#include "rscnn/trainer.hpp"
#include "support/oracles.hpp"

namespace rscnn {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

ExperimentConfig benchmark_config(std::uint64_t seed) {
  ExperimentConfig cfg;  // 4 classes, 200 train / 50 test per class, 256 points
  cfg.schedule.epochs = 30;
  cfg.seed = seed;
  cfg.data.seed = seed;
  return cfg;
}

// Trained benchmark models shared by the generalization and density checks.
struct TrainedModel {
  std::unique_ptr<TrainState> state;
  double test_accuracy = 0;
};
std::map<std::pair<std::string, std::uint64_t>, TrainedModel> g_models;

TrainedModel& trained(const std::string& variant, std::uint64_t seed) {
  auto key = std::make_pair(variant, seed);
  auto it = g_models.find(key);
  if (it != g_models.end()) return it->second;
  auto cfg = benchmark_config(seed);
  if (variant == "dist") cfg.relation = RelationKind::dist_only();
  if (variant == "input_dropout") cfg.augmentation.input_dropout = 0.875;
  cfg.validate();
  TrainedModel m;
  m.state = std::make_unique<TrainState>(cfg);
  TrainOptions options;
  options.evaluate_test = false;
  const auto report = train(cfg, make_split(cfg.data, Split::train),
                            make_split(cfg.data, Split::test), options, m.state.get());
  m.test_accuracy = report.final_test.accuracy;
  fmt::print("    trained {} seed {}: test accuracy {:.4f} ({:.0f} s)\n", variant, seed,
             m.test_accuracy, report.wall_seconds);
  return g_models.emplace(key, std::move(m)).first->second;
}

Outcome gradient_soundness() {
  const auto rows = gradient_suite(2026);
  std::size_t failed = 0, checked = 0;
  double worst = 0;
  std::string worst_name;
  bool has_network = false;
  for (const auto& r : rows) {
    checked += r.result.checked;
    if (!r.result.ok()) {
      ++failed;
      fmt::print("    {} failed: {}\n", r.name, r.result.worst_entry);
    }
    if (r.result.worst_excess > worst) {
      worst = r.result.worst_excess;
      worst_name = r.name;
    }
    has_network |= r.name == "miniature_classifier";
  }
  return {failed == 0 && has_network,
          fmt::format("{} checks, {} elements, {} failed, worst {:.3g} of tolerance ({})",
                      rows.size(), checked, failed, worst, worst_name)};
}

Outcome permutation_invariance() {
  ExperimentConfig cfg;
  cfg.data.test_per_class = 5;
  cfg.validate();
  TrainState state(cfg);
  const auto clouds = make_split(cfg.data, Split::test);
  const auto clean = classification_logits(state.net, clouds);
  std::mt19937_64 rng(7);
  std::size_t mismatched = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<PointCloud> shuffled;
    for (const auto& c : clouds) {
      std::vector<std::size_t> order(c.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      shuffled.push_back(c.select(order));
    }
    const auto logits = classification_logits(state.net, shuffled);
    const auto a = clean.values(), b = logits.values();
    mismatched += !std::equal(a.begin(), a.end(), b.begin(), b.end());
  }
  return {mismatched == 0 && clouds.size() == 20,
          fmt::format("{} clouds x 100 permutations, {} permutations with any differing logit",
                      clouds.size(), mismatched)};
}

Outcome rigid_robustness() {
  ExperimentConfig cfg;
  cfg.relation = RelationKind::dist_only();
  cfg.rotation_robust = true;
  cfg.data.train_per_class = 25;
  cfg.data.test_per_class = 5;
  cfg.schedule.epochs = 15;
  cfg.validate();
  TrainState state(cfg);
  TrainOptions options;
  options.evaluate_test = false;
  train(cfg, make_split(cfg.data, Split::train), {}, options, &state);
  const auto clouds = make_split(cfg.data, Split::test);
  const auto rows = invariance_harness(state.net, cfg, clouds, 11);
  bool ok = clouds.size() == 20;
  for (const auto& r : rows) {
    fmt::print("    {:<14} accuracy {:.4f}  max rel logit diff {:.3g}\n", r.transform, r.accuracy,
               r.max_rel_logit_diff);
    ok &= r.accuracy == rows.front().accuracy && r.max_rel_logit_diff <= 1e-4;
  }
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.transform);
  ok &= names.count("rotate_y_90") && names.count("rotate_y_180") && names.count("translate");
  double worst = 0;
  for (const auto& r : rows) worst = std::max(worst, r.max_rel_logit_diff);
  return {ok, fmt::format("{} transforms on {} clouds, accuracy {:.4f} in every column: {}, "
                          "worst rel diff {:.3g}",
                          rows.size(), clouds.size(), rows.front().accuracy,
                          std::all_of(rows.begin(), rows.end(),
                                      [&](const auto& r) { return r.accuracy == rows.front().accuracy; })
                              ? "yes"
                              : "no",
                          worst)};
}

Outcome grid_equivalence() {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = 1 + rng() % 8;
    std::vector<double> map(5 * 5 * c), kernel(9 * c);
    for (auto& v : map) v = gauss(rng);
    for (auto& v : kernel) v = gauss(rng);
    const auto got = grid_conv_check(kernel, map, 5, 5, c);
    const auto want = oracle::dense_conv3x3(map, 5, 5, c, kernel);
    if (got.rs_conv.size() != want.size()) return {false, "output size mismatch"};
    for (std::size_t j = 0; j < want.size(); ++j) worst = std::max(worst, std::abs(got.rs_conv[j] - want[j]));
  }
  return {worst <= 1e-9, fmt::format("50 instances, max abs diff {:.3g}", worst)};
}

Outcome spatial_oracles() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t fps_bad = 0, ball_bad = 0, knn_bad = 0, queries = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 64;
    std::vector<Vec3> pts(n);
    // Every fourth cloud lives on a coarse lattice to force distance ties.
    for (auto& p : pts)
      p = trial % 4 == 0 ? 0.25 * Vec3{double(rng() % 4), double(rng() % 4), double(rng() % 4)}
                         : Vec3{u(rng), u(rng), u(rng)};
    const std::size_t count = 1 + rng() % n, start = rng() % n;
    fps_bad += farthest_point_sample(pts, count, start) != oracle::naive_fps(pts, count, start);

    for (int q = 0; q < 4; ++q, ++queries) {
      const std::size_t ci = rng() % n;
      const Vec3 c = pts[ci];
      const double r = 0.05 + 0.02 * double(rng() % 60);
      const auto got = ball_candidates(pts, c, r);
      auto want = oracle::brute_ball(pts, c, r);
      std::stable_sort(want.begin(), want.end(), [&](std::size_t a, std::size_t b) {
        const double da = dist2(pts[a], c), db = dist2(pts[b], c);
        if (da != db) return da < db;
        return lex_less(pts[a], pts[b]);
      });
      ball_bad += got != want;

      const std::size_t k = 1 + rng() % n;
      const std::vector<std::size_t> centroid{ci};
      const std::vector<double> radii{r};
      std::mt19937_64 unused(0);
      const auto nb = build_neighborhoods(pts, centroid, radii, k, NeighborMode::knn,
                                          CentroidMode::sampled_point, unused);
      const auto row = nb.scales[0].row(0);
      knn_bad += std::vector<std::size_t>(row.begin(), row.end()) != oracle::brute_knn(pts, c, k);
    }
  }
  return {fps_bad + ball_bad + knn_bad == 0,
          fmt::format("200 clouds: fps mismatches {}, ball mismatches {}/{}, knn mismatches {}/{}",
                      fps_bad, ball_bad, queries, knn_bad, queries)};
}

Outcome overfit_capacity() {
  ExperimentConfig cfg;
  cfg.data.train_per_class = 8;
  cfg.schedule.epochs = 200;
  cfg.validate();
  TrainOptions options;
  options.evaluate_test = false;
  options.stop_when_train_perfect = true;
  const auto report = train(cfg, make_split(cfg.data, Split::train), {}, options);
  const int epochs = report.rows.empty() ? 0 : report.rows.back().epoch + 1;
  return {report.final_train.accuracy == 1.0 && epochs <= 200,
          fmt::format("32 shapes, train accuracy {:.4f} after {} epochs", report.final_train.accuracy,
                      epochs)};
}

Outcome generalization() {
  bool ok = true;
  double full_sum = 0, dist_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double full = trained("full", seed).test_accuracy;
    const double dist = trained("dist", seed).test_accuracy;
    ok &= full >= 0.90;
    full_sum += full;
    dist_sum += dist;
    per_seed += fmt::format(" seed {}: full {:.3f} dist {:.3f};", seed, full, dist);
  }
  const bool order = full_sum / 3 >= dist_sum / 3 - 0.01;
  return {ok && order, fmt::format("{} mean full {:.4f} vs dist {:.4f}", per_seed, full_sum / 3,
                                   dist_sum / 3)};
}

constexpr std::size_t kDensityDraws = 10;

Outcome density_robustness() {
  std::size_t wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto cfg = benchmark_config(seed);
    const auto test = make_split(cfg.data, Split::test);
    const std::vector<std::size_t> counts{256, 128, 64, 32};
    // Accuracy at each count is averaged over several random subsets per cloud.
    const auto plain =
        density_harness(trained("full", seed).state->net, cfg, test, counts, seed, kDensityDraws);
    const auto drop = density_harness(trained("input_dropout", seed).state->net, cfg, test, counts,
                                      seed, kDensityDraws);
    for (std::size_t i = 0; i < counts.size(); ++i)
      fmt::print("    seed {} at {:>3} points: plain {:.3f} input dropout {:.3f}\n", seed,
                 counts[i], plain[i].accuracy, drop[i].accuracy);
    wins += drop[2].accuracy > plain[2].accuracy;
    per_seed += fmt::format(" seed {}: {:.3f} vs {:.3f};", seed, drop[2].accuracy, plain[2].accuracy);
  }
  return {wins == 3, fmt::format("dropout beats plain at 64 points ({} draws) on {}/3 seeds;{}",
                                 kDensityDraws, wins, per_seed)};
}

Outcome normal_estimation() {
  ExperimentConfig cfg;
  cfg.task = Task::normal_estimation;
  cfg.data.classes = {ShapeFamily::sphere, ShapeFamily::cylinder};
  cfg.data.train_per_class = 100;
  cfg.data.test_per_class = 25;
  cfg.schedule.epochs = 30;
  cfg.validate();
  TrainOptions options;
  options.evaluate_test = false;
  const auto report =
      train(cfg, make_split(cfg.data, Split::train), make_split(cfg.data, Split::test), options);
  return {report.final_test.mean_angle_deg < 20.0,
          fmt::format("held-out mean angular error {:.2f} deg ({:.3f} of points under 20 deg)",
                      report.final_test.mean_angle_deg, report.final_test.accuracy)};
}

Outcome schedule_law() {
  const ScheduleConfig s;
  const double lr0 = s.learning_rate(0), lr20 = s.learning_rate(20), bn20 = s.bn_momentum(20);

  // The trainer must apply the same values: run a miniature model through epoch 20.
  ExperimentConfig cfg;
  cfg.preset = "miniature";
  cfg.points = 32;
  cfg.data.points = 32;
  cfg.data.train_per_class = 2;
  cfg.data.test_per_class = 1;
  cfg.schedule.epochs = 21;
  cfg.validate();
  TrainState state(cfg);
  TrainOptions options;
  options.evaluate_test = false;
  train(cfg, make_split(cfg.data, Split::train), {}, options, &state);
  bool momentum_applied = !state.net.params.batchnorms().empty();
  for (const auto& [name, bn] : state.net.params.batchnorms())
    momentum_applied &= bn->momentum == static_cast<float>(0.45);

  const bool ok = lr0 == 0.001 && lr20 == 0.0007 && bn20 == 0.45 &&
                  state.opt.learning_rate == 0.0007 && momentum_applied;
  return {ok, fmt::format("lr(0)={} lr(20)={} bn_momentum(20)={}; trainer at epoch 20: lr={} "
                          "bn momentum applied: {}",
                          lr0, lr20, bn20, state.opt.learning_rate, momentum_applied ? "yes" : "no")};
}

}  // namespace
}  // namespace rscnn

int main(int argc, char** argv) {
  using namespace rscnn;
  const std::vector<Criterion> criteria = {
      {1, "gradient soundness", 60, gradient_soundness},
      {2, "permutation invariance", 30, permutation_invariance},
      {3, "rigid-transform robustness", 60, rigid_robustness},
      {4, "grid-convolution equivalence", 10, grid_equivalence},
      {5, "sampling and grouping oracles", 30, spatial_oracles},
      {6, "overfit capacity", 600, overfit_capacity},
      {7, "desk-scale generalization", 1800, generalization},
      {8, "density robustness", 1800, density_robustness},
      {9, "normal estimation", 1800, normal_estimation},
      {10, "schedule law", 60, schedule_law},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    fmt::print("[{}] {} ...\n", c.id, c.name);
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = out.pass && secs <= c.budget_seconds;
    failures += !pass;
    fmt::print("{} criterion {} ({}): {} [{:.1f} s of {:.0f} s]\n", pass ? "PASS" : "FAIL", c.id,
               c.name, out.detail, secs, c.budget_seconds);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
