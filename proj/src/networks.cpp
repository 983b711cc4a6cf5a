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


#include "rscnn/networks.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace rscnn {

std::string task_name(Task t) {
  switch (t) {
    case Task::classification: return "classification";
    case Task::segmentation: return "segmentation";
    case Task::normal_estimation: return "normals";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "segmentation") return Task::segmentation;
  if (s == "normals") return Task::normal_estimation;
  throw std::invalid_argument("unknown task '" + s + "'");
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("network config: " + m); };
  if (layers.empty()) fail("needs at least one layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lv = layers[l];
    lv.conv.validate();
    if (lv.points == 0) fail("layer point counts must be positive");
    if (l > 0 && lv.points >= layers[l - 1].points) fail("layer point counts must strictly decrease");
    const std::size_t expect_in = l == 0 ? 3 : layers[l - 1].conv.out_channels;
    if (lv.conv.in_channels != expect_in) {
      fail("layer " + std::to_string(l) + " expects " + std::to_string(lv.conv.in_channels) +
           " input channels but receives " + std::to_string(expect_in));
    }
    if (rotation_robust && lv.conv.relation_kind != RelationKind::dist_only()) {
      fail("rotation-robust mode needs the distance-only relation in every layer");
    }
  }
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
  if (task == Task::classification) {
    if (num_classes < 2) fail("classification needs at least 2 classes");
  } else {
    if (rotation_robust) fail("rotation-robust mode is only available for classification");
    if (fp_widths.size() != layers.size()) fail("one upsampling stage per layer is required");
    if (task == Task::segmentation && num_parts < 2) fail("segmentation needs at least 2 parts");
    if (use_onehot && num_classes < 1) fail("one-hot input needs the category count");
  }
}

namespace {

RSConvLayerConfig conv(std::size_t in, std::size_t out, std::vector<ScaleSpec> scales) {
  RSConvLayerConfig c;
  c.in_channels = in;
  c.out_channels = out;
  c.scales = std::move(scales);
  return c;
}

}  // namespace

NetworkConfig default_classifier_config(std::size_t classes, std::size_t points) {
  NetworkConfig n;
  n.task = Task::classification;
  n.num_classes = classes;
  n.layers = {
      {std::max<std::size_t>(points / 4, 2), conv(3, 64, {{0.25, 8}, {0.4, 16}, {0.6, 16}})},
      {std::max<std::size_t>(points / 16, 2), conv(64, 128, {{0.5, 8}, {0.75, 16}, {1.0, 16}})},
      {1, conv(128, 256, {{2.5, 16}})},
  };
  n.fc_widths = {256, 128};
  n.dropout = 0.5;
  return n;
}

NetworkConfig default_segmenter_config(std::size_t parts, std::size_t categories, bool onehot,
                                       std::size_t points) {
  NetworkConfig n;
  n.task = Task::segmentation;
  n.num_parts = parts;
  n.num_classes = categories;
  n.use_onehot = onehot;
  n.layers = {
      {points / 2, conv(3, 32, {{0.2, 8}, {0.3, 12}, {0.45, 16}})},
      {points / 4, conv(32, 64, {{0.35, 8}, {0.5, 12}, {0.7, 16}})},
      {points / 8, conv(64, 128, {{0.5, 8}, {0.75, 12}, {1.0, 16}})},
      {points / 16, conv(128, 256, {{0.8, 8}, {1.2, 12}, {1.6, 16}})},
  };
  n.fp_widths = {128, 64, 64, 64};
  n.head_widths = {64};
  n.dropout = 0.5;
  return n;
}

NetworkConfig default_normals_config(std::size_t points) {
  NetworkConfig n = default_segmenter_config(2, 0, false, points);
  n.task = Task::normal_estimation;
  n.dropout = 0.0;
  return n;
}

NetworkConfig miniature_classifier_config(std::size_t classes) {
  NetworkConfig n;
  n.task = Task::classification;
  n.num_classes = classes;
  n.layers = {
      {16, conv(3, 8, {{0.4, 4}, {0.7, 6}})},
      {8, conv(8, 16, {{0.7, 4}, {1.1, 4}})},
      {4, conv(16, 16, {{1.5, 4}})},
  };
  n.fc_widths = {16, 16};
  n.dropout = 0.5;
  return n;
}

template <typename T>
Network<T>::Network(NetworkConfig cfg) : config(std::move(cfg)) {
  config.validate();
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    convs.push_back(make_rsconv_params(config.layers[l].conv, params, "layer" + std::to_string(l)));
  }
  const std::size_t last = config.layers.back().conv.out_channels;
  if (config.task == Task::classification) {
    std::size_t in = last;
    for (std::size_t i = 0; i < config.fc_widths.size(); ++i) {
      fc.push_back(make_dense(params, "fc" + std::to_string(i), in, config.fc_widths[i], true));
      in = config.fc_widths[i];
    }
    out = make_dense(params, "classifier", in, config.num_classes, false);
    return;
  }
  std::size_t in = last;
  for (std::size_t i = 0; i < config.fp_widths.size(); ++i) {
    // Stage i lifts level L-1-i onto level L-2-i (or onto the input points).
    const std::size_t fine_level = config.layers.size() - 1 - i;
    const std::size_t skip = fine_level == 0 ? 3 : config.layers[fine_level - 1].conv.out_channels;
    fp.push_back(make_dense(params, "fp" + std::to_string(i), in + skip, config.fp_widths[i], true));
    in = config.fp_widths[i];
  }
  if (config.use_onehot) in += config.num_classes;
  for (std::size_t i = 0; i < config.head_widths.size(); ++i) {
    head.push_back(make_dense(params, "head" + std::to_string(i), in, config.head_widths[i], true));
    in = config.head_widths[i];
  }
  const std::size_t width = config.task == Task::segmentation ? config.num_parts : 3;
  out = make_dense(params, "predictor", in, width, false);
}

namespace {

std::mt19937_64 sample_stream(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x5eedu};
  return std::mt19937_64(seq);
}

template <typename T>
Tensor<T> constant_block(const std::vector<Vec3>& rows) {
  std::vector<T> v;
  v.reserve(rows.size() * 3);
  for (const auto& p : rows) {
    v.push_back(static_cast<T>(p.x));
    v.push_back(static_cast<T>(p.y));
    v.push_back(static_cast<T>(p.z));
  }
  return Tensor<T>::from({rows.size(), 3}, std::move(v));
}

template <typename T>
void run_levels(Network<T>& net, std::span<const PointCloud> clouds, const ForwardContext& ctx,
                ForwardTrace<T>& trace) {
  const auto& cfg = net.config;
  const std::size_t batch = clouds.size();
  if (batch == 0) throw std::invalid_argument("forward: empty batch");
  if (!ctx.sample_seeds.empty() && ctx.sample_seeds.size() != batch) {
    throw std::invalid_argument("forward: need one sample seed per cloud");
  }
  for (const auto& c : clouds) {
    if (c.size() < cfg.min_points()) {
      throw std::invalid_argument("forward: cloud has " + std::to_string(c.size()) +
                                  " points, the hierarchy needs at least " +
                                  std::to_string(cfg.min_points()));
    }
    if (cfg.rotation_robust && !c.has_normals()) {
      throw std::invalid_argument(
          "forward: rotation-robust mode builds local frames from normals, which this cloud "
          "lacks; disable rotation_robust or supply normals");
    }
  }
  std::vector<std::mt19937_64> streams;
  for (std::size_t b = 0; b < batch; ++b)
    streams.push_back(sample_stream(ctx.sample_seeds.empty() ? 0 : ctx.sample_seeds[b]));

  trace.samples.assign(batch, {});
  // Later levels keep spans into earlier ones, so the storage must not move.
  for (auto& s : trace.samples) s.reserve(cfg.layers.size());
  trace.features.clear();
  trace.offsets.clear();
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    const auto& level = cfg.layers[l];
    std::vector<ConvSample> samples(batch);
    std::vector<std::size_t> offsets{0};
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& prev_coords = l == 0 ? clouds[b].coords : trace.samples[b][l - 1].coords;
      const auto& prev_normals = l == 0 ? clouds[b].normals : trace.samples[b][l - 1].normals;
      auto& st = trace.samples[b].emplace_back();
      auto& rng = streams[b];
      const std::size_t count = std::min(level.points, prev_coords.size());
      std::size_t start;
      if (ctx.training) {
        start = std::uniform_int_distribution<std::size_t>(0, prev_coords.size() - 1)(rng);
      } else {
        start = geometric_start(prev_coords);
      }
      st.sampled = farthest_point_sample(prev_coords, count, start);
      st.nbhd = build_neighborhoods(prev_coords, st.sampled, level.conv.radii(), level.conv.ks(),
                                    level.conv.neighbor_mode, level.conv.centroid_mode, rng);
      for (auto i : st.sampled) {
        st.coords.push_back(prev_coords[i]);
        if (!prev_normals.empty()) st.normals.push_back(prev_normals[i]);
      }
      if (cfg.rotation_robust && l == 0) {
        for (const auto& sc : st.nbhd.scales) {
          auto& frames = st.frames.emplace_back();
          for (std::size_t i = 0; i < st.sampled.size(); ++i) {
            frames.push_back(local_frame(clouds[b], st.sampled[i],
                                         sc.row(i).first(sc.valid_counts[i])));
          }
        }
      }
      samples[b] = ConvSample{prev_coords, prev_normals, &st.nbhd,
                              st.frames.empty() ? nullptr : &st.frames};
      offsets.push_back(offsets.back() + count);
    }

    Tensor<T> out;
    if (l == 0) {
      // Input features: neighbor coordinates relative to the reference point,
      // or expressed in the centroid's local frame.
      std::vector<Tensor<T>> gathered;
      for (std::size_t s = 0; s < level.conv.scales.size(); ++s) {
        std::vector<Vec3> rows;
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& st = trace.samples[b][0];
          const auto& sc = st.nbhd.scales[s];
          for (std::size_t i = 0; i < st.sampled.size(); ++i)
            for (auto j : sc.row(i)) {
              const Vec3 p = clouds[b].coords[j];
              rows.push_back(st.frames.empty() ? p - sc.reference[i] : st.frames[s][i].to_local(p));
            }
        }
        gathered.push_back(constant_block<T>(rows));
      }
      out = rs_conv_forward(level.conv, net.convs[0], Tensor<T>(), samples, ctx.training, ctx.rng,
                            &gathered);
    } else {
      out = rs_conv_forward(level.conv, net.convs[l], trace.features[l - 1], samples, ctx.training,
                            ctx.rng);
    }
    trace.features.push_back(out);
    trace.offsets.push_back(std::move(offsets));
  }
}

template <typename T>
Tensor<T> hidden_stack(const std::vector<DenseLayer<T>>& layers, Tensor<T> x, double rate,
                       const ForwardContext& ctx) {
  for (const auto& layer : layers) {
    x = dense_forward(layer, x, ctx.training, true);
    if (ctx.training && rate > 0) {
      if (!ctx.rng) throw std::invalid_argument("forward: dropout needs a random stream");
      x = dropout(x, rate, true, *ctx.rng);
    }
  }
  return x;
}

template <typename T>
Tensor<T> dense_trunk(Network<T>& net, std::span<const PointCloud> clouds,
                      std::span<const int> categories, const ForwardContext& ctx,
                      ForwardTrace<T>& trace) {
  const auto& cfg = net.config;
  if (cfg.use_onehot && categories.size() != clouds.size()) {
    throw std::invalid_argument("forward: the one-hot input needs one category per cloud");
  }
  if (!cfg.use_onehot && !categories.empty()) {
    throw std::invalid_argument("forward: categories given but the config has no one-hot input");
  }
  run_levels(net, clouds, ctx, trace);
  const std::size_t batch = clouds.size();
  const std::size_t levels = cfg.layers.size();
  Tensor<T> x = trace.features.back();
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t coarse = levels - 1 - i;  // level index of x
    InterpolationWeights merged;
    merged.offsets.push_back(0);
    std::vector<Vec3> fine_all;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& fine = coarse == 0 ? clouds[b].coords : trace.samples[b][coarse - 1].coords;
      const auto w = interpolation_weights(fine, trace.samples[b][coarse].coords);
      const std::size_t base = merged.sources.size();
      const std::size_t shift = trace.offsets[coarse][b];
      for (auto s : w.sources) merged.sources.push_back(s + shift);
      merged.weights.insert(merged.weights.end(), w.weights.begin(), w.weights.end());
      for (std::size_t f = 1; f < w.offsets.size(); ++f) merged.offsets.push_back(base + w.offsets[f]);
      fine_all.insert(fine_all.end(), fine.begin(), fine.end());
    }
    Tensor<T> skip = coarse == 0 ? constant_block<T>(fine_all) : trace.features[coarse - 1];
    std::vector<Tensor<T>> parts{interpolate(x, merged), skip};
    x = dense_forward(net.fp[i], concat_cols<T>(parts), ctx.training, true);
  }
  if (cfg.use_onehot) {
    std::vector<T> onehot;
    for (std::size_t b = 0; b < batch; ++b) {
      const int k = categories[b];
      if (k < 0 || static_cast<std::size_t>(k) >= cfg.num_classes) {
        throw std::invalid_argument("forward: category " + std::to_string(k) + " out of range");
      }
      for (std::size_t p = 0; p < clouds[b].size(); ++p)
        for (std::size_t c = 0; c < cfg.num_classes; ++c) onehot.push_back(c == static_cast<std::size_t>(k) ? T(1) : T(0));
    }
    std::vector<Tensor<T>> parts{x, Tensor<T>::from({x.dim(0), cfg.num_classes}, std::move(onehot))};
    x = concat_cols<T>(parts);
  }
  x = hidden_stack(net.head, x, cfg.dropout, ctx);
  return dense_forward(net.out, x, ctx.training, false);
}

}  // namespace

template <typename T>
Tensor<T> classify_forward(Network<T>& net, std::span<const PointCloud> clouds,
                           const ForwardContext& ctx, ForwardTrace<T>* trace) {
  if (net.config.task != Task::classification) {
    throw std::invalid_argument("classify_forward on a " + task_name(net.config.task) + " network");
  }
  ForwardTrace<T> local;
  auto& tr = trace ? *trace : local;
  run_levels(net, clouds, ctx, tr);
  const auto pooled = segment_reduce(ReduceKind::max, tr.features.back(), tr.offsets.back());
  const auto hidden = hidden_stack(net.fc, pooled, net.config.dropout, ctx);
  return dense_forward(net.out, hidden, ctx.training, false);
}

template <typename T>
Tensor<T> segment_forward(Network<T>& net, std::span<const PointCloud> clouds,
                          std::span<const int> categories, const ForwardContext& ctx,
                          ForwardTrace<T>* trace) {
  if (net.config.task != Task::segmentation) {
    throw std::invalid_argument("segment_forward on a " + task_name(net.config.task) + " network");
  }
  ForwardTrace<T> local;
  return dense_trunk(net, clouds, categories, ctx, trace ? *trace : local);
}

template <typename T>
Tensor<T> normals_forward(Network<T>& net, std::span<const PointCloud> clouds,
                          const ForwardContext& ctx, ForwardTrace<T>* trace) {
  if (net.config.task != Task::normal_estimation) {
    throw std::invalid_argument("normals_forward on a " + task_name(net.config.task) + " network");
  }
  ForwardTrace<T> local;
  return normalize_rows(dense_trunk(net, clouds, {}, ctx, trace ? *trace : local));
}

InterpolationWeights interpolation_weights(std::span<const Vec3> fine,
                                           std::span<const Vec3> coarse) {
  if (coarse.empty()) throw std::invalid_argument("interpolation needs at least one coarse point");
  InterpolationWeights w;
  w.offsets.push_back(0);
  const std::size_t m = std::min<std::size_t>(3, coarse.size());
  std::vector<std::size_t> order(coarse.size());
  for (const auto& p : fine) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = dist2(p, coarse[a]), db = dist2(p, coarse[b]);
                        if (da != db) return da < db;
                        if (coarse[a] != coarse[b]) return lex_less(coarse[a], coarse[b]);
                        return a < b;
                      });
    double total = 0;
    std::array<double, 3> raw{};
    for (std::size_t k = 0; k < m; ++k) {
      raw[k] = 1.0 / (dist2(p, coarse[order[k]]) + kInterpolationEpsilon);
      total += raw[k];
    }
    for (std::size_t k = 0; k < m; ++k) {
      w.sources.push_back(order[k]);
      w.weights.push_back(raw[k] / total);
    }
    w.offsets.push_back(w.sources.size());
  }
  return w;
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& coarse_features, const InterpolationWeights& w) {
  const auto picked = gather_rows(coarse_features, w.sources);
  std::vector<T> col(w.weights.begin(), w.weights.end());
  const auto weighted = mul(picked, Tensor<T>::from({w.weights.size(), 1}, std::move(col)));
  return segment_reduce(ReduceKind::sum, weighted, w.offsets);
}

template <typename T>
Tensor<T> feature_propagation(const DenseLayer<T>& mixer, std::span<const Vec3> fine,
                              std::span<const Vec3> coarse, const Tensor<T>& coarse_features,
                              const Tensor<T>& skip_features, bool training) {
  auto x = interpolate(coarse_features, interpolation_weights(fine, coarse));
  if (skip_features.defined()) {
    std::vector<Tensor<T>> parts{x, skip_features};
    x = concat_cols<T>(parts);
  }
  return dense_forward(mixer, x, training, true);
}

#define RSCNN_INSTANTIATE(T)                                                                     \
  template struct Network<T>;                                                                    \
  template Tensor<T> classify_forward(Network<T>&, std::span<const PointCloud>,                  \
                                      const ForwardContext&, ForwardTrace<T>*);                  \
  template Tensor<T> segment_forward(Network<T>&, std::span<const PointCloud>,                   \
                                     std::span<const int>, const ForwardContext&,                \
                                     ForwardTrace<T>*);                                          \
  template Tensor<T> normals_forward(Network<T>&, std::span<const PointCloud>,                   \
                                     const ForwardContext&, ForwardTrace<T>*);                   \
  template Tensor<T> interpolate(const Tensor<T>&, const InterpolationWeights&);                 \
  template Tensor<T> feature_propagation(const DenseLayer<T>&, std::span<const Vec3>,            \
                                         std::span<const Vec3>, const Tensor<T>&,                \
                                         const Tensor<T>&, bool);
RSCNN_INSTANTIATE(float)
RSCNN_INSTANTIATE(double)
#undef RSCNN_INSTANTIATE

}  // namespace rscnn
