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


#include "rscnn/relation_conv.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rscnn {

std::vector<std::size_t> default_relation_widths(std::size_t c_in, std::size_t depth) {
  if (depth < 1 || depth > 4) throw std::invalid_argument("relation MLP depth must be 1..4");
  if (c_in < 64) return std::vector<std::size_t>(depth, c_in);
  switch (depth) {
    case 1: return {c_in};
    case 2: return {16, c_in};
    case 3: return {16, 64, c_in};
    default: return {16, 64, 64, c_in};
  }
}

std::vector<std::size_t> RSConvLayerConfig::mlp_widths() const {
  return relation_mlp_widths.empty() ? default_relation_widths(in_channels, 3)
                                     : relation_mlp_widths;
}

std::vector<double> RSConvLayerConfig::radii() const {
  std::vector<double> r;
  for (const auto& s : scales) r.push_back(s.radius);
  return r;
}

std::vector<std::size_t> RSConvLayerConfig::ks() const {
  std::vector<std::size_t> k;
  for (const auto& s : scales) k.push_back(s.k);
  return k;
}

void RSConvLayerConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("rs-conv layer: " + m); };
  if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
  if (scales.empty() || scales.size() > 3) fail("needs 1 to 3 scales");
  for (std::size_t s = 0; s < scales.size(); ++s) {
    if (!(scales[s].radius > 0)) fail("radius must be positive");
    if (scales[s].k == 0) fail("neighbor count must be >= 1");
    if (s > 0 && !(scales[s].radius > scales[s - 1].radius)) fail("radii must strictly increase");
  }
  const auto w = mlp_widths();
  if (w.empty() || w.back() != in_channels) {
    fail("last relation-MLP width must equal in_channels (" + std::to_string(in_channels) + ")");
  }
  for (auto x : w)
    if (x == 0) fail("relation-MLP widths must be positive");
  if (!(relation_cut_ratio >= 0 && relation_cut_ratio < 1)) fail("relation cut ratio must be in [0, 1)");
}

template <typename T>
RSConvLayerParams<T> make_rsconv_params(const RSConvLayerConfig& config, ParameterSet<T>& set,
                                        const std::string& prefix) {
  config.validate();
  RSConvLayerParams<T> p;
  const auto widths = config.mlp_widths();
  std::size_t in = config.relation_kind.channels();
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const bool hidden = l + 1 < widths.size();
    p.relation_mlp.push_back(
        make_dense(set, prefix + ".relation" + std::to_string(l), in, widths[l], hidden));
    in = widths[l];
  }
  p.channel_raise = make_dense(set, prefix + ".raise", config.in_channels, config.out_channels, true);
  return p;
}

template <typename T>
Tensor<T> relation_weights(const RSConvLayerParams<T>& params, const Tensor<T>& relations,
                           bool training, std::span<const std::uint8_t> cut_mask) {
  if (relations.rank() != 2 || relations.dim(1) != params.relation_mlp.front().in()) {
    throw DimensionError("relation_weights: relations " + shape_str(relations.shape()) +
                         " vs mapping input width " +
                         std::to_string(params.relation_mlp.front().in()));
  }
  Tensor<T> h = relations;
  for (std::size_t l = 0; l < params.relation_mlp.size(); ++l) {
    const bool hidden = l + 1 < params.relation_mlp.size();
    h = dense_forward(params.relation_mlp[l], h, training, hidden);
  }
  if (!cut_mask.empty()) {
    if (cut_mask.size() != relations.dim(0)) {
      throw DimensionError("relation_weights: cut mask has " + std::to_string(cut_mask.size()) +
                           " entries for " + std::to_string(relations.dim(0)) + " relations");
    }
    std::vector<T> keep(cut_mask.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = cut_mask[i] ? T(0) : T(1);
    const std::size_t rows = keep.size();
    h = mul(h, Tensor<T>::from({rows, 1}, std::move(keep)));
  }
  return h;
}

namespace {

std::size_t total_rows(std::span<const ConvSample> batch) {
  std::size_t n = 0;
  for (const auto& b : batch) n += b.coords.size();
  return n;
}

void check_batch(std::span<const ConvSample> batch) {
  if (batch.empty()) throw std::invalid_argument("rs-conv: empty batch");
  const auto& first = *batch[0].nbhd;
  for (const auto& b : batch) {
    if (!b.nbhd) throw std::invalid_argument("rs-conv: sample without neighborhoods");
    if (b.nbhd->scales.size() != first.scales.size()) {
      throw DimensionError("rs-conv: samples disagree on the number of scales");
    }
    for (std::size_t s = 0; s < first.scales.size(); ++s)
      if (b.nbhd->scales[s].k != first.scales[s].k) {
        throw DimensionError("rs-conv: samples disagree on neighbors per scale");
      }
  }
}

}  // namespace

std::vector<double> relation_block(const RelationKind& kind, std::span<const ConvSample> batch,
                                   std::size_t s, std::size_t view) {
  const std::size_t ch = kind.channels();
  std::vector<double> out;
  for (const auto& b : batch) {
    const auto& nb = *b.nbhd;
    const auto& sc = nb.scales.at(s);
    out.reserve(out.size() + nb.centroid_indices.size() * sc.k * ch);
    const bool with_normals = kind.needs_normals();
    if (with_normals && b.normals.size() != b.coords.size()) {
      throw std::invalid_argument("relation '" + kind.name() + "' requires per-point normals");
    }
    for (std::size_t i = 0; i < nb.centroid_indices.size(); ++i) {
      const LocalFrame* frame = b.frames ? &(*b.frames).at(s).at(i) : nullptr;
      Vec3 xi = sc.reference[i];
      Vec3 ni;
      if (with_normals) ni = b.normals[nb.centroid_indices[i]];
      if (frame) {
        xi = frame->to_local(xi);
        ni = apply(frame->rotation, ni);
      }
      for (auto j : sc.row(i)) {
        Vec3 xj = b.coords[j];
        Vec3 nj;
        if (with_normals) nj = b.normals[j];
        if (frame) {
          xj = frame->to_local(xj);
          nj = apply(frame->rotation, nj);
        }
        const std::size_t at = out.size();
        out.resize(at + ch);
        compute_relation(kind, xi, xj, with_normals ? &ni : nullptr, with_normals ? &nj : nullptr,
                         std::span<double>(out).subspan(at, ch), view);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> relation_aggregate(const RelationKind& kind, ReduceKind aggregation,
                             ScaleFusion fusion, const Tensor<T>& features,
                             std::span<const ConvSample> batch, const RelationMapping<T>& mapping,
                             bool activate, const std::vector<Tensor<T>>* gathered) {
  check_batch(batch);
  const std::size_t n_scales = batch[0].nbhd->scales.size();
  std::size_t c = 0;
  if (gathered) {
    if (gathered->size() != n_scales) throw DimensionError("rs-conv: one gathered block per scale");
    c = gathered->front().dim(1);
  } else {
    if (features.rank() != 2 || features.dim(0) != total_rows(batch)) {
      throw DimensionError("rs-conv: features " + shape_str(features.shape()) + " for " +
                           std::to_string(total_rows(batch)) + " points");
    }
    c = features.dim(1);
  }
  std::size_t centroids = 0;
  for (const auto& b : batch) centroids += b.nbhd->centroid_indices.size();

  // Every scale and view goes through the mapping in one call, so the shared
  // mapping normalizes all of its inputs with one set of statistics.
  std::vector<T> all_relations;
  std::vector<std::size_t> block_start;
  for (std::size_t s = 0; s < n_scales; ++s)
    for (std::size_t v = 0; v < kind.views(); ++v) {
      block_start.push_back(all_relations.size() / kind.channels());
      const auto block = relation_block(kind, batch, s, v);
      all_relations.insert(all_relations.end(), block.begin(), block.end());
    }
  const std::size_t total = all_relations.size() / kind.channels();
  const auto weights =
      mapping(Tensor<T>::from({total, kind.channels()}, std::move(all_relations)));
  if (weights.rank() != 2 || weights.dim(0) != total || weights.dim(1) != c) {
    throw DimensionError("rs-conv: mapping produced " + shape_str(weights.shape()) +
                         ", features need " + shape_str({total, c}));
  }

  std::vector<Tensor<T>> per_scale;
  for (std::size_t s = 0; s < n_scales; ++s) {
    const std::size_t k = batch[0].nbhd->scales[s].k;
    const std::size_t rows = centroids * k;
    Tensor<T> neighbors;
    if (gathered) {
      neighbors = (*gathered)[s];
      if (neighbors.shape() != Shape{rows, c}) {
        throw DimensionError("rs-conv: gathered block " + shape_str(neighbors.shape()) +
                             ", expected " + shape_str({rows, c}));
      }
    } else {
      std::vector<std::size_t> idx;
      idx.reserve(rows);
      std::size_t offset = 0;
      for (const auto& b : batch) {
        for (auto j : b.nbhd->scales[s].indices) idx.push_back(offset + j);
        offset += b.coords.size();
      }
      neighbors = gather_rows(features, idx);
    }

    Tensor<T> agg;
    for (std::size_t v = 0; v < kind.views(); ++v) {
      std::vector<std::size_t> rows_of_block(rows);
      std::iota(rows_of_block.begin(), rows_of_block.end(), block_start[s * kind.views() + v]);
      const auto w = n_scales * kind.views() == 1 ? weights : gather_rows(weights, rows_of_block);
      auto a = reduce(aggregation, reshape(mul(w, neighbors), {centroids, k, c}), 1);
      agg = v == 0 ? a : add(agg, a);
    }
    per_scale.push_back(activate ? relu(agg) : agg);
  }
  if (per_scale.size() == 1) return per_scale[0];
  auto stacked = reshape(concat_cols<T>(per_scale), {centroids, n_scales, c});
  return reduce(fusion == ScaleFusion::elementwise_max ? ReduceKind::max : ReduceKind::sum,
                stacked, 1);
}

template <typename T>
Tensor<T> rs_conv_forward(const RSConvLayerConfig& config, const RSConvLayerParams<T>& params,
                          const Tensor<T>& features, std::span<const ConvSample> batch,
                          bool training, std::mt19937_64* rng,
                          const std::vector<Tensor<T>>* gathered) {
  const Tensor<T>& probe = gathered ? gathered->front() : features;
  if (!probe.defined() || probe.rank() != 2 || probe.dim(1) != config.in_channels) {
    throw DimensionError("rs-conv: features " +
                         (probe.defined() ? shape_str(probe.shape()) : std::string("undefined")) +
                         " but layer expects " + std::to_string(config.in_channels) + " channels");
  }
  const bool cut = training && config.relation_cut_ratio > 0;
  if (cut && !rng) throw std::invalid_argument("rs-conv: relation cut needs a random stream");
  RelationMapping<T> mapping = [&](const Tensor<T>& rel) {
    if (!cut) return relation_weights(params, rel, training);
    std::bernoulli_distribution drop(config.relation_cut_ratio);
    std::vector<std::uint8_t> mask(rel.dim(0));
    for (auto& m : mask) m = drop(*rng) ? 1 : 0;
    return relation_weights(params, rel, training, mask);
  };
  auto agg = relation_aggregate(config.relation_kind, config.aggregation, config.scale_fusion,
                                features, batch, mapping, true, gathered);
  return dense_forward(params.channel_raise, agg, training, true);
}

template <typename T>
Tensor<T> rs_conv_forward(const RSConvLayerConfig& config, const RSConvLayerParams<T>& params,
                          const Tensor<T>& features, const PointCloud& cloud,
                          const NeighborhoodIndex& nbhd, bool training, std::mt19937_64* rng) {
  ConvSample sample{cloud.coords, cloud.normals, &nbhd, nullptr};
  return rs_conv_forward(config, params, features, std::span<const ConvSample>(&sample, 1),
                         training, rng);
}

std::vector<double> dense_conv3x3(std::span<const double> map, std::size_t h, std::size_t w,
                                  std::size_t c, std::span<const double> kernel) {
  if (h < 3 || w < 3 || map.size() != h * w * c || kernel.size() != 9 * c) {
    throw DimensionError("dense_conv3x3: bad map or kernel size");
  }
  std::vector<double> out((h - 2) * (w - 2), 0.0);
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      double acc = 0;
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t ch = 0; ch < c; ++ch)
            acc += kernel[(ky * 3 + kx) * c + ch] * map[((y + ky - 1) * w + (x + kx - 1)) * c + ch];
      out[(y - 1) * (w - 2) + (x - 1)] = acc;
    }
  return out;
}

GridConvResult grid_conv_check(std::span<const double> kernel, std::span<const double> map,
                               std::size_t h, std::size_t w, std::size_t c,
                               std::span<const Vec3> positions) {
  GridConvResult result;
  result.dense = dense_conv3x3(map, h, w, c, kernel);

  std::vector<Vec3> pts;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      pts.push_back({static_cast<double>(x), static_cast<double>(y), 0.0});
  if (!positions.empty()) {
    if (positions.size() != h * w) throw DimensionError("grid_conv_check: need H*W positions");
    pts.assign(positions.begin(), positions.end());
  }
  std::vector<std::size_t> centroids;
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) centroids.push_back(y * w + x);
  std::mt19937_64 unused(0);
  std::vector<double> radii{1.5};
  const auto nbhd = build_neighborhoods(pts, centroids, radii, 9, NeighborMode::knn,
                                        CentroidMode::sampled_point, unused);

  ConvSample sample{pts, {}, &nbhd, nullptr};
  const auto features = Tensor<double>::from({h * w, c}, std::vector<double>(map.begin(), map.end()));
  const auto kind = RelationKind::full();
  // Full relation channels 1..3 hold x_i - x_j; the kernel tap sits at the
  // neighbor's offset x_j - x_i.
  RelationMapping<double> lookup = [&](const Tensor<double>& rel) {
    const std::size_t rows = rel.dim(0), ch = rel.dim(1);
    std::vector<double> wts(rows * c);
    for (std::size_t r = 0; r < rows; ++r) {
      const double dx = -rel.at(r * ch + 1), dy = -rel.at(r * ch + 2), dz = -rel.at(r * ch + 3);
      const bool on_grid = dz == 0 && (dx == -1 || dx == 0 || dx == 1) &&
                           (dy == -1 || dy == 0 || dy == 1);
      if (!on_grid) {
        throw std::invalid_argument("grid_conv_check: neighbor offset is not a 3x3 grid offset");
      }
      const auto tap = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
      for (std::size_t k = 0; k < c; ++k) wts[r * c + k] = kernel[tap * c + k];
    }
    return Tensor<double>::from({rows, c}, std::move(wts));
  };
  const auto out = relation_aggregate<double>(kind, ReduceKind::sum, ScaleFusion::elementwise_sum,
                                              features, std::span<const ConvSample>(&sample, 1),
                                              lookup, false);
  const auto summed = reduce(ReduceKind::sum, out, 1);
  result.rs_conv.assign(summed.values().begin(), summed.values().end());
  for (std::size_t i = 0; i < result.dense.size(); ++i) {
    result.max_abs_diff =
        std::max(result.max_abs_diff, std::abs(result.rs_conv[i] - result.dense[i]));
  }
  return result;
}

#define RSCNN_INSTANTIATE(T)                                                                      \
  template RSConvLayerParams<T> make_rsconv_params(const RSConvLayerConfig&, ParameterSet<T>&,     \
                                                   const std::string&);                           \
  template Tensor<T> relation_weights(const RSConvLayerParams<T>&, const Tensor<T>&, bool,         \
                                      std::span<const std::uint8_t>);                             \
  template Tensor<T> relation_aggregate(const RelationKind&, ReduceKind, ScaleFusion,              \
                                        const Tensor<T>&, std::span<const ConvSample>,            \
                                        const RelationMapping<T>&, bool,                          \
                                        const std::vector<Tensor<T>>*);                           \
  template Tensor<T> rs_conv_forward(const RSConvLayerConfig&, const RSConvLayerParams<T>&,        \
                                     const Tensor<T>&, std::span<const ConvSample>, bool,         \
                                     std::mt19937_64*, const std::vector<Tensor<T>>*);            \
  template Tensor<T> rs_conv_forward(const RSConvLayerConfig&, const RSConvLayerParams<T>&,        \
                                     const Tensor<T>&, const PointCloud&,                         \
                                     const NeighborhoodIndex&, bool, std::mt19937_64*);
RSCNN_INSTANTIATE(float)
RSCNN_INSTANTIATE(double)
#undef RSCNN_INSTANTIATE

}  // namespace rscnn
