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


#include "rscnn/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include "json.hpp"
#include <numbers>
#include <numeric>
#include <sstream>

#include "rscnn/fileio.hpp"

namespace rscnn {

// Config text ---------------------------------------------------------------------

namespace {

template <typename E>
struct EnumTable {
  std::vector<std::pair<std::string, E>> entries;

  E parse(const std::string& key, const std::string& s) const {
    for (const auto& [name, v] : entries)
      if (name == s) return v;
    std::string options;
    for (const auto& [name, v] : entries) options += (options.empty() ? "" : ", ") + name;
    throw ConfigError(key + ": unknown value '" + s + "' (expected one of " + options + ")");
  }
  std::string name(E v) const {
    for (const auto& [n, e] : entries)
      if (e == v) return n;
    return "?";
  }
};

const EnumTable<ReduceKind> kAggregations{
    {{"max", ReduceKind::max}, {"mean", ReduceKind::mean}, {"sum", ReduceKind::sum}}};
const EnumTable<NeighborMode> kNeighborModes{
    {{"ball", NeighborMode::random_in_ball}, {"knn", NeighborMode::knn}}};
const EnumTable<CentroidMode> kCentroidModes{{{"sampled", CentroidMode::sampled_point},
                                              {"mean", CentroidMode::neighborhood_mean},
                                              {"random", CentroidMode::random_member}}};
const EnumTable<ScaleFusion> kFusions{
    {{"max", ScaleFusion::elementwise_max}, {"sum", ScaleFusion::elementwise_sum}}};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_count(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  const auto n = to_count(key, v);
  if (n > 1'000'000'000) throw ConfigError(key + ": value too large");
  return static_cast<int>(n);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string real_str(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Key {
  std::string name;
  Setter set;
  Getter get;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    auto real = [&](std::string name, auto member) {
      k.push_back({name, [member](auto& c, auto& key, auto& v) { member(c) = to_real(key, v); },
                   [member](const auto& c) { return real_str(member(const_cast<ExperimentConfig&>(c))); }});
    };
    auto count = [&](std::string name, auto member) {
      k.push_back({name, [member](auto& c, auto& key, auto& v) { member(c) = to_count(key, v); },
                   [member](const auto& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }});
    };
    auto integer = [&](std::string name, auto member) {
      k.push_back({name, [member](auto& c, auto& key, auto& v) { member(c) = to_int(key, v); },
                   [member](const auto& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }});
    };
    auto boolean = [&](std::string name, auto member) {
      k.push_back({name, [member](auto& c, auto& key, auto& v) { member(c) = to_bool(key, v); },
                   [member](const auto& c) { return std::string(member(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); }});
    };
    auto enumerated = [&](std::string name, const auto& table, auto member) {
      k.push_back({name, [&table, member](auto& c, auto& key, auto& v) { member(c) = table.parse(key, v); },
                   [&table, member](const auto& c) { return table.name(member(const_cast<ExperimentConfig&>(c))); }});
    };
    using C = ExperimentConfig;
    k.push_back({"task",
                 [](C& c, const std::string& key, const std::string& v) {
                   try {
                     c.task = parse_task(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(key + ": " + e.what());
                   }
                 },
                 [](const C& c) { return task_name(c.task); }});
    k.push_back({"preset",
                 [](C& c, const std::string& key, const std::string& v) {
                   if (v != "default" && v != "miniature") {
                     throw ConfigError(key + ": expected default or miniature, got '" + v + "'");
                   }
                   c.preset = v;
                 },
                 [](const C& c) { return c.preset; }});
    count("points", [](C& c) -> auto& { return c.points; });
    k.push_back({"relation",
                 [](C& c, const std::string& key, const std::string& v) {
                   try {
                     c.relation = RelationKind::parse(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(key + ": " + e.what());
                   }
                 },
                 [](const C& c) { return c.relation.name(); }});
    enumerated("aggregation", kAggregations, [](C& c) -> auto& { return c.aggregation; });
    count("mapping_depth", [](C& c) -> auto& { return c.mapping_depth; });
    enumerated("neighbor_mode", kNeighborModes, [](C& c) -> auto& { return c.neighbor_mode; });
    enumerated("centroid_mode", kCentroidModes, [](C& c) -> auto& { return c.centroid_mode; });
    real("relation_cut", [](C& c) -> auto& { return c.relation_cut; });
    count("scales", [](C& c) -> auto& { return c.scales; });
    enumerated("scale_fusion", kFusions, [](C& c) -> auto& { return c.scale_fusion; });
    boolean("rotation_robust", [](C& c) -> auto& { return c.rotation_robust; });
    real("dropout", [](C& c) -> auto& { return c.dropout; });
    boolean("onehot", [](C& c) -> auto& { return c.onehot; });
    real("lr_init", [](C& c) -> auto& { return c.schedule.lr_init; });
    real("lr_decay", [](C& c) -> auto& { return c.schedule.lr_decay; });
    integer("lr_every", [](C& c) -> auto& { return c.schedule.lr_every; });
    real("bn_momentum_init", [](C& c) -> auto& { return c.schedule.bn_momentum_init; });
    real("bn_decay", [](C& c) -> auto& { return c.schedule.bn_decay; });
    real("bn_floor", [](C& c) -> auto& { return c.schedule.bn_floor; });
    integer("bn_every", [](C& c) -> auto& { return c.schedule.bn_every; });
    integer("epochs", [](C& c) -> auto& { return c.schedule.epochs; });
    integer("batch_size", [](C& c) -> auto& { return c.schedule.batch_size; });
    real("scale_low", [](C& c) -> auto& { return c.augmentation.scale_low; });
    real("scale_high", [](C& c) -> auto& { return c.augmentation.scale_high; });
    real("translation", [](C& c) -> auto& { return c.augmentation.translation; });
    real("input_dropout", [](C& c) -> auto& { return c.augmentation.input_dropout; });
    count("min_keep", [](C& c) -> auto& { return c.min_keep; });
    count("votes", [](C& c) -> auto& { return c.votes; });
    count("seed", [](C& c) -> auto& { return c.seed; });
    integer("checkpoint_every", [](C& c) -> auto& { return c.checkpoint_every; });
    k.push_back({"data_classes",
                 [](C& c, const std::string& key, const std::string& v) {
                   std::vector<ShapeFamily> out;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     try {
                       out.push_back(parse_family(trim(item)));
                     } catch (const std::invalid_argument& e) {
                       throw ConfigError(key + ": " + e.what());
                     }
                   }
                   c.data.classes = out;
                 },
                 [](const C& c) {
                   std::string s;
                   for (auto f : c.data.classes) s += (s.empty() ? "" : ",") + family_name(f);
                   return s;
                 }});
    count("data_train_per_class", [](C& c) -> auto& { return c.data.train_per_class; });
    count("data_test_per_class", [](C& c) -> auto& { return c.data.test_per_class; });
    count("data_points", [](C& c) -> auto& { return c.data.points; });
    count("data_seed", [](C& c) -> auto& { return c.data.seed; });
    boolean("data_cube_face_labels", [](C& c) -> auto& { return c.data.cube_face_labels; });
    boolean("data_random_spin", [](C& c) -> auto& { return c.data.random_spin; });
    return k;
  }();
  return table;
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys()) {
    if (k.name == key) {
      k.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path), path.string());
}

std::string format_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::string config_fingerprint(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : format_config(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  schedule.validate();
  augmentation.validate();
  if (data.classes.size() < (task == Task::classification ? 2u : 1u)) {
    throw ConfigError("data_classes: need at least two classes for classification");
  }
  if (preset == "miniature" && task != Task::classification) {
    throw ConfigError("preset: the miniature network is a classifier");
  }
  if (scales < 1 || scales > 3) throw ConfigError("scales: expected 1, 2 or 3");
  if (mapping_depth < 1 || mapping_depth > 4) throw ConfigError("mapping_depth: expected 1 to 4");
  if (rotation_robust && relation != RelationKind::dist_only()) {
    throw ConfigError("rotation_robust requires relation = dist");
  }
  if (votes < 1) throw ConfigError("votes: need at least one vote");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every: must be positive");
  if (data.points < points) {
    throw ConfigError("data_points (" + std::to_string(data.points) +
                      ") is smaller than the network's points (" + std::to_string(points) + ")");
  }
  try {
    network_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::size_t ExperimentConfig::output_count() const {
  if (task == Task::classification) return data.classes.size();
  if (task == Task::normal_estimation) return 3;
  std::size_t parts = 2;
  for (auto f : data.classes) {
    ShapeSpec s;
    s.family = f;
    s.cube_face_labels = data.cube_face_labels;
    parts = std::max(parts, s.part_count());
  }
  return parts;
}

NetworkConfig ExperimentConfig::network_config() const {
  NetworkConfig net;
  switch (task) {
    case Task::classification:
      net = preset == "miniature" ? miniature_classifier_config(output_count())
                                  : default_classifier_config(output_count(), points);
      break;
    case Task::segmentation:
      net = default_segmenter_config(output_count(), data.classes.size(), onehot, points);
      break;
    case Task::normal_estimation: net = default_normals_config(points); break;
  }
  for (auto& lv : net.layers) {
    auto& c = lv.conv;
    c.relation_kind = relation;
    c.aggregation = aggregation;
    c.relation_mlp_widths = default_relation_widths(c.in_channels, mapping_depth);
    c.neighbor_mode = neighbor_mode;
    c.centroid_mode = centroid_mode;
    c.relation_cut_ratio = relation_cut;
    c.scale_fusion = scale_fusion;
    if (c.scales.size() > scales) c.scales.erase(c.scales.begin(), c.scales.end() - static_cast<std::ptrdiff_t>(scales));
  }
  net.rotation_robust = rotation_robust;
  if (task != Task::normal_estimation) net.dropout = dropout;
  return net;
}

// Training -------------------------------------------------------------------------

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(ss);
}

int shape_label(const PointCloud& c) {
  if (!c.shape_label) throw std::invalid_argument("cloud has no shape label");
  return *c.shape_label;
}

struct BatchResult {
  Tensor<float> loss;
  double loss_value = 0;
  double correct = 0;   // samples or points counted as correct
  double total = 0;     // samples or points
  double angle_sum = 0;  // normals only, degrees
  std::vector<int> predictions;
};

BatchResult run_batch(Network<float>& net, const ExperimentConfig& cfg,
                      std::span<const PointCloud> clouds, const ForwardContext& ctx) {
  BatchResult r;
  switch (cfg.task) {
    case Task::classification: {
      std::vector<int> y;
      for (const auto& c : clouds) y.push_back(shape_label(c));
      const auto logits = classify_forward<float>(net, clouds, ctx);
      r.loss = softmax_cross_entropy(logits, y);
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < y.size(); ++i) {
        auto row = logits.values().subspan(i * k, k);
        const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        r.predictions.push_back(pred);
        r.correct += pred == y[i];
      }
      r.total = static_cast<double>(y.size());
      break;
    }
    case Task::segmentation: {
      std::vector<int> y, categories;
      for (const auto& c : clouds) {
        if (!c.has_point_labels()) throw std::invalid_argument("segmentation needs point labels");
        y.insert(y.end(), c.point_labels.begin(), c.point_labels.end());
        categories.push_back(shape_label(c));
      }
      const auto logits = segment_forward<float>(
          net, clouds, cfg.onehot ? std::span<const int>(categories) : std::span<const int>(), ctx);
      r.loss = softmax_cross_entropy(logits, y);
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < y.size(); ++i) {
        auto row = logits.values().subspan(i * k, k);
        r.correct += (std::max_element(row.begin(), row.end()) - row.begin()) == y[i];
      }
      r.total = static_cast<double>(y.size());
      break;
    }
    case Task::normal_estimation: {
      std::vector<float> target;
      for (const auto& c : clouds) {
        if (!c.has_normals()) throw std::invalid_argument("normal estimation needs ground-truth normals");
        for (auto n : c.normals) target.insert(target.end(), {float(n.x), float(n.y), float(n.z)});
      }
      const std::size_t rows = target.size() / 3;
      const auto pred = normals_forward<float>(net, clouds, ctx);
      r.loss = cosine_loss(pred, Tensor<float>::from({rows, 3}, std::move(target)));
      const auto p = pred.values();
      std::size_t i = 0;
      for (const auto& c : clouds)
        for (auto n : c.normals) {
          const double d = std::clamp(p[i * 3] * n.x + p[i * 3 + 1] * n.y + p[i * 3 + 2] * n.z, -1.0, 1.0);
          const double deg = std::acos(d) * 180.0 / std::numbers::pi;
          r.angle_sum += deg;
          r.correct += deg < 20.0;
          ++i;
        }
      r.total = static_cast<double>(rows);
      break;
    }
  }
  r.loss_value = static_cast<double>(r.loss.item());
  return r;
}

// Enough digits that metrics read back from CSV are bit-identical.
std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path) {
  std::vector<EpochMetrics> rows;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    EpochMetrics m;
    std::string epoch, loss, acc;
    if (!std::getline(ss, epoch, ',') || !std::getline(ss, m.split, ',') ||
        !std::getline(ss, loss, ',') || !std::getline(ss, acc)) {
      throw FormatError(path.string() + ": malformed metrics row '" + line + "'");
    }
    m.epoch = std::stoi(epoch);
    m.loss = std::stod(loss);
    m.accuracy = std::stod(acc);
    rows.push_back(m);
  }
  return rows;
}

}  // namespace

TrainState::TrainState(const ExperimentConfig& cfg) : net(cfg.network_config()), opt(net.params) {
  std::mt19937_64 init = stream(cfg.seed, 0x1417);
  he_init(net.params, init);
}

void save_state(const std::filesystem::path& path, const TrainState& state) {
  auto data = export_parameters(state.net.params);
  export_optimizer(state.opt, state.net.params, data);
  data["train:epoch"] = {{1}, {static_cast<double>(state.next_epoch)}};
  write_checkpoint(path, data);
}

void load_state(const std::filesystem::path& path, TrainState& state) {
  const auto data = read_checkpoint(path);
  import_parameters(state.net.params, data);
  if (data.count("adam:step")) import_optimizer(state.opt, state.net.params, data);
  auto it = data.find("train:epoch");
  state.next_epoch = it == data.end() ? 0 : static_cast<int>(it->second.values.at(0));
}

Tensor<float> classification_logits(Network<float>& net, const std::vector<PointCloud>& clouds,
                                    std::size_t batch) {
  std::vector<float> all;
  std::size_t k = 0;
  for (std::size_t s = 0; s < clouds.size(); s += batch) {
    const auto n = std::min(batch, clouds.size() - s);
    const auto logits = classify_forward<float>(
        net, std::span<const PointCloud>(clouds).subspan(s, n), ForwardContext{});
    k = logits.dim(1);
    all.insert(all.end(), logits.values().begin(), logits.values().end());
  }
  const std::size_t rows = clouds.size();
  return Tensor<float>::from({rows, k}, std::move(all));
}

EvalResult evaluate(Network<float>& net, const ExperimentConfig& cfg,
                    const std::vector<PointCloud>& clouds, std::size_t votes, std::uint64_t seed) {
  EvalResult out;
  if (clouds.empty()) return out;
  if (cfg.task == Task::classification && votes > 1) {
    std::mt19937_64 rng = stream(seed, 0x7073);
    double loss = 0, correct = 0;
    for (const auto& c : clouds) {
      const auto p = vote_predict(net, c, votes, rng, cfg.augmentation.scale_low,
                                  cfg.augmentation.scale_high);
      const int pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      out.predictions.push_back(pred);
      correct += pred == shape_label(c);
      loss -= std::log(std::max(p.at(static_cast<std::size_t>(shape_label(c))), 1e-300));
    }
    out.loss = loss / static_cast<double>(clouds.size());
    out.accuracy = correct / static_cast<double>(clouds.size());
    return out;
  }
  double loss = 0, correct = 0, total = 0, angle = 0;
  const std::size_t batch = 32;
  for (std::size_t s = 0; s < clouds.size(); s += batch) {
    const auto n = std::min(batch, clouds.size() - s);
    auto r = run_batch(net, cfg, std::span<const PointCloud>(clouds).subspan(s, n), ForwardContext{});
    loss += r.loss_value * r.total;
    correct += r.correct;
    total += r.total;
    angle += r.angle_sum;
    out.predictions.insert(out.predictions.end(), r.predictions.begin(), r.predictions.end());
  }
  out.loss = loss / total;
  out.accuracy = correct / total;
  out.mean_angle_deg = angle / total;
  return out;
}

RunReport train(const ExperimentConfig& cfg, const std::vector<PointCloud>& train_set,
                const std::vector<PointCloud>& test_set, const TrainOptions& options,
                TrainState* state_in) {
  cfg.validate();
  if (train_set.size() < 2) throw std::invalid_argument("training needs at least two samples");
  for (const auto* set : {&train_set, &test_set})
    for (std::size_t i = 0; i < set->size(); ++i) {
      try {
        (*set)[i].validate();
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string(set == &train_set ? "training" : "test") +
                                    " sample " + std::to_string(i) + ": " + e.what());
      }
    }
  const auto start = std::chrono::steady_clock::now();
  std::optional<TrainState> own;
  if (!state_in) own.emplace(cfg);
  TrainState& state = state_in ? *state_in : *own;

  RunReport report;
  report.seed = cfg.seed;
  report.fingerprint = config_fingerprint(cfg);
  const bool write = !options.out_dir.empty();
  const auto metrics_path = options.out_dir / "metrics.csv";
  const auto ckpt_path = options.out_dir / "checkpoint.ckpt";
  if (options.resume) {
    load_state(*options.resume, state);
    if (write && std::filesystem::exists(metrics_path)) {
      for (const auto& m : read_metrics(metrics_path))
        if (m.epoch < state.next_epoch) report.rows.push_back(m);
    }
  }
  if (write) write_file_atomic(options.out_dir / "config.txt", format_config(cfg));

  const int last = options.stop_after_epoch >= 0
                       ? std::min(options.stop_after_epoch, cfg.schedule.epochs - 1)
                       : cfg.schedule.epochs - 1;
  const auto batch_size = static_cast<std::size_t>(cfg.schedule.batch_size);
  for (int epoch = state.next_epoch; epoch <= last; ++epoch) {
    apply_schedules(cfg.schedule, epoch, state.opt, state.net.params);
    std::mt19937_64 rng = stream(cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0, correct = 0, total = 0;
    std::size_t batch_index = 0;
    for (std::size_t s = 0; s + 1 < order.size(); s += batch_size, ++batch_index) {
      // A trailing batch of one sample is skipped: batch norm needs two rows.
      const auto n = std::min(batch_size, order.size() - s);
      if (n < 2) break;
      std::vector<PointCloud> batch;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = s; i < s + n; ++i) {
        auto c = augment(train_set[order[i]], cfg.augmentation, rng);
        if (cfg.augmentation.input_dropout > 0) {
          c = input_dropout(c, cfg.augmentation.input_dropout, cfg.min_keep, rng);
        }
        batch.push_back(std::move(c));
        seeds.push_back(rng());
      }
      auto r = run_batch(state.net, cfg, batch, ForwardContext{true, seeds, &rng});
      if (!std::isfinite(r.loss_value)) {
        throw TrainingError("non-finite loss " + format_real(r.loss_value) + " at epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                            " (seed " + std::to_string(cfg.seed) + ")");
      }
      backward(r.loss);
      adam_step(state.opt, state.net.params);
      loss_sum += r.loss_value * r.total;
      correct += r.correct;
      total += r.total;
    }
    state.next_epoch = epoch + 1;

    std::vector<EpochMetrics> fresh{{epoch, "train", loss_sum / total, correct / total}};
    if (options.evaluate_test && !test_set.empty()) {
      const auto t = evaluate(state.net, cfg, test_set);
      fresh.push_back({epoch, "test", t.loss, t.accuracy});
    }
    bool perfect = false;
    if (options.stop_when_train_perfect) {
      const auto clean = evaluate(state.net, cfg, train_set);
      report.final_train = clean;
      perfect = clean.accuracy == 1.0;
    }
    for (const auto& m : fresh) {
      report.rows.push_back(m);
      if (options.on_epoch) options.on_epoch(m);
    }
    const bool done = epoch == last || perfect;
    if (write) {
      write_file_atomic(metrics_path, metrics_csv(report.rows));
      if (done || (epoch + 1) % cfg.checkpoint_every == 0) save_state(ckpt_path, state);
    }
    if (perfect) break;
  }

  if (!options.stop_when_train_perfect) report.final_train = evaluate(state.net, cfg, train_set);
  if (!test_set.empty()) report.final_test = evaluate(state.net, cfg, test_set, cfg.votes, cfg.seed);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (write) write_file_atomic(options.out_dir / "report.json", report_json(report, cfg));
  return report;
}

// Harnesses ---------------------------------------------------------------------------

std::vector<InvarianceRow> invariance_harness(Network<float>& net, const ExperimentConfig& cfg,
                                              const std::vector<PointCloud>& clouds,
                                              std::uint64_t seed) {
  if (cfg.task != Task::classification) {
    throw std::invalid_argument("invariance harness needs a classification model");
  }
  if (cfg.rotation_robust) {
    for (const auto& c : clouds)
      if (!c.has_normals()) {
        throw std::invalid_argument(
            "invariance: rotation-robust models need normals, and the dataset has none");
      }
  }
  const auto clean = classification_logits(net, clouds);
  const std::size_t k = clean.dim(1);
  auto row = [&](const std::string& name, const std::vector<PointCloud>& moved) {
    const auto logits = classification_logits(net, moved);
    InvarianceRow r{name, 0, 0};
    for (std::size_t i = 0; i < clouds.size(); ++i) {
      auto a = logits.values().subspan(i * k, k);
      auto b = clean.values().subspan(i * k, k);
      r.accuracy += (std::max_element(a.begin(), a.end()) - a.begin()) == shape_label(clouds[i]);
      for (std::size_t j = 0; j < k; ++j) {
        const double d = std::abs(double(a[j]) - double(b[j])) / std::max(1.0, std::abs(double(b[j])));
        r.max_rel_logit_diff = std::max(r.max_rel_logit_diff, d);
      }
    }
    r.accuracy /= static_cast<double>(clouds.size());
    return r;
  };
  std::mt19937_64 rng = stream(seed, 0x1a7a);
  std::vector<PointCloud> perm, shift, rot90, rot180;
  std::uniform_real_distribution<double> t(-0.2, 0.2);
  for (const auto& c : clouds) {
    std::vector<std::size_t> idx(c.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    perm.push_back(c.select(idx));
    const Vec3 offset{t(rng), t(rng), t(rng)};
    shift.push_back(transform_cloud(c, rotation_about_y(0), offset));
    rot90.push_back(transform_cloud(c, rotation_about_y(std::numbers::pi / 2), {}));
    rot180.push_back(transform_cloud(c, rotation_about_y(std::numbers::pi), {}));
  }
  return {row("clean", clouds), row("permute", perm), row("translate", shift),
          row("rotate_y_90", rot90), row("rotate_y_180", rot180)};
}

std::vector<DensityRow> density_harness(Network<float>& net, const ExperimentConfig& cfg,
                                        const std::vector<PointCloud>& clouds,
                                        const std::vector<std::size_t>& counts, std::uint64_t seed,
                                        std::size_t repeats) {
  if (repeats == 0) throw std::invalid_argument("density: repeats must be positive");
  std::vector<DensityRow> rows;
  for (auto count : counts) {
    if (count == 0) throw std::invalid_argument("density: point counts must be positive");
    const bool full = std::all_of(clouds.begin(), clouds.end(),
                                  [&](const PointCloud& c) { return count >= c.size(); });
    const std::size_t draws = full ? 1 : repeats;
    double sum = 0;
    for (std::size_t r = 0; r < draws; ++r) {
      std::vector<PointCloud> sparse;
      for (std::size_t i = 0; i < clouds.size(); ++i) {
        if (count >= clouds[i].size()) {
          sparse.push_back(clouds[i]);
        } else {
          std::mt19937_64 rng = stream(seed + r * 0x9e3779b97f4a7c15ULL, count, i);
          sparse.push_back(density_dropout(clouds[i], count, rng));
        }
      }
      sum += evaluate(net, cfg, sparse).accuracy;
    }
    rows.push_back({count, sum / static_cast<double>(draws)});
  }
  return rows;
}

// Reports -------------------------------------------------------------------------------

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch,split,loss,accuracy\n";
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + r.split + "," + format_real(r.loss) + "," +
           format_real(r.accuracy) + "\n";
  return out;
}

std::string report_json(const RunReport& report, const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["fingerprint"] = report.fingerprint;
  j["seed"] = report.seed;
  j["task"] = task_name(cfg.task);
  j["wall_seconds"] = report.wall_seconds;
  auto metrics = [&](const EvalResult& e) {
    nlohmann::ordered_json m{{"loss", e.loss}, {"accuracy", e.accuracy}};
    if (cfg.task == Task::normal_estimation) m["mean_angle_deg"] = e.mean_angle_deg;
    return m;
  };
  j["final"] = {{"train", metrics(report.final_train)}, {"test", metrics(report.final_test)}};
  j["votes"] = cfg.votes;
  auto& epochs = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows)
    epochs.push_back({{"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss}, {"accuracy", r.accuracy}});
  return j.dump(2) + "\n";
}

}  // namespace rscnn
