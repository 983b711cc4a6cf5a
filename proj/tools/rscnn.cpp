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


#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rscnn/data.hpp"
#include "rscnn/fileio.hpp"
#include "rscnn/selfcheck.hpp"
#include "rscnn/trainer.hpp"

namespace fs = std::filesystem;
using namespace rscnn;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "experiment config file (key = value lines)");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  auto* out = cmd->add_option("--out", c.out, "output file or directory");
  if (out_required) out->required();
  cmd->add_option("--set", c.sets, "extra key=value config settings, applied last");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

// A dataset directory from gen-data, or the config's synthetic set.
std::vector<PointCloud> dataset(const ExperimentConfig& cfg, const std::string& dir, Split split) {
  if (dir.empty()) return make_split(cfg.data, split);
  return load_dataset(fs::path(dir) / (split == Split::train ? "train.manifest" : "test.manifest"));
}

TrainState restore(const ExperimentConfig& cfg, const std::string& checkpoint) {
  TrainState state(cfg);
  load_state(checkpoint, state);
  return state;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relation-shape convolution networks for point clouds"};
  app.require_subcommand(1);
  Common common;
  std::string data_dir, checkpoint, input;
  std::size_t votes = 1;
  std::size_t repeats = 1;
  std::string resume;
  std::vector<std::size_t> counts{256, 128, 64, 32};
  std::size_t instances = 50;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/test sets with manifests");
  add_common(gen, common, true);

  auto* trn = app.add_subcommand("train", "train a model; writes metrics.csv, checkpoint.ckpt, report.json");
  add_common(trn, common, true);
  trn->add_option("--data", data_dir, "directory written by gen-data (default: generate from config)");
  trn->add_option("--resume", resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(ev, common, false);
  ev->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  ev->add_option("--data", data_dir, "directory written by gen-data");
  ev->add_option("--votes", votes, "scaled copies averaged per shape")->check(CLI::PositiveNumber);

  auto* pred = app.add_subcommand("predict", "run a checkpoint on one point file");
  add_common(pred, common, false);
  pred->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  pred->add_option("--input", input, "point-cloud file")->required();

  auto* grad = app.add_subcommand("check-grad", "finite-difference gradient checks");
  add_common(grad, common, false);

  auto* inv = app.add_subcommand("invariance", "accuracy under permutation, translation and rotation");
  add_common(inv, common, false);
  inv->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  inv->add_option("--data", data_dir, "directory written by gen-data");

  auto* den = app.add_subcommand("density", "accuracy at reduced point counts");
  add_common(den, common, false);
  den->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();
  den->add_option("--data", data_dir, "directory written by gen-data");
  den->add_option("--counts", counts, "comma-separated point counts")->delimiter(',');
  den->add_option("--repeats", repeats, "random subsets averaged per count")->check(CLI::PositiveNumber);

  auto* grid = app.add_subcommand("gridconv-check", "relation convolution versus dense 3x3 convolution");
  add_common(grid, common, false);
  grid->add_option("--instances", instances, "random maps to check");

  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();

  try {
    const ExperimentConfig cfg = resolve(common);
    std::ostringstream text;  // written to --out when given, else stdout

    if (*gen) {
      const fs::path out(common.out);
      DatasetSpec spec = cfg.data;
      if (common.seed) spec.seed = *common.seed;
      const auto train_set = make_split(spec, Split::train);
      const auto test_set = make_split(spec, Split::test);
      write_dataset(out, "train", train_set);
      write_dataset(out, "test", test_set);
      std::cout << "wrote " << train_set.size() << " train and " << test_set.size()
                << " test shapes to " << out.string() << "\n";
      return 0;
    }
    if (*trn) {
      TrainOptions options;
      options.out_dir = common.out;
      if (!resume.empty()) options.resume = resume;
      options.on_epoch = [](const EpochMetrics& m) {
        std::cout << "epoch " << m.epoch << " " << m.split << " loss " << fmt(m.loss) << " accuracy "
                  << fmt(m.accuracy) << std::endl;
      };
      const auto report = train(cfg, dataset(cfg, data_dir, Split::train), dataset(cfg, data_dir, Split::test),
                                options);
      std::cout << "final test accuracy " << fmt(report.final_test.accuracy) << " (" << cfg.votes
                << " votes)";
      if (cfg.task == Task::normal_estimation)
        std::cout << ", mean angular error " << fmt(report.final_test.mean_angle_deg) << " deg";
      std::cout << "\n";
      return 0;
    }
    if (*ev) {
      auto state = restore(cfg, checkpoint);
      const auto r = evaluate(state.net, cfg, dataset(cfg, data_dir, Split::test), votes, cfg.seed);
      nlohmann::ordered_json j{{"checkpoint", checkpoint}, {"votes", votes}, {"loss", r.loss},
                               {"accuracy", r.accuracy}};
      if (cfg.task == Task::normal_estimation) j["mean_angle_deg"] = r.mean_angle_deg;
      text << j.dump(2) << "\n";
    } else if (*pred) {
      auto state = restore(cfg, checkpoint);
      auto cloud = load_point_cloud(input);
      nlohmann::ordered_json j{{"input", input}};
      if (cfg.task == Task::classification) {
        std::mt19937_64 rng(cfg.seed);
        j["probabilities"] = vote_predict(state.net, cloud, cfg.votes, rng, cfg.augmentation.scale_low,
                                          cfg.augmentation.scale_high);
      } else {
        const std::vector<PointCloud> one{cloud};
        if (cfg.task == Task::segmentation) {
          std::vector<int> category{cloud.shape_label.value_or(0)};
          const auto logits = segment_forward<float>(
              state.net, one, cfg.onehot ? std::span<const int>(category) : std::span<const int>(), {});
          const std::size_t k = logits.dim(1);
          std::vector<int> labels;
          for (std::size_t i = 0; i < cloud.size(); ++i) {
            auto row = logits.values().subspan(i * k, k);
            labels.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
          }
          j["point_labels"] = labels;
        } else {
          const auto n = normals_forward<float>(state.net, one, {});
          j["normals"] = std::vector<float>(n.values().begin(), n.values().end());
        }
      }
      text << j.dump() << "\n";
    } else if (*grad) {
      bool ok = true;
      for (const auto& row : gradient_suite(cfg.seed)) {
        ok = ok && row.result.ok();
        text << (row.result.ok() ? "PASS " : "FAIL ") << row.name << " checked " << row.result.checked
             << " failures " << row.result.failures;
        if (!row.result.ok()) text << " worst " << row.result.worst_entry;
        text << "\n";
      }
      if (!ok) {
        std::cerr << text.str() << "rscnn check-grad: gradient mismatch\n";
        return 1;
      }
    } else if (*inv) {
      auto state = restore(cfg, checkpoint);
      const auto rows = invariance_harness(state.net, cfg, dataset(cfg, data_dir, Split::test), cfg.seed);
      text << "transform,accuracy,max_rel_logit_diff\n";
      for (const auto& r : rows) text << r.transform << "," << fmt(r.accuracy) << "," << r.max_rel_logit_diff << "\n";
    } else if (*den) {
      auto state = restore(cfg, checkpoint);
      const auto rows = density_harness(state.net, cfg, dataset(cfg, data_dir, Split::test), counts, cfg.seed, repeats);
      text << "points,accuracy\n";
      for (const auto& r : rows) text << r.count << "," << fmt(r.accuracy) << "\n";
    } else if (*grid) {
      double worst = 0;
      text << "instance,height,width,channels,max_abs_diff\n";
      const auto rows = gridconv_suite(cfg.seed, instances);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        worst = std::max(worst, rows[i].max_abs_diff);
        text << i << "," << rows[i].height << "," << rows[i].width << "," << rows[i].channels << ","
             << rows[i].max_abs_diff << "\n";
      }
      if (worst > 1e-9) {
        std::cerr << "rscnn gridconv-check: max difference " << worst << " exceeds 1e-9\n";
        return 1;
      }
    }

    if (common.out.empty()) {
      std::cout << text.str();
    } else {
      write_file_atomic(common.out, text.str());
    }
    return 0;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "rscnn " << name << ": " << msg << "\n";
    return 1;
  }
}
