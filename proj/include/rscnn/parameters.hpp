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

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rscnn/tensor.hpp"

namespace rscnn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::size_t fan_in = 0;  // 0 for biases and batch-norm affine terms
  enum class Role { weight, bias, bn_scale, bn_shift } role = Role::weight;
};

/// Registry of every trainable tensor and batch-norm state of one network.
/// Names are unique; insertion order is the canonical iteration order.
template <typename T>
class ParameterSet {
 public:
  /// Affine weight of shape [fan_in x fan_out], He-initializable.
  Tensor<T> add_weight(const std::string& name, std::size_t fan_in, std::size_t fan_out);
  Tensor<T> add_bias(const std::string& name, std::size_t width);
  std::shared_ptr<BatchNormState<T>> add_batchnorm(const std::string& name, std::size_t channels);

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>>& batchnorms()
      const {
    return bns_;
  }
  const Parameter<T>& find(const std::string& name) const;

  std::size_t scalar_count() const;
  void zero_grads();
  void set_bn_momentum(T momentum);

 private:
  void claim(const std::string& name);

  std::vector<Parameter<T>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>> bns_;
  std::map<std::string, std::size_t> index_;
};

/// Named flat arrays as stored in a checkpoint file.
struct CheckpointEntry {
  std::vector<std::size_t> dims;
  std::vector<double> values;
};
using CheckpointData = std::map<std::string, CheckpointEntry>;

inline constexpr const char* kCheckpointHeader = "RSCNN-CKPT v1";

/// Running statistics are stored as "<bn>.running_mean" / "<bn>.running_var"
/// under the "bn:" prefix; extra entries (optimizer state) pass through.
template <typename T>
CheckpointData export_parameters(const ParameterSet<T>& set);

/// Copies matching entries into the set. Every parameter and batch-norm
/// state must be present with the exact shape.
template <typename T>
void import_parameters(ParameterSet<T>& set, const CheckpointData& data);

/// Atomic (temp file + rename). Values are written with round-trip precision.
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data,
                      int significant_digits = 17);
CheckpointData read_checkpoint(const std::filesystem::path& path);

}  // namespace rscnn
