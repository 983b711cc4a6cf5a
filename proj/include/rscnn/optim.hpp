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

#include <random>
#include <vector>

#include "rscnn/parameters.hpp"

namespace rscnn {

/// Weights ~ Normal(0, sqrt(2 / fan_in)); biases and shifts 0; BN scales 1.
template <typename T>
void he_init(ParameterSet<T>& set, std::mt19937_64& rng);

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;  // one per parameter, in registration order
  long long step = 0;
  double learning_rate = 0.001;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

  explicit OptimizerState(const ParameterSet<T>& set);
};

/// Bias-corrected Adam update, then zeroes the gradients. Throws if a
/// registered parameter has no gradient.
template <typename T>
void adam_step(OptimizerState<T>& opt, ParameterSet<T>& set);

struct ScheduleConfig {
  double lr_init = 0.001, lr_decay = 0.7;
  int lr_every = 20;
  double bn_momentum_init = 0.9, bn_decay = 0.5, bn_floor = 0.01;
  int bn_every = 20;
  int epochs = 200;
  int batch_size = 32;

  void validate() const;
  double learning_rate(int epoch) const;
  double bn_momentum(int epoch) const;
};

/// Sets the optimizer's learning rate and every batch-norm momentum for `epoch`.
template <typename T>
void apply_schedules(const ScheduleConfig& schedule, int epoch, OptimizerState<T>& opt,
                     ParameterSet<T>& set);

/// Moments are stored as "adam:m:<param>" / "adam:v:<param>" plus "adam:step".
template <typename T>
void export_optimizer(const OptimizerState<T>& opt, const ParameterSet<T>& set,
                      CheckpointData& data);
template <typename T>
void import_optimizer(OptimizerState<T>& opt, const ParameterSet<T>& set,
                      const CheckpointData& data);

}  // namespace rscnn
