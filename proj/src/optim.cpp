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


#include "rscnn/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "rscnn/fileio.hpp"

namespace rscnn {

template <typename T>
void he_init(ParameterSet<T>& set, std::mt19937_64& rng) {
  for (auto& p : set.params()) {
    auto d = p.tensor.data();
    switch (p.role) {
      case Parameter<T>::Role::weight: {
        std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
        for (auto& x : d) x = static_cast<T>(g(rng));
        break;
      }
      case Parameter<T>::Role::bn_scale:
        for (auto& x : d) x = T(1);
        break;
      case Parameter<T>::Role::bias:
      case Parameter<T>::Role::bn_shift:
        for (auto& x : d) x = T(0);
        break;
    }
  }
}

template <typename T>
OptimizerState<T>::OptimizerState(const ParameterSet<T>& set) {
  for (const auto& p : set.params()) {
    m.emplace_back(p.tensor.size(), T(0));
    v.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void adam_step(OptimizerState<T>& opt, ParameterSet<T>& set) {
  auto& params = set.params();
  if (params.size() != opt.m.size()) {
    throw std::logic_error("adam_step: optimizer state does not match the parameter set");
  }
  for (const auto& p : params)
    if (!p.tensor.has_grad()) {
      throw std::runtime_error("adam_step: parameter '" + p.name +
                               "' received no gradient; the graph does not reach it");
    }
  ++opt.step;
  const double c1 = 1 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].tensor.data();
    auto g = params[k].tensor.grad();
    auto& m = opt.m[k];
    auto& v = opt.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1 - opt.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = opt.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + opt.epsilon);
      w[i] = static_cast<T>(w[i] - update);
    }
    params[k].tensor.zero_grad();
  }
}

void ScheduleConfig::validate() const {
  auto in_unit = [](double x) { return x > 0 && x <= 1; };
  if (!(lr_init > 0)) throw std::invalid_argument("lr_init must be positive");
  if (!in_unit(lr_decay) || !in_unit(bn_decay)) {
    throw std::invalid_argument("decay factors must lie in (0, 1]");
  }
  if (!in_unit(bn_momentum_init)) throw std::invalid_argument("bn momentum must lie in (0, 1]");
  if (lr_every < 1 || bn_every < 1) throw std::invalid_argument("decay periods must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch size must be >= 2 for batch norm");
}

double ScheduleConfig::learning_rate(int epoch) const {
  return lr_init * std::pow(lr_decay, epoch / lr_every);
}

double ScheduleConfig::bn_momentum(int epoch) const {
  return std::max(bn_momentum_init * std::pow(bn_decay, epoch / bn_every), bn_floor);
}

template <typename T>
void apply_schedules(const ScheduleConfig& schedule, int epoch, OptimizerState<T>& opt,
                     ParameterSet<T>& set) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  opt.learning_rate = schedule.learning_rate(epoch);
  set.set_bn_momentum(static_cast<T>(schedule.bn_momentum(epoch)));
}

template <typename T>
void export_optimizer(const OptimizerState<T>& opt, const ParameterSet<T>& set,
                      CheckpointData& data) {
  const auto& params = set.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& shape = params[k].tensor.shape();
    data["adam:m:" + params[k].name] = {shape, {opt.m[k].begin(), opt.m[k].end()}};
    data["adam:v:" + params[k].name] = {shape, {opt.v[k].begin(), opt.v[k].end()}};
  }
  data["adam:step"] = {{1}, {static_cast<double>(opt.step)}};
}

template <typename T>
void import_optimizer(OptimizerState<T>& opt, const ParameterSet<T>& set,
                      const CheckpointData& data) {
  const auto& params = set.params();
  auto get = [&](const std::string& key, std::size_t n) -> const std::vector<double>& {
    auto it = data.find(key);
    if (it == data.end()) throw FormatError("checkpoint has no optimizer entry '" + key + "'");
    if (it->second.values.size() != n) throw FormatError("optimizer entry '" + key + "' has wrong size");
    return it->second.values;
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto n = params[k].tensor.size();
    const auto& m = get("adam:m:" + params[k].name, n);
    const auto& v = get("adam:v:" + params[k].name, n);
    opt.m[k].assign(m.begin(), m.end());
    opt.v[k].assign(v.begin(), v.end());
  }
  opt.step = static_cast<long long>(get("adam:step", 1)[0]);
}

#define RSCNN_INSTANTIATE(T)                                                                   \
  template void he_init(ParameterSet<T>&, std::mt19937_64&);                                   \
  template struct OptimizerState<T>;                                                           \
  template void adam_step(OptimizerState<T>&, ParameterSet<T>&);                               \
  template void apply_schedules(const ScheduleConfig&, int, OptimizerState<T>&, ParameterSet<T>&); \
  template void export_optimizer(const OptimizerState<T>&, const ParameterSet<T>&, CheckpointData&); \
  template void import_optimizer(OptimizerState<T>&, const ParameterSet<T>&, const CheckpointData&);
RSCNN_INSTANTIATE(float)
RSCNN_INSTANTIATE(double)
#undef RSCNN_INSTANTIATE

}  // namespace rscnn
