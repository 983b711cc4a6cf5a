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

#include "rscnn/parameters.hpp"

#include <charconv>
#include <sstream>

#include "rscnn/fileio.hpp"

namespace rscnn {

template <typename T>
void ParameterSet<T>::claim(const std::string& name) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw std::invalid_argument("parameter name must be non-empty without whitespace: '" +
                                name + "'");
  }
  if (!index_.emplace(name, params_.size()).second) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
}

template <typename T>
Tensor<T> ParameterSet<T>::add_weight(const std::string& name, std::size_t fan_in,
                                      std::size_t fan_out) {
  claim(name);
  auto t = Tensor<T>::zeros({fan_in, fan_out}, true);
  params_.push_back({name, t, fan_in, Parameter<T>::Role::weight});
  return t;
}

template <typename T>
Tensor<T> ParameterSet<T>::add_bias(const std::string& name, std::size_t width) {
  claim(name);
  auto t = Tensor<T>::zeros({1, width}, true);
  params_.push_back({name, t, 0, Parameter<T>::Role::bias});
  return t;
}

template <typename T>
std::shared_ptr<BatchNormState<T>> ParameterSet<T>::add_batchnorm(const std::string& name,
                                                                  std::size_t channels) {
  auto bn = std::make_shared<BatchNormState<T>>(channels);
  claim(name + ".scale");
  params_.push_back({name + ".scale", bn->scale, 0, Parameter<T>::Role::bn_scale});
  claim(name + ".shift");
  params_.push_back({name + ".shift", bn->shift, 0, Parameter<T>::Role::bn_shift});
  bns_.emplace_back(name, bn);
  return bn;
}

template <typename T>
const Parameter<T>& ParameterSet<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void ParameterSet<T>::set_bn_momentum(T momentum) {
  for (auto& [name, bn] : bns_) bn->momentum = momentum;
}

template <typename T>
CheckpointData export_parameters(const ParameterSet<T>& set) {
  CheckpointData data;
  for (const auto& p : set.params()) {
    auto v = p.tensor.values();
    data[p.name] = {p.tensor.shape(), std::vector<double>(v.begin(), v.end())};
  }
  for (const auto& [name, bn] : set.batchnorms()) {
    data["bn:" + name + ".running_mean"] = {
        {bn->channels()}, std::vector<double>(bn->running_mean.begin(), bn->running_mean.end())};
    data["bn:" + name + ".running_var"] = {
        {bn->channels()}, std::vector<double>(bn->running_var.begin(), bn->running_var.end())};
  }
  return data;
}

namespace {

const CheckpointEntry& lookup(const CheckpointData& data, const std::string& name,
                              const std::vector<std::size_t>& dims) {
  auto it = data.find(name);
  if (it == data.end()) throw FormatError("checkpoint is missing '" + name + "'");
  if (it->second.dims != dims) {
    throw FormatError("checkpoint entry '" + name + "' has shape " +
                      shape_str(it->second.dims) + ", expected " + shape_str(dims));
  }
  return it->second;
}

}  // namespace

template <typename T>
void import_parameters(ParameterSet<T>& set, const CheckpointData& data) {
  for (auto& p : set.params()) {
    const auto& e = lookup(data, p.name, p.tensor.shape());
    auto dst = p.tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  }
  for (const auto& [name, bn] : set.batchnorms()) {
    const auto& m = lookup(data, "bn:" + name + ".running_mean", {bn->channels()});
    const auto& v = lookup(data, "bn:" + name + ".running_var", {bn->channels()});
    for (std::size_t j = 0; j < bn->channels(); ++j) {
      bn->running_mean[j] = static_cast<T>(m.values[j]);
      bn->running_var[j] = static_cast<T>(v.values[j]);
    }
  }
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data,
                      int significant_digits) {
  std::string out = std::string(kCheckpointHeader) + "\n";
  char buf[64];
  for (const auto& [name, e] : data) {
    if (numel(e.dims) != e.values.size()) {
      throw std::invalid_argument("checkpoint entry '" + name + "' has inconsistent size");
    }
    out += name + " " + std::to_string(e.dims.size());
    for (auto d : e.dims) out += " " + std::to_string(d);
    out += "\n";
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      auto res = std::to_chars(buf, buf + sizeof(buf), e.values[i], std::chars_format::general,
                               significant_digits);
      if (i) out += ' ';
      out.append(buf, res.ptr);
    }
    out += "\n";
  }
  write_file_atomic(path, out);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointHeader) {
    throw FormatError(path.string() + ": missing '" + kCheckpointHeader + "' header");
  }
  CheckpointData data;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream head(line);
    std::string name;
    std::size_t ndim = 0;
    if (!(head >> name >> ndim)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad entry header");
    }
    CheckpointEntry e;
    e.dims.resize(ndim);
    for (auto& d : e.dims)
      if (!(head >> d)) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad dimensions");
      }
    std::string values;
    if (!std::getline(in, values)) {
      throw FormatError(path.string() + ": '" + name + "' has no value line");
    }
    ++lineno;
    const char* p = values.data();
    const char* end = p + values.size();
    e.values.reserve(numel(e.dims));
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p >= end) break;
      double v = 0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc()) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
      }
      e.values.push_back(v);
      p = res.ptr;
    }
    if (e.values.size() != numel(e.dims)) {
      throw FormatError(path.string() + ": '" + name + "' expects " +
                        std::to_string(numel(e.dims)) + " values, found " +
                        std::to_string(e.values.size()));
    }
    if (!data.emplace(name, std::move(e)).second) {
      throw FormatError(path.string() + ": duplicate entry '" + name + "'");
    }
  }
  return data;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template CheckpointData export_parameters(const ParameterSet<float>&);
template CheckpointData export_parameters(const ParameterSet<double>&);
template void import_parameters(ParameterSet<float>&, const CheckpointData&);
template void import_parameters(ParameterSet<double>&, const CheckpointData&);

}  // namespace rscnn
