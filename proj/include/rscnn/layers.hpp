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

#include <memory>
#include <string>

#include "rscnn/parameters.hpp"
#include "rscnn/tensor.hpp"

namespace rscnn {

/// Shared (pointwise) affine layer with optional batch normalization.
template <typename T>
struct DenseLayer {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [1 x out]
  std::shared_ptr<BatchNormState<T>> bn;  // null when the layer has none

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

/// Registers "<name>.weight", "<name>.bias" and, with `batchnorm`, "<name>.bn".
template <typename T>
DenseLayer<T> make_dense(ParameterSet<T>& set, const std::string& name, std::size_t in,
                         std::size_t out, bool batchnorm);

/// x W + b, then batch norm when present, then ReLU when `activate`.
template <typename T>
Tensor<T> dense_forward(const DenseLayer<T>& layer, const Tensor<T>& x, bool training,
                        bool activate);

}  // namespace rscnn
