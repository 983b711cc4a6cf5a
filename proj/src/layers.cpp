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


#include "rscnn/layers.hpp"

namespace rscnn {

template <typename T>
DenseLayer<T> make_dense(ParameterSet<T>& set, const std::string& name, std::size_t in,
                         std::size_t out, bool batchnorm) {
  DenseLayer<T> layer;
  layer.weight = set.add_weight(name + ".weight", in, out);
  layer.bias = set.add_bias(name + ".bias", out);
  if (batchnorm) layer.bn = set.add_batchnorm(name + ".bn", out);
  return layer;
}

template <typename T>
Tensor<T> dense_forward(const DenseLayer<T>& layer, const Tensor<T>& x, bool training,
                        bool activate) {
  auto y = add(matmul(x, layer.weight), layer.bias);
  if (layer.bn) y = batchnorm(y, *layer.bn, training);
  return activate ? relu(y) : y;
}

#define RSCNN_INSTANTIATE(T)                                                          \
  template DenseLayer<T> make_dense(ParameterSet<T>&, const std::string&, std::size_t, \
                                    std::size_t, bool);                               \
  template Tensor<T> dense_forward(const DenseLayer<T>&, const Tensor<T>&, bool, bool);
RSCNN_INSTANTIATE(float)
RSCNN_INSTANTIATE(double)
#undef RSCNN_INSTANTIATE

}  // namespace rscnn
