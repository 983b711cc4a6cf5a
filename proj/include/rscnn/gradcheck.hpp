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

#include <functional>
#include <string>
#include <vector>

#include "rscnn/tensor.hpp"

namespace rscnn {

struct GradCheckLeaf {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_excess = 0;  // largest |a - n| / tolerance seen
  std::string worst_entry;  // "name[i]: analytic a, numeric n"

  bool ok() const { return failures == 0 && checked > 0; }
};

/// Compares backward() against central differences on every element of
/// every leaf. `loss` must rebuild the graph from the leaves' current values.
/// An element passes when |a - n| <= max(rel * max(|a|, |n|), abs_floor).
GradCheckResult check_gradients(std::vector<GradCheckLeaf> leaves,
                                const std::function<Tensor<double>()>& loss,
                                double step = 1e-6, double rel = 1e-4,
                                double abs_floor = 1e-6);

}  // namespace rscnn
