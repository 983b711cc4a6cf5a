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


#include "rscnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rscnn {

GradCheckResult check_gradients(std::vector<GradCheckLeaf> leaves,
                                const std::function<Tensor<double>()>& loss, double step,
                                double rel, double abs_floor) {
  for (auto& leaf : leaves) leaf.tensor.zero_grad();
  backward(loss());

  GradCheckResult result;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.tensor.size(), 0.0);
    if (leaf.tensor.has_grad()) {
      auto g = leaf.tensor.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto data = leaf.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = loss().item();
      data[i] = saved - step;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * step);

      const double a = analytic[i];
      const double tol = std::max(rel * std::max(std::abs(a), std::abs(numeric)), abs_floor);
      const double excess = std::abs(a - numeric) / tol;
      ++result.checked;
      if (!(excess <= 1.0)) ++result.failures;
      if (!(excess <= result.worst_excess)) {
        result.worst_excess = excess;
        std::ostringstream ss;
        ss.precision(10);
        ss << leaf.name << "[" << i << "]: analytic " << a << ", numeric " << numeric;
        result.worst_entry = ss.str();
      }
    }
  }
  return result;
}

}  // namespace rscnn
