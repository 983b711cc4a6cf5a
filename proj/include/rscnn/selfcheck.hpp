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

#include <cstdint>
#include <string>
#include <vector>

#include "rscnn/gradcheck.hpp"

namespace rscnn {

struct SelfCheckRow {
  std::string name;
  GradCheckResult result;
};

/// Finite-difference checks at 64-bit precision of every differentiable
/// operation, one relation-convolution layer, an upsampling stage and the
/// miniature classifier (N = 32, three levels, batch of two).
std::vector<SelfCheckRow> gradient_suite(std::uint64_t seed);

struct GridConvRow {
  std::size_t height = 0, width = 0, channels = 0;
  double max_abs_diff = 0;
};

/// Random maps and kernels pushed through grid_conv_check.
std::vector<GridConvRow> gridconv_suite(std::uint64_t seed, std::size_t instances,
                                        std::size_t size = 5);

}  // namespace rscnn
