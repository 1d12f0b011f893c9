#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "embedkit/gradcheck.hpp"

namespace embedkit {

struct SuiteResult {
  std::string module;  // "vit" or "head"
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
};

/// Finite-difference checks over matmul, layer_norm, softmax, an attention
/// block and the overlapping patch embedding ("vit"), and the projection and
/// ArcFace loss ("head"), once per seed in [0, seeds). `module` is "all",
/// "vit" or "head".
std::vector<SuiteResult> run_gradient_suite(const std::string& module, int seeds);

}  // namespace embedkit
