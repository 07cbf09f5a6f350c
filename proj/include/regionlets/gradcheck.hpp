#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "regionlets/tensor.hpp"

namespace regionlets {

using ScalarFn = std::function<double(const Tensor&)>;

/// (f(x + h e_i) - f(x - h e_i)) / 2h. Only ever evaluates `f`.
double central_diff(const ScalarFn& f, const Tensor& point, std::size_t index, double step = 1e-5);

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradReport {
  std::string module;
  std::string argument;  // which input/parameter held the worst coordinate
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::uint64_t seed = 0;
  bool passed = true;
};

/// Compares `analytic` against central differences of `f` at every coordinate of `point`.
GradReport compare_gradient(const ScalarFn& f, const Tensor& point, const Tensor& analytic,
                            double tolerance, double step = 1e-5);

/// Negative controls: corrupt the analytic gradient before comparison.
enum class Mutation {
  none,
  scale,      // every analytic value times 1.01
  flip_sign,  // negate the largest-magnitude analytic value
};

struct ModuleCheck {
  std::string module;
  double tolerance = 0.0;
  std::vector<GradReport> reports;  // one per seed
  bool passed = true;
};

/// Identifiers accepted by check_module.
const std::vector<std::string>& gradcheck_modules();

/// 1e-6 for single layers, 1e-5 for the affine warp gradient, 1e-4 end to end.
double default_tolerance(std::string_view module);

/// Runs the randomized instance protocol for `module` over `seeds` instances.
/// Warp instances with any sample coordinate within 1e-3 of the integer
/// lattice are regenerated.
ModuleCheck check_module(std::string_view module, std::size_t seeds, double tolerance,
                         Mutation mutation = Mutation::none, std::uint64_t base_seed = 0);

}  // namespace regionlets
