#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hybridscan/autodiff.hpp"

namespace hybridscan {

/// Finite differences use the fourth-order five-point stencil
///   f'(x) ~ (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h.
struct GradcheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  Index max_elements_per_leaf = 24;  // larger leaves are checked on a random subset
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;  // worst over leaves and seeds
  Index checked = 0;         // finite-difference evaluations
  bool passed = false;
};

/// Gradients with a smaller norm than this are compared in absolute terms;
/// it sits well above the stencil's round-off.
inline constexpr double kGradientNormFloor = 1e-6;

/// ||a - n|| / max(||a||, ||n||, kGradientNormFloor).
double gradient_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

/// Compares backward() on f() against central differences of every leaf.
/// f must rebuild the graph from the leaves' current values on each call
/// and return a tensor of any shape; a fixed random projection reduces it
/// to the scalar being differentiated.
double check_leaves(const std::vector<Var<double>>& leaves, const std::function<Var<double>()>& f,
                    const GradcheckOptions& opts, std::uint64_t seed, Index* evaluations = nullptr);

/// Every differentiable op, the selective scan and Mamba layer, the S-LMamba
/// block in both residual modes, FGM, and a 2-stage model on an 8^3 input.
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts = {},
                                                 const std::function<void(const GradcheckResult&)>& on_result = {});

}  // namespace hybridscan
