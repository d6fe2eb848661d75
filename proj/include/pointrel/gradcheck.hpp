#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pointrel/common.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Finite-difference verification registry. Every differentiable kernel, the
// composed intra-region and inter-region blocks, and the full classifier
// forward are checked against central differences at a generic point.
// Shared by the command-line `gradcheck` command and the acceptance suite.
// ---------------------------------------------------------------------------

// Central-difference step and the pass threshold on the relative error.
inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckOutcome {
    std::string name;
    double max_rel_err = 0.0;  // worst over all probed entries and seeds
    bool pass = false;         // max_rel_err < kGradCheckTolerance
};

// Names of all registered checks, in execution order.
std::vector<std::string> gradcheck_names();

// Runs checks selected by scope: "all", an exact name, or an unambiguous
// prefix ("softmax" selects softmax_rows). Each check runs once per seed and
// reports its worst error. Unknown or ambiguous scope -> ConfigError.
std::vector<GradCheckOutcome> run_gradchecks(const std::string& scope,
                                             const std::vector<std::uint64_t>& seeds = {1, 2, 3});

}  // namespace pointrel
