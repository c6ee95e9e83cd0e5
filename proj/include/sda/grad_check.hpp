#pragma once

#include <functional>
#include <map>
#include <string>

#include "sda/matrix.hpp"
#include "sda/tape.hpp"

namespace sda {

// Builds a 1x1 loss from parameter handles. The function must be pure in the
// parameter values: it is re-evaluated under coordinate perturbations.
using ScalarFn = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

struct GradCheckResult {
    bool passed = false;
    double max_error = 0.0; // relative, or absolute below the magnitude fallback
    std::string worst_param;
    int worst_row = -1;
    int worst_col = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::string describe() const;
};

// Central-difference check of the tape gradient of f at params.
// Relative error per coordinate, with an absolute fallback when both the
// analytic and numeric values are below 1e-8 in magnitude.
GradCheckResult grad_check(const ScalarFn& f, const ParamMap& params,
                           double eps = 1e-5, double tol = 1e-4);

} // namespace sda
