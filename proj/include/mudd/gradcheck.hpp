#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mudd/autograd.hpp"

namespace mudd {

struct GradCheckReport {
    bool ok = true;
    double tol = 0.0;
    // Worst relative error found anywhere, and where it lives.
    double worst_rel = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<std::pair<std::string, double>> per_param;  // name -> max rel error

    std::string describe() const;
};

// Compares analytic gradients against central differences. `build` must
// record the full forward pass on the tape it is given and return the scalar
// loss; it is re-run with each parameter element perturbed by +/-h.
template <typename S>
GradCheckReport grad_check(const std::function<typename Tape<S>::Val(Tape<S>&)>& build,
                           std::span<Parameter<S>* const> params, double h = 1e-5,
                           double tol = 1e-5);

}  // namespace mudd
