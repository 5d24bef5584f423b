#pragma once

#include <iosfwd>

#include "ddp/model.hpp"

namespace ddp {

struct GradCheckResult {
    std::string name;
    double worst_rel_err = 0.0;
    bool pass = false;
};

// Finite-difference certification of every differentiable operator plus a
// tiny end-to-end network, all in double precision. Central differences with
// step `eps`; an entry passes when the worst relative error stays below `tol`.
std::vector<GradCheckResult> run_gradient_checks(std::uint64_t seed, double tol = 1e-4,
                                                 double eps = 1e-4);

// Micro configuration used by the end-to-end check and desk-scale tests.
ModelSpec micro_spec();

// One line per entry; returns true when every entry passed.
bool print_gradient_checks(std::ostream& os, const std::vector<GradCheckResult>& results);

}  // namespace ddp
