#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aunet/tensor.hpp"

namespace aunet {

struct GradCheckResult {
    struct PerParam {
        std::string name;
        double max_rel_err = 0.0;
    };
    bool valid = true;   // false when the closure is non-deterministic
    bool pass = false;   // all params under tol
    double tol = 0.0;
    std::vector<PerParam> params;
    std::string message;

    double worst() const;
};

// Compares analytic gradients of `f` against central finite differences.
// `f` must rebuild the scalar loss from the given parameter tensors on each
// call and be deterministic; the checker verifies determinism by running
// the forward twice before differencing.
GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h = 1e-5, double tol = 1e-4);

struct OpCheckReport {
    struct Entry {
        std::string op;
        double max_rel_err = 0.0;
        bool pass = false;
    };
    std::vector<Entry> entries;
    bool pass = true;
};

// Finite-difference suite over every smooth primitive (10 random shapes
// each) plus a composite attention/loss closure. `inject_bug` adds a
// negative-control op with a deliberately wrong backward.
OpCheckReport gradcheck_suite(std::uint64_t seed, bool inject_bug = false);

}  // namespace aunet
