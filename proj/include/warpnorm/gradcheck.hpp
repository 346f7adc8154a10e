#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "warpnorm/tensor.hpp"

namespace warpnorm {

// Central finite differences of a scalar-valued function, coordinate by
// coordinate. Throws oracle_error (with the coordinate index) if f turns
// non-finite on the eps-ball.
Tensor4 central_diff(const std::function<double(const Tensor4&)>& f,
                     const Tensor4& x, double eps = 1e-5);

struct InputGradError {
    std::string input;       // input slot name
    double max_abs = 0.0;
    double max_rel = 0.0;
    std::size_t worst_index = 0; // coordinate of the worst relative error
};

struct GradReport {
    std::string op_id;
    std::uint64_t seed = 0;
    double tol = 0.0;
    bool pass = false;
    std::vector<InputGradError> inputs;
};

struct CheckOptions {
    int seeds = 20;
    double tol = 1e-4;
    double eps = 1e-5;
    int h = 0, w = 0; // 0 = per-op default sizes
};

// Ops registered with both a forward and a vjp, checkable by id.
std::vector<std::string> registered_ops();
bool is_registered_op(const std::string& op_id);

// One report per seed. Contracts the outputs with a random probe and
// compares the analytic VJP of each differentiable input against
// central_diff of the probed scalar. Relative error denominator floored
// at 1e-8.
std::vector<GradReport> check_vjp(const std::string& op_id, const CheckOptions& opt = {});

// Generic dispatchers into the same registry (contract_error on unknown id).
std::vector<Tensor4> op_forward(const std::string& op_id, const std::vector<Tensor4>& inputs);
std::vector<Tensor4> op_vjp(const std::string& op_id, const std::vector<Tensor4>& inputs,
                            const std::vector<Tensor4>& grad_out);
// Deterministic canonical inputs for an op (used by the dispatch API and CLI).
std::vector<Tensor4> op_sample_inputs(const std::string& op_id, std::uint64_t seed,
                                      int h = 0, int w = 0);
std::vector<std::string> op_input_names(const std::string& op_id);

} // namespace warpnorm
