#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "revflow/flow.h"
#include "revflow/layers.h"
#include "revflow/rng.h"
#include "revflow/tensor.h"

// Reference computations that share no code with the analytic backward passes
// or the hand-written LU: central finite differences and dense Jacobians
// factorized by Eigen.
namespace revflow::oracle {

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor);

/// max_i |a_i - b_i| / max(max|a|, max|b|, tiny): error relative to the
/// magnitude of the whole vector.
double scaled_max_error(std::span<const double> a, std::span<const double> b);

/// Central-difference derivative of f with respect to every entry of
/// `values`, which is perturbed in place and restored. `changed` runs after
/// every write (for example to bump a parameter version).
std::vector<double> fd_gradient(std::span<double> values, const std::function<double()>& f,
                                double step, const std::function<void()>& changed = {});

/// Central-difference Jacobian of f: R^d -> R^d, row-major (row = output).
std::vector<double> fd_jacobian(
    const std::function<std::vector<double>(std::span<const double>)>& f,
    std::span<const double> x, double step);

/// log|det A| of a dense row-major d x d matrix (full-pivot LU).
double log_abs_det(std::span<const double> matrix, std::size_t d);

/// Per-sample dense log|det| of a batched map on an (n, c, h, w) input:
/// the Jacobian of sample s's output with respect to sample s's input.
std::vector<double> dense_logdet(const std::function<std::vector<double>(const Tensor<double>&)>& f,
                                 const Tensor<double>& x, double step);

/// Moves every parameter away from its initialization so that no gradient
/// is trivially zero, and marks actnorm layers initialized. Weight noise is
/// scaled by 1/sqrt(fan-in).
void perturb(InvertibleLayer<double>& layer, Rng& rng, double scale);
void perturb(FlowModel<double>& model, Rng& rng, double scale);

/// Concatenation of every latent part of sample s.
std::vector<double> flatten_sample(const LatentBundle<double>& bundle, std::size_t s);

}  // namespace revflow::oracle
