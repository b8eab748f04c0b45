#pragma once

// Independent oracles for tests and the CLI `check` subcommand: brute-force
// loops, finite differences, dense matrix assemblies. Nothing here may call
// the differentiation path it is used to verify.

#include <functional>
#include <vector>

#include "sqgn/loss.hpp"
#include "sqgn/nn.hpp"
#include "sqgn/optim.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::testing {

/// Triple-loop matrix product.
Tensor gemm_naive(const Tensor& a, const Tensor& b);

/// Plain loop dot product.
double dot_naive(const Tensor& a, const Tensor& b);

/// Quadruple-loop valid-padding cross-correlation. x is (N,H,W,C), kernel is
/// (KH,KW,C,OC), bias is (OC) or empty.
Tensor conv2d_naive(const Tensor& x, const Tensor& kernel, const Tensor& bias);

/// Central finite difference gradient of a scalar function, step eps.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps);

/// Directional central difference (h(x+eps*v) - h(x-eps*v)) / (2 eps).
Tensor fd_directional(const std::function<Tensor(const Tensor&)>& h, const Tensor& x,
                      const Tensor& v, double eps);

/// Dense (rows x cols) matrix assembled column-by-column from probe(e_j).
Tensor assemble_columns(int64_t rows, int64_t cols,
                        const std::function<Tensor(const Tensor&)>& probe);

Tensor matvec(const Tensor& m, const Tensor& v);

/// Dense inverse-BFGS recursion: H <- (I - rho s v^T) H (I - rho v s^T) +
/// rho s s^T over the history oldest-to-newest, starting from gamma*I with
/// gamma from the newest pair. Returns -H g (the reference LBFGS direction).
Tensor dense_bfgs_direction(const Tensor& g, const opt::History& history);

/// All k-subsets of {0..n-1} in lexicographic order.
std::vector<std::vector<int64_t>> combinations(int64_t n, int64_t k);

/// Max over coordinates of |a-b| / max(|b|, floor).
double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-12);

struct RandomNet {
  nn::Network net;
  Tensor weights; // flat
  Tensor inputs;  // batch
  Tensor labels_mse;
  Tensor labels_ce;
};

/// Random dense/ReLU stack with m <= max_params and the given batch size.
/// Pre-activations are re-drawn until they clear kink_margin so finite
/// differences stay on one linear piece.
RandomNet random_dense_relu_net(uint64_t seed, int64_t max_params, int64_t batch,
                                double kink_margin = 1e-3);

} // namespace sqgn::testing
