#pragma once

#include "sqgn/batch.hpp"
#include "sqgn/loss.hpp"
#include "sqgn/nn.hpp"
#include "sqgn/optim.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::gn {

// Action of the Gauss-Newton operator J_h^T (d2 loss / dh2) J_h on a flat
// weight vector, computed with reverse-mode passes only: one shared forward,
// then phi(u) = grad_w(h.u), phitilde(v) = grad_u(phi.v), the output-Hessian
// action, and a final reverse pass.

struct GnContext {
  const nn::Network* net = nullptr;
  loss::Kind loss_kind = loss::Kind::mean_square_error;
  Tensor inputs; // mini-batch T_k
  Tensor labels;
  Tensor weights; // flat snapshot; the post-update iterate when building pairs
  // Compute the middle factor literally as grad_h(grad_h(loss)^T z) instead of
  // the closed form; equivalence cross-check path.
  bool literal_output_hessian = false;
};

/// J_h^T u, one reverse pass; u has the batched output shape (N,r).
Tensor vjp(const GnContext& ctx, const Tensor& u);

/// J_h v via a nested reverse pass over phi; the result is independent of the
/// seed point u (zero here).
Tensor jvp(const GnContext& ctx, const Tensor& v);

/// jvp evaluated at an explicit seed u0; exists to demonstrate u-independence.
Tensor jvp_seeded(const GnContext& ctx, const Tensor& v, const Tensor& u0);

/// J_h^T (d2 loss/dh2) J_h v using three reverse passes over one forward.
Tensor gauss_newton_vp(const GnContext& ctx, const Tensor& v);

/// gauss_newton_vp(v) + lambda v, lambda >= 0.
Tensor regularized_gn_vp(const GnContext& ctx, const Tensor& v, double lambda);

/// Network + loss as an optimizer-facing problem (batch loss, gradient,
/// Gauss-Newton action on flat weights).
class ModelProblem final : public opt::Problem {
public:
  ModelProblem(const nn::Network& net, loss::Kind kind) : net_(&net), kind_(kind) {}

  int64_t dim() const override { return net_->param_count(); }
  double loss(const Tensor& w, const Batch& batch) const override;
  Tensor gradient(const Tensor& w, const Batch& batch) const override;
  Tensor gn_vp(const Tensor& w, const Batch& batch, const Tensor& v) const override;

  const nn::Network& network() const { return *net_; }
  loss::Kind loss_kind() const { return kind_; }

private:
  const nn::Network* net_;
  loss::Kind kind_;
};

} // namespace sqgn::gn
