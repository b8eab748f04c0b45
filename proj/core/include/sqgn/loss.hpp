#pragma once

#include <string>

#include "sqgn/autodiff.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::loss {

// Both losses are convex in the network output h, so the output Hessian
// (the middle factor of the Gauss-Newton operator) is positive semi-definite.
// Cross-entropy takes pre-softmax logits; softmax lives inside the loss.
enum class Kind {
  mean_square_error,
  softmax_cross_entropy,
};

Kind kind_from_string(const std::string& s);
const char* kind_name(Kind k);

/// Mean over the batch: MSE is (1/N) sum of squared residuals over all
/// components; cross-entropy is (1/N) sum of -log softmax(h_i)[y_i].
/// h is (N,r); y is (N,r) for MSE, (N) class indices for cross-entropy.
double loss_value(Kind kind, const Tensor& h, const Tensor& y);

/// Differentiable loss graph on an existing tape; y is constant.
ad::Var loss_graph(Kind kind, ad::Var h, const Tensor& y);

/// Gradient of the loss with respect to the network output h.
Tensor gradient_h(Kind kind, const Tensor& h, const Tensor& y);

/// Action of the output-space Hessian: MSE gives (2/N) z; cross-entropy gives
/// per sample (diag(p) - p p^T) z_i / N with p = softmax(h_i). Closed form.
Tensor output_hessian_vp(Kind kind, const Tensor& h, const Tensor& y, const Tensor& z);

/// Same action computed literally as psi(z) = grad_h(grad_h(loss)^T z) with a
/// nested reverse pass through the loss graph; cross-check path for the
/// closed form above.
Tensor output_hessian_vp_literal(Kind kind, const Tensor& h, const Tensor& y, const Tensor& z);

} // namespace sqgn::loss
