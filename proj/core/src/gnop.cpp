#include "sqgn/gnop.hpp"

#include "sqgn/errors.hpp"

namespace sqgn::gn {

namespace {

void check_ctx(const GnContext& ctx) {
  if (!ctx.net) throw ContractError("GnContext: network is null");
  if (ctx.weights.rank() != 1 || ctx.weights.size() != ctx.net->param_count())
    throw DimensionError("GnContext: weights must be flat of length " +
                         std::to_string(ctx.net->param_count()));
}

void check_flat(const GnContext& ctx, const Tensor& v, const char* op) {
  if (v.rank() != 1 || v.size() != ctx.net->param_count())
    throw DimensionError(std::string(op) + ": expected flat vector of length " +
                         std::to_string(ctx.net->param_count()) + ", got " + shape_str(v.shape()));
}

} // namespace

Tensor vjp(const GnContext& ctx, const Tensor& u) {
  check_ctx(ctx);
  ad::Tape tape;
  ad::Var w = tape.leaf(ctx.weights, true);
  ad::Var h = ctx.net->forward(tape, w, ctx.inputs);
  if (!same_shape(u.shape(), h.shape()))
    throw DimensionError("vjp: u " + shape_str(u.shape()) + " vs output " + shape_str(h.shape()));
  ad::Var s = ad::sum(ad::mul(h, tape.leaf(u, false)));
  return ad::backward(s, w).value();
}

namespace {

Tensor jvp_impl(const GnContext& ctx, const Tensor& v, const Tensor& u0) {
  check_ctx(ctx);
  check_flat(ctx, v, "jvp");
  ad::Tape tape;
  ad::Var w = tape.leaf(ctx.weights, true);
  ad::Var h = ctx.net->forward(tape, w, ctx.inputs);
  if (!same_shape(u0.shape(), h.shape()))
    throw DimensionError("jvp: u0 " + shape_str(u0.shape()) + " vs output " + shape_str(h.shape()));
  ad::Var u = tape.leaf(u0, true);
  ad::Var phi = ad::backward(ad::sum(ad::mul(h, u)), w); // J_h^T u as a function of u
  ad::Var t = ad::sum(ad::mul(phi, tape.leaf(v, false)));
  return ad::backward(t, u).value();
}

} // namespace

Tensor jvp(const GnContext& ctx, const Tensor& v) {
  check_ctx(ctx);
  Shape out_shape = {ctx.inputs.extent(0), ctx.net->output_dim()};
  return jvp_impl(ctx, v, Tensor::zeros(out_shape));
}

Tensor jvp_seeded(const GnContext& ctx, const Tensor& v, const Tensor& u0) {
  return jvp_impl(ctx, v, u0);
}

Tensor gauss_newton_vp(const GnContext& ctx, const Tensor& v) {
  check_ctx(ctx);
  check_flat(ctx, v, "gauss_newton_vp");
  ad::Tape tape;
  ad::Var w = tape.leaf(ctx.weights, true);
  ad::Var h = ctx.net->forward(tape, w, ctx.inputs);
  ad::Var u = tape.leaf(Tensor::zeros(h.shape()), true);
  ad::Var phi = ad::backward(ad::sum(ad::mul(h, u)), w);
  ad::Var t = ad::sum(ad::mul(phi, tape.leaf(v, false)));
  const Tensor jv = ad::backward(t, u).value();
  const Tensor z = ctx.literal_output_hessian
                       ? loss::output_hessian_vp_literal(ctx.loss_kind, h.value(), ctx.labels, jv)
                       : loss::output_hessian_vp(ctx.loss_kind, h.value(), ctx.labels, jv);
  ad::Var s2 = ad::sum(ad::mul(h, tape.leaf(z, false)));
  return ad::backward(s2, w).value();
}

Tensor regularized_gn_vp(const GnContext& ctx, const Tensor& v, double lambda) {
  if (lambda < 0.0)
    throw ContractError("regularized_gn_vp: lambda must be nonnegative, got " +
                        std::to_string(lambda));
  Tensor gnv = gauss_newton_vp(ctx, v);
  return axpy(lambda, v, gnv);
}

double ModelProblem::loss(const Tensor& w, const Batch& batch) const {
  return loss::loss_value(kind_, net_->forward_value(w, batch.inputs), batch.labels);
}

Tensor ModelProblem::gradient(const Tensor& w, const Batch& batch) const {
  ad::Tape tape;
  ad::Var wv = tape.leaf(w, true);
  ad::Var h = net_->forward(tape, wv, batch.inputs);
  return ad::backward(loss::loss_graph(kind_, h, batch.labels), wv).value();
}

Tensor ModelProblem::gn_vp(const Tensor& w, const Batch& batch, const Tensor& v) const {
  GnContext ctx{net_, kind_, batch.inputs, batch.labels, w, false};
  return gauss_newton_vp(ctx, v);
}

} // namespace sqgn::gn
