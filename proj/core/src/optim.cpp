#include "sqgn/optim.hpp"

#include <cmath>

#include "sqgn/errors.hpp"

namespace sqgn::opt {

Tensor sgd_step(const Tensor& w, const Tensor& g, double alpha) {
  if (alpha <= 0.0) throw ContractError("sgd_step: alpha must be positive");
  return axpy(-alpha, g, w);
}

Tensor svrg_gradient(const Tensor& g_batch, const Tensor& g_batch_at_snapshot, const Tensor& mu) {
  return add(sub(g_batch, g_batch_at_snapshot), mu);
}

AdamState::AdamState(AdamOptions options, int64_t dim)
    : options_(options), m_(Tensor::zeros({dim})), v_(Tensor::zeros({dim})) {}

Tensor AdamState::step(const Tensor& w, const Tensor& g) {
  if (options_.alpha <= 0.0) throw ContractError("adam_step: alpha must be positive");
  if (w.size() != m_.size() || g.size() != m_.size())
    throw DimensionError("adam_step: dimension mismatch");
  ++t_;
  Tensor m_next = Tensor::uninit(m_.shape());
  Tensor v_next = Tensor::uninit(v_.shape());
  Tensor w_next = Tensor::uninit(w.shape());
  const double* mp = m_.data().data();
  const double* vp = v_.data().data();
  const double* gp = g.data().data();
  const double* wp = w.data().data();
  double* mn = m_next.mutable_data().data();
  double* vn = v_next.mutable_data().data();
  double* wn = w_next.mutable_data().data();
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (int64_t i = 0; i < w.size(); ++i) {
    mn[i] = options_.beta1 * mp[i] + (1.0 - options_.beta1) * gp[i];
    vn[i] = options_.beta2 * vp[i] + (1.0 - options_.beta2) * gp[i] * gp[i];
    const double mhat = mn[i] / c1;
    const double vhat = vn[i] / c2;
    wn[i] = wp[i] - options_.alpha * mhat / (std::sqrt(vhat) + options_.eps);
  }
  m_ = std::move(m_next);
  v_ = std::move(v_next);
  return w_next;
}

void History::push(CurvaturePair pair) {
  pairs_.push_back(std::move(pair));
  while (pairs_.size() > capacity_) pairs_.pop_front();
}

Tensor lbfgs_two_loop(const Tensor& g, const History& history) {
  if (history.empty()) return neg(g);
  const size_t n = history.size();
  std::vector<double> rho(n), alpha(n);
  Tensor q = g;
  for (size_t ii = n; ii-- > 0;) {
    const CurvaturePair& p = history[ii];
    const double sv = dot(p.v, p.s);
    if (sv <= 0.0)
      throw ContractError("lbfgs_two_loop: non-positive curvature pair in history (s.v = " +
                          std::to_string(sv) + ")");
    rho[ii] = 1.0 / sv;
    alpha[ii] = rho[ii] * dot(p.s, q);
    q = axpy(-alpha[ii], p.v, q);
  }
  const CurvaturePair& last = history[n - 1];
  const double gamma = dot(last.s, last.v) / dot(last.v, last.v);
  Tensor r = scale(q, gamma);
  for (size_t ii = 0; ii < n; ++ii) {
    const CurvaturePair& p = history[ii];
    const double beta = rho[ii] * dot(p.v, r);
    r = axpy(alpha[ii] - beta, p.s, r);
  }
  return neg(r);
}

SqgnState::SqgnState(SqgnOptions options, Tensor w0)
    : options_(options),
      w_(std::move(w0)),
      history_(static_cast<size_t>(options.history_size)) {
  if (options_.alpha <= 0.0) throw ContractError("sqgn: alpha must be positive");
  if (options_.lambda < 0.0) throw ContractError("sqgn: lambda must be nonnegative");
  if (options_.snapshot_interval < 1 || options_.gn_interval < 1 || options_.history_size < 1)
    throw ContractError("sqgn: intervals and history size must be >= 1");
}

SqgnDiagnostics SqgnState::step(const Problem& problem, const Batch& batch, const Batch& gn_batch,
                                const FullGradientFn& full_gradient) {
  if (gn_batch.size() > batch.size())
    throw ContractError("sqgn_step: |T_k| must not exceed |S_k|");
  SqgnDiagnostics diag;

  if (options_.variance_reduction && k_ % options_.snapshot_interval == 0) {
    mu_ = full_gradient(w_);
    snapshot_w_ = w_;
    ++full_evals_;
    diag.snapshot_refreshed = true;
  }

  Tensor g;
  if (options_.variance_reduction) {
    if (diag.snapshot_refreshed) {
      // w == snapshot: the two batch gradients are identical evaluations and
      // cancel exactly, leaving mu
      g = mu_;
    } else {
      Tensor g_now = problem.gradient(w_, batch);
      Tensor g_snap = problem.gradient(snapshot_w_, batch);
      g = svrg_gradient(g_now, g_snap, mu_);
    }
  } else {
    g = problem.gradient(w_, batch);
  }
  diag.grad_norm = norm2(g);

  const Tensor d = lbfgs_two_loop(g, history_);
  const double step_scale = k_ == 0 ? options_.first_step_factor : options_.alpha;
  const Tensor s = scale(d, step_scale);
  diag.step_norm = norm2(s);
  Tensor w_next = add(w_, s);
  if (!w_next.all_finite())
    throw NumericError("sqgn_step: non-finite iterate at iteration " + std::to_string(k_));

  if (k_ % options_.gn_interval == 0) {
    Tensor v = problem.gn_vp(w_next, gn_batch, s);
    if (options_.lambda > 0.0) v = axpy(options_.lambda, s, v);
    const double sv = dot(s, v);
    diag.curvature = sv;
    if (sv > options_.curvature_guard * norm2(s) * norm2(v)) {
      history_.push({s, v});
      diag.pair_added = true;
    } else {
      diag.pair_skipped = true;
    }
  }

  w_ = std::move(w_next);
  ++k_;
  diag.history_size = history_.size();
  return diag;
}

SvrgState::SvrgState(SvrgOptions options, Tensor w0) : options_(options), w_(std::move(w0)) {
  if (options_.alpha <= 0.0) throw ContractError("svrg: alpha must be positive");
  if (options_.snapshot_interval < 1) throw ContractError("svrg: snapshot interval must be >= 1");
}

void SvrgState::step(const Problem& problem, const Batch& batch,
                     const FullGradientFn& full_gradient) {
  bool refreshed = false;
  if (k_ % options_.snapshot_interval == 0) {
    mu_ = full_gradient(w_);
    snapshot_w_ = w_;
    ++full_evals_;
    refreshed = true;
  }
  Tensor g;
  if (refreshed) {
    g = mu_; // the batch terms cancel exactly at the snapshot point
  } else {
    Tensor g_now = problem.gradient(w_, batch);
    Tensor g_snap = problem.gradient(snapshot_w_, batch);
    g = svrg_gradient(g_now, g_snap, mu_);
  }
  w_ = sgd_step(w_, g, options_.alpha);
  if (!w_.all_finite())
    throw NumericError("svrg_step: non-finite iterate at iteration " + std::to_string(k_));
  ++k_;
}

} // namespace sqgn::opt
