#pragma once

#include <cstdint>
#include <deque>
#include <functional>

#include "sqgn/batch.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::opt {

/// Batch-loss oracle an optimizer drives: loss, gradient, and Gauss-Newton
/// action at arbitrary weights. Gradients and gn_vp are means over the batch.
class Problem {
public:
  virtual ~Problem() = default;
  virtual int64_t dim() const = 0;
  virtual double loss(const Tensor& w, const Batch& batch) const = 0;
  virtual Tensor gradient(const Tensor& w, const Batch& batch) const = 0;
  virtual Tensor gn_vp(const Tensor& w, const Batch& batch, const Tensor& v) const = 0;
};

/// w - alpha*g.
Tensor sgd_step(const Tensor& w, const Tensor& g, double alpha);

/// Variance-reduced gradient g_k = grad_S(w_k) - grad_S(w_snapshot) + mu.
Tensor svrg_gradient(const Tensor& g_batch, const Tensor& g_batch_at_snapshot, const Tensor& mu);

struct AdamOptions {
  double alpha = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
public:
  AdamState(AdamOptions options, int64_t dim);
  /// Bias-corrected moment update, then w - alpha*mhat/(sqrt(vhat)+eps).
  Tensor step(const Tensor& w, const Tensor& g);
  int64_t timestep() const { return t_; }
  const AdamOptions& options() const { return options_; }

private:
  AdamOptions options_;
  Tensor m_, v_;
  int64_t t_ = 0;
};

/// One (s, v) curvature pair: weight step and regularized Gauss-Newton action.
struct CurvaturePair {
  Tensor s;
  Tensor v;
};

/// Bounded FIFO of curvature pairs; index 0 is the oldest.
class History {
public:
  explicit History(size_t capacity) : capacity_(capacity) {}
  void push(CurvaturePair pair);
  size_t size() const { return pairs_.size(); }
  size_t capacity() const { return capacity_; }
  bool empty() const { return pairs_.empty(); }
  const CurvaturePair& operator[](size_t i) const { return pairs_[i]; }

private:
  std::deque<CurvaturePair> pairs_;
  size_t capacity_;
};

/// LBFGS direction d = -H^{-1} g from the two-loop recursion with initial
/// scaling gamma = (s.v)/(v.v) of the newest pair; empty history gives -g.
Tensor lbfgs_two_loop(const Tensor& g, const History& history);

using FullGradientFn = std::function<Tensor(const Tensor& w)>;

struct SqgnOptions {
  double alpha = 1e-1;
  double lambda = 1e-1;          // eigenvalue shift inside the curvature pair
  int64_t snapshot_interval = 10; // K: full-gradient refresh period
  int64_t gn_interval = 1;        // M: curvature-pair period
  int64_t history_size = 20;      // L
  double first_step_factor = 1e-7;
  bool variance_reduction = true;
  double curvature_guard = 1e-10; // skip pair if s.v <= guard*|s||v|
};

struct SqgnDiagnostics {
  double grad_norm = 0.0;
  double step_norm = 0.0;
  double curvature = 0.0; // dot(s, v) when a pair was computed
  size_t history_size = 0;
  bool pair_added = false;
  bool pair_skipped = false;
  bool snapshot_refreshed = false;
};

class SqgnState {
public:
  SqgnState(SqgnOptions options, Tensor w0);

  /// One full iteration: snapshot refresh (k = 0 mod K), variance-reduced
  /// gradient, LBFGS direction, small first step at k=0, weight update, and
  /// a curvature pair from the post-update iterate (k = 0 mod M).
  SqgnDiagnostics step(const Problem& problem, const Batch& batch, const Batch& gn_batch,
                       const FullGradientFn& full_gradient);

  const Tensor& weights() const { return w_; }
  int64_t iteration() const { return k_; }
  int64_t full_gradient_evals() const { return full_evals_; }
  const History& history() const { return history_; }
  const SqgnOptions& options() const { return options_; }

private:
  SqgnOptions options_;
  Tensor w_, snapshot_w_, mu_;
  History history_;
  int64_t k_ = 0;
  int64_t full_evals_ = 0;
};

struct SvrgOptions {
  double alpha = 1e-2;
  int64_t snapshot_interval = 10;
};

/// SVRG baseline: SGD steps driven by the variance-reduced gradient.
class SvrgState {
public:
  SvrgState(SvrgOptions options, Tensor w0);
  void step(const Problem& problem, const Batch& batch, const FullGradientFn& full_gradient);
  const Tensor& weights() const { return w_; }
  int64_t iteration() const { return k_; }
  int64_t full_gradient_evals() const { return full_evals_; }

private:
  SvrgOptions options_;
  Tensor w_, snapshot_w_, mu_;
  int64_t k_ = 0;
  int64_t full_evals_ = 0;
};

} // namespace sqgn::opt
