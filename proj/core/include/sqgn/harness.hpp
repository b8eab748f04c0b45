#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sqgn/data.hpp"
#include "sqgn/loss.hpp"
#include "sqgn/nn.hpp"
#include "sqgn/optim.hpp"

namespace sqgn::harness {

enum class OptimizerKind { sgd, svrg, adam, sqgn };

OptimizerKind optimizer_from_string(const std::string& s);
const char* optimizer_name(OptimizerKind k);

struct RestartPolicy {
  int64_t max_restarts = 3;       // n-th stuck probe fails terminally when n == max_restarts
  int64_t probe_epoch = 5;
  double accuracy_threshold = 0.2;
};

/// Declarative run description; parsed from a flat key/value file with
/// repeated `layer =` entries for the architecture table.
struct ExperimentConfig {
  OptimizerKind optimizer = OptimizerKind::sqgn;
  loss::Kind loss_kind = loss::Kind::softmax_cross_entropy;

  double alpha = 1e-1;
  double lambda = 1e-1;
  int64_t snapshot_interval = 10; // K
  int64_t gn_interval = 1;        // M
  int64_t history_size = 20;      // L
  double first_step_factor = 1e-7;
  bool variance_reduction = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int64_t batch_size = 1000;    // |S_k|
  int64_t gn_batch_size = 1000; // |T_k|
  int64_t epochs = 100;
  int64_t iters_per_epoch = 60;

  uint64_t weight_seed = 1;
  uint64_t sample_seed = 1;
  bool with_replacement = false;

  std::string train_images, train_labels, test_images, test_labels;
  int64_t subset_train = 0; // 0 = full split; otherwise stratified first-k per class
  int64_t subset_test = 0;

  Shape input_shape;
  std::vector<nn::Layer> arch;

  std::string metrics_out = "metrics.csv";
  RestartPolicy restart;
  int64_t grad_chunk = 1000;
  int64_t eval_chunk = 1000;
  int64_t train_eval_cap = 2000;
  bool record_timing = false;

  static ExperimentConfig parse(std::istream& in, const std::string& origin);
  static ExperimentConfig parse_file(const std::string& path);
  /// Referenced files must exist; counts must be coherent.
  void validate() const;
};

/// One per-epoch result row; epoch 0 is the pre-training evaluation.
struct MetricsRecord {
  uint64_t seed = 0;
  int64_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  int64_t cum_iterations = 0;
  int64_t cum_full_grad_evals = 0;
  double mean_iter_ms = 0.0;
  int64_t restarts = 0;
};

struct RunSummary {
  uint64_t seed = 0;
  double final_test_loss = 0.0;
  double final_test_accuracy = 0.0;
  int64_t restarts = 0;
  double measured_iter_ms = 0.0; // always measured; never written to the CSV
};

struct ExperimentResult {
  std::vector<MetricsRecord> records;
  std::vector<RunSummary> summaries;
  double mean_final_test_loss = 0.0;
  double mean_final_test_accuracy = 0.0;
};

/// Full-split loss and argmax accuracy, streamed in chunks.
std::pair<double, double> evaluate(const nn::Network& net, const Tensor& w, loss::Kind kind,
                                   const data::Dataset& split, int64_t chunk);

enum class StuckDecision { continue_run, restart, fail };

/// Policy check at the probe epoch. stuck_events counts prior stuck probes.
StuckDecision stuck_decision(double probe_accuracy, int64_t stuck_events, const RestartPolicy& p);

/// CSV with a header row, one row per record (numbers at 17 significant
/// digits), and a '#'-prefixed per-seed/mean summary block.
void write_metrics(const std::vector<MetricsRecord>& records,
                   const std::vector<RunSummary>& summaries, const std::string& path);

/// Parses the data rows back; summary comments are skipped.
std::vector<MetricsRecord> read_metrics(const std::string& path);

/// Runs epochs x iterations for every seed (config seed when the list is
/// empty), evaluating the test split once per epoch and applying the restart
/// policy. Writes the metrics file; on numeric abort flushes partial rows
/// before rethrowing.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                std::span<const uint64_t> seed_list = {});

} // namespace sqgn::harness
