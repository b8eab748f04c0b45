#include "sqgn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "sqgn/errors.hpp"
#include "sqgn/gnop.hpp"

namespace sqgn::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

double parse_double(const std::string& v, const std::string& key) {
  size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("config: trailing junk in number for key '" + key + "'");
  return d;
}

int64_t parse_int(const std::string& v, const std::string& key) {
  size_t pos = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("config: trailing junk in integer for key '" + key + "'");
  return i;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

nn::Layer parse_layer(const std::string& v) {
  const auto toks = split_ws(v);
  if (toks.empty()) throw ConfigError("config: empty layer entry");
  const std::string& kind = toks[0];
  auto want = [&](size_t n) {
    if (toks.size() != n)
      throw ConfigError("config: layer '" + v + "' has wrong argument count");
  };
  if (kind == "conv") {
    want(4);
    nn::Conv2d c;
    c.kh = parse_int(toks[1], "layer conv");
    c.kw = parse_int(toks[2], "layer conv");
    c.out_ch = parse_int(toks[3], "layer conv");
    return c;
  }
  if (kind == "dense") {
    want(2);
    nn::Dense d;
    d.out = parse_int(toks[1], "layer dense");
    return d;
  }
  if (kind == "maxpool") {
    want(3);
    return nn::MaxPool2d{parse_int(toks[1], "layer maxpool"), parse_int(toks[2], "layer maxpool")};
  }
  if (kind == "relu") {
    want(1);
    return nn::Relu{};
  }
  if (kind == "flatten") {
    want(1);
    return nn::Flatten{};
  }
  throw ConfigError("config: unknown layer kind '" + kind + "'");
}

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "svrg") return OptimizerKind::svrg;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sqgn") return OptimizerKind::sqgn;
  throw ConfigError("config: unknown optimizer '" + s + "'");
}

const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::svrg: return "svrg";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sqgn: return "sqgn";
  }
  return "?";
}

ExperimentConfig ExperimentConfig::parse(std::istream& in, const std::string& origin) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key != "layer" && !seen.insert(key).second)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");

    if (key == "optimizer") cfg.optimizer = optimizer_from_string(value);
    else if (key == "loss") cfg.loss_kind = loss::kind_from_string(value);
    else if (key == "alpha") cfg.alpha = parse_double(value, key);
    else if (key == "lambda") cfg.lambda = parse_double(value, key);
    else if (key == "snapshot_interval") cfg.snapshot_interval = parse_int(value, key);
    else if (key == "gn_interval") cfg.gn_interval = parse_int(value, key);
    else if (key == "history") cfg.history_size = parse_int(value, key);
    else if (key == "first_step_factor") cfg.first_step_factor = parse_double(value, key);
    else if (key == "variance_reduction") cfg.variance_reduction = parse_bool(value, key);
    else if (key == "adam_beta1") cfg.adam_beta1 = parse_double(value, key);
    else if (key == "adam_beta2") cfg.adam_beta2 = parse_double(value, key);
    else if (key == "adam_eps") cfg.adam_eps = parse_double(value, key);
    else if (key == "batch_size") cfg.batch_size = parse_int(value, key);
    else if (key == "gn_batch_size") cfg.gn_batch_size = parse_int(value, key);
    else if (key == "epochs") cfg.epochs = parse_int(value, key);
    else if (key == "iters_per_epoch") cfg.iters_per_epoch = parse_int(value, key);
    else if (key == "weight_seed") cfg.weight_seed = static_cast<uint64_t>(parse_int(value, key));
    else if (key == "sample_seed") cfg.sample_seed = static_cast<uint64_t>(parse_int(value, key));
    else if (key == "with_replacement") cfg.with_replacement = parse_bool(value, key);
    else if (key == "train_images") cfg.train_images = value;
    else if (key == "train_labels") cfg.train_labels = value;
    else if (key == "test_images") cfg.test_images = value;
    else if (key == "test_labels") cfg.test_labels = value;
    else if (key == "subset_train") cfg.subset_train = parse_int(value, key);
    else if (key == "subset_test") cfg.subset_test = parse_int(value, key);
    else if (key == "metrics_out") cfg.metrics_out = value;
    else if (key == "max_restarts") cfg.restart.max_restarts = parse_int(value, key);
    else if (key == "restart_probe_epoch") cfg.restart.probe_epoch = parse_int(value, key);
    else if (key == "restart_accuracy_threshold")
      cfg.restart.accuracy_threshold = parse_double(value, key);
    else if (key == "grad_chunk") cfg.grad_chunk = parse_int(value, key);
    else if (key == "eval_chunk") cfg.eval_chunk = parse_int(value, key);
    else if (key == "train_eval_cap") cfg.train_eval_cap = parse_int(value, key);
    else if (key == "record_timing") cfg.record_timing = parse_bool(value, key);
    else if (key == "input") {
      cfg.input_shape.clear();
      for (const auto& t : split_ws(value)) cfg.input_shape.push_back(parse_int(t, key));
    } else if (key == "layer") {
      cfg.arch.push_back(parse_layer(value));
    } else {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse(in, path);
}

void ExperimentConfig::validate() const {
  if (iters_per_epoch < 1) throw ConfigError("config: iters_per_epoch must be >= 1");
  if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
  if (batch_size < 1 || gn_batch_size < 1 || gn_batch_size > batch_size)
    throw ConfigError("config: need 1 <= gn_batch_size <= batch_size");
  if (input_shape.empty()) throw ConfigError("config: missing 'input'");
  if (arch.empty()) throw ConfigError("config: missing 'layer' entries");
  if (grad_chunk < 1 || eval_chunk < 1) throw ConfigError("config: chunk sizes must be >= 1");
  for (const std::string* p : {&train_images, &train_labels, &test_images, &test_labels}) {
    if (p->empty()) throw ConfigError("config: dataset paths are required");
    if (!std::filesystem::exists(*p)) throw ConfigError("config: file does not exist: " + *p);
  }
}

std::pair<double, double> evaluate(const nn::Network& net, const Tensor& w, loss::Kind kind,
                                   const data::Dataset& split, int64_t chunk) {
  const int64_t n = split.size();
  if (n == 0) throw ContractError("evaluate: empty split");
  double loss_sum = 0.0;
  int64_t correct = 0;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += chunk) {
    const int64_t count = std::min(chunk, n - start);
    idx.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    const Batch b = split.batch(idx);
    const Tensor logits = net.forward_value(w, b.inputs);
    loss_sum += loss::loss_value(kind, logits, b.labels) * static_cast<double>(count);
    const int64_t r = logits.extent(1);
    const auto lv = logits.data();
    const auto yv = b.labels.data();
    for (int64_t i = 0; i < count; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < r; ++j)
        if (lv[static_cast<size_t>(i * r + j)] > lv[static_cast<size_t>(i * r + best)]) best = j;
      int64_t truth;
      if (b.labels.rank() == 1) {
        truth = static_cast<int64_t>(std::llround(yv[static_cast<size_t>(i)]));
      } else {
        truth = 0;
        for (int64_t j = 1; j < r; ++j)
          if (yv[static_cast<size_t>(i * r + j)] > yv[static_cast<size_t>(i * r + truth)]) truth = j;
      }
      if (best == truth) ++correct;
    }
  }
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

StuckDecision stuck_decision(double probe_accuracy, int64_t stuck_events, const RestartPolicy& p) {
  if (probe_accuracy >= p.accuracy_threshold) return StuckDecision::continue_run;
  return stuck_events + 1 >= p.max_restarts ? StuckDecision::fail : StuckDecision::restart;
}

void write_metrics(const std::vector<MetricsRecord>& records,
                   const std::vector<RunSummary>& summaries, const std::string& path) {
  std::ofstream out(path, std::ios::binary); // binary: byte-identical across platforms
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "seed,epoch,train_loss,test_loss,test_accuracy,cum_iterations,cum_full_grad_evals,"
         "mean_iter_ms,restarts\n";
  for (const MetricsRecord& r : records) {
    out << r.seed << ',' << r.epoch << ',' << format_g17(r.train_loss) << ','
        << format_g17(r.test_loss) << ',' << format_g17(r.test_accuracy) << ','
        << r.cum_iterations << ',' << r.cum_full_grad_evals << ',' << format_g17(r.mean_iter_ms)
        << ',' << r.restarts << '\n';
  }
  if (!summaries.empty()) {
    out << "# summary seeds=" << summaries.size() << '\n';
    double acc = 0.0, loss_sum = 0.0;
    for (const RunSummary& s : summaries) {
      out << "# seed=" << s.seed << " final_test_loss=" << format_g17(s.final_test_loss)
          << " final_test_accuracy=" << format_g17(s.final_test_accuracy)
          << " restarts=" << s.restarts << '\n';
      acc += s.final_test_accuracy;
      loss_sum += s.final_test_loss;
    }
    out << "# mean final_test_loss=" << format_g17(loss_sum / static_cast<double>(summaries.size()))
        << " final_test_accuracy=" << format_g17(acc / static_cast<double>(summaries.size()))
        << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) throw FormatError("metrics row with " + std::to_string(cells.size()) +
                                             " cells in " + path);
    MetricsRecord r;
    r.seed = static_cast<uint64_t>(std::stoull(cells[0]));
    r.epoch = std::stoll(cells[1]);
    r.train_loss = std::stod(cells[2]);
    r.test_loss = std::stod(cells[3]);
    r.test_accuracy = std::stod(cells[4]);
    r.cum_iterations = std::stoll(cells[5]);
    r.cum_full_grad_evals = std::stoll(cells[6]);
    r.mean_iter_ms = std::stod(cells[7]);
    r.restarts = std::stoll(cells[8]);
    out.push_back(r);
  }
  return out;
}

namespace {

struct LoadedData {
  data::Dataset train;
  data::Dataset test;
};

LoadedData load_data(const ExperimentConfig& cfg) {
  data::Dataset train = data::load_idx_dataset(cfg.train_images, cfg.train_labels, "train");
  data::Dataset test = data::load_idx_dataset(cfg.test_images, cfg.test_labels, "test");
  if (cfg.subset_train > 0) train = data::stratified_subset(train, cfg.subset_train, 10);
  if (cfg.subset_test > 0) test = data::stratified_subset(test, cfg.subset_test, 10);
  return {std::move(train), std::move(test)};
}

// Mean gradient over the whole training set, streamed in chunks with exact
// sample-count weighting.
Tensor full_gradient(const opt::Problem& prob, const data::Dataset& train, const Tensor& w,
                     int64_t chunk) {
  const int64_t n = train.size();
  Tensor acc = Tensor::zeros({prob.dim()});
  auto accv = acc.mutable_data();
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += chunk) {
    const int64_t count = std::min(chunk, n - start);
    idx.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    const Tensor g = prob.gradient(w, train.batch(idx));
    const auto gv = g.data();
    const double weight = static_cast<double>(count);
    for (size_t i = 0; i < accv.size(); ++i) accv[i] += weight * gv[i];
  }
  for (double& v : accv) v /= static_cast<double>(n);
  return acc;
}

double sampled_train_loss(const gn::ModelProblem& prob, const data::Dataset& train,
                          const Tensor& w, int64_t cap, int64_t chunk) {
  const int64_t n = std::min(cap, train.size());
  double acc = 0.0;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += chunk) {
    const int64_t count = std::min(chunk, n - start);
    idx.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    acc += prob.loss(w, train.batch(idx)) * static_cast<double>(count);
  }
  return acc / static_cast<double>(n);
}

struct SeedRun {
  std::vector<MetricsRecord> records;
  RunSummary summary;
};

SeedRun run_one_seed(const ExperimentConfig& cfg, const LoadedData& ds, const nn::Network& net,
                     uint64_t seed) {
  const gn::ModelProblem prob(net, cfg.loss_kind);
  const auto full_grad_fn = [&](const Tensor& w) {
    return full_gradient(prob, ds.train, w, cfg.grad_chunk);
  };

  int64_t stuck_events = 0;
  while (true) { // one attempt per pass; restarts loop back with a fresh seed
    const uint64_t weight_seed = seed + static_cast<uint64_t>(stuck_events);
    nn::FlatParams params = nn::glorot_uniform_init(net.layout(), weight_seed);
    data::BatchSampler sampler(cfg.sample_seed + seed, ds.train.size(), cfg.batch_size,
                               cfg.gn_batch_size, cfg.with_replacement);

    opt::SqgnOptions sqgn_opt;
    sqgn_opt.alpha = cfg.alpha;
    sqgn_opt.lambda = cfg.lambda;
    sqgn_opt.snapshot_interval = cfg.snapshot_interval;
    sqgn_opt.gn_interval = cfg.gn_interval;
    sqgn_opt.history_size = cfg.history_size;
    sqgn_opt.first_step_factor = cfg.first_step_factor;
    sqgn_opt.variance_reduction = cfg.variance_reduction;

    opt::SqgnState sqgn(sqgn_opt, params.data);
    opt::SvrgState svrg({cfg.alpha, cfg.snapshot_interval}, params.data);
    opt::AdamState adam({cfg.alpha, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps},
                        params.data.size());
    Tensor w = params.data;
    int64_t iterations = 0;
    int64_t full_evals = 0;

    SeedRun run;
    run.summary.seed = seed;
    run.summary.restarts = stuck_events;

    auto record_epoch = [&](int64_t epoch, double mean_ms) {
      const auto [test_loss, test_acc] =
          evaluate(net, w, cfg.loss_kind, ds.test, cfg.eval_chunk);
      const double train_loss =
          sampled_train_loss(prob, ds.train, w, cfg.train_eval_cap, cfg.eval_chunk);
      run.records.push_back({seed, epoch, train_loss, test_loss, test_acc, iterations, full_evals,
                             cfg.record_timing ? mean_ms : 0.0, stuck_events});
      run.summary.final_test_loss = test_loss;
      run.summary.final_test_accuracy = test_acc;
      run.summary.measured_iter_ms = mean_ms;
      return test_acc;
    };

    record_epoch(0, 0.0);
    bool restart = false;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      for (int64_t it = 0; it < cfg.iters_per_epoch; ++it) {
        auto [s_idx, t_idx] = sampler.next();
        const Batch batch = ds.train.batch(s_idx);
        switch (cfg.optimizer) {
          case OptimizerKind::sgd:
            w = opt::sgd_step(w, prob.gradient(w, batch), cfg.alpha);
            if (!w.all_finite())
              throw NumericError("sgd: non-finite iterate at iteration " +
                                 std::to_string(iterations));
            break;
          case OptimizerKind::adam:
            w = adam.step(w, prob.gradient(w, batch));
            if (!w.all_finite())
              throw NumericError("adam: non-finite iterate at iteration " +
                                 std::to_string(iterations));
            break;
          case OptimizerKind::svrg:
            svrg.step(prob, batch, full_grad_fn);
            w = svrg.weights();
            full_evals = svrg.full_gradient_evals();
            break;
          case OptimizerKind::sqgn: {
            const Batch gn_batch = ds.train.batch(t_idx);
            sqgn.step(prob, batch, gn_batch, full_grad_fn);
            w = sqgn.weights();
            full_evals = sqgn.full_gradient_evals();
            break;
          }
        }
        ++iterations;
      }
      const auto t1 = std::chrono::steady_clock::now();
      const double mean_ms =
          std::chrono::duration<double, std::milli>(t1 - t0).count() /
          static_cast<double>(cfg.iters_per_epoch);

      const double acc = record_epoch(epoch, mean_ms);
      if (epoch == cfg.restart.probe_epoch) {
        switch (stuck_decision(acc, stuck_events, cfg.restart)) {
          case StuckDecision::continue_run: break;
          case StuckDecision::restart:
            ++stuck_events;
            restart = true;
            break;
          case StuckDecision::fail:
            throw StuckRunError("run stuck at accuracy " + std::to_string(acc) + " after " +
                                std::to_string(stuck_events) + " restarts (seed " +
                                std::to_string(seed) + ")");
        }
        if (restart) break;
      }
    }
    if (!restart) return run;
  }
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::span<const uint64_t> seed_list) {
  cfg.validate();
  const LoadedData ds = load_data(cfg);
  const nn::Network net(cfg.input_shape, cfg.arch);
  if (cfg.batch_size > ds.train.size())
    throw ConfigError("config: batch_size exceeds training set size " +
                      std::to_string(ds.train.size()));

  std::vector<uint64_t> seeds(seed_list.begin(), seed_list.end());
  if (seeds.empty()) seeds.push_back(cfg.weight_seed);

  ExperimentResult result;
  try {
    for (uint64_t seed : seeds) {
      SeedRun run = run_one_seed(cfg, ds, net, seed);
      result.records.insert(result.records.end(), run.records.begin(), run.records.end());
      result.summaries.push_back(run.summary);
    }
  } catch (const Error&) {
    write_metrics(result.records, result.summaries, cfg.metrics_out); // flush partial rows
    throw;
  }
  double acc = 0.0, loss_sum = 0.0;
  for (const RunSummary& s : result.summaries) {
    acc += s.final_test_accuracy;
    loss_sum += s.final_test_loss;
  }
  result.mean_final_test_accuracy = acc / static_cast<double>(result.summaries.size());
  result.mean_final_test_loss = loss_sum / static_cast<double>(result.summaries.size());
  write_metrics(result.records, result.summaries, cfg.metrics_out);
  return result;
}

} // namespace sqgn::harness
