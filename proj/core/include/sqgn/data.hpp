#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sqgn/batch.hpp"
#include "sqgn/rng.hpp"
#include "sqgn/tensor.hpp"

namespace sqgn::data {

/// In-memory dataset. Image inputs are (n,H,W,1) scaled to [0,1]; labels are
/// (n) class indices or (n,r) regression targets.
struct Dataset {
  Tensor inputs;
  Tensor labels;
  std::string split;
  int64_t size() const { return inputs.rank() > 0 ? inputs.extent(0) : 0; }
  Batch batch(std::span<const int64_t> indices) const;
};

/// One half of an IDX pair.
struct IdxPart {
  Tensor values; // images (n,H,W,1) in [0,1], or labels (n)
  bool is_images = false;
};

/// Big-endian IDX reader; accepts magic 0x00000803 (ubyte images) and
/// 0x00000801 (ubyte labels). Image bytes are divided by 255.
IdxPart load_idx(const std::string& path);

Dataset make_dataset(IdxPart images, IdxPart labels, std::string split);
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         std::string split);

/// Bit-exact IDX writers (inverse of load_idx for byte-quantized values).
void write_idx_images(const std::string& path, const Tensor& images);
void write_idx_labels(const std::string& path, const Tensor& labels);

/// First per-class occurrences in file order, total/num_classes from each
/// class, result ordered by original index.
Dataset stratified_subset(const Dataset& ds, int64_t total, int64_t num_classes);

/// Seeded mini-batch index stream. Default mode draws shuffled epochs without
/// replacement (a fresh seeded permutation per epoch); T_k is the prefix of
/// S_k of size sub_batch.
class BatchSampler {
public:
  BatchSampler(uint64_t seed, int64_t n, int64_t batch, int64_t sub_batch,
               bool with_replacement = false);
  std::pair<std::vector<int64_t>, std::vector<int64_t>> next();

  int64_t batch_size() const { return batch_; }
  int64_t sub_batch_size() const { return sub_batch_; }

private:
  void reshuffle();

  Rng rng_;
  int64_t n_, batch_, sub_batch_;
  bool with_replacement_;
  std::vector<int64_t> perm_;
  int64_t pos_ = 0;
};

struct LeastSquares {
  Dataset data;   // inputs (n,m), targets (n,1)
  Tensor w_star;  // (m), exact minimizer of the noiseless system
};

/// Full-rank random X, targets y = X w*, zero noise. n >= m.
LeastSquares make_synthetic_least_squares(int64_t m, int64_t n, uint64_t seed);

/// Procedural 10-class digit-glyph dataset on a 28x28 canvas: per-sample
/// shift, intensity scaling, and pixel noise, quantized to the byte grid so
/// IDX round-trips are exact. A drop-in stand-in for MNIST-format corpora.
Dataset make_synthetic_digits(int64_t n, uint64_t seed, std::string split);

} // namespace sqgn::data
