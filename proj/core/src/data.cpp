#include "sqgn/data.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sqgn/errors.hpp"
#include "sqgn/rng.hpp"

namespace sqgn::data {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_u32_be(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw FormatError("truncated IDX header in " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, uint32_t v) {
  const std::array<unsigned char, 4> b{static_cast<unsigned char>(v >> 24),
                                       static_cast<unsigned char>(v >> 16),
                                       static_cast<unsigned char>(v >> 8),
                                       static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::vector<unsigned char> read_payload(std::istream& in, int64_t count, const std::string& path) {
  std::vector<unsigned char> bytes(static_cast<size_t>(count));
  in.read(reinterpret_cast<char*>(bytes.data()), count);
  if (in.gcount() != count)
    throw FormatError("truncated IDX payload in " + path + ": expected " + std::to_string(count) +
                      " bytes, got " + std::to_string(in.gcount()));
  return bytes;
}

unsigned char quantize_byte(double v, const char* what) {
  const double scaled = v * 255.0;
  const long long b = std::llround(scaled);
  if (b < 0 || b > 255 || std::abs(scaled - static_cast<double>(b)) > 1e-6)
    throw ContractError(std::string(what) + ": value " + std::to_string(v) +
                        " is not on the byte grid");
  return static_cast<unsigned char>(b);
}

} // namespace

Batch Dataset::batch(std::span<const int64_t> indices) const {
  const int64_t n = size();
  const int64_t in_stride = n > 0 ? inputs.size() / n : 0;
  const int64_t lb_stride = n > 0 ? labels.size() / n : 0;
  Shape in_shape = inputs.shape();
  Shape lb_shape = labels.shape();
  in_shape[0] = static_cast<int64_t>(indices.size());
  lb_shape[0] = static_cast<int64_t>(indices.size());
  Tensor bi = Tensor::uninit(in_shape);
  Tensor bl = Tensor::uninit(lb_shape);
  const double* src_i = inputs.data().data();
  const double* src_l = labels.data().data();
  double* dst_i = bi.mutable_data().data();
  double* dst_l = bl.mutable_data().data();
  for (size_t k = 0; k < indices.size(); ++k) {
    const int64_t idx = indices[k];
    if (idx < 0 || idx >= n) throw ContractError("batch: index out of range");
    std::memcpy(dst_i + static_cast<int64_t>(k) * in_stride, src_i + idx * in_stride,
                static_cast<size_t>(in_stride) * sizeof(double));
    std::memcpy(dst_l + static_cast<int64_t>(k) * lb_stride, src_l + idx * lb_stride,
                static_cast<size_t>(lb_stride) * sizeof(double));
  }
  return {std::move(bi), std::move(bl)};
}

IdxPart load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const uint32_t magic = read_u32_be(in, path);
  if (magic == kImagesMagic) {
    const int64_t n = read_u32_be(in, path);
    const int64_t rows = read_u32_be(in, path);
    const int64_t cols = read_u32_be(in, path);
    const auto bytes = read_payload(in, n * rows * cols, path);
    Tensor t = Tensor::uninit({n, rows, cols, 1});
    auto dst = t.mutable_data();
    for (size_t i = 0; i < bytes.size(); ++i) dst[i] = static_cast<double>(bytes[i]) / 255.0;
    return {std::move(t), true};
  }
  if (magic == kLabelsMagic) {
    const int64_t n = read_u32_be(in, path);
    const auto bytes = read_payload(in, n, path);
    Tensor t = Tensor::uninit({n});
    auto dst = t.mutable_data();
    for (size_t i = 0; i < bytes.size(); ++i) dst[i] = static_cast<double>(bytes[i]);
    return {std::move(t), false};
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", magic);
  throw FormatError("bad IDX magic " + std::string(buf) + " in " + path);
}

Dataset make_dataset(IdxPart images, IdxPart labels, std::string split) {
  if (!images.is_images || labels.is_images)
    throw FormatError("make_dataset: expected an images part and a labels part");
  if (images.values.extent(0) != labels.values.extent(0))
    throw DimensionError("make_dataset: " + std::to_string(images.values.extent(0)) +
                         " images vs " + std::to_string(labels.values.extent(0)) + " labels");
  return {std::move(images.values), std::move(labels.values), std::move(split)};
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         std::string split) {
  return make_dataset(load_idx(images_path), load_idx(labels_path), std::move(split));
}

void write_idx_images(const std::string& path, const Tensor& images) {
  if (images.rank() != 4 || images.extent(3) != 1)
    throw DimensionError("write_idx_images: expected (n,H,W,1), got " + shape_str(images.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_u32_be(out, kImagesMagic);
  write_u32_be(out, static_cast<uint32_t>(images.extent(0)));
  write_u32_be(out, static_cast<uint32_t>(images.extent(1)));
  write_u32_be(out, static_cast<uint32_t>(images.extent(2)));
  std::vector<unsigned char> bytes(static_cast<size_t>(images.size()));
  const auto src = images.data();
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_byte(src[i], "write_idx_images");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

void write_idx_labels(const std::string& path, const Tensor& labels) {
  if (labels.rank() != 1)
    throw DimensionError("write_idx_labels: expected (n), got " + shape_str(labels.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_u32_be(out, kLabelsMagic);
  write_u32_be(out, static_cast<uint32_t>(labels.extent(0)));
  std::vector<unsigned char> bytes(static_cast<size_t>(labels.size()));
  const auto src = labels.data();
  for (size_t i = 0; i < bytes.size(); ++i) {
    const long long b = std::llround(src[i]);
    if (b < 0 || b > 255 || std::abs(src[i] - static_cast<double>(b)) > 1e-9)
      throw ContractError("write_idx_labels: label " + std::to_string(src[i]) + " not a byte");
    bytes[i] = static_cast<unsigned char>(b);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

Dataset stratified_subset(const Dataset& ds, int64_t total, int64_t num_classes) {
  if (ds.labels.rank() != 1)
    throw ContractError("stratified_subset: needs class-index labels");
  if (total <= 0 || num_classes <= 0 || total % num_classes != 0)
    throw ConfigError("stratified_subset: total " + std::to_string(total) +
                      " not divisible by " + std::to_string(num_classes) + " classes");
  const int64_t per_class = total / num_classes;
  std::vector<int64_t> quota(static_cast<size_t>(num_classes), per_class);
  std::vector<int64_t> keep;
  keep.reserve(static_cast<size_t>(total));
  const auto lab = ds.labels.data();
  for (int64_t i = 0; i < ds.size() && static_cast<int64_t>(keep.size()) < total; ++i) {
    const int64_t c = static_cast<int64_t>(std::llround(lab[static_cast<size_t>(i)]));
    if (c >= 0 && c < num_classes && quota[static_cast<size_t>(c)] > 0) {
      --quota[static_cast<size_t>(c)];
      keep.push_back(i);
    }
  }
  if (static_cast<int64_t>(keep.size()) < total)
    throw ConfigError("stratified_subset: dataset lacks " + std::to_string(per_class) +
                      " samples of every class");
  Batch b = ds.batch(keep);
  return {std::move(b.inputs), std::move(b.labels), ds.split};
}

BatchSampler::BatchSampler(uint64_t seed, int64_t n, int64_t batch, int64_t sub_batch,
                           bool with_replacement)
    : rng_(seed), n_(n), batch_(batch), sub_batch_(sub_batch), with_replacement_(with_replacement) {
  if (n <= 0) throw ConfigError("BatchSampler: empty dataset");
  if (batch <= 0 || batch > n)
    throw ConfigError("BatchSampler: batch size " + std::to_string(batch) +
                      " invalid for n = " + std::to_string(n));
  if (sub_batch <= 0 || sub_batch > batch)
    throw ConfigError("BatchSampler: sub-batch size " + std::to_string(sub_batch) +
                      " must be in [1, batch]");
  perm_.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm_[static_cast<size_t>(i)] = i;
  reshuffle();
}

void BatchSampler::reshuffle() {
  rng_.shuffle(std::span<int64_t>(perm_));
  pos_ = 0;
}

std::pair<std::vector<int64_t>, std::vector<int64_t>> BatchSampler::next() {
  std::vector<int64_t> s(static_cast<size_t>(batch_));
  if (with_replacement_) {
    for (int64_t i = 0; i < batch_; ++i)
      s[static_cast<size_t>(i)] = static_cast<int64_t>(rng_.below(static_cast<uint64_t>(n_)));
  } else {
    for (int64_t i = 0; i < batch_; ++i) {
      if (pos_ == n_) reshuffle();
      s[static_cast<size_t>(i)] = perm_[static_cast<size_t>(pos_++)];
    }
  }
  std::vector<int64_t> t(s.begin(), s.begin() + sub_batch_);
  return {std::move(s), std::move(t)};
}

LeastSquares make_synthetic_least_squares(int64_t m, int64_t n, uint64_t seed) {
  if (n < m) throw ContractError("make_synthetic_least_squares: need n >= m");
  Rng rng(seed);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Tensor x = Tensor::uninit({n, m});
    for (double& v : x.mutable_data()) v = rng.normal();
    // full-rank test: Cholesky of X^T X by hand (m is small in every use)
    Tensor gram = gemm_tn(x, x);
    std::vector<double> chol(gram.data().begin(), gram.data().end());
    bool ok = true;
    for (int64_t j = 0; j < m && ok; ++j) {
      double diag = chol[static_cast<size_t>(j * m + j)];
      for (int64_t k = 0; k < j; ++k) diag -= chol[static_cast<size_t>(j * m + k)] * chol[static_cast<size_t>(j * m + k)];
      if (diag < 1e-10) {
        ok = false;
        break;
      }
      const double d = std::sqrt(diag);
      chol[static_cast<size_t>(j * m + j)] = d;
      for (int64_t i = j + 1; i < m; ++i) {
        double v = chol[static_cast<size_t>(i * m + j)];
        for (int64_t k = 0; k < j; ++k)
          v -= chol[static_cast<size_t>(i * m + k)] * chol[static_cast<size_t>(j * m + k)];
        chol[static_cast<size_t>(i * m + j)] = v / d;
      }
    }
    if (!ok) continue;
    Tensor w_star = Tensor::uninit({m});
    for (double& v : w_star.mutable_data()) v = rng.normal();
    Tensor y = gemm(x, w_star.reshaped({m, 1}));
    Dataset ds{std::move(x), std::move(y), "synthetic"};
    return {std::move(ds), std::move(w_star)};
  }
  throw NumericError("make_synthetic_least_squares: rank-deficient draws exhausted retries");
}

namespace {

// 7x7 glyphs, one per class; upscaled x3 onto the 28x28 canvas.
constexpr std::array<std::array<uint8_t, 7>, 10> kGlyphs = {{
    // 0
    {{0b0111110, 0b1100011, 0b1100011, 0b1100011, 0b1100011, 0b1100011, 0b0111110}},
    // 1
    {{0b0001100, 0b0011100, 0b0001100, 0b0001100, 0b0001100, 0b0001100, 0b0111111}},
    // 2
    {{0b0111110, 0b1100011, 0b0000011, 0b0001110, 0b0111000, 0b1100000, 0b1111111}},
    // 3
    {{0b0111110, 0b1100011, 0b0000011, 0b0011110, 0b0000011, 0b1100011, 0b0111110}},
    // 4
    {{0b0000110, 0b0001110, 0b0011010, 0b0110010, 0b1111111, 0b0000010, 0b0000010}},
    // 5
    {{0b1111111, 0b1100000, 0b1111110, 0b0000011, 0b0000011, 0b1100011, 0b0111110}},
    // 6
    {{0b0011110, 0b0110000, 0b1100000, 0b1111110, 0b1100011, 0b1100011, 0b0111110}},
    // 7
    {{0b1111111, 0b0000011, 0b0000110, 0b0001100, 0b0011000, 0b0110000, 0b0110000}},
    // 8
    {{0b0111110, 0b1100011, 0b1100011, 0b0111110, 0b1100011, 0b1100011, 0b0111110}},
    // 9
    {{0b0111110, 0b1100011, 0b1100011, 0b0111111, 0b0000011, 0b0000110, 0b0111100}},
}};

} // namespace

Dataset make_synthetic_digits(int64_t n, uint64_t seed, std::string split) {
  if (n <= 0) throw ContractError("make_synthetic_digits: n must be positive");
  Rng rng(seed);
  Tensor inputs = Tensor::zeros({n, 28, 28, 1});
  Tensor labels = Tensor::uninit({n});
  auto img = inputs.mutable_data();
  auto lab = labels.mutable_data();
  std::array<double, 28 * 28> canvas{};
  for (int64_t s = 0; s < n; ++s) {
    const int64_t cls = static_cast<int64_t>(rng.below(10));
    lab[static_cast<size_t>(s)] = static_cast<double>(cls);
    canvas.fill(0.0);
    // glyph placement: 21x21 footprint, offset in [0,7]x[0,7]
    const int64_t oy = static_cast<int64_t>(rng.below(8));
    const int64_t ox = static_cast<int64_t>(rng.below(8));
    const double intensity = rng.uniform(0.40, 1.0);
    for (int gy = 0; gy < 7; ++gy)
      for (int gx = 0; gx < 7; ++gx) {
        if (!((kGlyphs[static_cast<size_t>(cls)][static_cast<size_t>(gy)] >> (6 - gx)) & 1u))
          continue;
        // occasional missing stroke cell
        if (rng.uniform() < 0.12) continue;
        const double stroke = intensity * rng.uniform(0.7, 1.0);
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 3; ++dx) {
            const int64_t y = oy + gy * 3 + dy;
            const int64_t x = ox + gx * 3 + dx;
            canvas[static_cast<size_t>(y * 28 + x)] = stroke;
          }
      }
    // random occluding bar across the glyph area
    if (rng.uniform() < 0.5) {
      const bool horizontal = rng.below(2) == 0;
      const int64_t pos = static_cast<int64_t>(rng.below(22)) + 3;
      for (int64_t t = 0; t < 3; ++t)
        for (int64_t u = 0; u < 28; ++u) {
          const int64_t y = horizontal ? pos + t : u;
          const int64_t x = horizontal ? u : pos + t;
          if (y >= 0 && y < 28 && x >= 0 && x < 28) canvas[static_cast<size_t>(y * 28 + x)] = 0.0;
        }
    }
    // background noise plus scattered bright speckles
    for (auto& v : canvas) v += rng.uniform(0.0, 0.40);
    for (int k = 0; k < 50; ++k) {
      const auto pix = static_cast<size_t>(rng.below(28 * 28));
      canvas[pix] = rng.uniform(0.40, 1.0);
    }
    double* out = img.data() + s * 28 * 28;
    for (size_t i = 0; i < canvas.size(); ++i) {
      const double clamped = std::min(1.0, std::max(0.0, canvas[i]));
      out[i] = std::round(clamped * 255.0) / 255.0; // byte grid, IDX round-trip exact
    }
  }
  return {std::move(inputs), std::move(labels), std::move(split)};
}

} // namespace sqgn::data
