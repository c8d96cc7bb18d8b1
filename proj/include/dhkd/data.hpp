#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhkd/collapse.hpp"
#include "dhkd/matrix.hpp"
#include "dhkd/rng.hpp"

namespace dhkd::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Matrix x;                     // N x D
  std::vector<std::size_t> y;   // labels in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const noexcept { return y.size(); }
  std::size_t dim() const noexcept { return x.cols(); }

  void validate() const {
    if (x.rows() != y.size()) throw DataError("Dataset: feature rows != label count");
    for (std::size_t v : y)
      if (v >= classes) throw DataError("Dataset: label out of range");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{gather_rows(x, idx), {}, classes};
    out.y.reserve(idx.size());
    for (std::size_t i : idx) out.y.push_back(y[i]);
    return out;
  }
};

/// Isotropic unit-variance Gaussian classes centred on scaled ETF vertices.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t per_class = 700;
  double separation = 3.0;
  std::uint64_t seed = 0;
};

/// Class means are separation * M[:, c] for a random simplex ETF M; samples
/// are stored class by class.
inline Dataset gen_gaussian_mixture(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw DataError("gen_gaussian_mixture: need at least 2 classes");
  if (spec.dim < spec.classes) throw DataError("gen_gaussian_mixture: need dim >= classes");
  if (spec.per_class == 0) throw DataError("gen_gaussian_mixture: per_class must be positive");
  if (!(spec.separation >= 0.0) || !std::isfinite(spec.separation)) {
    throw DataError("gen_gaussian_mixture: separation must be finite and >= 0");
  }
  Rng rng(spec.seed);
  const auto frame = collapse::make_etf(spec.dim, spec.classes, rng);
  Dataset ds{Matrix(spec.classes * spec.per_class, spec.dim), {}, spec.classes};
  ds.y.reserve(ds.x.rows());
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t n = 0; n < spec.per_class; ++n, ++row) {
      auto r = ds.x.row(row);
      for (std::size_t j = 0; j < spec.dim; ++j) r[j] = spec.separation * frame.M(j, c) + rng.normal();
      ds.y.push_back(c);
    }
  }
  return ds;
}

// IDX files: 2 zero bytes, a type byte, a dimension-count byte, then one
// big-endian u32 per dimension and the payload in big-endian element order.
inline constexpr std::uint8_t kIdxUByte = 0x08;
inline constexpr std::uint8_t kIdxDouble = 0x0E;

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off) {
  if (off + 4 > buf.size()) throw DataError("IDX: truncated header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) buf.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

struct IdxHeader {
  std::uint8_t type = 0;
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline IdxHeader parse_header(const std::vector<std::uint8_t>& buf, const std::string& what) {
  if (buf.size() < 4) throw DataError(what + ": truncated magic");
  if (buf[0] != 0 || buf[1] != 0) throw DataError(what + ": bad magic");
  IdxHeader h;
  h.type = buf[2];
  const std::size_t ndims = buf[3];
  if (ndims == 0) throw DataError(what + ": zero dimensions");
  for (std::size_t i = 0; i < ndims; ++i) h.dims.push_back(read_be32(buf, 4 + 4 * i));
  h.payload_offset = 4 + 4 * ndims;
  return h;
}

}  // namespace detail

/// Raw IDX encodings of images (N x D doubles) and labels.
///
/// Features exactly representable as k/255 with k in [0, 255] may be stored
/// as unsigned bytes; otherwise they are stored as big-endian doubles.
inline std::vector<std::uint8_t> encode_idx_images(const Matrix& x, bool as_bytes) {
  std::vector<std::uint8_t> buf{0, 0, as_bytes ? kIdxUByte : kIdxDouble, 2};
  detail::put_be32(buf, static_cast<std::uint32_t>(x.rows()));
  detail::put_be32(buf, static_cast<std::uint32_t>(x.cols()));
  for (double v : x.flat()) {
    if (as_bytes) {
      const double scaled = std::round(v * 255.0);
      if (scaled < 0.0 || scaled > 255.0) throw DataError("encode_idx_images: value outside [0,1]");
      buf.push_back(static_cast<std::uint8_t>(scaled));
    } else {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int s = 56; s >= 0; s -= 8) buf.push_back(static_cast<std::uint8_t>(bits >> s));
    }
  }
  return buf;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::size_t> y) {
  std::vector<std::uint8_t> buf{0, 0, kIdxUByte, 1};
  detail::put_be32(buf, static_cast<std::uint32_t>(y.size()));
  for (std::size_t v : y) {
    if (v > 255) throw DataError("encode_idx_labels: label does not fit a byte");
    buf.push_back(static_cast<std::uint8_t>(v));
  }
  return buf;
}

/// Decodes an image file (ubyte scaled by 1/255, or raw doubles) and a label file.
///
/// Images with more than two dimensions are flattened to N x (prod of the rest).
/// `classes` = 0 infers the class count as max label + 1.
inline Dataset decode_idx(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels,
                          std::size_t classes = 0) {
  const auto ih = detail::parse_header(images, "IDX images");
  const auto lh = detail::parse_header(labels, "IDX labels");
  if (ih.type != kIdxUByte && ih.type != kIdxDouble) throw DataError("IDX images: unsupported element type");
  if (ih.dims.size() < 2) throw DataError("IDX images: need at least 2 dimensions");
  if (lh.type != kIdxUByte || lh.dims.size() != 1) throw DataError("IDX labels: bad magic");
  const std::size_t n = ih.dims[0];
  if (lh.dims[0] != n) {
    throw DataError("IDX: image count " + std::to_string(n) + " != label count " +
                    std::to_string(lh.dims[0]));
  }
  std::size_t feat = 1;
  for (std::size_t i = 1; i < ih.dims.size(); ++i) feat *= ih.dims[i];
  const std::size_t elem = ih.type == kIdxUByte ? 1 : 8;
  if (n != 0 && feat > (images.size() - ih.payload_offset) / elem / n) {
    throw DataError("IDX images: truncated payload");
  }
  if (images.size() - ih.payload_offset != n * feat * elem) throw DataError("IDX images: trailing bytes");
  if (labels.size() - lh.payload_offset != n) throw DataError("IDX labels: truncated payload");

  Dataset ds{Matrix(n, feat), {}, 0};
  const std::uint8_t* p = images.data() + ih.payload_offset;
  for (std::size_t i = 0; i < n * feat; ++i) {
    if (elem == 1) {
      ds.x.flat()[i] = static_cast<double>(p[i]) / 255.0;
    } else {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < 8; ++b) bits = (bits << 8) | p[8 * i + b];
      ds.x.flat()[i] = std::bit_cast<double>(bits);
    }
  }
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = labels[lh.payload_offset + i];
    max_label = std::max(max_label, v);
    ds.y.push_back(v);
  }
  ds.classes = classes != 0 ? classes : max_label + 1;
  ds.validate();
  return ds;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::size_t classes = 0) {
  return decode_idx(detail::read_file(images_path), detail::read_file(labels_path), classes);
}

inline void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path,
                     bool as_bytes = false) {
  detail::write_file(images_path, encode_idx_images(ds.x, as_bytes));
  detail::write_file(labels_path, encode_idx_labels(ds.y));
}

struct Split {
  Dataset train;
  Dataset test;
};

/// Stratified split: round(fraction * n_c) samples of every class go to train.
inline Split split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw DataError("split: fraction must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.y[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    auto& idx = by_class[c];
    rng.shuffle(std::span(idx));
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    if (n_train == 0 || n_train == idx.size()) {
      throw DataError("split: class " + std::to_string(c) + " would be empty in one split");
    }
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

/// Shuffled minibatches of sample indices covering every sample once; the
/// last batch may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw DataError("batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size, Rng& rng) {
  return batches(ds.size(), batch_size, rng);
}

/// Batch order of a given epoch for a given run seed.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, std::uint64_t epoch) {
  Rng rng(derive_seed(seed, 1000 + epoch));
  return batches(n, batch_size, rng);
}

}  // namespace dhkd::data
