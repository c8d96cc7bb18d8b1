#pragma once

// Binary model file, little-endian throughout:
//
//   "DHKD"            4 bytes magic
//   version           u32 (= 1)
//   component count   u32
//   per component:
//     role            u8  (0 backbone, 1 main_head, 2 aux_head)
//     layer count     u32
//     per layer:      in u32, out u32, weight f64[in*out] row-major, bias f64[out]
//
// The backbone applies ReLU to its output; heads are linear at the output.

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhkd/model.hpp"

namespace dhkd::model {

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class Role : std::uint8_t { backbone = 0, main_head = 1, aux_head = 2 };

namespace io_detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) buf.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int s = 0; s < 64; s += 8) buf.push_back(static_cast<std::uint8_t>(bits >> s));
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | buf_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | buf_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ModelFormatError("model file truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline void write_mlp(Writer& w, Role role, const Mlp& m) {
  w.u8(static_cast<std::uint8_t>(role));
  w.u32(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    w.u32(static_cast<std::uint32_t>(l.in()));
    w.u32(static_cast<std::uint32_t>(l.out()));
    for (double v : l.weight.flat()) w.f64(v);
    for (double v : l.bias) w.f64(v);
  }
}

inline Mlp read_mlp(Reader& r, bool relu_output) {
  Mlp m;
  m.relu_output = relu_output;
  const std::uint32_t layers = r.u32();
  if (layers == 0) throw ModelFormatError("component with zero layers");
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::uint64_t in = r.u32(), out = r.u32();
    if (in == 0 || out == 0) throw ModelFormatError("layer with zero width");
    // (in*out + out) doubles must fit in what is left of the file
    const std::uint64_t values = in * out + out;
    if (values > r.remaining() / 8) throw ModelFormatError("layer dimensions exceed file size");
    Layer l{Matrix(in, out), std::vector<double>(out)};
    for (double& v : l.weight.flat()) v = r.f64();
    for (double& v : l.bias) v = r.f64();
    m.layers.push_back(std::move(l));
  }
  return m;
}

}  // namespace io_detail

inline std::vector<std::uint8_t> encode_model(const DualHeadNet& net) {
  net.validate();
  io_detail::Writer w;
  for (char c : {'D', 'H', 'K', 'D'}) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kModelFormatVersion);
  w.u32(net.aux_head ? 3 : 2);
  io_detail::write_mlp(w, Role::backbone, net.backbone);
  io_detail::write_mlp(w, Role::main_head, net.main_head);
  if (net.aux_head) io_detail::write_mlp(w, Role::aux_head, *net.aux_head);
  return std::move(w.buf);
}

inline DualHeadNet decode_model(const std::vector<std::uint8_t>& bytes) {
  io_detail::Reader r(bytes);
  if (bytes.size() < 4 || bytes[0] != 'D' || bytes[1] != 'H' || bytes[2] != 'K' || bytes[3] != 'D') {
    throw ModelFormatError("bad magic: not a DHKD model file");
  }
  for (int i = 0; i < 4; ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    throw ModelFormatError("unsupported model format version " + std::to_string(version));
  }
  const std::uint32_t components = r.u32();
  if (components < 2 || components > 3) {
    throw ModelFormatError("component count " + std::to_string(components) + " not in [2, 3]");
  }
  DualHeadNet net;
  bool seen[3] = {false, false, false};
  for (std::uint32_t c = 0; c < components; ++c) {
    const std::uint8_t role = r.u8();
    if (role > 2) throw ModelFormatError("unknown role tag " + std::to_string(role));
    if (seen[role]) throw ModelFormatError("duplicate role tag " + std::to_string(role));
    seen[role] = true;
    Mlp m = io_detail::read_mlp(r, role == static_cast<std::uint8_t>(Role::backbone));
    switch (static_cast<Role>(role)) {
      case Role::backbone: net.backbone = std::move(m); break;
      case Role::main_head: net.main_head = std::move(m); break;
      case Role::aux_head: net.aux_head = std::move(m); break;
    }
  }
  if (!seen[0] || !seen[1]) throw ModelFormatError("model file lacks backbone or main head");
  if (r.remaining() != 0) throw ModelFormatError("trailing bytes after last component");
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelFormatError(std::string("inconsistent model: ") + e.what());
  }
  return net;
}

inline void save_model(const DualHeadNet& net, const std::string& path) {
  const auto bytes = encode_model(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write model file " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to model file " + path);
}

inline DualHeadNet load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file " + path);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_model(bytes);
}

}  // namespace dhkd::model
