#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "dhkd/matrix.hpp"
#include "dhkd/rng.hpp"

namespace dhkd::model {

/// y = x W + b with W stored in x out (row-major).
struct Layer {
  Matrix weight;
  std::vector<double> bias;

  std::size_t in() const noexcept { return weight.rows(); }
  std::size_t out() const noexcept { return weight.cols(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Fully connected stack with ReLU between layers. `relu_output` also
/// applies ReLU after the last layer (used for feature extractors).
struct Mlp {
  std::vector<Layer> layers;
  bool relu_output = false;

  std::size_t in() const { return layers.empty() ? 0 : layers.front().in(); }
  std::size_t out() const { return layers.empty() ? 0 : layers.back().out(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.in() * l.out() + l.out();
    return n;
  }

  void validate(const char* what) const {
    if (layers.empty()) throw std::invalid_argument(std::string(what) + ": no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].bias.size() != layers[i].out()) {
        throw std::invalid_argument(std::string(what) + ": bias length mismatch in layer " + std::to_string(i));
      }
      if (i > 0 && layers[i].in() != layers[i - 1].out()) {
        throw std::invalid_argument(std::string(what) + ": layer " + std::to_string(i) + " does not chain");
      }
    }
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

/// Same shape as an Mlp; holds gradients or velocities.
using MlpGrad = std::vector<Layer>;

inline MlpGrad zeros_like(const Mlp& m) {
  MlpGrad g;
  for (const auto& l : m.layers) g.push_back({Matrix(l.in(), l.out()), std::vector<double>(l.out(), 0.0)});
  return g;
}

/// Weights drawn uniform in +-sqrt(6/fan_in) for layers followed by ReLU and
/// +-1/sqrt(fan_in) for linear outputs; biases zero.
inline Mlp make_mlp(std::span<const std::size_t> widths, bool relu_output, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output width");
  Mlp m;
  m.relu_output = relu_output;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (widths[i] == 0 || widths[i + 1] == 0) throw std::invalid_argument("make_mlp: zero width");
    Layer l{Matrix(widths[i], widths[i + 1]), std::vector<double>(widths[i + 1], 0.0)};
    const bool followed_by_relu = relu_output || i + 2 < widths.size();
    const double fan_in = static_cast<double>(widths[i]);
    const double bound = followed_by_relu ? std::sqrt(6.0 / fan_in) : 1.0 / std::sqrt(fan_in);
    for (double& w : l.weight.flat()) w = rng.uniform(-bound, bound);
    m.layers.push_back(std::move(l));
  }
  return m;
}

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
};

inline bool relu_after(const Mlp& m, std::size_t layer) {
  return layer + 1 < m.layers.size() || m.relu_output;
}

inline Matrix forward(const Mlp& m, const Matrix& x, MlpCache* cache = nullptr) {
  if (x.cols() != m.in()) {
    throw std::invalid_argument("Mlp forward: input width " + std::to_string(x.cols()) + " != " +
                                std::to_string(m.in()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix a = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    Matrix z = matmul(a, l.weight);
    for (std::size_t r = 0; r < z.rows(); ++r) axpy(1.0, l.bias, z.row(r));
    if (cache) {
      cache->inputs.push_back(std::move(a));
      cache->pre.push_back(z);
    }
    if (relu_after(m, i))
      for (double& v : z.flat()) v = v > 0.0 ? v : 0.0;
    a = std::move(z);
  }
  return a;
}

struct MlpBackward {
  MlpGrad grads;
  Matrix grad_input;
};

/// Backpropagates dL/d(output) through the cached forward pass.
inline MlpBackward backward(const Mlp& m, const MlpCache& cache, const Matrix& grad_output) {
  if (cache.inputs.size() != m.layers.size()) throw std::invalid_argument("Mlp backward: cache/net mismatch");
  MlpBackward out{zeros_like(m), {}};
  Matrix g = grad_output;
  for (std::size_t idx = m.layers.size(); idx-- > 0;) {
    const auto& l = m.layers[idx];
    const Matrix& pre = cache.pre[idx];
    require_same_shape(g, pre, "Mlp backward");
    if (relu_after(m, idx)) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(pre.flat()[i] > 0.0)) g.flat()[i] = 0.0;
    }
    out.grads[idx].weight = matmul_tn(cache.inputs[idx], g);
    auto& gb = out.grads[idx].bias;
    for (std::size_t r = 0; r < g.rows(); ++r) axpy(1.0, g.row(r), gb);
    g = matmul_nt(g, l.weight);
  }
  out.grad_input = std::move(g);
  return out;
}

/// Shared backbone with a linear main head and an optional auxiliary head.
struct DualHeadNet {
  Mlp backbone;
  Mlp main_head;
  std::optional<Mlp> aux_head;

  std::size_t input_dim() const { return backbone.in(); }
  std::size_t feature_dim() const { return backbone.out(); }
  std::size_t classes() const { return main_head.out(); }

  void validate() const {
    backbone.validate("backbone");
    main_head.validate("main_head");
    if (main_head.layers.size() != 1) throw std::invalid_argument("main_head must be a single linear layer");
    if (main_head.in() != backbone.out()) throw std::invalid_argument("main_head input != feature width");
    if (aux_head) {
      aux_head->validate("aux_head");
      if (aux_head->in() != backbone.out()) throw std::invalid_argument("aux_head input != feature width");
      if (aux_head->out() != main_head.out()) throw std::invalid_argument("aux_head output != class count");
    }
  }

  /// The classifier w (d x K) of the main head.
  const Matrix& classifier() const { return main_head.layers.front().weight; }

  friend bool operator==(const DualHeadNet&, const DualHeadNet&) = default;
};

enum class AuxHeadKind { none, linear, mlp };

inline constexpr std::size_t kDefaultAuxHidden = 200;

/// Backbone widths are the hidden widths followed by the feature width.
inline DualHeadNet make_dual_head_net(std::size_t input_dim, std::span<const std::size_t> backbone_widths,
                                      std::size_t classes, AuxHeadKind aux, std::size_t aux_hidden, Rng& rng) {
  if (backbone_widths.empty()) throw std::invalid_argument("make_dual_head_net: empty backbone");
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), backbone_widths.begin(), backbone_widths.end());
  DualHeadNet net;
  net.backbone = make_mlp(widths, true, rng);
  const std::size_t d = widths.back();
  const std::size_t head[] = {d, classes};
  net.main_head = make_mlp(head, false, rng);
  if (aux == AuxHeadKind::linear) {
    net.aux_head = make_mlp(head, false, rng);
  } else if (aux == AuxHeadKind::mlp) {
    const std::size_t hidden[] = {d, aux_hidden, classes};
    net.aux_head = make_mlp(hidden, false, rng);
  }
  return net;
}

struct ForwardCache {
  MlpCache backbone, main_head, aux_head;
};

struct ForwardResult {
  Matrix features;
  Matrix main_logits;
  Matrix aux_logits;  // empty without an aux head
  ForwardCache cache;
};

inline ForwardResult forward(const DualHeadNet& net, const Matrix& x) {
  ForwardResult r;
  r.features = forward(net.backbone, x, &r.cache.backbone);
  r.main_logits = forward(net.main_head, r.features, &r.cache.main_head);
  if (net.aux_head) r.aux_logits = forward(*net.aux_head, r.features, &r.cache.aux_head);
  return r;
}

/// Per-head gradients with the two backbone contributions kept apart.
struct BackwardResult {
  MlpGrad backbone_from_main;
  MlpGrad backbone_from_aux;
  MlpGrad main_head;
  MlpGrad aux_head;  // empty without an aux head
};

/// The main head only sees grad_main_logits and the aux head only sees
/// grad_aux_logits; an empty grad_aux_logits counts as zero.
inline BackwardResult backward(const DualHeadNet& net, const ForwardCache& cache,
                               const Matrix& grad_main_logits, const Matrix& grad_aux_logits) {
  if (cache.backbone.inputs.size() != net.backbone.layers.size()) {
    throw std::invalid_argument("backward: cache does not match network");
  }
  BackwardResult out;
  auto main = backward(net.main_head, cache.main_head, grad_main_logits);
  out.main_head = std::move(main.grads);
  out.backbone_from_main = backward(net.backbone, cache.backbone, main.grad_input).grads;
  if (net.aux_head && !grad_aux_logits.empty()) {
    auto aux = backward(*net.aux_head, cache.aux_head, grad_aux_logits);
    out.aux_head = std::move(aux.grads);
    out.backbone_from_aux = backward(net.backbone, cache.backbone, aux.grad_input).grads;
  } else {
    if (net.aux_head) out.aux_head = zeros_like(*net.aux_head);
    out.backbone_from_aux = zeros_like(net.backbone);
  }
  return out;
}

/// Gradient for every parameter of a DualHeadNet.
struct GradientBuffer {
  MlpGrad backbone;
  MlpGrad main_head;
  MlpGrad aux_head;
};

inline GradientBuffer zeros_like(const DualHeadNet& net) {
  return {zeros_like(net.backbone), zeros_like(net.main_head),
          net.aux_head ? zeros_like(*net.aux_head) : MlpGrad{}};
}

/// Visits every parameter tensor (each weight matrix and each bias separately).
template <typename Net, typename Fn>
void for_each_tensor(Net& net, Fn&& fn) {
  auto visit = [&](auto& layers) {
    for (auto& l : layers) {
      fn(l.weight.flat());
      fn(std::span(l.bias));
    }
  };
  using Plain = std::remove_const_t<Net>;
  if constexpr (std::is_same_v<Plain, DualHeadNet>) {
    visit(net.backbone.layers);
    visit(net.main_head.layers);
    if (net.aux_head) visit(net.aux_head->layers);
  } else if constexpr (std::is_same_v<Plain, MlpGrad>) {
    visit(net);
  } else if constexpr (std::is_same_v<Plain, Mlp>) {
    visit(net.layers);
  } else {
    visit(net.backbone);
    visit(net.main_head);
    visit(net.aux_head);
  }
}

/// Visits matching tensors of two same-shaped containers.
template <typename A, typename B, typename Fn>
void for_each_tensor_pair(A& a, B& b, Fn&& fn) {
  std::vector<std::span<std::conditional_t<std::is_const_v<A>, const double, double>>> sa;
  for_each_tensor(a, [&](auto s) { sa.push_back(s); });
  std::size_t i = 0;
  for_each_tensor(b, [&](auto s) {
    if (i >= sa.size() || sa[i].size() != s.size()) throw std::invalid_argument("tensor shapes differ");
    fn(sa[i++], s);
  });
  if (i != sa.size()) throw std::invalid_argument("tensor counts differ");
}

/// Projects g_bkl off g_ce when the two conflict (negative dot product).
inline std::vector<double> align_gradients(std::span<const double> g_bkl, std::span<const double> g_ce) {
  if (g_bkl.size() != g_ce.size()) throw std::invalid_argument("align_gradients: length mismatch");
  std::vector<double> out(g_bkl.begin(), g_bkl.end());
  const double d = dot(g_bkl, g_ce);
  if (d >= 0.0) return out;
  const double nn = dot(g_ce, g_ce);
  if (std::sqrt(nn) < 1e-30) return out;
  axpy(-d / nn, g_ce, out);
  return out;
}

struct AlignStats {
  std::size_t tensors = 0;
  std::size_t conflicts = 0;
  std::vector<double> dots;     // g_aux . g_ce before projection, one per tensor
  double min_aligned_dot = 0.0; // smallest g_aux' . g_ce after projection
};

/// Applies align_gradients to every backbone tensor of `aux` against `ce`.
inline AlignStats align_backbone(MlpGrad& aux, const MlpGrad& ce, bool project) {
  AlignStats st;
  bool first = true;
  for_each_tensor_pair(ce, aux, [&](std::span<const double> gc, std::span<double> ga) {
    const double d = dot(ga, gc);
    ++st.tensors;
    st.dots.push_back(d);
    if (d < 0.0) ++st.conflicts;
    if (project) {
      const auto aligned = align_gradients(ga, gc);
      std::copy(aligned.begin(), aligned.end(), ga.begin());
    }
    const double after = dot(ga, gc);
    st.min_aligned_dot = first ? after : std::min(st.min_aligned_dot, after);
    first = false;
  });
  return st;
}

inline void add_into(MlpGrad& dst, const MlpGrad& src) {
  for_each_tensor_pair(src, dst, [](std::span<const double> s, std::span<double> d) { axpy(1.0, s, d); });
}

inline double global_norm(const GradientBuffer& g) {
  double s = 0.0;
  for_each_tensor(g, [&](std::span<const double> t) { s += dot(t, t); });
  return std::sqrt(s);
}

/// Rescales the whole buffer so its global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(GradientBuffer& g, double max_norm) {
  const double n = global_norm(g);
  if (std::isfinite(n) && n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for_each_tensor(g, [&](std::span<double> t) {
      for (double& v : t) v *= s;
    });
  }
  return n;
}

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct SgdState {
  SgdConfig config;
  GradientBuffer velocity;
};

inline SgdState make_sgd_state(const DualHeadNet& net, SgdConfig config) { return {config, zeros_like(net)}; }

/// v <- m v + g + wd theta;  theta <- theta - lr v.
///
/// Returns false and leaves net and state untouched when any gradient is
/// non-finite.
inline bool sgd_step(DualHeadNet& net, const GradientBuffer& grads, SgdState& state) {
  bool finite = true;
  for_each_tensor(grads, [&](std::span<const double> t) {
    for (double v : t) finite = finite && std::isfinite(v);
  });
  if (!finite) return false;
  const auto& c = state.config;
  std::vector<std::span<const double>> gs;
  for_each_tensor(grads, [&](std::span<const double> t) { gs.push_back(t); });
  std::size_t i = 0;
  for_each_tensor_pair(net, state.velocity, [&](std::span<double> theta, std::span<double> v) {
    if (i >= gs.size() || gs[i].size() != theta.size()) throw std::invalid_argument("sgd_step: shape mismatch");
    auto g = gs[i++];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = c.momentum * v[j] + g[j] + c.weight_decay * theta[j];
      theta[j] -= c.lr * v[j];
    }
  });
  return true;
}

/// Base rate divided by 10 at each milestone epoch already reached.
inline double step_schedule(double base_lr, std::span<const std::size_t> milestones, std::size_t epoch) {
  double lr = base_lr;
  for (std::size_t m : milestones)
    if (epoch >= m) lr *= 0.1;
  return lr;
}

}  // namespace dhkd::model
