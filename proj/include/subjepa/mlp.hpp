#pragma once

// Dense MLP with manual reverse-mode gradients, plus Adam.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "subjepa/error.hpp"
#include "subjepa/linalg.hpp"

namespace subjepa {

enum class Activation { Identity, Tanh, Relu };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ContractError("unknown activation: " + s);
}

struct DenseLayer {
  Matrix w; // out x in
  std::vector<double> b;
  Activation act = Activation::Identity;
  Matrix dw;
  std::vector<double> db;

  std::size_t in_dim() const { return w.cols(); }
  std::size_t out_dim() const { return w.rows(); }
};

/// Activations saved by a batched forward pass: inputs[l] feeds layer l,
/// outputs[l] is its post-activation result.
struct MlpCache {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
};

class Mlp {
public:
  Mlp() = default;

  /// `sizes` = {in, h1, ..., out}; hidden layers use `hidden`, the last is linear.
  Mlp(const std::vector<std::size_t>& sizes, Activation hidden) {
    require(sizes.size() >= 2, "Mlp: need at least input and output sizes");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      require(sizes[l] >= 1 && sizes[l + 1] >= 1, "Mlp: layer sizes must be positive");
      DenseLayer layer;
      layer.w = Matrix(sizes[l + 1], sizes[l]);
      layer.b.assign(sizes[l + 1], 0.0);
      layer.act = (l + 2 == sizes.size()) ? Activation::Identity : hidden;
      layer.dw = Matrix(sizes[l + 1], sizes[l]);
      layer.db.assign(sizes[l + 1], 0.0);
      layers_.push_back(std::move(layer));
    }
  }

  /// LeCun-normal (tanh/identity) or He-normal (relu) weights, zero biases.
  void init_random(Rng& rng, bool zero_last_layer = false) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& layer = layers_[l];
      const double fan_in = static_cast<double>(layer.in_dim());
      const double sd = std::sqrt((layer.act == Activation::Relu ? 2.0 : 1.0) / fan_in);
      const bool zero = zero_last_layer && l + 1 == layers_.size();
      for (auto& v : layer.w.data()) v = zero ? 0.0 : sd * rng.gaussian();
      std::fill(layer.b.begin(), layer.b.end(), 0.0);
    }
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Activation hidden_activation() const {
    return layers_.size() > 1 ? layers_.front().act : Activation::Identity;
  }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s{in_dim()};
    for (const auto& l : layers_) s.push_back(l.out_dim());
    return s;
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.w.size() + l.b.size();
    return n;
  }

  /// Batched forward: rows of `x` are samples.
  Matrix forward(const Matrix& x, MlpCache* cache = nullptr) const {
    require(x.cols() == in_dim(), "Mlp::forward: input width mismatch");
    if (cache) {
      cache->inputs.clear();
      cache->outputs.clear();
    }
    Matrix h = x;
    for (const auto& layer : layers_) {
      Matrix y = matmul_nt(h, layer.w);
      for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = apply(layer.act, row[c] + layer.b[c]);
      }
      if (cache) cache->inputs.push_back(std::move(h));
      h = std::move(y);
      if (cache) cache->outputs.push_back(h);
    }
    return h;
  }

  std::vector<double> forward(std::span<const double> x) const {
    Matrix m(1, x.size(), std::vector<double>(x.begin(), x.end()));
    return forward(m).data();
  }

  /// Accumulates parameter gradients for upstream dL/dy and returns dL/dx.
  Matrix backward(const MlpCache& cache, const Matrix& dy) {
    require(cache.outputs.size() == layers_.size(), "Mlp::backward: cache does not match network");
    Matrix grad = dy;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      auto& layer = layers_[l];
      const Matrix& out = cache.outputs[l];
      require(grad.rows() == out.rows() && grad.cols() == out.cols(), "Mlp::backward: gradient shape mismatch");
      for (std::size_t i = 0; i < grad.size(); ++i) grad.data()[i] *= derivative(layer.act, out.data()[i]);
      layer.dw += matmul_tn(grad, cache.inputs[l]);
      for (std::size_t r = 0; r < grad.rows(); ++r) {
        const auto row = grad.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) layer.db[c] += row[c];
      }
      grad = matmul(grad, layer.w);
    }
    return grad;
  }

  void zero_grads() {
    for (auto& l : layers_) {
      l.dw.fill(0.0);
      std::fill(l.db.begin(), l.db.end(), 0.0);
    }
  }

  bool same_params(const Mlp& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (layers_[l].w != o.layers_[l].w || layers_[l].b != o.layers_[l].b || layers_[l].act != o.layers_[l].act)
        return false;
    return true;
  }

private:
  static double apply(Activation a, double v) {
    switch (a) {
      case Activation::Tanh: return std::tanh(v);
      case Activation::Relu: return v > 0.0 ? v : 0.0;
      case Activation::Identity: break;
    }
    return v;
  }
  // Derivative expressed through the activation output.
  static double derivative(Activation a, double y) {
    switch (a) {
      case Activation::Tanh: return 1.0 - y * y;
      case Activation::Relu: return y > 0.0 ? 1.0 : 0.0;
      case Activation::Identity: break;
    }
    return 1.0;
  }

  std::vector<DenseLayer> layers_;
};

/// A parameter tensor and its gradient, as flat views.
struct ParamRef {
  std::span<double> value;
  std::span<const double> grad;
};

inline void collect_params(Mlp& net, std::vector<ParamRef>& out) {
  for (auto& l : net.layers()) {
    out.push_back({l.w.data(), l.dw.data()});
    out.push_back({l.b, l.db});
  }
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update. The parameter list must have the same layout on every call.
  void step(const std::vector<ParamRef>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.size(), 0.0);
        v_.emplace_back(p.value.size(), 0.0);
      }
    }
    require(m_.size() == params.size(), "Adam::step: parameter layout changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& p = params[i];
      require(p.value.size() == m.size() && p.grad.size() == m.size(), "Adam::step: parameter size changed");
      for (std::size_t j = 0; j < m.size(); ++j) {
        const double g = p.grad[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        p.value[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

} // namespace subjepa
