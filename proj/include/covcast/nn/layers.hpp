#pragma once

// Parameterized layers built on the autodiff ops: 3-D convolution, LSTM cell,
// stacked bidirectional LSTM, multi-head self-attention and a dense layer.
// Weights are initialized uniformly in +/- 1/sqrt(fan_in); biases start at 0.

#include "covcast/nn/tensor.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace covcast::nn {

/// Named parameter, used by the optimizer and the checkpoint writer.
struct NamedParam {
  std::string name;
  Tensor tensor;
};

inline Tensor uniform_parameter(Shape shape, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape), true);
  Buffer& v = t.mutable_value();
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = dist(rng);
  return t;
}

inline Tensor zero_parameter(Shape shape) { return Tensor::zeros(std::move(shape), true); }

// ---------------------------------------------------------------------------

struct Conv3d {
  Index kernel_size = 3;
  Tensor weight;  // {1,1,ks,ks,ks}
  Tensor bias;    // {1}

  Conv3d() = default;
  Conv3d(Index ks, std::mt19937_64& rng) : kernel_size(ks) {
    if (ks <= 0 || ks % 2 == 0) throw ConfigError("conv3d kernel size must be a positive odd number");
    weight = uniform_parameter({1, 1, ks, ks, ks}, ks * ks * ks, rng);
    bias = zero_parameter({1});
  }

  Tensor forward(const Tensor& x) const { return conv3d_same(x, weight, bias); }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------

/// Gates act on the row vector [h_{t-1}, x_t]; each W is (hidden + input) x hidden.
struct LstmCell {
  Index input_size = 0;
  Index hidden_size = 0;
  Tensor w_f, w_i, w_o, w_c;
  Tensor b_f, b_i, b_o, b_c;

  LstmCell() = default;
  LstmCell(Index input, Index hidden, std::mt19937_64& rng) : input_size(input), hidden_size(hidden) {
    const Index fan_in = input + hidden;
    w_f = uniform_parameter({fan_in, hidden}, fan_in, rng);
    w_i = uniform_parameter({fan_in, hidden}, fan_in, rng);
    w_o = uniform_parameter({fan_in, hidden}, fan_in, rng);
    w_c = uniform_parameter({fan_in, hidden}, fan_in, rng);
    b_f = zero_parameter({1, hidden});
    b_i = zero_parameter({1, hidden});
    b_o = zero_parameter({1, hidden});
    b_c = zero_parameter({1, hidden});
  }

  struct State {
    Tensor h;
    Tensor c;
  };

  State initial_state(Index batch) const {
    return {Tensor::zeros({batch, hidden_size}), Tensor::zeros({batch, hidden_size})};
  }

  /// f, i, o = sigmoid(.), C~ = tanh(.), C = f*C_prev + i*C~, h = o*tanh(C).
  State step(const Tensor& x, const State& prev) const {
    if (x.cols() != input_size || prev.h.cols() != hidden_size || prev.h.rows() != x.rows()) {
      throw ConfigError("lstm_cell: shape mismatch (input " + shape_str(x.shape()) + ", hidden " +
                        shape_str(prev.h.shape()) + ")");
    }
    const Tensor hx = concat_cols({prev.h, x});
    const Tensor f = sigmoid(add_bias(matmul(hx, w_f), b_f));
    const Tensor i = sigmoid(add_bias(matmul(hx, w_i), b_i));
    const Tensor o = sigmoid(add_bias(matmul(hx, w_o), b_o));
    const Tensor cand = tanh(add_bias(matmul(hx, w_c), b_c));
    const Tensor c = add(mul(f, prev.c), mul(i, cand));
    return {mul(o, tanh(c)), c};
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".w_f", w_f});
    out.push_back({prefix + ".w_i", w_i});
    out.push_back({prefix + ".w_o", w_o});
    out.push_back({prefix + ".w_c", w_c});
    out.push_back({prefix + ".b_f", b_f});
    out.push_back({prefix + ".b_i", b_i});
    out.push_back({prefix + ".b_o", b_o});
    out.push_back({prefix + ".b_c", b_c});
  }
};

/// u stacked layers; each runs a forward and an independent reversed pass and
/// emits [h_fwd, h_bwd] per step. Layer k's output feeds layer k+1.
struct BiLstm {
  struct Layer {
    LstmCell forward;
    LstmCell backward;
  };
  std::vector<Layer> layers;

  BiLstm() = default;
  BiLstm(Index input, Index hidden, Index num_layers, std::mt19937_64& rng) {
    if (num_layers < 1) throw ConfigError("BiLSTM needs at least one layer");
    for (Index l = 0; l < num_layers; ++l) {
      const Index in = l == 0 ? input : 2 * hidden;
      Layer layer;
      layer.forward = LstmCell(in, hidden, rng);
      layer.backward = LstmCell(in, hidden, rng);
      layers.push_back(std::move(layer));
    }
  }

  Index hidden_size() const { return layers.front().forward.hidden_size; }

  /// steps[t] is batch x input; returns per-step batch x 2*hidden of the last layer.
  std::vector<Tensor> forward(std::vector<Tensor> steps) const {
    for (const auto& layer : layers) {
      const Index n = static_cast<Index>(steps.size());
      const Index batch = steps.front().rows();
      std::vector<Tensor> fwd(steps.size()), bwd(steps.size());
      auto s = layer.forward.initial_state(batch);
      for (Index t = 0; t < n; ++t) {
        s = layer.forward.step(steps[static_cast<std::size_t>(t)], s);
        fwd[static_cast<std::size_t>(t)] = s.h;
      }
      s = layer.backward.initial_state(batch);
      for (Index t = n - 1; t >= 0; --t) {
        s = layer.backward.step(steps[static_cast<std::size_t>(t)], s);
        bwd[static_cast<std::size_t>(t)] = s.h;
      }
      for (std::size_t t = 0; t < steps.size(); ++t) steps[t] = concat_cols({fwd[t], bwd[t]});
    }
    return steps;
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].forward.collect(prefix + "." + std::to_string(l) + ".fwd", out);
      layers[l].backward.collect(prefix + "." + std::to_string(l) + ".bwd", out);
    }
  }
};

// ---------------------------------------------------------------------------

/// Bias-free Q/K/V projections, per-head attention, output projection W_c.
struct MultiHeadAttention {
  Index heads = 1;
  Tensor w_q, w_k, w_v, w_c;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index dim, Index num_heads, std::mt19937_64& rng) : heads(num_heads) {
    if (num_heads <= 0 || dim % num_heads != 0) {
      throw ConfigError("attention heads (" + std::to_string(num_heads) + ") must divide width " +
                        std::to_string(dim));
    }
    w_q = uniform_parameter({dim, dim}, dim, rng);
    w_k = uniform_parameter({dim, dim}, dim, rng);
    w_v = uniform_parameter({dim, dim}, dim, rng);
    w_c = uniform_parameter({dim, dim}, dim, rng);
  }

  /// `stacked` is time-major (steps * batch) x dim.
  Tensor forward(const Tensor& stacked, Index steps, Index batch) const {
    const Tensor q = matmul(stacked, w_q);
    const Tensor k = matmul(stacked, w_k);
    const Tensor v = matmul(stacked, w_v);
    return matmul(attention(q, k, v, steps, batch, heads), w_c);
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".w_q", w_q});
    out.push_back({prefix + ".w_k", w_k});
    out.push_back({prefix + ".w_v", w_v});
    out.push_back({prefix + ".w_c", w_c});
  }
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Linear() = default;
  Linear(Index in, Index out, std::mt19937_64& rng)
      : weight(uniform_parameter({in, out}, in, rng)), bias(zero_parameter({1, out})) {}

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace covcast::nn
