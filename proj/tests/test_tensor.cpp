#include "covcast/nn/adam.hpp"
#include "covcast/nn/checkpoint.hpp"
#include "covcast/nn/layers.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace covcast;
using namespace covcast::nn;

namespace {

Buffer random_buffer(Index r, Index c, std::mt19937_64& rng, double sd = 1.0) {
  return synth::random_matrix(r, c, rng, sd);
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = false) {
  const Index rows = shape.size() == 1 ? 1 : shape[0];
  const Index cols = shape_numel(shape) / rows;
  return Tensor::from(random_buffer(rows, cols, rng), std::move(shape), grad);
}

Buffer conv_loop(const Buffer& x, const Buffer& w, double b, Index d0, Index d1, Index d2, Index ks) {
  Buffer out(x.rows(), x.cols());
  const Index half = ks / 2;
  for (Index n = 0; n < x.rows(); ++n)
    for (Index t = 0; t < d0; ++t)
      for (Index i = 0; i < d1; ++i)
        for (Index j = 0; j < d2; ++j) {
          double s = b;
          for (Index u = 0; u < ks; ++u)
            for (Index v = 0; v < ks; ++v)
              for (Index q = 0; q < ks; ++q) {
                const Index tt = t + u - half, ii = i + v - half, jj = j + q - half;
                if (tt < 0 || tt >= d0 || ii < 0 || ii >= d1 || jj < 0 || jj >= d2) continue;
                s += w(0, (u * ks + v) * ks + q) * x(n, (tt * d1 + ii) * d2 + jj);
              }
          out(n, (t * d1 + i) * d2 + j) = s;
        }
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Tensor, BackwardOfSumAndSquare) {
  Buffer v(1, 3);
  v << 1.0, -2.0, 3.0;
  Tensor x = Tensor::from(v, {3}, true);
  backward(sum(mul(x, x)));
  EXPECT_TRUE(x.grad().isApprox(2.0 * v));
  Tensor y = Tensor::from(v, {3}, true);
  backward(sum(y));
  EXPECT_TRUE(y.grad().isOnes(0.0));
}

TEST(Tensor, SecondBackwardIsAnError) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor loss = mul(x, x);
  backward(loss);
  EXPECT_THROW(backward(loss), ConfigError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), ConfigError);
}

TEST(Tensor, GradientsAccumulateAcrossBranches) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(add(mul(x, x), scale(x, 2.0)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 8.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y;
  {
    NoGradGuard g;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(y), ConfigError);
}

TEST(Tensor, ShapeMismatchIsConfigError) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(matmul(random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)), ConfigError);
  EXPECT_THROW(add(random_tensor({2, 3}, rng), random_tensor({3, 2}, rng)), ConfigError);
}

TEST(Conv3d, DeltaKernelIsIdentityPlusBias) {
  std::mt19937_64 rng(2);
  Conv3d c(3, rng);
  c.weight.mutable_value().setZero();
  c.weight.mutable_value()(0, 13) = 1.0;
  c.bias.mutable_value()(0, 0) = 0.5;
  const Tensor x = random_tensor({2, 1, 3, 4, 4}, rng);
  EXPECT_LT((c.forward(x).value().array() - x.value().array() - 0.5).abs().maxCoeff(), 1e-15);
}

TEST(Conv3d, OnesKernelSumsNeighbourhood) {
  std::mt19937_64 rng(3);
  Conv3d c(3, rng);
  c.weight.mutable_value().setOnes();
  const Tensor x = Tensor::from(Buffer::Ones(1, 27), {1, 1, 3, 3, 3});
  const Buffer y = c.forward(x).value();
  EXPECT_EQ(y(0, 13), 27.0);  // centre sees the whole cube
  EXPECT_EQ(y(0, 0), 8.0);    // corner sees a 2x2x2 block
  EXPECT_EQ(y(0, 1), 12.0);   // edge
}

TEST(Conv3d, MatchesLoopOracle) {
  std::mt19937_64 rng(4);
  for (Index ks : {1, 3, 5}) {
    Conv3d c(ks, rng);
    c.bias.mutable_value()(0, 0) = 0.1;
    const Tensor x = random_tensor({3, 1, 4, 3, 3}, rng);
    const Buffer expect = conv_loop(x.value(), c.weight.value(), 0.1, 4, 3, 3, ks);
    EXPECT_LT((c.forward(x).value() - expect).cwiseAbs().maxCoeff(), 1e-14) << "ks=" << ks;
  }
  EXPECT_THROW(Conv3d(2, rng), ConfigError);
}

TEST(Lstm, ZeroWeightsHandExample) {
  std::mt19937_64 rng(5);
  LstmCell cell(2, 3, rng);
  for (Tensor* w : {&cell.w_f, &cell.w_i, &cell.w_o, &cell.w_c}) w->mutable_value().setZero();
  auto s = cell.step(random_tensor({1, 2}, rng), cell.initial_state(1));
  EXPECT_TRUE(s.h.value().isZero(0.0));
  EXPECT_TRUE(s.c.value().isZero(0.0));

  cell.b_c.mutable_value().setOnes();
  s = cell.step(random_tensor({1, 2}, rng), cell.initial_state(1));
  const double c1 = 0.5 * std::tanh(1.0);
  EXPECT_NEAR(s.c.value()(0, 0), c1, 1e-15);
  EXPECT_NEAR(s.h.value()(0, 0), 0.5 * std::tanh(c1), 1e-15);
  s = cell.step(random_tensor({1, 2}, rng), s);
  const double c2 = 0.5 * c1 + 0.5 * std::tanh(1.0);
  EXPECT_NEAR(s.c.value()(0, 2), c2, 1e-15);
}

TEST(Lstm, MatchesScalarRecursion) {
  std::mt19937_64 rng(6);
  LstmCell cell(2, 2, rng);
  for (Tensor* b : {&cell.b_f, &cell.b_i, &cell.b_o, &cell.b_c}) b->mutable_value() = random_buffer(1, 2, rng);
  const Buffer x = random_buffer(1, 2, rng);
  const Buffer h0 = random_buffer(1, 2, rng), c0 = random_buffer(1, 2, rng);
  const auto s = cell.step(Tensor::from(x, {1, 2}), {Tensor::from(h0, {1, 2}), Tensor::from(c0, {1, 2})});
  Buffer hx(1, 4);
  hx << h0(0, 0), h0(0, 1), x(0, 0), x(0, 1);
  for (Index k = 0; k < 2; ++k) {
    auto gate = [&](const Tensor& w, const Tensor& b) {
      double a = b.value()(0, k);
      for (Index r = 0; r < 4; ++r) a += hx(0, r) * w.value()(r, k);
      return a;
    };
    const double f = sigmoid(gate(cell.w_f, cell.b_f)), i = sigmoid(gate(cell.w_i, cell.b_i));
    const double o = sigmoid(gate(cell.w_o, cell.b_o)), cand = std::tanh(gate(cell.w_c, cell.b_c));
    const double c = f * c0(0, k) + i * cand;
    EXPECT_NEAR(s.c.value()(0, k), c, 1e-15);
    EXPECT_NEAR(s.h.value()(0, k), o * std::tanh(c), 1e-15);
  }
}

TEST(BiLstm, BackwardDirectionSeesReversedSequence) {
  std::mt19937_64 rng(7);
  BiLstm net(2, 3, 1, rng);
  std::vector<Tensor> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(random_tensor({2, 2}, rng));
  const auto out = net.forward(seq);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0].cols(), 6);

  auto s = net.layers[0].backward.initial_state(2);
  for (int t = 3; t >= 0; --t) s = net.layers[0].backward.step(seq[static_cast<std::size_t>(t)], s);
  EXPECT_LT((out[0].value().rightCols(3) - s.h.value()).cwiseAbs().maxCoeff(), 1e-15);
  s = net.layers[0].forward.initial_state(2);
  for (int t = 0; t < 4; ++t) s = net.layers[0].forward.step(seq[static_cast<std::size_t>(t)], s);
  EXPECT_LT((out[3].value().leftCols(3) - s.h.value()).cwiseAbs().maxCoeff(), 1e-15);

  BiLstm deep(2, 3, 2, rng);
  EXPECT_EQ(deep.layers[1].forward.input_size, 6);
  EXPECT_EQ(deep.forward(seq).back().cols(), 6);
}

TEST(Attention, MatchesDenseOracle) {
  std::mt19937_64 rng(8);
  const Index steps = 3, batch = 2, dim = 4, heads = 2, dk = 2;
  MultiHeadAttention mha(dim, heads, rng);
  const Tensor x = random_tensor({steps * batch, dim}, rng);
  const Buffer got = mha.forward(x, steps, batch).value();

  const Buffer q = x.value() * mha.w_q.value(), k = x.value() * mha.w_k.value(), v = x.value() * mha.w_v.value();
  Buffer concat(steps * batch, dim);
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < steps; ++t) {
        std::vector<double> w(static_cast<std::size_t>(steps));
        double total = 0.0;
        for (Index s = 0; s < steps; ++s) {
          double dot = 0.0;
          for (Index d = 0; d < dk; ++d) dot += q(t * batch + b, h * dk + d) * k(s * batch + b, h * dk + d);
          w[static_cast<std::size_t>(s)] = std::exp(dot / std::sqrt(2.0));
          total += w[static_cast<std::size_t>(s)];
        }
        for (Index d = 0; d < dk; ++d) {
          double acc = 0.0;
          for (Index s = 0; s < steps; ++s) acc += w[static_cast<std::size_t>(s)] / total * v(s * batch + b, h * dk + d);
          concat(t * batch + b, h * dk + d) = acc;
        }
      }
  const Buffer expect = concat * mha.w_c.value();
  EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Attention, SingleStepReturnsProjectedValues) {
  std::mt19937_64 rng(9);
  MultiHeadAttention mha(4, 4, rng);
  const Tensor x = random_tensor({3, 4}, rng);
  const Buffer expect = x.value() * mha.w_v.value() * mha.w_c.value();
  EXPECT_LT((mha.forward(x, 1, 3).value() - expect).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(MultiHeadAttention(6, 4, rng), ConfigError);
}

TEST(Adam, HandRecursion) {
  Tensor p = Tensor::scalar(1.0, true);
  Adam opt({p}, {0.1, 0.9, 0.999, 1e-8});
  double m = 0.0, v = 0.0, x = 1.0;
  for (int t = 1; t <= 5; ++t) {
    opt.zero_grad();
    backward(mul(p, p));
    const double g = 2.0 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    opt.step();
    EXPECT_NEAR(p.item(), x, 1e-15);
  }
  EXPECT_EQ(opt.step_count(), 5);
}

TEST(Dropout, IdentityAtInferenceAndScaledInTraining) {
  std::mt19937_64 rng(10);
  const Tensor x = Tensor::from(Buffer::Ones(100, 100), {100, 100});
  EXPECT_TRUE(dropout(x, 0.2, false, rng).value() == x.value());
  EXPECT_TRUE(dropout(x, 0.0, true, rng).value() == x.value());
  const Buffer y = dropout(x, 0.2, true, rng).value();
  for (Index i = 0; i < y.size(); ++i) EXPECT_TRUE(y.data()[i] == 0.0 || y.data()[i] == 1.25);
  EXPECT_NEAR(y.mean(), 1.0, 0.03);
  EXPECT_THROW(dropout(x, 1.0, true, rng), ConfigError);
}

TEST(GradCheck, Ops) {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({3, 4}, rng, true), b = random_tensor({4, 2}, rng, true);
  Tensor bias = random_tensor({1, 2}, rng, true);
  const auto loss = [&] {
    const Tensor y = tanh(add_bias(matmul(a, b), bias));
    const Tensor z = sigmoid(concat_cols({y, slice_cols(a, 1, 2)}));
    return mean(row_norm(concat_rows({z, scale(z, -0.5)})));
  };
  const auto r = synth::check_gradients({a, b, bias}, loss, 50, rng);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, Conv3d) {
  std::mt19937_64 rng(12);
  Conv3d c(3, rng);
  Tensor x = random_tensor({2, 1, 3, 3, 3}, rng, true);
  const auto loss = [&] {
    const Tensor y = c.forward(x);
    return sum(mul(y, y));
  };
  const auto r = synth::check_gradients({c.weight, c.bias, x}, loss, 30, rng);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, BiLstm) {
  std::mt19937_64 rng(13);
  BiLstm net(3, 4, 2, rng);
  std::vector<Tensor> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(random_tensor({2, 3}, rng, true));
  std::vector<NamedParam> named;
  net.collect("lstm", named);
  std::vector<Tensor> params;
  for (auto& p : named) {
    p.tensor.mutable_value() += random_buffer(p.tensor.rows(), p.tensor.cols(), rng, 0.1);
    params.push_back(p.tensor);
  }
  params.push_back(seq[0]);
  const auto loss = [&] {
    const auto out = net.forward(seq);
    return mean(row_norm(concat_rows(out)));
  };
  const auto r = synth::check_gradients(params, loss, 10, rng);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, Attention) {
  std::mt19937_64 rng(14);
  MultiHeadAttention mha(4, 2, rng);
  Tensor x = random_tensor({6, 4}, rng, true);
  std::vector<NamedParam> named;
  mha.collect("mha", named);
  std::vector<Tensor> params{x};
  for (const auto& p : named) params.push_back(p.tensor);
  const auto loss = [&] { return mean(row_norm(mean_over_steps(mha.forward(x, 3, 2), 3, 2))); };
  const auto r = synth::check_gradients(params, loss, 16, rng);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(15);
  Linear a(3, 2, rng), b(3, 2, rng);
  std::vector<NamedParam> pa, pb;
  a.collect("dense", pa);
  b.collect("dense", pb);
  std::stringstream ss;
  write_checkpoint(ss, pa, "{\"k\":1}");
  const Checkpoint ck = read_checkpoint(ss);
  EXPECT_EQ(ck.meta, "{\"k\":1}");
  restore_parameters(ck, pb);
  EXPECT_TRUE(b.weight.value() == a.weight.value());

  std::vector<NamedParam> wrong;
  Linear c(2, 2, rng);
  c.collect("dense", wrong);
  EXPECT_THROW(restore_parameters(ck, wrong), DataError);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_checkpoint(bad), DataError);
}
