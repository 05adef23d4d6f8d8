#pragma once

#include <cmath>

#include "latfuse/autodiff.hpp"
#include "latfuse/random.hpp"
#include "latfuse/tensor.hpp"

namespace latfuse {

/// One fully connected layer. T is Tensor<S> for storage, Var once lifted.
template <typename T>
struct LinearParamsT {
  T w;
  T b;

  template <typename F>
  void visit(F&& f) const {
    f(w);
    f(b);
  }
  template <typename G>
  static LinearParamsT make(G&& g) {
    LinearParamsT p;
    p.w = g();
    p.b = g();
    return p;
  }
};

/// Two fully connected layers; the activation between them is chosen by the
/// op that applies the pack.
template <typename T>
struct MlpParamsT {
  T w1;
  T b1;
  T w2;
  T b2;

  template <typename F>
  void visit(F&& f) const {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
  template <typename G>
  static MlpParamsT make(G&& g) {
    MlpParamsT p;
    p.w1 = g();
    p.b1 = g();
    p.w2 = g();
    p.b2 = g();
    return p;
  }
};

template <typename S>
LinearParamsT<Tensor<S>> init_linear(Rng& rng, std::size_t c_in, std::size_t c_out) {
  const S k = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c_in)));
  LinearParamsT<Tensor<S>> p;
  p.w = Tensor<S>::uniform({c_in, c_out}, rng, -k, k);
  p.b = Tensor<S>::uniform({c_out}, rng, -k, k);
  return p;
}

template <typename S>
LinearParamsT<Tensor<S>> identity_linear(std::size_t c) {
  return {Tensor<S>::identity(c), Tensor<S>::zeros({c})};
}

template <typename S>
MlpParamsT<Tensor<S>> init_mlp(Rng& rng, std::size_t c_in, std::size_t c_hidden,
                               std::size_t c_out) {
  const S k1 = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c_in)));
  const S k2 = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c_hidden)));
  MlpParamsT<Tensor<S>> p;
  p.w1 = Tensor<S>::uniform({c_in, c_hidden}, rng, -k1, k1);
  p.b1 = Tensor<S>::uniform({c_hidden}, rng, -k1, k1);
  p.w2 = Tensor<S>::uniform({c_hidden, c_out}, rng, -k2, k2);
  p.b2 = Tensor<S>::uniform({c_out}, rng, -k2, k2);
  return p;
}

template <typename S>
MlpParamsT<Tensor<S>> identity_mlp(std::size_t c) {
  return {Tensor<S>::identity(c), Tensor<S>::zeros({c}), Tensor<S>::identity(c),
          Tensor<S>::zeros({c})};
}

template <typename S>
Var apply_linear(Tape<S>& t, Var x, const LinearParamsT<Var>& p) {
  return linear(t, x, p.w, p.b);
}

/// linear -> ReLU -> linear.
template <typename S>
Var apply_mlp_relu(Tape<S>& t, Var x, const MlpParamsT<Var>& p) {
  return linear(t, relu(t, linear(t, x, p.w1, p.b1)), p.w2, p.b2);
}

/// linear -> Tanh -> linear -> Sigmoid (the depth embedding shape).
template <typename S>
Var apply_mlp_tanh_sigmoid(Tape<S>& t, Var x, const MlpParamsT<Var>& p) {
  return sigmoid(t, linear(t, tanh(t, linear(t, x, p.w1, p.b1)), p.w2, p.b2));
}

/// linear -> ReLU -> linear -> Sigmoid (attention gates).
template <typename S>
Var apply_mlp_relu_sigmoid(Tape<S>& t, Var x, const MlpParamsT<Var>& p) {
  return sigmoid(t, apply_mlp_relu(t, x, p));
}

/// Total element count of every tensor in a parameter pack.
template <template <typename> class P, typename S>
std::size_t parameter_count(const P<Tensor<S>>& params) {
  std::size_t n = 0;
  params.visit([&](const Tensor<S>& t) { n += t.numel(); });
  return n;
}

}  // namespace latfuse
