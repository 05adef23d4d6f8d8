#include "latfuse/autodiff.hpp"

#include <gtest/gtest.h>

#include "latfuse/layers.hpp"
#include "latfuse/random.hpp"

using namespace latfuse;

namespace {

Tensord rnd(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
  return Tensord::uniform(std::move(shape), rng, lo, hi);
}

// Random tensor bounded away from zero, for ops with a kink at the origin.
Tensord rnd_off_zero(Rng& rng, std::vector<std::size_t> shape) {
  Tensord t = Tensord::uniform(std::move(shape), rng, 0.2, 1.0);
  for (auto& v : t.data)
    if (rng.uniform() < 0.5) v = -v;
  return t;
}

}  // namespace

TEST(Backward, SquareAtThree) {
  Tape<double> t;
  Var x = t.leaf(Tensord::scalar(3.0), true);
  Var y = sum(t, mul(t, x, x));
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x).at(0), 6.0);
}

TEST(Backward, SumSigmoidAtZero) {
  Tape<double> t;
  Var x = t.leaf(Tensord::zeros({2, 3}), true);
  Var y = sum(t, sigmoid(t, x));
  t.backward(y);
  for (double g : t.grad(x).data) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Backward, NonScalarOutputThrows) {
  Tape<double> t;
  Var x = t.leaf(Tensord::zeros({2, 2}), true);
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // f(x) = sum(x*x + x) uses x through two paths: df/dx = 2x + 1.
  Tape<double> t;
  Tensord xv({1, 3}, std::vector<double>{1.0, -2.0, 0.5});
  Var x = t.leaf(xv, true);
  Var y = sum(t, add(t, mul(t, x, x), x));
  t.backward(y);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_DOUBLE_EQ(t.grad(x).data[i], 2.0 * xv.data[i] + 1.0);
}

TEST(Backward, GradThroughUntrackedConstantIsSkipped) {
  Tape<double> t;
  Var x = t.leaf(Tensord::scalar(2.0), true);
  Var c = t.constant(Tensord::scalar(5.0));
  Var y = sum(t, mul(t, x, c));
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x).at(0), 5.0);
  EXPECT_DOUBLE_EQ(t.grad(c).at(0), 0.0);
}

TEST(Linear, IdentityWeightsGiveInput) {
  Rng rng(20);
  Tensord x = rnd(rng, {4, 3});
  Tape<double> t;
  Var out = linear(t, t.constant(x), t.constant(Tensord::identity(3)),
                   t.constant(Tensord::zeros({3})));
  EXPECT_EQ(t.value(out).data, x.data);
}

TEST(Linear, ZeroInputGivesBiasRows) {
  Rng rng(21);
  Tensord b = rnd(rng, {5});
  Tape<double> t;
  Var out = linear(t, t.constant(Tensord::zeros({3, 2})), t.constant(Tensord::zeros({2, 5})),
                   t.constant(b));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(t.value(out).at(r, c), b.data[c]);
}

TEST(Linear, EqualsMatmulPlusBiasComposition) {
  Rng rng(22);
  Tensord x = rnd(rng, {6, 4}), w = rnd(rng, {4, 3}), b = rnd(rng, {3});
  Tape<double> t;
  Var xl = t.constant(x), wl = t.constant(w), bl = t.constant(b);
  Var composed = add_bias_rows(t, matmul(t, xl, wl), bl);
  Var direct = linear(t, xl, wl, bl);
  EXPECT_EQ(t.value(direct).data, t.value(composed).data);
}

// Adjoint identity <L(x), y> == <x, L^T(y)> for the linear ops; L^T(y) is
// obtained as the gradient of <L(x), y> w.r.t. x.
TEST(Adjoint, LinearOpsSatisfyAdjointIdentity) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    Tensord x = rnd(rng, {5, 4});

    auto check = [&](auto&& apply, const Tensord& input) {
      Tape<double> t;
      Var xv = t.leaf(input, true);
      Var lx = apply(t, xv);
      Tensord y = rnd(rng, t.value(lx).shape);
      Var loss = sum(t, mul(t, lx, t.constant(y)));
      t.backward(loss);
      const double lhs = dot(t.value(lx), y);
      const double rhs = dot(input, t.grad(xv));
      EXPECT_NEAR(lhs, rhs, 1e-12);
    };

    check([](Tape<double>& t, Var v) { return transpose(t, v); }, x);
    check([](Tape<double>& t, Var v) { return scale(t, v, 1.37); }, x);
    std::vector<std::size_t> idx{4, 0, 0, 2, 3, 1, 4};
    check([&](Tape<double>& t, Var v) { return gather_rows(t, v, idx); }, x);
    Tensord small = rnd(rng, {7, 4});
    check([&](Tape<double>& t, Var v) { return scatter_add_rows(t, v, idx, 5); }, small);
    Tensord w = rnd(rng, {4, 6});
    check([&](Tape<double>& t, Var v) { return matmul(t, v, t.constant(w)); }, x);
  }
}

TEST(FiniteDiff, EveryOpPassesInDouble) {
  Rng rng(24);
  const double eps = 1e-5;
  const double tol = 1e-7;

  auto scalarize = [](Tape<double>& t, Var v) {
    // sum(v * v) gives every coordinate a nontrivial gradient
    return sum(t, mul(t, v, v));
  };

  // matmul
  {
    std::vector<Tensord> in{rnd(rng, {3, 4}), rnd(rng, {4, 2})};
    auto fn = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, matmul(t, v[0], v[1]));
    };
    EXPECT_LT(finite_diff_check<double>(fn, in, eps), tol);
  }
  // add, mul
  {
    std::vector<Tensord> in{rnd(rng, {3, 3}), rnd(rng, {3, 3})};
    auto fn_add = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, add(t, v[0], v[1]));
    };
    auto fn_mul = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, mul(t, v[0], v[1]));
    };
    EXPECT_LT(finite_diff_check<double>(fn_add, in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(fn_mul, in, eps), tol);
  }
  // scale, transpose, sigmoid, tanh, softmax, row_norm
  {
    std::vector<Tensord> in{rnd(rng, {4, 5})};
    auto mk = [&](auto op) {
      return [op, &scalarize](Tape<double>& t, const std::vector<Var>& v) {
        return scalarize(t, op(t, v[0]));
      };
    };
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return scale(t, v, -2.5); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return transpose(t, v); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return sigmoid(t, v); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return latfuse::tanh(t, v); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return softmax(t, v, 1); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return softmax(t, v, 0); }), in, eps), tol);
    EXPECT_LT(finite_diff_check<double>(mk([](Tape<double>& t, Var v) { return row_norm(t, v, 1e-3); }), in, eps), tol);
  }
  // relu away from the kink
  {
    std::vector<Tensord> in{rnd_off_zero(rng, {4, 5})};
    auto fn = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, relu(t, v[0]));
    };
    EXPECT_LT(finite_diff_check<double>(fn, in, eps), tol);
  }
  // gather / scatter / concat / bias
  {
    std::vector<std::size_t> idx{2, 0, 1, 0};
    std::vector<Tensord> in{rnd(rng, {3, 4})};
    auto fn_gather = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, gather_rows(t, v[0], idx));
    };
    EXPECT_LT(finite_diff_check<double>(fn_gather, in, eps), tol);

    std::vector<Tensord> in_sc{rnd(rng, {4, 4})};
    auto fn_scatter = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, scatter_add_rows(t, v[0], idx, 3));
    };
    EXPECT_LT(finite_diff_check<double>(fn_scatter, in_sc, eps), tol);

    std::vector<Tensord> in_cc{rnd(rng, {2, 3}), rnd(rng, {4, 3})};
    auto fn_concat = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, concat_rows(t, v[0], v[1]));
    };
    EXPECT_LT(finite_diff_check<double>(fn_concat, in_cc, eps), tol);

    std::vector<Tensord> in_b{rnd(rng, {3, 4}), rnd(rng, {4})};
    auto fn_bias = [&](Tape<double>& t, const std::vector<Var>& v) {
      return scalarize(t, add_bias_rows(t, v[0], v[1]));
    };
    EXPECT_LT(finite_diff_check<double>(fn_bias, in_b, eps), tol);
  }
}

TEST(FiniteDiff, CoreOpsPassInSingle) {
  Rng rng(25);
  const float eps = 1e-2f;
  const float tol = 1e-4f;
  auto scalarize = [](Tape<float>& t, Var v) { return sum(t, mul(t, v, v)); };

  std::vector<Tensor<float>> in{Tensor<float>::uniform({3, 4}, rng, -1.0f, 1.0f),
                                Tensor<float>::uniform({4, 2}, rng, -1.0f, 1.0f)};
  auto fn_mm = [&](Tape<float>& t, const std::vector<Var>& v) {
    return scalarize(t, matmul(t, v[0], v[1]));
  };
  EXPECT_LT(finite_diff_check<float>(fn_mm, in, eps), tol);

  std::vector<Tensor<float>> in_act{Tensor<float>::uniform({4, 4}, rng, -1.0f, 1.0f)};
  auto fn_sig = [&](Tape<float>& t, const std::vector<Var>& v) {
    return scalarize(t, sigmoid(t, v[0]));
  };
  auto fn_tanh = [&](Tape<float>& t, const std::vector<Var>& v) {
    return scalarize(t, latfuse::tanh(t, v[0]));
  };
  EXPECT_LT(finite_diff_check<float>(fn_sig, in_act, eps), tol);
  EXPECT_LT(finite_diff_check<float>(fn_tanh, in_act, eps), tol);
}

TEST(FiniteDiffCheck, LinearLayerTight) {
  Rng rng(26);
  std::vector<Tensord> in{rnd(rng, {5, 3}), rnd(rng, {3, 4}), rnd(rng, {4})};
  auto fn = [](Tape<double>& t, const std::vector<Var>& v) {
    return sum(t, mul(t, linear(t, v[0], v[1], v[2]), linear(t, v[0], v[1], v[2])));
  };
  EXPECT_LT(finite_diff_check<double>(fn, in, 1e-5), 1e-8);
}

TEST(FiniteDiffCheck, SoftmaxCrossComposite) {
  Rng rng(27);
  Tensord weights = rnd(rng, {4, 6});
  std::vector<Tensord> in{rnd(rng, {4, 6}, -2.0, 2.0)};
  auto fn = [&](Tape<double>& t, const std::vector<Var>& v) {
    return sum(t, mul(t, softmax(t, v[0], 1), t.constant(weights)));
  };
  EXPECT_LT(finite_diff_check<double>(fn, in, 1e-5), 1e-6);
}

TEST(FiniteDiffCheck, ConstantFunctionIsZero) {
  std::vector<Tensord> in{Tensord::zeros({2, 2})};
  auto fn = [](Tape<double>& t, const std::vector<Var>&) {
    return sum(t, t.constant(Tensord::scalar(4.25)));
  };
  EXPECT_EQ(finite_diff_check<double>(fn, in, 1e-5), 0.0);
}

TEST(FiniteDiffCheck, RejectsNonScalarFn) {
  std::vector<Tensord> in{Tensord::zeros({2, 2})};
  auto fn = [](Tape<double>&, const std::vector<Var>& v) { return v[0]; };
  EXPECT_THROW(finite_diff_check<double>(fn, in, 1e-5), ContractError);
}

TEST(Mlp, ParamPackLiftRoundTrip) {
  Rng rng(28);
  MlpParamsT<Tensord> params = init_mlp<double>(rng, 3, 5, 2);
  Tape<double> t;
  MlpParamsT<Var> vars = lift(t, params, true);
  EXPECT_EQ(t.value(vars.w1).shape, params.w1.shape);
  EXPECT_EQ(t.value(vars.b2).data, params.b2.data);
  EXPECT_EQ(parameter_count(params), 3u * 5 + 5 + 5 * 2 + 2);
}

TEST(Mlp, GradientFlowsThroughAllParams) {
  Rng rng(29);
  MlpParamsT<Tensord> params = init_mlp<double>(rng, 3, 4, 2);
  Tensord x = rnd(rng, {6, 3});
  std::vector<Tensord> in = collect(params);
  auto fn = [&](Tape<double>& t, const std::vector<Var>& leaves) {
    std::size_t cursor = 0;
    MlpParamsT<Var> p = pack_vars<MlpParamsT>(leaves, cursor);
    Var out = apply_mlp_relu_sigmoid(t, t.constant(x), p);
    return sum(t, mul(t, out, out));
  };
  EXPECT_LT(finite_diff_check<double>(fn, in, 1e-5), 1e-7);
}
