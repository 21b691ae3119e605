#include <cmath>
#include <random>
#include <string>

#include "doctest.h"
#include "mifair/error.hpp"
#include "mifair/grad_check.hpp"
#include "mifair/tape.hpp"

using namespace mifair;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Contract an op's output with fixed random weights so every output
// coordinate contributes to the scalar.
Var contract(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = y.tape->constant(random_tensor(rng, y.shape()));
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("matmul with identity returns the input") {
  Tape tape;
  Var a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  Var id = tape.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
  CHECK(matmul(a, id).value() == Tensor::from_rows({{1, 2}, {3, 4}}));
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  Var y = softmax_rows(tape.constant(Tensor::row({0, 0, 0})));
  for (double p : y.value().data()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax with a huge logit does not overflow") {
  Tape tape;
  Var y = softmax_rows(tape.constant(Tensor::row({1000, 0})));
  // exp(-1000) underflows to 0 after max subtraction.
  CHECK(std::abs(y.value()[0] - 1.0) <= 1e-12);
  CHECK(std::abs(y.value()[1]) <= 1e-12);
  CHECK(y.value().all_finite());
}

TEST_CASE("softmax rows are probability vectors") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    Var y = softmax_rows(tape.constant(random_tensor(rng, {5, 7}, -30, 30)));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(y.value().at(r, c) >= 0.0);
        s += y.value().at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("log clamps its input at the floor") {
  Tape tape;
  Var y = log(tape.constant(Tensor::row({0.0, 1.0})));
  CHECK(y.value()[0] == doctest::Approx(std::log(1e-12)));
  CHECK(y.value()[1] == 0.0);
}

TEST_CASE("backward of sum and mean") {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const Tensor gx = tape.backward(sum(x)).of(x);
  for (double v : gx.data()) CHECK(v == 1.0);

  Tape tape2;
  Var y = tape2.leaf(Tensor::row({1, 2, 3, 4}));
  const Tensor gy = tape2.backward(mean(y)).of(y);
  for (double v : gy.data()) CHECK(v == 0.25);
}

TEST_CASE("backward of a dot product") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2}));
  Var y = tape.leaf(Tensor::matrix(2, 1, {3, 4}));
  Var dot = matmul(x, y);
  Gradients g = tape.backward(dot);
  CHECK(dot.value().item() == 11.0);
  CHECK(g.of(x) == Tensor::row({3, 4}));
  CHECK(g.of(y) == Tensor::matrix(2, 1, {1, 2}));
}

TEST_CASE("unreachable leaves get zero gradients of matching shape") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2}));
  Var unused = tape.leaf(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  Gradients g = tape.backward(sum(x));
  CHECK_FALSE(g.reached(unused));
  CHECK(g.of(unused) == Tensor::zeros({3, 2}));
}

TEST_CASE("backward rejects a non-scalar root") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2}));
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ShapeError);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor::zeros({2, 3}));
  Var b = tape.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.constant(Tensor::zeros({3, 2}))), ShapeError);
}

TEST_CASE("stop_gradient blocks the gradient path") {
  Tape tape;
  Var x = tape.leaf(Tensor::row({1, 2, 3}));
  Var y = add(scale(x, 2.0), stop_gradient(scale(x, 5.0)));
  Gradients g = tape.backward(sum(y));
  CHECK(g.of(x) == Tensor::row({2, 2, 2}));
}

TEST_CASE("backward visits every tape entry exactly once") {
  std::mt19937_64 rng(11);
  Tape tape;
  Var x = tape.leaf(random_tensor(rng, {4, 6}));
  Var w = tape.leaf(random_tensor(rng, {6, 5}));
  Var g = tape.constant(Tensor::filled({1, 5}, 1.0));
  Var b = tape.constant(Tensor::zeros({1, 5}));
  Var h = layer_norm(gelu(matmul(x, w)), g, b);
  Var unused = relu(x);  // recorded but not on the root's path
  (void)unused;
  Var root = mean(log(softmax_rows(h)));
  tape.backward(root);
  CHECK(tape.op_count() == 7);
  CHECK(tape.last_backward_visits() == tape.op_count());
}

TEST_CASE("grad_check on sum of squares") {
  const Tensor p = Tensor::row({1, 2, 3});
  ScalarFn f = [](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); };
  const Tensor params[] = {p};
  CHECK(grad_check(f, params, 1e-5).max_rel_error <= 1e-7);
}

TEST_CASE("grad_check on a constant function") {
  ScalarFn f = [](Tape& t, std::span<const Var>) { return sum(t.constant(Tensor::row({4, 5}))); };
  const Tensor params[] = {Tensor::row({1, 2})};
  CHECK(grad_check(f, params, 1e-5).max_rel_error == 0.0);
}

TEST_CASE("grad_check rejects bad epsilon and non-finite functions") {
  ScalarFn f = [](Tape&, std::span<const Var> v) { return sum(v[0]); };
  const Tensor params[] = {Tensor::row({1, 2})};
  CHECK_THROWS_AS(grad_check(f, params, 0.0), ConfigError);
  CHECK_THROWS_AS(grad_check(f, params, 0.1), ConfigError);
  ScalarFn bad = [](Tape&, std::span<const Var> v) { return scale(sum(v[0]), std::nan("")); };
  CHECK_THROWS_AS(grad_check(bad, params, 1e-5), NumericError);
}

TEST_CASE("every primitive passes grad_check on random small inputs") {
  constexpr double kEps = 1e-5;
  constexpr double kTol = 1e-6;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 8);

  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    const auto seed = static_cast<std::uint64_t>(trial) + 100;

    auto check = [&](const char* name, ScalarFn f, std::vector<Tensor> params) {
      CAPTURE(name);
      CAPTURE(trial);
      CHECK(grad_check(f, params, kEps).max_rel_error <= kTol);
    };

    check("matmul", [&](Tape&, std::span<const Var> v) { return contract(matmul(v[0], v[1]), seed); },
          {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})});
    check("matmul_nt", [&](Tape&, std::span<const Var> v) { return contract(matmul_nt(v[0], v[1]), seed); },
          {random_tensor(rng, {m, k}), random_tensor(rng, {n, k})});
    check("add", [&](Tape&, std::span<const Var> v) { return contract(add(v[0], v[1]), seed); },
          {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})});
    check("add-broadcast", [&](Tape&, std::span<const Var> v) { return contract(add(v[0], v[1]), seed); },
          {random_tensor(rng, {m, n}), random_tensor(rng, {1, n})});
    check("mul", [&](Tape&, std::span<const Var> v) { return contract(mul(v[0], v[1]), seed); },
          {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})});
    check("scale", [&](Tape&, std::span<const Var> v) { return contract(scale(v[0], -1.7), seed); },
          {random_tensor(rng, {m, n})});
    check("softmax", [&](Tape&, std::span<const Var> v) { return contract(softmax_rows(v[0]), seed); },
          {random_tensor(rng, {m, n}, -3, 3)});
    check("log", [&](Tape&, std::span<const Var> v) { return contract(log(v[0]), seed); },
          {random_tensor(rng, {m, n}, 0.2, 3.0)});
    check("mean", [&](Tape&, std::span<const Var> v) { return mean(mul(v[0], v[0])); },
          {random_tensor(rng, {m, n})});
    check("gelu", [&](Tape&, std::span<const Var> v) { return contract(gelu(v[0]), seed); },
          {random_tensor(rng, {m, n}, -3, 3)});
    check("relu", [&](Tape&, std::span<const Var> v) { return contract(relu(v[0]), seed); },
          {random_tensor(rng, {m, n}, 0.05, 1.0)});
    const std::size_t ids[] = {0, k - 1, 0};
    check("embedding", [&](Tape&, std::span<const Var> v) { return contract(embedding(v[0], ids), seed); },
          {random_tensor(rng, {k, n})});
    check("layer_norm",
          [&](Tape&, std::span<const Var> v) { return contract(layer_norm(v[0], v[1], v[2]), seed); },
          {random_tensor(rng, {m, n + 1}), random_tensor(rng, {1, n + 1}), random_tensor(rng, {1, n + 1})});
    check("concat_rows",
          [&](Tape&, std::span<const Var> v) {
            const Var parts[] = {v[0], v[1]};
            return contract(concat_rows(parts), seed);
          },
          {random_tensor(rng, {m, n}), random_tensor(rng, {k, n})});
    check("concat_cols",
          [&](Tape&, std::span<const Var> v) {
            const Var parts[] = {v[0], v[1]};
            return contract(concat_cols(parts), seed);
          },
          {random_tensor(rng, {m, n}), random_tensor(rng, {m, k})});
    check("slice", [&](Tape&, std::span<const Var> v) {
            return contract(slice_cols(slice_rows(v[0], 0, 1), 1, 2), seed);
          },
          {random_tensor(rng, {m, n + 1})});
    check("reshape", [&](Tape&, std::span<const Var> v) { return contract(reshape(v[0], {n, m}), seed); },
          {random_tensor(rng, {m, n})});
    const std::size_t flat[] = {0, m * n - 1, 0};
    check("gather", [&](Tape&, std::span<const Var> v) { return contract(gather(v[0], flat), seed); },
          {random_tensor(rng, {m, n})});
  }
}
