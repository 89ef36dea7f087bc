#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedtraj/autodiff.hpp"
#include "fedtraj/kernels.hpp"

using namespace fedtraj;
using namespace fedtraj::ad;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.5, double hi = 1.5) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  double total = 0.0;
  for (double& x : v) {
    x = rng.uniform(0.05, 1.0);
    total += x;
  }
  for (double& x : v) x /= total;
  return v;
}

}  // namespace

TEST_CASE("forward values: identity matmul, softmax symmetry, gelu(0)") {
  Graph g;
  const auto eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const auto a = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK(g.value(g.matmul(eye, a)).data == std::vector<double>{1, 2, 3, 4});

  const auto logits = g.constant(Tensor::row({0.3, 0.3, 0.3, 0.3}));
  const auto sm = g.softmax(logits);
  for (double v : g.value(sm).data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  const auto zero = g.constant(Tensor::scalar(0.0));
  CHECK(g.value(g.gelu(zero)).data[0] == 0.0);
}

TEST_CASE("softmax rows are strictly positive and sum to one") {
  Rng rng(3);
  Graph g;
  Tensor t = Tensor::matrix(8, 16, random_vec(8 * 16, rng, -30.0, 30.0));
  const auto sm = g.softmax(g.constant(t));
  const Tensor& y = g.value(sm);
  for (std::size_t r = 0; r < 8; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(y.at(r, c) > 0.0);
      total += y.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("d(x^2)/dx at 3 is 6") {
  Graph g;
  const auto x = g.leaf(Tensor::scalar(3.0), true);
  const auto y = g.mul(x, x);
  g.backward(y);
  CHECK(g.grad(x).data[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("mean of W*x spreads gradient as x/len") {
  Graph g;
  const auto w = g.leaf(Tensor::matrix(2, 3, {1, 1, 1, 1, 1, 1}), true);
  const auto x = g.constant(Tensor::matrix(3, 1, {0.5, -1.0, 2.0}));
  const auto m = g.mean(g.matmul(w, x));
  g.backward(m);
  // d mean / dW[i][j] = x[j] / 2
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(g.grad(w).at(i, 0) == doctest::Approx(0.25));
    CHECK(g.grad(w).at(i, 1) == doctest::Approx(-0.5));
    CHECK(g.grad(w).at(i, 2) == doctest::Approx(1.0));
  }
}

TEST_CASE("backward rejects non-scalar losses") {
  Graph g;
  const auto x = g.leaf(Tensor::row({1, 2}), true);
  try {
    g.backward(x);
    FAIL("expected NonScalarLoss");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NonScalarLoss);
  }
}

TEST_CASE("non-finite results are trapped") {
  Graph g;
  const auto x = g.constant(Tensor::scalar(0.0));
  try {
    g.log(x);  // log 0 = -inf
    FAIL("expected NonFiniteValue");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NonFiniteValue);
  }
}

TEST_CASE("shape mismatches are rejected") {
  Graph g;
  const auto a = g.constant(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
  const auto b = g.constant(Tensor::matrix(2, 3, std::vector<double>(6, 1.0)));
  try {
    g.matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::ShapeMismatch);
  }
}

// central-difference oracle over every differentiable op: builds the same
// composite through the graph for both value and gradient
TEST_CASE("gradcheck passes for each op over 100 random points") {
  Rng rng(1234);
  const double h = 1e-5, tol = 1e-4;

  struct OpCase {
    const char* name;
    std::size_t dims;
    std::function<Graph::Id(Graph&, Graph::Id)> build;
  };

  // scalarizing wrapper: mean of a transformed tensor, weighted to make the
  // gradient generic
  const std::vector<OpCase> cases = {
      {"gelu", 6, [](Graph& g, Graph::Id x) { return g.gelu(x); }},
      {"softmax", 5, [](Graph& g, Graph::Id x) { return g.softmax(x); }},
      {"log", 4,
       [](Graph& g, Graph::Id x) {
         // keep inputs positive: log(softmax) is the realistic use
         return g.log(g.softmax(x));
       }},
      {"scale", 6, [](Graph& g, Graph::Id x) { return g.scale(x, -2.5); }},
      {"sum", 6, [](Graph& g, Graph::Id x) { return g.sum(x); }},
      {"mean", 6, [](Graph& g, Graph::Id x) { return g.mean(x); }},
  };

  for (const auto& op_case : cases) {
    CAPTURE(op_case.name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto weights = random_vec(op_case.dims, rng);
      auto eval = [&](std::span<const double> p, bool want_grad,
                      std::vector<double>* grad_out) -> double {
        Graph g;
        const auto x = g.leaf(Tensor::row({p.begin(), p.end()}), true);
        auto y = op_case.build(g, x);
        if (!g.value(y).is_scalar()) {
          const auto w = g.constant(Tensor::row(weights));
          y = g.sum(g.mul(y, w));
        }
        if (want_grad) {
          g.backward(y);
          *grad_out = g.grad(x).data;
        }
        return g.value(y).data[0];
      };
      const auto point = random_vec(op_case.dims, rng);
      const auto report = gradcheck(
          [&](std::span<const double> p) { return eval(p, false, nullptr); },
          [&](std::span<const double> p) {
            std::vector<double> grad;
            eval(p, true, &grad);
            return grad;
          },
          point, h, tol);
      worst = std::max(worst, report.max_rel_err);
      CHECK(report.pass);
    }
    MESSAGE(op_case.name, " worst rel err ", worst);
  }
}

TEST_CASE("gradcheck passes for binary ops") {
  Rng rng(99);
  const std::size_t n = 5;
  for (const char* which : {"add", "sub", "mul", "matmul", "add_rowvec"}) {
    CAPTURE(which);
    for (int trial = 0; trial < 100; ++trial) {
      // pack both operands into one parameter vector
      const std::size_t total = std::string_view(which) == "matmul" ? 2 * n * n
                                : std::string_view(which) == "add_rowvec" ? n * n + n
                                                                          : 2 * n;
      auto eval = [&](std::span<const double> p, bool want_grad,
                      std::vector<double>* grad_out) -> double {
        Graph g;
        Graph::Id a, b;
        if (std::string_view(which) == "matmul") {
          a = g.leaf(Tensor::matrix(n, n, {p.begin(), p.begin() + n * n}), true);
          b = g.leaf(Tensor::matrix(n, n, {p.begin() + n * n, p.end()}), true);
        } else if (std::string_view(which) == "add_rowvec") {
          a = g.leaf(Tensor::matrix(n, n, {p.begin(), p.begin() + n * n}), true);
          b = g.leaf(Tensor::row({p.begin() + n * n, p.end()}), true);
        } else {
          a = g.leaf(Tensor::row({p.begin(), p.begin() + n}), true);
          b = g.leaf(Tensor::row({p.begin() + n, p.end()}), true);
        }
        Graph::Id y;
        if (std::string_view(which) == "add") y = g.add(a, b);
        else if (std::string_view(which) == "sub") y = g.sub(a, b);
        else if (std::string_view(which) == "mul") y = g.mul(a, b);
        else if (std::string_view(which) == "matmul") y = g.matmul(a, b);
        else y = g.add_rowvec(a, b);
        const auto loss = g.mean(g.mul(y, y));
        if (want_grad) {
          g.backward(loss);
          std::vector<double> grad = g.grad(a).data;
          const auto& gb = g.grad(b).data;
          grad.insert(grad.end(), gb.begin(), gb.end());
          *grad_out = grad;
        }
        return g.value(loss).data[0];
      };
      const auto point = random_vec(total, rng);
      const auto report = gradcheck(
          [&](std::span<const double> p) { return eval(p, false, nullptr); },
          [&](std::span<const double> p) {
            std::vector<double> grad;
            eval(p, true, &grad);
            return grad;
          },
          point);
      CHECK(report.pass);
    }
  }
}

TEST_CASE("kl divergence: frozen values and identities") {
  Graph g;
  // kl(p, p) = 0
  const auto p = g.constant(Tensor::row({0.2, 0.3, 0.5}));
  CHECK(g.value(g.kl_div(p, p)).data[0] == doctest::Approx(0.0).epsilon(1e-15));

  // p=(1,0), q=(0.5,0.5) -> log 2
  const auto p2 = g.constant(Tensor::row({1.0, 0.0}));
  const auto q2 = g.constant(Tensor::row({0.5, 0.5}));
  CHECK(g.value(g.kl_div(p2, q2)).data[0] ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("kl divergence is non-negative on random simplex pairs (property)") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 12));
    const auto p = g.constant(Tensor::row(random_simplex(n, rng)));
    const auto q = g.constant(Tensor::row(random_simplex(n, rng)));
    CHECK(g.value(g.kl_div(p, q)).data[0] >= -1e-12);
  }
}

TEST_CASE("kl rejects unnormalized or mismatched inputs") {
  Graph g;
  const auto p = g.constant(Tensor::row({0.9, 0.2}));
  const auto q = g.constant(Tensor::row({0.5, 0.5}));
  try {
    g.kl_div(p, q);
    FAIL("expected NotNormalized");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NotNormalized);
  }
  const auto r = g.constant(Tensor::row({0.5, 0.25, 0.25}));
  try {
    g.kl_div(q, r);
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::LengthMismatch);
  }
}

TEST_CASE("softmax+kl composite gradient matches finite differences") {
  Rng rng(512);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 6;
    const auto q_logits = random_vec(n, rng);
    auto eval = [&](std::span<const double> p, bool want_grad,
                    std::vector<double>* grad_out) -> double {
      Graph g;
      const auto x = g.leaf(Tensor::row({p.begin(), p.end()}), true);
      const auto probs = g.softmax(x);
      const auto q = g.softmax(g.constant(Tensor::row(q_logits)));
      const auto loss = g.kl_div(probs, q);
      if (want_grad) {
        g.backward(loss);
        *grad_out = g.grad(x).data;
      }
      return g.value(loss).data[0];
    };
    const auto point = random_vec(n, rng);
    const auto report = gradcheck(
        [&](std::span<const double> p) { return eval(p, false, nullptr); },
        [&](std::span<const double> p) {
          std::vector<double> grad;
          eval(p, true, &grad);
          return grad;
        },
        point);
    CHECK(report.pass);
  }
}

TEST_CASE("detach blocks gradient flow") {
  Graph g;
  const auto x = g.leaf(Tensor::scalar(2.0), true);
  const auto y = g.mul(g.detach(x), x);  // d/dboth = x only through the live path
  g.backward(y);
  CHECK(g.grad(x).data[0] == doctest::Approx(2.0));
}

TEST_CASE("adam converges on a quadratic bowl") {
  std::vector<double> w{5.0, -3.0};
  Adam opt(0.1);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> g{2.0 * w[0], 2.0 * w[1]};
    opt.step("w", w, g);
  }
  CHECK(std::abs(w[0]) < 1e-3);
  CHECK(std::abs(w[1]) < 1e-3);
}

TEST_CASE("ops are deterministic across repeated evaluation") {
  Rng rng(21);
  const auto data = random_vec(64, rng);
  auto run = [&]() {
    Graph g;
    const auto x = g.leaf(Tensor::matrix(8, 8, data), true);
    const auto y = g.mean(g.gelu(g.matmul(x, x)));
    g.backward(y);
    auto out = g.grad(x).data;
    out.push_back(g.value(y).data[0]);
    return out;
  };
  CHECK(run() == run());
}
