#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedtraj/common.hpp"
#include "fedtraj/kernels.hpp"

using namespace fedtraj;
namespace k = fedtraj::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return v;
}

// max |a-b| / max(1, |a|, |b|)
double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise kernels agree between scalar and avx2 backends") {
  if (!k::cpu_has_avx2()) return;
  Rng rng(11);
  for (std::size_t n : {std::size_t{1}, std::size_t{3}, std::size_t{4}, std::size_t{17}, std::size_t{1024}}) {
    const auto a = random_vec(n, rng);
    const auto b = random_vec(n, rng);
    std::vector<double> out_s(n), out_v(n);

    k::kScalarBackend.add(a.data(), b.data(), out_s.data(), n);
    k::kAvx2Backend.add(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    k::kScalarBackend.sub(a.data(), b.data(), out_s.data(), n);
    k::kAvx2Backend.sub(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    k::kScalarBackend.mul(a.data(), b.data(), out_s.data(), n);
    k::kAvx2Backend.mul(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    out_s = b;
    out_v = b;
    k::kScalarBackend.axpy(0.37, a.data(), out_s.data(), n);
    k::kAvx2Backend.axpy(0.37, a.data(), out_v.data(), n);
    CHECK(max_rel_diff(out_s, out_v) < 1e-15);

    k::kScalarBackend.scale(a.data(), -1.25, out_s.data(), n);
    k::kAvx2Backend.scale(a.data(), -1.25, out_v.data(), n);
    CHECK(out_s == out_v);
  }
}

TEST_CASE("reduction kernels agree within accumulation tolerance") {
  if (!k::cpu_has_avx2()) return;
  Rng rng(12);
  for (std::size_t n : {std::size_t{1}, std::size_t{5}, std::size_t{64}, std::size_t{4097}}) {
    const auto a = random_vec(n, rng);
    const auto b = random_vec(n, rng);
    CHECK(std::abs(k::kScalarBackend.dot(a.data(), b.data(), n) -
                   k::kAvx2Backend.dot(a.data(), b.data(), n)) < 1e-10);
    CHECK(std::abs(k::kScalarBackend.sum(a.data(), n) - k::kAvx2Backend.sum(a.data(), n)) < 1e-10);
    CHECK(std::abs(k::kScalarBackend.sq_norm(a.data(), n) - k::kAvx2Backend.sq_norm(a.data(), n)) <
          1e-10);
  }
}

TEST_CASE("matmul variants agree between backends") {
  if (!k::cpu_has_avx2()) return;
  Rng rng(13);
  const std::size_t m = 7, kk = 13, n = 9;
  const auto a = random_vec(m * kk, rng);
  const auto b = random_vec(kk * n, rng);
  std::vector<double> cs(m * n), cv(m * n);

  k::kScalarBackend.matmul_nn(a.data(), b.data(), cs.data(), m, kk, n);
  k::kAvx2Backend.matmul_nn(a.data(), b.data(), cv.data(), m, kk, n);
  CHECK(max_rel_diff(cs, cv) < 1e-13);

  const auto at = random_vec(kk * m, rng);
  k::kScalarBackend.matmul_tn(at.data(), b.data(), cs.data(), m, kk, n);
  k::kAvx2Backend.matmul_tn(at.data(), b.data(), cv.data(), m, kk, n);
  CHECK(max_rel_diff(cs, cv) < 1e-13);

  const auto bt = random_vec(n * kk, rng);
  k::kScalarBackend.matmul_nt(a.data(), bt.data(), cs.data(), m, kk, n);
  k::kAvx2Backend.matmul_nt(a.data(), bt.data(), cv.data(), m, kk, n);
  CHECK(max_rel_diff(cs, cv) < 1e-13);
}

TEST_CASE("matmul against a hand-rolled triple loop") {
  Rng rng(14);
  const std::size_t m = 3, kk = 4, n = 5;
  const auto a = random_vec(m * kk, rng);
  const auto b = random_vec(kk * n, rng);
  std::vector<double> expect(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < kk; ++p) expect[i * n + j] += a[i * kk + p] * b[p * n + j];
  std::vector<double> got(m * n);
  k::matmul_nn(a.data(), b.data(), got.data(), m, kk, n);
  CHECK(max_rel_diff(expect, got) < 1e-13);
}

TEST_CASE("gelu matches reference values") {
  // gelu(0) = 0
  double x = 0.0, y = 1.0;
  k::gelu(&x, &y, 1);
  CHECK(y == 0.0);
  // large positive ~ identity, large negative ~ 0
  x = 10.0;
  k::gelu(&x, &y, 1);
  CHECK(y == doctest::Approx(10.0).epsilon(1e-9));
  x = -10.0;
  k::gelu(&x, &y, 1);
  CHECK(std::abs(y) < 1e-6);
  // antisymmetry around the identity: gelu(x) - gelu(-x) = x
  x = 0.7;
  double yp = 0, yn = 0, xn = -0.7;
  k::gelu(&x, &yp, 1);
  k::gelu(&xn, &yn, 1);
  CHECK(yp - yn == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("backend dispatch honors force_backend") {
  k::force_backend("scalar");
  CHECK(k::backend_name() == "scalar");
  if (k::cpu_has_avx2()) {
    k::force_backend("avx2");
    CHECK(k::backend_name() == "avx2");
  }
  k::force_backend("auto");
}

TEST_CASE("all_finite flags NaN and infinity") {
  std::vector<double> v{1.0, 2.0, 3.0};
  CHECK(k::all_finite(v.data(), v.size()));
  v[1] = std::nan("");
  CHECK(!k::all_finite(v.data(), v.size()));
  v[1] = std::numeric_limits<double>::infinity();
  CHECK(!k::all_finite(v.data(), v.size()));
}
