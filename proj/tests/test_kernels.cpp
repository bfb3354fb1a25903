#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <vector>

#include "dime/kernels.hpp"
#include "dime/rng.hpp"

using namespace dime;

namespace {

std::vector<float> random_vec(Rng& rng, int n) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

// Textbook i-j-p triple loop, deliberately structured differently from the
// kernels (scalar accumulator in a double), as an independent oracle.
std::vector<double> naive_nn(const std::vector<float>& a, const std::vector<float>& b, int m,
                             int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(a[static_cast<std::size_t>(i) * k + p]) *
               static_cast<double>(b[static_cast<std::size_t>(p) * n + j]);
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  return c;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("matmul_nn matches a naive oracle") {
  Rng rng(1);
  int m = 9, k = 17, n = 5;
  auto a = random_vec(rng, m * k);
  auto b = random_vec(rng, k * n);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  kernels::matmul_nn_serial(a.data(), b.data(), c.data(), m, k, n);
  auto want = naive_nn(a, b, m, k, n);
  for (std::size_t i = 0; i < c.size(); ++i)
    CHECK(static_cast<double>(c[i]) == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("matmul_nn with the identity returns the input") {
  Rng rng(2);
  int m = 4, k = 4;
  auto a = random_vec(rng, m * k);
  std::vector<float> eye(static_cast<std::size_t>(k) * k, 0.0f);
  for (int i = 0; i < k; ++i) eye[static_cast<std::size_t>(i) * k + i] = 1.0f;
  std::vector<float> c(a.size());
  kernels::matmul_nn_serial(a.data(), eye.data(), c.data(), m, k, k);
  CHECK(bitwise_equal(a, c));
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposition through matmul_nn") {
  Rng rng(3);
  int m = 6, k = 11, n = 7;
  auto a = random_vec(rng, m * k);
  auto b_t = random_vec(rng, n * k);  // B stored as [n x k]
  std::vector<float> b(static_cast<std::size_t>(k) * n);
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < n; ++j)
      b[static_cast<std::size_t>(p) * n + j] = b_t[static_cast<std::size_t>(j) * k + p];

  std::vector<float> via_nt(static_cast<std::size_t>(m) * n);
  kernels::matmul_nt_serial(a.data(), b_t.data(), via_nt.data(), m, k, n);
  auto want = naive_nn(a, b, m, k, n);
  for (std::size_t i = 0; i < via_nt.size(); ++i)
    CHECK(static_cast<double>(via_nt[i]) == doctest::Approx(want[i]).epsilon(1e-5));

  // A^T * C where A is [m x k]: result is [k x n].
  auto c2 = random_vec(rng, m * n);
  std::vector<float> via_tn(static_cast<std::size_t>(k) * n);
  kernels::matmul_tn_serial(a.data(), c2.data(), via_tn.data(), m, k, n);
  std::vector<float> a_t(static_cast<std::size_t>(k) * m);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      a_t[static_cast<std::size_t>(p) * m + i] = a[static_cast<std::size_t>(i) * k + p];
  auto want_tn = naive_nn(a_t, c2, k, m, n);
  for (std::size_t i = 0; i < via_tn.size(); ++i)
    CHECK(static_cast<double>(via_tn[i]) == doctest::Approx(want_tn[i]).epsilon(1e-5));
}

TEST_CASE("parallel kernels are bitwise identical to the serial references") {
  Rng rng(4);
  // Big enough that the flop count clears the parallel grain threshold.
  struct Case {
    int m, k, n;
  };
  for (Case cs : {Case{64, 64, 64}, Case{129, 65, 33}, Case{1, 100000, 1}, Case{3, 5, 7}}) {
    auto a = random_vec(rng, cs.m * cs.k);
    auto b_nn = random_vec(rng, cs.k * cs.n);
    auto b_nt = random_vec(rng, cs.n * cs.k);
    auto b_tn = random_vec(rng, cs.m * cs.n);
    std::vector<float> r_nn(static_cast<std::size_t>(cs.m) * cs.n);
    std::vector<float> r_nt(r_nn.size());
    std::vector<float> r_tn(static_cast<std::size_t>(cs.k) * cs.n);
    kernels::matmul_nn_serial(a.data(), b_nn.data(), r_nn.data(), cs.m, cs.k, cs.n);
    kernels::matmul_nt_serial(a.data(), b_nt.data(), r_nt.data(), cs.m, cs.k, cs.n);
    kernels::matmul_tn_serial(a.data(), b_tn.data(), r_tn.data(), cs.m, cs.k, cs.n);

    for (int threads : {1, 2, 3, 8, 0}) {
      kernels::set_max_threads(threads);
      std::vector<float> p_nn(r_nn.size()), p_nt(r_nt.size()), p_tn(r_tn.size());
      kernels::matmul_nn(a.data(), b_nn.data(), p_nn.data(), cs.m, cs.k, cs.n);
      kernels::matmul_nt(a.data(), b_nt.data(), p_nt.data(), cs.m, cs.k, cs.n);
      kernels::matmul_tn(a.data(), b_tn.data(), p_tn.data(), cs.m, cs.k, cs.n);
      CHECK(bitwise_equal(r_nn, p_nn));
      CHECK(bitwise_equal(r_nt, p_nt));
      CHECK(bitwise_equal(r_tn, p_tn));
    }
  }
  kernels::set_max_threads(0);
}

TEST_CASE("double kernels are bitwise thread-count independent too") {
  Rng rng(5);
  int m = 48, k = 48, n = 48;
  std::vector<double> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n);
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  std::vector<double> serial(static_cast<std::size_t>(m) * n), par(serial.size());
  kernels::matmul_nn_serial(a.data(), b.data(), serial.data(), m, k, n);
  for (int threads : {2, 5, 0}) {
    kernels::set_max_threads(threads);
    kernels::matmul_nn(a.data(), b.data(), par.data(), m, k, n);
    CHECK(std::memcmp(serial.data(), par.data(), serial.size() * sizeof(double)) == 0);
  }
  kernels::set_max_threads(0);
}

TEST_CASE("threads_for respects the grain size and the runtime cap") {
  kernels::set_max_threads(0);
  const int hw = kernels::max_threads();  // hardware ceiling for this host
  CHECK(hw >= 1);
  kernels::set_max_threads(4);
  CHECK(kernels::max_threads() == std::min(4, hw));
  CHECK(kernels::threads_for(16) == 1);  // tiny work stays serial
  CHECK(kernels::threads_for(1ll << 40) <= 4);
  kernels::set_max_threads(1);
  CHECK(kernels::threads_for(1ll << 40) == 1);
  kernels::set_max_threads(0);
  CHECK(kernels::threads_for(1ll << 40) >= 1);
}
