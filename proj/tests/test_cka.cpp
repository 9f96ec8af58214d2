#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ahdmil/cka.hpp"
#include "ahdmil/error.hpp"
#include "ahdmil/gradcheck.hpp"
#include "test_util.hpp"

using namespace ahdmil;
using testutil::random_tensor;

TEST(Chebyshev, BasisAtZero) {
  const double x[] = {0.0, 0.0};
  const Tensor t = chebyshev_basis(x, 3);
  ASSERT_EQ(t.shape(), (Shape{2, 4}));
  for (std::size_t q = 0; q < 2; ++q) {
    EXPECT_EQ(t.at(q, 0), 1.0);
    EXPECT_EQ(t.at(q, 1), 0.0);
    EXPECT_EQ(t.at(q, 2), -1.0);
    EXPECT_EQ(t.at(q, 3), 0.0);
  }
}

TEST(Chebyshev, InitialConditions) {
  for (double v : {-1.0, -0.3, 0.0, 0.77, 1.0}) {
    const Tensor t = chebyshev_basis(std::span<const double>(&v, 1), 1);
    EXPECT_EQ(t.at(0, 0), 1.0);
    EXPECT_EQ(t.at(0, 1), v);
  }
}

TEST(Chebyshev, CosineIdentity) {
  const double x = std::cos(0.3);
  EXPECT_NEAR(chebyshev_basis(std::span<const double>(&x, 1), 5).at(0, 5), std::cos(1.5), 1e-12);
  double worst = 0.0;
  std::vector<double> grid(1000);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = std::cos(std::numbers::pi * i / 999.0);
  const Tensor t = chebyshev_basis(grid, 16);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t k = 0; k <= 16; ++k) {
      worst = std::max(worst, std::abs(t.at(i, k) - std::cos(k * std::numbers::pi * i / 999.0)));
    }
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Chebyshev, BoundedOnDomain) {
  std::vector<double> x(200);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -1.0 + 2.0 * i / 199.0;
  const Tensor t = chebyshev_basis(x, 12);
  for (double v : t.data()) EXPECT_LE(std::abs(v), 1.0 + 1e-12);
}

TEST(Chebyshev, OutOfDomainRejected) {
  const double ok = 1.0 + 1e-10, bad = 1.01;
  EXPECT_NO_THROW(chebyshev_basis(std::span<const double>(&ok, 1), 3));
  EXPECT_THROW(chebyshev_basis(std::span<const double>(&bad, 1), 3), DomainError);
  EXPECT_THROW(chebyshev_basis(std::span<const double>(&ok, 1), 0), std::invalid_argument);
}

TEST(CkaHead, ForwardMatchesDirectSum) {
  const CkaHead head = init_xavier(6, 4, 3, 17);
  const Tensor e = random_tensor({6}, 18, -3, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t q = 0; q < 6; ++q) {
      const double t = std::tanh(e[q]);
      for (std::size_t k = 0; k <= 4; ++k) {
        // T_k(cos th) = cos(k th)
        s += std::cos(k * std::acos(t)) * head.coef[(c * 6 + q) * 5 + k];
      }
    }
    EXPECT_NEAR(cka_forward(e.data(), head, c), s, 1e-12);
  }
}

TEST(CkaHead, LargeInputsStayFinite) {
  const CkaHead head = init_xavier(4, 12, 2, 1);
  const double e[] = {1e6, -1e6, 50.0, -50.0};
  EXPECT_TRUE(std::isfinite(cka_forward(e, head, 0)));
}

TEST(CkaHead, XavierRangeAndVariance) {
  const std::size_t Q = 64, K = 12;
  const CkaHead head = init_xavier(Q, K, 2, 5);
  EXPECT_EQ(head.coef.shape(), (Shape{2, Q, K + 1}));
  const double a = std::sqrt(6.0 / (Q + K + 1));
  double var = 0.0;
  for (double v : head.coef.data()) {
    EXPECT_LE(std::abs(v), a);
    var += v * v;
  }
  var /= static_cast<double>(head.coef.size());
  EXPECT_NEAR(var / (a * a / 3.0), 1.0, 0.05);
}

TEST(CkaHead, GraphOpMatchesScalarAndGradChecks) {
  const std::size_t C = 3, Q = 5, K = 6;
  Tensor e = random_tensor({C, Q}, 31, -2, 2);
  Tensor coef = init_xavier(Q, K, C, 32).coef;
  ag::Graph g;
  const Tensor& logits = ag::cka_logits(g.constant(e), g.constant(coef)).value();
  for (std::size_t c = 0; c < C; ++c) {
    std::span<const double> row(e.data().data() + c * Q, Q);
    std::span<const double> block(coef.data().data() + c * Q * (K + 1), Q * (K + 1));
    EXPECT_NEAR(logits[c], cka_logit(row, block, K), 1e-12);
  }
  const Tensor w = random_tensor({C}, 33);
  auto f = [&](ag::Graph& g2) {
    return ag::sum(ag::cka_logits(g2.leaf(e), g2.leaf(coef)) * g2.constant(w));
  };
  EXPECT_LE(finite_diff_check(f, {{"e", &e}, {"coef", &coef}}).max_rel_error, 1e-6);
}
