#include "doctest.h"

#include "fixtures.hpp"
#include "mgclip/linalg.hpp"
#include "mgclip/random.hpp"

#include <algorithm>
#include <numeric>

using namespace mgclip;

namespace {

double orthonormality_error(const Matrix& q) {
  return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).norm();
}

double residual_against(const Matrix& basis, const Vector& x) { return (x - project_onto(x, basis)).norm(); }

}  // namespace

TEST_CASE("svd of the identity and of a diagonal matrix") {
  const auto id = svd(Matrix(Matrix::Identity(3, 3)));
  CHECK(id.s.isApprox(Vector::Ones(3)));

  Matrix d = Matrix::Zero(3, 3);
  d.diagonal() << 1.0, 3.0, 2.0;
  const auto r = svd(d);
  CHECK(r.s(0) == doctest::Approx(3.0));
  CHECK(r.s(1) == doctest::Approx(2.0));
  CHECK(r.s(2) == doctest::Approx(1.0));
}

TEST_CASE("svd reconstructs random matrices with orthonormal factors") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = gaussian_matrix(5, 4, 1.0, rng);
    const auto r = svd(m);
    CHECK((r.u * r.s.asDiagonal() * r.vt - m).norm() < 1e-6 * m.norm());
    CHECK(orthonormality_error(r.u) < 1e-8);
    for (Index i = 0; i + 1 < r.s.size(); ++i) CHECK(r.s(i) >= r.s(i + 1));
    CHECK(r.s.minCoeff() >= 0.0);
  }
}

TEST_CASE("svd rejects empty and non-finite input") {
  CHECK_THROWS_AS(svd(Matrix(0, 3)), std::invalid_argument);
  Matrix m = Matrix::Ones(2, 2);
  m(0, 1) = std::nan("");
  CHECK_THROWS_AS(svd(m), std::invalid_argument);
}

TEST_CASE("partial energy sums are monotone") {
  Rng rng(3);
  const auto r = svd(gaussian_matrix(9, 6, 1.0, rng));
  double prev = 0.0;
  for (Index i = 0; i < r.s.size(); ++i) {
    const double next = prev + r.s(i) * r.s(i);
    CHECK(next >= prev);
    prev = next;
  }
}

TEST_CASE("qr_basis of two independent and two dependent columns") {
  Matrix plane = Matrix::Zero(3, 2);
  plane(0, 0) = 1.0;
  plane(1, 1) = 1.0;
  const Matrix b = qr_basis(plane);
  CHECK(b.cols() == 2);
  CHECK(residual_against(b, plane.col(0)) < 1e-12);
  CHECK(residual_against(b, plane.col(1)) < 1e-12);

  Matrix line = Matrix::Zero(3, 2);
  line(0, 0) = 1.0;
  line(0, 1) = 2.0;
  const Matrix l = qr_basis(line);
  REQUIRE(l.cols() == 1);
  CHECK(std::abs(l(0, 0)) == doctest::Approx(1.0));
  CHECK(l.col(0).tail(2).norm() < 1e-12);
}

TEST_CASE("qr_basis recovers the rank of a composed rank-3 matrix") {
  Rng rng(5);
  const Matrix m = gaussian_matrix(8, 3, 1.0, rng) * gaussian_matrix(3, 5, 1.0, rng);
  const Matrix b = qr_basis(m);
  CHECK(b.cols() == 3);
  CHECK(orthonormality_error(b) < 1e-8);
  for (Index j = 0; j < m.cols(); ++j) CHECK(residual_against(b, m.col(j)) < 1e-8);
}

TEST_CASE("qr_basis spans the same space under column permutation") {
  Rng rng(8);
  const Matrix m = gaussian_matrix(7, 3, 1.0, rng) * gaussian_matrix(3, 6, 1.0, rng);
  std::vector<Index> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix p(7, 6);
    for (Index j = 0; j < 6; ++j) p.col(j) = m.col(perm[static_cast<std::size_t>(j)]);
    const Matrix b = qr_basis(p);
    CHECK(b.cols() == 3);
    for (Index j = 0; j < 6; ++j) CHECK(residual_against(b, m.col(j)) < 1e-8);
  }
}

TEST_CASE("qr_basis rejects the zero matrix") {
  CHECK_THROWS_WITH(qr_basis(Matrix(Matrix::Zero(4, 2))), "zero subspace");
}

TEST_CASE("project_onto: in-span, orthogonal and constructed decompositions") {
  Rng rng(21);
  const Matrix basis = qr_basis(gaussian_matrix(6, 2, 1.0, rng));
  const Vector a = basis * gaussian_matrix(2, 1, 1.0, rng);
  CHECK((project_onto(a, basis) - a).norm() < 1e-12);

  const Matrix full = random_orthogonal(6, rng);
  const Matrix b2 = full.leftCols(2);
  const Vector perp = full.col(4) * 1.7;
  CHECK(project_onto(perp, b2).norm() < 1e-12);

  const Vector in = b2 * Vector::LinSpaced(2, 0.5, -1.25);
  const Vector out = full.rightCols(4) * Vector::LinSpaced(4, 1.0, 2.0);
  CHECK((project_onto(Vector(in + out), b2) - in).norm() < 1e-12);
}

TEST_CASE("project_onto is idempotent") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix basis = qr_basis(gaussian_matrix(8, 3, 1.0, rng));
    const Vector x = gaussian_matrix(8, 1, 1.0, rng);
    const Vector p = project_onto(x, basis);
    CHECK((project_onto(p, basis) - p).norm() < 1e-10);
  }
}

TEST_CASE("cosine examples and properties") {
  const Vector v = Vector::LinSpaced(4, 1.0, 4.0);
  CHECK(cosine(v, v) == doctest::Approx(1.0));
  CHECK(cosine(Vector(-v), v) == doctest::Approx(-1.0));
  CHECK(cosine(Vector(Vector::Unit(3, 0)), Vector(Vector::Unit(3, 1))) == 0.0);

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector a = gaussian_matrix(5, 1, 1.0, rng);
    const Vector b = gaussian_matrix(5, 1, 1.0, rng);
    CHECK(cosine(a, b) == doctest::Approx(cosine(b, a)).epsilon(1e-14));
    CHECK(cosine(Vector(3.5 * a), b) == doctest::Approx(cosine(a, b)).epsilon(1e-14));
    CHECK(std::abs(cosine(a, b)) <= 1.0);
  }
  CHECK_THROWS_AS(cosine(Vector(Vector::Zero(3)), v.head(3)), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and -inf entries get zero") {
  Rng rng(6);
  Matrix logits = gaussian_matrix(10, 5, 3.0, rng);
  logits(2, 3) = -std::numeric_limits<double>::infinity();
  const Matrix p = softmax_rows(logits);
  for (Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-10);
  CHECK(p(2, 3) == 0.0);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  Vector v(4);
  v << 1.0, 3.0, 3.0, 2.0;
  CHECK(argmax(v) == 1);
}

TEST_CASE("normalize_rows gives unit rows and rejects zero rows") {
  Rng rng(9);
  const Matrix n = normalize_rows(gaussian_matrix(6, 3, 2.0, rng));
  for (Index i = 0; i < n.rows(); ++i) CHECK(n.row(i).norm() == doctest::Approx(1.0));
  CHECK_THROWS_AS(normalize_rows(Matrix(Matrix::Zero(2, 2))), std::invalid_argument);
}
