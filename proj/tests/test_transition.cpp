#include <doctest.h>

#include <algorithm>
#include <complex>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/transition.hpp"

using namespace conceptflow;

namespace {

Matrix random_stochastic(Index n, Rng& rng) {
  Matrix m(n, n);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, 0.01, 1.0);
  m.array().colwise() /= m.rowwise().sum().array();
  return m;
}

Matrix random_p(Index n, Rng& rng) {
  Matrix m(n, n);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < 0.3 ? uniform01(rng) : 0.0;
  return m;
}

double row_error(const Matrix& t) { return (t.rowwise().sum().array() - 1.0).abs().maxCoeff(); }

// Roots of x^3 + a x^2 + b x + c by Cardano's formula.
std::vector<std::complex<double>> cubic_roots(double a, double b, double c) {
  using C = std::complex<double>;
  const double p = b - a * a / 3, q = 2 * a * a * a / 27 - a * b / 3 + c;
  const C disc = std::sqrt(C(q * q / 4 + p * p * p / 27));
  C u = std::pow(-q / 2 + disc, 1.0 / 3);
  if (std::abs(u) < 1e-14) u = std::pow(-q / 2 - disc, 1.0 / 3);
  const C w(-0.5, std::sqrt(3.0) / 2);
  std::vector<C> roots;
  for (int k = 0; k < 3; ++k) {
    const C uk = u * std::pow(w, k);
    const C vk = std::abs(uk) < 1e-14 ? C(0) : -p / (3.0 * uk);
    roots.push_back(uk + vk - a / 3);
  }
  return roots;
}

}  // namespace

TEST_CASE("transition_matrix applies row normalization with epsilon") {
  const Matrix zero = transition_matrix(Matrix::Zero(5, 5));
  CHECK((zero.array() - 0.2).abs().maxCoeff() < 1e-15);

  Matrix p = Matrix::Zero(3, 3);
  p(0, 0) = 0.8;
  const Matrix t = transition_matrix(p, 1e-6);
  CHECK(t(0, 0) == doctest::Approx((0.8 + 1e-6) / (0.8 + 3e-6)).epsilon(1e-15));
  CHECK(t(0, 1) == doctest::Approx(1e-6 / (0.8 + 3e-6)).epsilon(1e-12));
  CHECK(t(0, 0) > 0.99999);
  CHECK(row_error(t) < 1e-15);

  Rng rng = make_rng(1, "t");
  Matrix q = random_p(7, rng);
  q.row(2).setConstant(0.4);
  q(2, 2) = 0.1;
  Matrix scaled = q;
  scaled.row(2) *= 2.0;
  CHECK((transition_matrix(q, 1e-12).row(2) - transition_matrix(scaled, 1e-12).row(2)).cwiseAbs().maxCoeff() < 1e-6);

  for (int trial = 0; trial < 50; ++trial) {
    const Matrix tt = transition_matrix(random_p(21, rng));
    CHECK(row_error(tt) < 1e-9);
    CHECK((tt.array() > 0).all());
  }
  Matrix bad = Matrix::Zero(3, 3);
  bad(1, 1) = 1.5;
  CHECK_THROWS_AS(transition_matrix(bad), ValidationError);
  CHECK_THROWS_AS(transition_matrix(Matrix::Zero(3, 3), 0.0), ValidationError);
  CHECK_THROWS_AS(transition_matrix(Matrix::Zero(3, 4)), DimensionError);
}

TEST_CASE("transition mass") {
  const Matrix uniform = Matrix::Constant(4, 4, 0.25);
  CHECK((transition_mass(uniform).array() - 1.0).abs().maxCoeff() < 1e-15);
  Matrix onehot = Matrix::Zero(4, 4);
  onehot(0, 2) = onehot(1, 2) = onehot(2, 0) = onehot(3, 3) = 1;
  const Vector m = transition_mass(onehot);
  CHECK(m == (Vector(4) << 1, 0, 2, 1).finished());
  Rng rng = make_rng(2, "t");
  const Matrix t = random_stochastic(9, rng);
  const Vector mass = transition_mass(t);
  for (Index j = 0; j < 9; ++j) {
    double s = 0;
    for (Index i = 0; i < 9; ++i) s += t(i, j);
    CHECK(std::abs(mass[j] - s) < 1e-14);
  }
  CHECK(std::abs(mass.sum() - 9.0) < 1e-8);
}

TEST_CASE("composition stays row-stochastic and matches a loop product") {
  Rng rng = make_rng(3, "t");
  const Matrix a = random_stochastic(6, rng), b = random_stochastic(6, rng), c = random_stochastic(6, rng);
  const std::vector<Matrix> one{a};
  CHECK(compose(one) == a);
  const Matrix u = Matrix::Constant(6, 6, 1.0 / 6);
  const std::vector<Matrix> uu{u, u};
  CHECK((compose(uu) - u).cwiseAbs().maxCoeff() < 1e-15);
  const std::vector<Matrix> chain{a, b, c};
  const Matrix prod = compose(chain);
  for (Index i = 0; i < 6; ++i)
    for (Index l = 0; l < 6; ++l) {
      double s = 0;
      for (Index j = 0; j < 6; ++j)
        for (Index k = 0; k < 6; ++k) s += a(i, j) * b(j, k) * c(k, l);
      CHECK(std::abs(prod(i, l) - s) < 1e-14);
    }
  CHECK(row_error(prod) < 1e-8);
  for (int len = 2; len <= 5; ++len) {
    std::vector<Matrix> ch;
    for (int i = 0; i < len; ++i) ch.push_back(transition_matrix(random_p(21, rng)));
    CHECK(row_error(compose(ch)) < 1e-8);
  }
  const std::vector<Matrix> bad{a, Matrix::Identity(5, 5)};
  CHECK_THROWS_AS(compose(bad), DimensionError);
  CHECK_THROWS_AS(compose(std::vector<Matrix>{}), ValidationError);
}

TEST_CASE("faithfulness") {
  const int nc = 21;
  Rng rng = make_rng(4, "t");
  const std::vector<int> ks{0, 4, 9, 12}, kd{1, 4, 15};
  Matrix p = Matrix::Zero(nc, nc);
  for (int i : ks)
    for (int j : kd)
      if (i != j) p(i, j) = uniform01(rng);
  const Matrix t = transition_matrix(p);
  CHECK(check_faithfulness(t, ks, kd, default_tau_eff(nc)).empty());
  Matrix adv = t;
  adv.row(3).setConstant(0.1 / (nc - 1));
  adv(3, 7) = 0.9;
  const auto v = check_faithfulness(adv, ks, kd, default_tau_eff(nc));
  REQUIRE(v.size() == 1);
  CHECK(v[0].from == 3);
  CHECK(v[0].to == 7);
  CHECK_THROWS_AS(check_faithfulness(t, ks, kd, 1.0 / nc), ValidationError);
  CHECK_THROWS_AS(check_faithfulness(t, ks, kd, 1.5), ValidationError);
}

TEST_CASE("spectral moduli") {
  const auto u = spectral(Matrix::Constant(5, 5, 0.2));
  CHECK(std::abs(u.moduli[0] - 1) < 1e-12);
  CHECK(u.non_dominant_radius < 1e-8);
  CHECK(std::abs(spectral(Matrix::Identity(4, 4)).non_dominant_radius - 1) < 1e-12);

  Rng rng = make_rng(5, "t");
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix t = random_stochastic(3, rng);
    // Characteristic polynomial x^3 - tr x^2 + (sum of principal 2x2 minors) x - det.
    const double tr = t.trace();
    const double minors = t(0, 0) * t(1, 1) - t(0, 1) * t(1, 0) + t(0, 0) * t(2, 2) - t(0, 2) * t(2, 0) +
                          t(1, 1) * t(2, 2) - t(1, 2) * t(2, 1);
    const double det = t(0, 0) * (t(1, 1) * t(2, 2) - t(1, 2) * t(2, 1)) -
                       t(0, 1) * (t(1, 0) * t(2, 2) - t(1, 2) * t(2, 0)) +
                       t(0, 2) * (t(1, 0) * t(2, 1) - t(1, 1) * t(2, 0));
    std::vector<double> expect;
    for (auto r : cubic_roots(-tr, minors, -det)) expect.push_back(std::abs(r));
    std::sort(expect.begin(), expect.end(), std::greater<>());
    const auto s = spectral(t);
    REQUIRE(s.moduli.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s.moduli[static_cast<std::size_t>(i)] - expect[static_cast<std::size_t>(i)]) < 1e-6);
    CHECK(std::abs(s.moduli[0] - 1) < 1e-6);
  }
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = spectral(transition_matrix(random_p(21, rng)));
    CHECK(std::abs(s.moduli[0] - 1) < 1e-6);
    CHECK(s.moduli[0] <= 1 + 1e-6);
    CHECK(s.non_dominant_radius >= 0);
    CHECK(s.non_dominant_radius <= 1 + 1e-6);
  }
}

TEST_CASE("prototype clustering") {
  Rng rng = make_rng(6, "t");
  std::vector<Matrix> ms;
  for (int i = 0; i < 10; ++i) ms.push_back(random_stochastic(4, rng));
  const auto one = cluster_prototypes(ms, 1, 3);
  Matrix mean = Matrix::Zero(4, 4);
  for (const auto& m : ms) mean += m / 10.0;
  CHECK((one.centers[0] - mean).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(row_error(one.centers[0]) < 1e-6);

  // Two separated groups.
  std::vector<Matrix> groups;
  for (int i = 0; i < 20; ++i) {
    Matrix m = Matrix::Constant(4, 4, 0.01);
    m.col(i < 10 ? 0 : 3).setConstant(0.97);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] += uniform(rng, 0, 1e-3);
    groups.push_back(m);
  }
  const auto two = cluster_prototypes(groups, 2, 9);
  for (int i = 1; i < 10; ++i) CHECK(two.assignment[static_cast<std::size_t>(i)] == two.assignment[0]);
  for (int i = 11; i < 20; ++i) CHECK(two.assignment[static_cast<std::size_t>(i)] == two.assignment[10]);
  CHECK(two.assignment[0] != two.assignment[10]);

  std::vector<Matrix> many;
  for (int i = 0; i < 200; ++i) many.push_back(transition_matrix(random_p(6, rng)));
  const auto k8 = cluster_prototypes(many, 8, 11);
  for (std::size_t i = 1; i < k8.inertia_history.size(); ++i) CHECK(k8.inertia_history[i] <= k8.inertia_history[i - 1] + 1e-9);
  // Baseline: inertia of a random assignment with member-mean centers.
  std::vector<Matrix> sums(8, Matrix::Zero(6, 6));
  std::vector<int> counts(8, 0), rand_assign;
  for (std::size_t i = 0; i < many.size(); ++i) {
    const int c = std::uniform_int_distribution<int>(0, 7)(rng);
    rand_assign.push_back(c);
    sums[static_cast<std::size_t>(c)] += many[i];
    ++counts[static_cast<std::size_t>(c)];
  }
  double baseline = 0;
  for (std::size_t i = 0; i < many.size(); ++i) {
    const auto c = static_cast<std::size_t>(rand_assign[i]);
    baseline += (many[i] - sums[c] / counts[c]).squaredNorm();
  }
  CHECK(k8.inertia <= baseline);
  for (const auto& c : k8.centers) CHECK(row_error(c) < 1e-6);

  const auto again = cluster_prototypes(many, 8, 11);
  CHECK(again.assignment == k8.assignment);
  CHECK(again.inertia == k8.inertia);
  CHECK_THROWS_AS(cluster_prototypes(std::span(many).first(3), 4, 1), ValidationError);
}

TEST_CASE("average transition mass and level mass") {
  Rng rng = make_rng(7, "t");
  const Matrix t = transition_matrix(random_p(21, rng));
  const auto single = average_transition_mass({{t}});
  CHECK((single[0] - transition_mass(t)).cwiseAbs().maxCoeff() == 0.0);
  const auto same = average_transition_mass({{t, t, t}});
  CHECK((same[0] - transition_mass(t)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS_AS(average_transition_mass({{}}), ValidationError);
  const ConceptSet set = bundled_cmnist_concepts();
  Vector mass = Vector::Zero(21);
  for (int id : set.top_level_ids()) mass[id] = 1.0;
  CHECK(level_mass(mass, set, 3) == doctest::Approx(1.0));
  CHECK(level_mass(mass, set, 1) == 0.0);
  const std::string csv = matrix_csv(t, set);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 22);
}
