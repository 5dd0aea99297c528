#include "conceptflow/transition.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"

namespace conceptflow {

namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() == 0 || m.rows() != m.cols())
    throw DimensionError(std::string(what) + ": expected a non-empty square matrix, got " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()));
}

}  // namespace

Matrix transition_matrix(const Matrix& p, double eps) {
  require_square(p, "transition_matrix");
  if (!(eps > 0)) throw ValidationError("transition_matrix: eps must be positive");
  if ((p.array() < 0).any() || (p.array() > 1).any() || !p.allFinite())
    throw ValidationError("transition_matrix: entries of P must lie in [0, 1]");
  Matrix t = p.array() + eps;
  t.array().colwise() /= t.rowwise().sum().array();
  return t;
}

Vector transition_mass(const Matrix& t) {
  require_square(t, "transition_mass");
  return t.colwise().sum().transpose();
}

Matrix compose(std::span<const Matrix> chain) {
  if (chain.empty()) throw ValidationError("compose: empty chain");
  Matrix out = chain.front();
  require_square(out, "compose");
  for (std::size_t i = 1; i < chain.size(); ++i) {
    if (chain[i].rows() != out.cols() || chain[i].cols() != out.cols())
      throw DimensionError("compose: matrix " + std::to_string(i) + " is " + std::to_string(chain[i].rows()) + "x" +
                           std::to_string(chain[i].cols()) + ", expected " + std::to_string(out.cols()) + "x" +
                           std::to_string(out.cols()));
    out = out * chain[i];
  }
  return out;
}

std::vector<FaithfulnessViolation> check_faithfulness(const Matrix& t, std::span<const int> k_src,
                                                      std::span<const int> k_dst, double tau_eff) {
  require_square(t, "check_faithfulness");
  const double floor = 1.0 / static_cast<double>(t.rows());
  if (!(tau_eff > floor) || tau_eff > 1)
    throw ValidationError("check_faithfulness: tau_eff must lie in (1/n_c, 1]");
  std::vector<bool> in_src(static_cast<std::size_t>(t.rows()), false), in_dst(in_src);
  for (int i : k_src) in_src.at(static_cast<std::size_t>(i)) = true;
  for (int j : k_dst) in_dst.at(static_cast<std::size_t>(j)) = true;
  std::vector<FaithfulnessViolation> out;
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j)
      if (t(i, j) >= tau_eff && !(in_src[static_cast<std::size_t>(i)] && in_dst[static_cast<std::size_t>(j)]))
        out.push_back({i, j, t(i, j)});
  return out;
}

SpectralReport spectral(const Matrix& t) {
  require_square(t, "spectral");
  Eigen::EigenSolver<Matrix> solver(t, false);
  if (solver.info() != Eigen::Success) throw NumericError("spectral: eigenvalue iteration did not converge");
  SpectralReport r;
  for (Index i = 0; i < solver.eigenvalues().size(); ++i) r.moduli.push_back(std::abs(solver.eigenvalues()[i]));
  std::sort(r.moduli.begin(), r.moduli.end(), std::greater<>());
  r.non_dominant_radius = r.moduli.size() > 1 ? r.moduli[1] : 0.0;
  return r;
}

PrototypeSet cluster_prototypes(std::span<const Matrix> matrices, int k_clusters, std::uint64_t seed, int max_iter) {
  if (k_clusters < 1) throw ValidationError("cluster_prototypes: k_clusters must be positive");
  if (matrices.size() < static_cast<std::size_t>(k_clusters))
    throw ValidationError("cluster_prototypes: " + std::to_string(matrices.size()) + " matrices for " +
                          std::to_string(k_clusters) + " clusters");
  if (max_iter < 1) throw ValidationError("cluster_prototypes: max_iter must be positive");
  const Index rows = matrices.front().rows(), cols = matrices.front().cols();
  const Index dim = rows * cols, n = static_cast<Index>(matrices.size());
  Matrix x(dim, n);
  for (Index i = 0; i < n; ++i) {
    const Matrix& m = matrices[static_cast<std::size_t>(i)];
    if (m.rows() != rows || m.cols() != cols) throw DimensionError("cluster_prototypes: matrices differ in shape");
    x.col(i) = m.reshaped();
  }
  const Vector sq = x.colwise().squaredNorm().transpose();

  // k-means++ seeding.
  Rng rng = make_rng(seed, "prototypes");
  Matrix centers(dim, k_clusters);
  centers.col(0) = x.col(std::uniform_int_distribution<Index>(0, n - 1)(rng));
  Vector d2 = (x.colwise() - centers.col(0)).colwise().squaredNorm().transpose();
  for (int c = 1; c < k_clusters; ++c) {
    Index pick = 0;
    const double total = d2.sum();
    if (total > 0) {
      std::discrete_distribution<Index> dist(d2.data(), d2.data() + n);
      pick = dist(rng);
    } else {
      pick = std::uniform_int_distribution<Index>(0, n - 1)(rng);
    }
    centers.col(c) = x.col(pick);
    d2 = d2.cwiseMin((x.colwise() - centers.col(c)).colwise().squaredNorm().transpose());
  }

  PrototypeSet out;
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  Vector best(n);
  for (int iter = 0; iter < max_iter; ++iter) {
    const Matrix dist = (-2.0 * (centers.transpose() * x)).colwise() + centers.colwise().squaredNorm().transpose();
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int arg = 0;
      for (int c = 1; c < k_clusters; ++c)
        if (dist(c, i) < dist(arg, i)) arg = c;
      best[i] = std::max(0.0, dist(arg, i) + sq[i]);
      if (assign[static_cast<std::size_t>(i)] != arg) changed = true;
      assign[static_cast<std::size_t>(i)] = arg;
    }
    Matrix sums = Matrix::Zero(dim, k_clusters);
    Vector counts = Vector::Zero(k_clusters);
    for (Index i = 0; i < n; ++i) {
      sums.col(assign[static_cast<std::size_t>(i)]) += x.col(i);
      counts[assign[static_cast<std::size_t>(i)]] += 1;
    }
    for (int c = 0; c < k_clusters; ++c)
      if (counts[c] > 0) centers.col(c) = sums.col(c) / counts[c];
    // Inertia with the updated centers (never above the pre-update value).
    double inertia = 0;
    for (Index i = 0; i < n; ++i) inertia += (x.col(i) - centers.col(assign[static_cast<std::size_t>(i)])).squaredNorm();
    out.inertia_history.push_back(inertia);
    out.iterations = iter + 1;
    if (!changed) break;
  }
  out.assignment = assign;
  out.inertia = out.inertia_history.back();
  for (int c = 0; c < k_clusters; ++c) out.centers.push_back(centers.col(c).reshaped(rows, cols));
  return out;
}

std::vector<Vector> average_transition_mass(const std::vector<std::vector<Matrix>>& per_boundary) {
  std::vector<Vector> out;
  for (std::size_t b = 0; b < per_boundary.size(); ++b) {
    if (per_boundary[b].empty())
      throw ValidationError("average_transition_mass: boundary " + std::to_string(b) + " has no matrices");
    Vector sum = Vector::Zero(per_boundary[b].front().cols());
    for (const Matrix& t : per_boundary[b]) {
      if (t.cols() != sum.size()) throw DimensionError("average_transition_mass: matrices differ in size");
      sum += transition_mass(t);
    }
    out.push_back(sum / static_cast<double>(per_boundary[b].size()));
  }
  return out;
}

double level_mass(const Vector& mass, const ConceptSet& set, int level) {
  if (mass.size() != static_cast<Index>(set.size())) throw DimensionError("level_mass: vector does not match concept set");
  const auto ids = set.ids_at_level(level);
  if (ids.empty()) throw IndexError("level_mass: no concepts at level " + std::to_string(level));
  double s = 0;
  for (int id : ids) s += mass[id];
  return s / static_cast<double>(ids.size());
}

std::string matrix_csv(const Matrix& m, const ConceptSet& set) {
  if (m.rows() != static_cast<Index>(set.size()) || m.cols() != m.rows())
    throw DimensionError("matrix_csv: matrix does not match concept set");
  std::ostringstream out;
  out << "from";
  for (const auto& c : set.concepts()) out << ",\"" << c.name << '"';
  out << "\n";
  char buf[32];
  for (Index i = 0; i < m.rows(); ++i) {
    out << '"' << set.name(static_cast<int>(i)) << '"';
    for (Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.10g", m(i, j));
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace conceptflow
