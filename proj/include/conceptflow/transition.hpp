#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conceptflow/concepts.hpp"
#include "conceptflow/tensor.hpp"

// Concept transition matrices: row-normalised Spearman matrices and the
// Markov-chain quantities derived from them.
namespace conceptflow {

inline constexpr double kDefaultEpsilon = 1e-6;

// T_ij = (P_ij + eps) / sum_t (P_it + eps)
Matrix transition_matrix(const Matrix& p, double eps = kDefaultEpsilon);

// Column sums of T.
Vector transition_mass(const Matrix& t);

// Left-to-right product of the chain.
Matrix compose(std::span<const Matrix> chain);

struct FaithfulnessViolation {
  int from = 0;
  int to = 0;
  double value = 0;
};

// Entries T_ij >= tau_eff with i outside k_src or j outside k_dst.
std::vector<FaithfulnessViolation> check_faithfulness(const Matrix& t, std::span<const int> k_src,
                                                      std::span<const int> k_dst, double tau_eff);
inline double default_tau_eff(Index n_concepts) { return 1.5 / static_cast<double>(n_concepts); }

struct SpectralReport {
  std::vector<double> moduli;      // eigenvalue moduli, descending
  double non_dominant_radius = 0;  // second-largest modulus
};

// Dense eigen-decomposition (Eigen's real Schur based solver).
SpectralReport spectral(const Matrix& t);

struct PrototypeSet {
  std::vector<Matrix> centers;
  std::vector<int> assignment;          // cluster of each input matrix
  double inertia = 0;
  std::vector<double> inertia_history;  // after each Lloyd iteration
  int iterations = 0;
};

// k-means on flattened matrices, squared Euclidean distance, k-means++ seeding.
// Distance ties go to the lower cluster index.
PrototypeSet cluster_prototypes(std::span<const Matrix> matrices, int k_clusters = 8, std::uint64_t seed = 0,
                                int max_iter = 300);

// Element-wise mean of transition_mass over each layer boundary's matrices.
std::vector<Vector> average_transition_mass(const std::vector<std::vector<Matrix>>& per_boundary);

// Mean of `mass` over the ids of one concept level.
double level_mass(const Vector& mass, const ConceptSet& set, int level);

std::string matrix_csv(const Matrix& m, const ConceptSet& set);

}  // namespace conceptflow
