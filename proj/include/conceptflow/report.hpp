#pragma once

#include <span>
#include <string>
#include <vector>

#include "conceptflow/concepts.hpp"
#include "conceptflow/pruning.hpp"
#include "conceptflow/tensor.hpp"

// Deterministic SVG figures. Cells and bars carry class attributes
// ("cell", "bar") so tests and tools can count them.
namespace conceptflow {

// n_c x n_c grid in concept order with dashed separators between levels;
// fill opacity is proportional to the value relative to the matrix maximum.
std::string render_heatmap(const Matrix& m, const ConceptSet& set, const std::string& title = "");

// The top_n largest entries of `a`, largest first, labelled with concept names.
std::string render_attention_bars(const Vector& a, const ConceptSet& set, int top_n, const std::string& title = "");

// Accuracy versus realized prune ratio, one polyline per curve.
std::string render_prune_curves(std::span<const PruneCurve> curves, const std::string& title = "");

struct Series {
  std::string name;
  std::vector<double> values;
};

// Grouped bars: one group per category, one bar per series.
std::string render_grouped_bars(const std::vector<std::string>& categories, std::span<const Series> series,
                                const std::string& title = "");

}  // namespace conceptflow
