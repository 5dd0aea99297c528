#include "conceptflow/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "conceptflow/errors.hpp"
#include "conceptflow/random.hpp"

namespace conceptflow {

const char* to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::Conceptual: return "conceptual";
    case PruneMethod::NonConceptual: return "nonconceptual";
    case PruneMethod::L1: return "l1";
  }
  return "l1";
}

PruneMethod parse_prune_method(const std::string& text) {
  for (auto m : {PruneMethod::Conceptual, PruneMethod::NonConceptual, PruneMethod::L1})
    if (text == to_string(m)) return m;
  if (text == "non-conceptual") return PruneMethod::NonConceptual;
  throw ParseError("unknown prune method '" + text + "' (expected conceptual, nonconceptual or l1)");
}

Index total_connections(const ModelConfig& config) {
  Index total = 0;
  for (int l = 1; l < config.layer_count(); ++l)
    total += Index{config.layer_channels[static_cast<std::size_t>(l)]} * config.layer_channels[static_cast<std::size_t>(l - 1)];
  return total;
}

namespace {

void finish(PruneMask& mask, const ModelConfig& config) {
  std::sort(mask.entries.begin(), mask.entries.end());
  mask.entries.erase(std::unique(mask.entries.begin(), mask.entries.end()), mask.entries.end());
  const Index total = total_connections(config);
  mask.ratio = total == 0 ? 0.0 : static_cast<double>(mask.entries.size()) / static_cast<double>(total);
}

std::size_t count_for_ratio(double ratio, Index total) {
  if (!(ratio >= 0 && ratio <= 1)) throw ValidationError("target ratio must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
}

}  // namespace

PruneMask conceptual_mask(std::span<const PathwayRecord> records, double tau, const ConceptSet& set,
                          const ModelConfig& config) {
  PruneMask mask;
  mask.method = PruneMethod::Conceptual;
  mask.parameter = tau;
  for (const auto& r : records)
    if (r.label_at(tau, set) != PathwayLabel::None) mask.entries.push_back({r.layer, r.dst, r.src});
  finish(mask, config);
  return mask;
}

PruneMask nonconceptual_mask(std::span<const PathwayRecord> records, double tau, double target_ratio,
                             std::uint64_t seed, const ConceptSet& set, const ModelConfig& config) {
  PruneMask mask;
  mask.method = PruneMethod::NonConceptual;
  mask.parameter = target_ratio;
  const std::size_t want = count_for_ratio(target_ratio, total_connections(config));
  std::vector<Connection> pool;
  for (const auto& r : records)
    if (r.label_at(tau, set) == PathwayLabel::None) pool.push_back({r.layer, r.dst, r.src});
  std::sort(pool.begin(), pool.end());
  if (pool.size() < want)
    throw ValidationError("non-conceptual pruning: only " + std::to_string(pool.size()) +
                          " pathway-free connections at tau " + std::to_string(tau) + ", " + std::to_string(want) +
                          " needed");
  Rng rng = make_rng(seed, "prune");
  std::shuffle(pool.begin(), pool.end(), rng);
  mask.entries.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  finish(mask, config);
  return mask;
}

PruneMask l1_mask(const Checkpoint& ck, double target_ratio) {
  PruneMask mask;
  mask.method = PruneMethod::L1;
  mask.parameter = target_ratio;
  const std::size_t want = count_for_ratio(target_ratio, total_connections(ck.config));
  struct Scored {
    double norm;
    Connection c;
  };
  std::vector<Scored> all;
  for (int l = 1; l < ck.config.layer_count(); ++l) {
    const Tensor& k = ck.layers[static_cast<std::size_t>(l)].kernels;
    for (int j = 0; j < k.dim(0); ++j)
      for (int i = 0; i < k.dim(1); ++i) {
        double s = 0;
        for (Index ky = 0; ky < 3; ++ky)
          for (Index kx = 0; kx < 3; ++kx) s += std::abs(k(j, i, ky, kx));
        all.push_back({s, {l, j, i}});
      }
  }
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) {
    if (a.norm != b.norm) return a.norm < b.norm;
    return a.c < b.c;
  });
  for (std::size_t t = 0; t < want; ++t) mask.entries.push_back(all[t].c);
  finish(mask, ck.config);
  return mask;
}

Checkpoint apply_mask(const Checkpoint& ck, const PruneMask& mask) {
  Checkpoint out = ck;
  for (const auto& c : mask.entries) {
    if (c.boundary < 1 || c.boundary >= ck.config.layer_count())
      throw IndexError("prune entry boundary " + std::to_string(c.boundary) + " out of range");
    Tensor& k = out.layers[static_cast<std::size_t>(c.boundary)].kernels;
    if (c.out < 0 || c.out >= k.dim(0) || c.in < 0 || c.in >= k.dim(1))
      throw IndexError("prune entry (" + std::to_string(c.boundary) + ", " + std::to_string(c.out) + ", " +
                       std::to_string(c.in) + ") out of range for kernels " + shape_string(k.shape()));
    for (Index ky = 0; ky < 3; ++ky)
      for (Index kx = 0; kx < 3; ++kx) k(c.out, c.in, ky, kx) = 0.0;
  }
  return out;
}

PruneCurve sweep(const Checkpoint& ck, PruneMethod method, std::span<const double> grid, const Dataset& eval_set,
                 std::uint64_t seed, const SweepInputs& inputs) {
  if (grid.empty()) throw ValidationError("sweep: empty grid");
  if (method != PruneMethod::L1 && (!inputs.concepts || inputs.records.empty()))
    throw ValidationError("sweep: pathway records are required for pathway-based pruning");
  if (!inputs.matched_ratios.empty() && inputs.matched_ratios.size() != grid.size())
    throw ValidationError("sweep: matched_ratios must align with the grid");
  PruneCurve curve{method, seed, {}};
  for (std::size_t g = 0; g < grid.size(); ++g) {
    PruneMask mask;
    switch (method) {
      case PruneMethod::Conceptual:
        mask = conceptual_mask(inputs.records, grid[g], *inputs.concepts, ck.config);
        break;
      case PruneMethod::NonConceptual: {
        const double ratio = inputs.matched_ratios.empty()
                                 ? conceptual_mask(inputs.records, grid[g], *inputs.concepts, ck.config).ratio
                                 : inputs.matched_ratios[g];
        mask = nonconceptual_mask(inputs.records, grid[g], ratio, seed, *inputs.concepts, ck.config);
        mask.parameter = grid[g];
        break;
      }
      case PruneMethod::L1:
        mask = l1_mask(ck, grid[g]);
        break;
    }
    curve.points.push_back({grid[g], mask.ratio, evaluate(apply_mask(ck, mask), eval_set)});
  }
  return curve;
}

std::vector<CensusRow> pathway_type_census(std::span<const PathwayRecord> records, std::span<const double> taus,
                                           const ConceptSet& set) {
  std::vector<CensusRow> out;
  for (double tau : taus) {
    CensusRow row{tau, 0, 0, 0};
    for (const auto& r : records) {
      switch (r.label_at(tau, set)) {
        case PathwayLabel::Forward: ++row.forward; break;
        case PathwayLabel::Backward: ++row.backward; break;
        case PathwayLabel::Bidirectional: ++row.bidirectional; break;
        case PathwayLabel::None: break;
      }
    }
    out.push_back(row);
  }
  return out;
}

std::vector<ImpactRow> per_type_impact(const Checkpoint& ck, std::span<const PathwayRecord> records,
                                       std::span<const double> taus, const Dataset& eval_set, const ConceptSet& set) {
  const double baseline = evaluate(ck, eval_set);
  std::vector<ImpactRow> out;
  for (double tau : taus) {
    for (auto type : {PathwayLabel::Forward, PathwayLabel::Backward, PathwayLabel::Bidirectional}) {
      PruneMask mask;
      for (const auto& r : records)
        if (r.label_at(tau, set) == type) mask.entries.push_back({r.layer, r.dst, r.src});
      ImpactRow row{tau, type, mask.entries.size(), baseline, 0.0, mask.entries.empty()};
      if (!row.omitted) {
        finish(mask, ck.config);
        row.accuracy = evaluate(apply_mask(ck, mask), eval_set);
        row.drop_per_pathway = (baseline - row.accuracy) / static_cast<double>(row.count);
      }
      out.push_back(row);
    }
  }
  return out;
}

std::string mask_jsonl(const PruneMask& mask) {
  std::string out;
  for (const auto& c : mask.entries)
    out += "{\"l\":" + std::to_string(c.boundary) + ",\"j\":" + std::to_string(c.out) + ",\"i\":" +
           std::to_string(c.in) + "}\n";
  return out;
}

std::string curve_csv(std::span<const PruneCurve> curves) {
  std::ostringstream out;
  out << "method,tau_or_ratio,realized_ratio,accuracy\n";
  char buf[128];
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "%s,%.6g,%.10g,%.10g\n", to_string(c.method), p.parameter, p.ratio, p.accuracy);
      out << buf;
    }
  return out.str();
}

}  // namespace conceptflow
