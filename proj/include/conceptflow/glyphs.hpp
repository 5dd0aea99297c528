#pragma once

#include <string>
#include <vector>

#include "conceptflow/concepts.hpp"
#include "conceptflow/random.hpp"
#include "conceptflow/tensor.hpp"

// Procedural digit glyphs built from stroke primitives. Every glyph records
// the strokes it was drawn from, so its concept annotations are exact:
// stroke kinds give the level-1 concepts, composed structures the level-2
// concepts, and the digit identity the level-3 concept.
namespace conceptflow {

inline constexpr Index kGlyphSize = 28;

enum class StrokeKind { Vertical, Horizontal, Diagonal, Curve, Circle };

const char* stroke_concept_name(StrokeKind kind);

struct Point {
  double x = 0;
  double y = 0;
};

// A polyline in pixel coordinates (x right, y down).
struct Stroke {
  StrokeKind kind = StrokeKind::Vertical;
  std::vector<Point> points;
  double thickness = 1.5;
  double intensity = 0.7;
};

// Half-open pixel box [y0, y1) x [x0, x1).
struct Region {
  Index y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  Index area() const { return (y1 - y0) * (x1 - x0); }
  bool contains(Index y, Index x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
  bool operator==(const Region&) const = default;
};

// Where a level-2 structure sits in the image, for targeted interventions.
struct StructureMark {
  std::string concept_name;
  Region region;
};

struct GlyphRecord {
  int digit = 0;
  std::vector<Stroke> strokes;
  std::vector<StructureMark> structures;
  Region foreground;
};

// Concept names a digit's template switches on, in no particular order.
std::vector<std::string> digit_concept_names(int digit);
std::string digit_identity_name(int digit);

GlyphRecord make_glyph(int digit, Rng& rng);
// Anti-aliased rendering of the stroke list; pure function of its inputs.
Tensor render_glyph(const std::vector<Stroke>& strokes, Index height = kGlyphSize, Index width = kGlyphSize);
// Binary concept vector implied by the record itself (stroke kinds, structures, digit).
Vector glyph_concept_vector(const GlyphRecord& glyph, const ConceptSet& set);

}  // namespace conceptflow
