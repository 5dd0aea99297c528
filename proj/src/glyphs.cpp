#include "conceptflow/glyphs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "conceptflow/errors.hpp"

namespace conceptflow {

namespace {

constexpr double kPi = std::numbers::pi;

struct UnitStroke {
  StrokeKind kind;
  std::vector<Point> points;
};

struct UnitStructure {
  std::string concept_name;
  Point lo;  // unit-box corners of the structure region
  Point hi;
};

struct Template {
  std::vector<UnitStroke> strokes;
  std::vector<UnitStructure> structures;
};

// Draws template coordinates with a small per-glyph perturbation.
class Jitter {
 public:
  Jitter(Rng& rng, double scale) : rng_(rng), scale_(scale) {}
  double operator()(double v, double amount = 0.025) {
    return scale_ > 0 ? v + uniform(rng_, -amount * scale_, amount * scale_) : v;
  }

 private:
  Rng& rng_;
  double scale_;
};

UnitStroke line(StrokeKind kind, Point a, Point b) { return {kind, {a, b}}; }

UnitStroke arc(StrokeKind kind, Point c, double rx, double ry, double deg0, double deg1) {
  const int segments = kind == StrokeKind::Circle ? 28 : std::max(6, static_cast<int>(std::abs(deg1 - deg0) / 12.0));
  UnitStroke s{kind, {}};
  for (int i = 0; i <= segments; ++i) {
    const double t = (deg0 + (deg1 - deg0) * i / segments) * kPi / 180.0;
    s.points.push_back({c.x + rx * std::cos(t), c.y + ry * std::sin(t)});
  }
  return s;
}

UnitStructure around(const std::string& name, Point p, double r) { return {name, {p.x - r, p.y - r}, {p.x + r, p.y + r}}; }

// Unit box: x right, y down, glyph roughly in [0.15, 0.85] x [0.08, 0.92].
Template digit_template(int digit, Jitter& j) {
  using K = StrokeKind;
  Template t;
  switch (digit) {
    case 0: {
      const Point c{j(0.5), j(0.5)};
      const double rx = j(0.27), ry = j(0.40);
      t.strokes = {arc(K::Circle, c, rx, ry, 0, 360)};
      t.structures = {{"has closed loop", {c.x - rx, c.y - ry}, {c.x + rx, c.y + ry}}};
      break;
    }
    case 1: {
      const Point top{j(0.56), j(0.1)}, bottom{j(0.56), j(0.9)}, flag{j(0.34), j(0.3)};
      t.strokes = {line(K::Vertical, top, bottom), line(K::Diagonal, flag, top)};
      t.structures = {around("has cornered shape", top, 0.16), around("has open shape", bottom, 0.14)};
      break;
    }
    case 2: {
      const Point c{j(0.5), j(0.32)};
      const double r = j(0.24);
      UnitStroke hood = arc(K::Curve, c, r, r, -170, 30);
      const Point join = hood.points.back();
      const Point corner{j(0.18), j(0.88)}, end{j(0.82), j(0.88)};
      t.strokes = {hood, line(K::Diagonal, join, corner), line(K::Horizontal, corner, end)};
      t.structures = {around("has cornered shape", corner, 0.16), around("has hook", join, 0.14),
                      around("has open shape", hood.points.front(), 0.14)};
      break;
    }
    case 3: {
      const Point cu{j(0.48), j(0.3)}, cl{j(0.48), j(0.69)};
      const double ru = j(0.2), rl = j(0.22);
      UnitStroke upper = arc(K::Curve, cu, ru, ru, -160, 90);
      UnitStroke lower = arc(K::Curve, cl, rl, rl, -90, 160);
      const Point mid = upper.points.back();
      t.strokes = {upper, lower};
      t.structures = {around("has junction", mid, 0.14),
                      {"has stacked parts", {cu.x - ru, cu.y - ru}, {cl.x + rl, cl.y + rl}},
                      around("has open shape", upper.points.front(), 0.14)};
      break;
    }
    case 4: {
      const Point top{j(0.6), j(0.1)}, corner{j(0.18), j(0.62)}, right{j(0.86), j(0.62)};
      const Point vtop{j(0.66), j(0.3)}, vbottom{j(0.66), j(0.92)};
      t.strokes = {line(K::Diagonal, top, corner), line(K::Horizontal, corner, right),
                   line(K::Vertical, vtop, vbottom)};
      t.structures = {around("has cornered shape", corner, 0.16), around("has junction", {vtop.x, corner.y}, 0.14),
                      around("has open shape", vbottom, 0.14)};
      break;
    }
    case 5: {
      const Point corner{j(0.3), j(0.1)}, right{j(0.8), j(0.1)}, vbottom{j(0.3), j(0.46)};
      const Point c{j(0.48), j(0.66)};
      const double r = j(0.24);
      UnitStroke belly = arc(K::Curve, c, r, r, -135, 150);
      t.strokes = {line(K::Horizontal, corner, right), line(K::Vertical, corner, vbottom), belly};
      t.structures = {around("has cornered shape", corner, 0.16), around("has hook", vbottom, 0.14),
                      around("has open shape", belly.points.back(), 0.14)};
      break;
    }
    case 6: {
      const Point cl{j(0.5), j(0.68)};
      const double rx = j(0.24), ry = j(0.21);
      const Point cs{j(0.62), j(0.55)};
      const double rs = j(0.44);
      UnitStroke stem = arc(K::Curve, cs, rs * 0.85, rs, -105, -185);
      t.strokes = {stem, arc(K::Circle, cl, rx, ry, 0, 360)};
      t.structures = {{"has closed loop", {cl.x - rx, cl.y - ry}, {cl.x + rx, cl.y + ry}},
                      around("has hook", stem.points.back(), 0.14),
                      around("has open shape", stem.points.front(), 0.14)};
      break;
    }
    case 7: {
      const Point left{j(0.2), j(0.12)}, corner{j(0.8), j(0.12)}, bottom{j(0.42), j(0.9)};
      t.strokes = {line(K::Horizontal, left, corner), line(K::Diagonal, corner, bottom)};
      t.structures = {around("has cornered shape", corner, 0.16), around("has open shape", bottom, 0.14)};
      break;
    }
    case 8: {
      const Point cu{j(0.5), j(0.29)}, cl{j(0.5), j(0.7)};
      const double rxu = j(0.19), ryu = j(0.18), rxl = j(0.24), ryl = j(0.21);
      t.strokes = {arc(K::Circle, cu, rxu, ryu, 0, 360), arc(K::Circle, cl, rxl, ryl, 0, 360)};
      t.structures = {{"has closed loop", {cu.x - rxu, cu.y - ryu}, {cu.x + rxu, cu.y + ryu}},
                      {"has stacked parts", {cl.x - rxl, cu.y - ryu}, {cl.x + rxl, cl.y + ryl}},
                      around("has junction", {cu.x, cu.y + ryu}, 0.14)};
      break;
    }
    case 9: {
      const Point c{j(0.48), j(0.32)};
      const double rx = j(0.23), ry = j(0.2);
      const Point vtop{c.x + rx, c.y}, vbottom{j(0.7), j(0.9)};
      t.strokes = {arc(K::Circle, c, rx, ry, 0, 360), line(K::Vertical, vtop, vbottom)};
      t.structures = {{"has closed loop", {c.x - rx, c.y - ry}, {c.x + rx, c.y + ry}},
                      around("has junction", vtop, 0.14), around("has open shape", vbottom, 0.14)};
      break;
    }
    default:
      throw IndexError("glyph digit must be in 0..9, got " + std::to_string(digit));
  }
  return t;
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

Region clamp_region(double x0, double y0, double x1, double y1, Index h, Index w) {
  Region r;
  r.x0 = std::clamp<Index>(static_cast<Index>(std::floor(x0)), 0, w - 1);
  r.y0 = std::clamp<Index>(static_cast<Index>(std::floor(y0)), 0, h - 1);
  r.x1 = std::clamp<Index>(static_cast<Index>(std::ceil(x1)), r.x0 + 1, w);
  r.y1 = std::clamp<Index>(static_cast<Index>(std::ceil(y1)), r.y0 + 1, h);
  return r;
}

}  // namespace

const char* stroke_concept_name(StrokeKind kind) {
  switch (kind) {
    case StrokeKind::Vertical: return "has vertical stroke";
    case StrokeKind::Horizontal: return "has horizontal stroke";
    case StrokeKind::Diagonal: return "has diagonal stroke";
    case StrokeKind::Curve: return "has curve";
    case StrokeKind::Circle: return "has circle";
  }
  return "";
}

std::string digit_identity_name(int digit) { return "has digit " + std::to_string(digit); }

std::vector<std::string> digit_concept_names(int digit) {
  Rng rng(0);
  Jitter none(rng, 0.0);
  const Template t = digit_template(digit, none);
  std::vector<std::string> names;
  auto add = [&](const std::string& n) {
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  };
  for (const auto& s : t.strokes) add(stroke_concept_name(s.kind));
  for (const auto& st : t.structures) add(st.concept_name);
  add(digit_identity_name(digit));
  return names;
}

GlyphRecord make_glyph(int digit, Rng& rng) {
  const double box = 20.0 * uniform(rng, 0.85, 1.05);
  const double cx = kGlyphSize / 2.0 + uniform(rng, -1.5, 1.5);
  const double cy = kGlyphSize / 2.0 + uniform(rng, -1.5, 1.5);
  const double angle = uniform(rng, -0.15, 0.15);
  const double thickness = uniform(rng, 1.4, 2.2);
  const double intensity = uniform(rng, 0.55, 0.85);
  Jitter jitter(rng, 1.0);
  const Template t = digit_template(digit, jitter);

  const double ca = std::cos(angle), sa = std::sin(angle);
  auto to_pixels = [&](Point u) {
    const double dx = (u.x - 0.5) * box, dy = (u.y - 0.5) * box;
    return Point{cx + ca * dx - sa * dy, cy + sa * dx + ca * dy};
  };

  GlyphRecord g;
  g.digit = digit;
  double min_x = 1e9, min_y = 1e9, max_x = -1e9, max_y = -1e9;
  for (const auto& us : t.strokes) {
    Stroke s{us.kind, {}, thickness, intensity};
    for (Point u : us.points) {
      const Point p = to_pixels(u);
      s.points.push_back(p);
      min_x = std::min(min_x, p.x), max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y), max_y = std::max(max_y, p.y);
    }
    g.strokes.push_back(std::move(s));
  }
  const double pad = thickness / 2.0 + 1.0;
  g.foreground = clamp_region(min_x - pad, min_y - pad, max_x + pad, max_y + pad, kGlyphSize, kGlyphSize);
  for (const auto& st : t.structures) {
    double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
    for (Point u : {st.lo, st.hi, Point{st.lo.x, st.hi.y}, Point{st.hi.x, st.lo.y}}) {
      const Point p = to_pixels(u);
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
    }
    g.structures.push_back({st.concept_name, clamp_region(x0 - pad, y0 - pad, x1 + pad, y1 + pad, kGlyphSize,
                                                          kGlyphSize)});
  }
  return g;
}

Tensor render_glyph(const std::vector<Stroke>& strokes, Index height, Index width) {
  Tensor img({1, height, width});
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const Point p{x + 0.5, y + 0.5};
      double value = 0.0;
      for (const auto& s : strokes) {
        double d = 1e9;
        for (std::size_t i = 0; i + 1 < s.points.size(); ++i)
          d = std::min(d, segment_distance(p, s.points[i], s.points[i + 1]));
        if (s.points.size() == 1) d = segment_distance(p, s.points[0], s.points[0]);
        const double coverage = std::clamp(s.thickness / 2.0 + 0.5 - d, 0.0, 1.0);
        value = std::max(value, s.intensity * coverage);
      }
      img(0, y, x) = value;
    }
  }
  return img;
}

Vector glyph_concept_vector(const GlyphRecord& glyph, const ConceptSet& set) {
  Vector v = Vector::Zero(static_cast<Index>(set.size()));
  for (const auto& s : glyph.strokes) v[set.id_of(stroke_concept_name(s.kind))] = 1.0;
  for (const auto& st : glyph.structures) v[set.id_of(st.concept_name)] = 1.0;
  v[set.id_of(digit_identity_name(glyph.digit))] = 1.0;
  return v;
}

}  // namespace conceptflow
