#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <sstream>

#include "conceptflow/errors.hpp"
#include "conceptflow/pathways.hpp"
#include "conceptflow/random.hpp"

using namespace conceptflow;

namespace {

// 1 - 6 sum d^2 / (n (n^2 - 1)) on tie-free data, ranks by counting.
long double closed_form(const std::vector<double>& u, const std::vector<double>& v) {
  const std::size_t n = u.size();
  long double d2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double ru = 1, rv = 1;
    for (std::size_t j = 0; j < n; ++j) {
      ru += u[j] < u[i];
      rv += v[j] < v[i];
    }
    d2 += (ru - rv) * (ru - rv);
  }
  const long double nn = static_cast<long double>(n);
  return 1.0L - 6.0L * d2 / (nn * (nn * nn - 1.0L));
}

// Average ranks by brute force: 1 + #less + (#equal - 1) / 2.
std::vector<long double> brute_ranks(const std::vector<double>& x) {
  std::vector<long double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    long double less = 0, equal = 0;
    for (double y : x) {
      less += y < x[i];
      equal += y == x[i];
    }
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

long double pearson(const std::vector<long double>& a, const std::vector<long double>& b) {
  const long double n = static_cast<long double>(a.size());
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> row_of(const Matrix& a, int i) {
  std::vector<double> out(static_cast<std::size_t>(a.cols()));
  for (Index s = 0; s < a.cols(); ++s) out[static_cast<std::size_t>(s)] = a(i, s);
  return out;
}

Matrix random_matrix(Index r, Index c, Rng& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng);
  return m;
}

const ConceptSet& cmnist() {
  static const ConceptSet set = bundled_cmnist_concepts();
  return set;
}

}  // namespace

TEST_CASE("spearman hand examples") {
  const std::vector<double> u{1, 2, 3, 4, 5}, v{2, 1, 4, 3, 5};
  CHECK(spearman(u, u).rho == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> rev(u.rbegin(), u.rend());
  CHECK(spearman(u, rev).rho == doctest::Approx(-1.0).epsilon(1e-15));
  // d = (-1, 1, -1, 1, 0), so 1 - 6 * 4 / (5 * 24) = 0.8.
  CHECK(std::abs(spearman(u, v).rho - 0.8) < 1e-15);
  const std::vector<double> w{1, 3, 2, 5, 4};
  const std::vector<double> z{2, 1, 3, 5, 4};
  CHECK(std::abs(spearman(w, z).rho - static_cast<double>(closed_form(w, z))) < 1e-15);
  CHECK_FALSE(spearman(u, v).degenerate);
}

TEST_CASE("spearman equals the closed form on 1000 tie-free pairs") {
  Rng rng = make_rng(1, "t");
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 60);
    std::vector<double> u(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = uniform01(rng);
      v[i] = uniform01(rng);
    }
    worst = std::max(worst, std::abs(spearman(u, v).rho - static_cast<double>(closed_form(u, v))));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("spearman with ties matches brute-force average ranks") {
  Rng rng = make_rng(2, "t");
  std::uniform_int_distribution<int> level(0, 4);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 3 + static_cast<std::size_t>(trial % 30);
    std::vector<double> u(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = level(rng);
      v[i] = level(rng) * 0.5;
    }
    const auto ru = brute_ranks(u), rv = brute_ranks(v);
    const auto r = spearman(u, v);
    if (r.degenerate) {
      CHECK(r.rho == 0.0);
      continue;
    }
    CHECK(std::abs(r.rho - static_cast<double>(pearson(ru, rv))) < 1e-12);
    ++checked;
  }
  CHECK(checked > 400);
  const std::vector<double> x{3, 1, 3, 2};
  const Vector ranks = average_ranks(x);
  CHECK(ranks[0] == 3.5);
  CHECK(ranks[1] == 1.0);
  CHECK(ranks[2] == 3.5);
  CHECK(ranks[3] == 2.0);
}

TEST_CASE("spearman degenerate and invalid inputs") {
  const std::vector<double> c{2, 2, 2}, u{1, 2, 3};
  CHECK(spearman(c, u).rho == 0.0);
  CHECK(spearman(c, u).degenerate);
  CHECK(spearman(u, c).degenerate);
  CHECK_THROWS_AS(spearman(u, std::vector<double>{1, 2}), DimensionError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{2}), ValidationError);
}

TEST_CASE("spearman is symmetric and invariant under increasing maps") {
  Rng rng = make_rng(3, "t");
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> u(20), v(20), fu(20);
    for (std::size_t i = 0; i < 20; ++i) {
      u[i] = uniform(rng, -2, 2);
      v[i] = uniform(rng, -2, 2);
      fu[i] = std::exp(3 * u[i]) + 7;
    }
    CHECK(spearman(u, v).rho == spearman(v, u).rho);
    CHECK(std::abs(spearman(fu, v).rho - spearman(u, v).rho) < 1e-15);
  }
}

TEST_CASE("spearman_matrix matches an entrywise loop") {
  Rng rng = make_rng(4, "t");
  const Matrix a = random_matrix(21, 64, rng), b = random_matrix(21, 64, rng);
  std::vector<int> ks{0, 3, 5, 11, 20, 7}, kd{3, 1, 19, 20, 6};
  const Matrix p = spearman_matrix(a, b, ks, kd);
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 21; ++j) {
      const bool in = std::count(ks.begin(), ks.end(), i) && std::count(kd.begin(), kd.end(), j) && i != j;
      const double expect = in ? std::abs(spearman(row_of(a, i), row_of(b, j)).rho) : 0.0;
      CHECK(std::abs(p(i, j) - expect) < 1e-12);
    }
  std::vector<int> all(21);
  std::iota(all.begin(), all.end(), 0);
  const Matrix self = spearman_matrix(a, a, all, all);
  CHECK(self.diagonal().isZero());
  CHECK(std::abs(self(2, 9) - std::abs(spearman(row_of(a, 2), row_of(a, 9)).rho)) < 1e-12);
  CHECK((self.array() >= 0).all());
  CHECK((self.array() <= 1).all());
  const std::vector<int> one_a{4}, one_b{9};
  const Matrix single = spearman_matrix(a, b, one_a, one_b);
  CHECK((single.array() != 0).count() <= 1);
  CHECK(single(4, 9) == doctest::Approx(std::abs(spearman(row_of(a, 4), row_of(b, 9)).rho)));
  CHECK_THROWS_AS(spearman_matrix(a, random_matrix(21, 63, rng), ks, kd), DimensionError);
}

TEST_CASE("extract_flows on a hand fixture") {
  const ConceptSet& set = cmnist();
  const int stroke = set.id_of("has vertical stroke"), digit = set.id_of("has digit 7"),
            shape = set.id_of("has cornered shape");
  Matrix p = Matrix::Zero(21, 21);
  p(stroke, digit) = 0.95;
  p(digit, shape) = 0.85;
  p(shape, stroke) = 0.6;
  const auto flows = extract_flows(p, 0.8, set);
  REQUIRE(flows.size() == 2);
  CHECK(flows[0].from == stroke);
  CHECK(flows[0].to == digit);
  CHECK(flows[0].direction == FlowDirection::Forward);
  CHECK(flows[1].from == digit);
  CHECK(flows[1].direction == FlowDirection::Backward);
  CHECK(classify_pathway(flows) == PathwayLabel::Bidirectional);
  CHECK(classify_pathway(std::span(flows).first(1)) == PathwayLabel::Forward);
  CHECK(classify_pathway(std::span(flows).subspan(1)) == PathwayLabel::Backward);
  CHECK(classify_pathway({}) == PathwayLabel::None);
  CHECK(extract_flows(Matrix::Zero(21, 21), 0.5, set).empty());
  p(1, 2) = 1.0;
  const auto perfect = extract_flows(p, 1.0, set);
  REQUIRE(perfect.size() == 1);
  CHECK(perfect[0].from == 1);
  CHECK_THROWS_AS(extract_flows(p, 0.0, set), ValidationError);
  CHECK_THROWS_AS(extract_flows(p, 1.01, set), ValidationError);
  CHECK_THROWS_AS(extract_flows(Matrix::Zero(5, 5), 0.5, set), DimensionError);
  for (auto l : {PathwayLabel::None, PathwayLabel::Forward, PathwayLabel::Backward, PathwayLabel::Bidirectional})
    CHECK(parse_pathway_label(to_string(l)) == l);
  CHECK_THROWS_AS(parse_pathway_label("sideways"), ParseError);
}

TEST_CASE("layer_pathways covers the grid and is monotone in tau and k") {
  Rng rng = make_rng(5, "t");
  const ConceptSet& set = cmnist();
  AttentionStore store;
  for (int l : {1, 2})
    for (int m : {0, 1}) {
      Matrix v = random_matrix(21, 40, rng);
      v.array().rowwise() /= v.colwise().sum().array();
      store.insert({l, m, v, {}});
    }
  const auto recs = layer_pathways(store, set, 1, 7, 0.3);
  REQUIRE(recs.size() == 4);
  for (const auto& r : recs) {
    CHECK(r.top_src.size() == 7);
    CHECK(r.top_src == top_k_concepts(store.at(1, r.src).values, 7));
    for (const auto& f : r.flows) {
      CHECK(std::count(r.top_src.begin(), r.top_src.end(), f.from) == 1);
      CHECK(std::count(r.top_dst.begin(), r.top_dst.end(), f.to) == 1);
      CHECK(f.from != f.to);
      CHECK(f.strength >= 0.3);
    }
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double tau : {0.1, 0.2, 0.3, 0.5, 0.9}) {
      const std::size_t n = extract_flows(r.p, tau, set).size();
      CHECK(n <= prev);
      prev = n;
    }
  }
  std::size_t prev = 0;
  for (int k : {2, 5, 9, 21}) {
    std::size_t total = 0;
    for (const auto& r : layer_pathways(store, set, 1, k, 0.2)) total += r.flows.size();
    CHECK(total >= prev);
    prev = total;
  }
  // A column subset equals building the store from those columns.
  const std::vector<Index> cols{0, 3, 4, 9, 20, 21};
  AttentionStore sub;
  for (const auto& [key, a] : store) {
    Matrix v(21, 6);
    for (std::size_t c = 0; c < cols.size(); ++c) v.col(static_cast<Index>(c)) = a.values.col(cols[c]);
    sub.insert({a.layer, a.filter, v, {}});
  }
  const auto x = layer_pathways(store, set, 1, 7, 0.3, cols), y = layer_pathways(sub, set, 1, 7, 0.3);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK((x[i].p - y[i].p).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(layer_pathways(store, set, 2, 7, 0.3), IndexError);
}

TEST_CASE("pathway records persist and dump as JSON lines") {
  Rng rng = make_rng(6, "t");
  const ConceptSet& set = cmnist();
  AttentionStore store;
  for (int l : {1, 2, 3})
    for (int m = 0; m < 3; ++m) store.insert({l, m, random_matrix(21, 30, rng), {}});
  std::vector<PathwayRecord> recs = layer_pathways(store, set, 1, 6, 0.25);
  const auto more = layer_pathways(store, set, 2, 6, 0.25);
  recs.insert(recs.end(), more.begin(), more.end());
  const auto dir = std::filesystem::temp_directory_path() / "cf_pathways_rt";
  std::filesystem::remove_all(dir);
  save_pathway_records(dir, recs);
  const auto back = load_pathway_records(dir, set, 0.25);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].layer == recs[i].layer);
    CHECK(back[i].src == recs[i].src);
    CHECK(back[i].dst == recs[i].dst);
    CHECK(back[i].p == recs[i].p);
    CHECK(back[i].top_dst == recs[i].top_dst);
    CHECK(back[i].label == recs[i].label);
  }
  const std::string jsonl = pathway_jsonl(recs);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == static_cast<long>(recs.size()));
  std::istringstream lines(jsonl);
  std::string first;
  std::getline(lines, first);
  CHECK(first.find("\"layer\":1") != std::string::npos);
  CHECK(first.find("\"flows\"") != std::string::npos);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_pathway_records(dir, set, 0.5), IoError);
}
