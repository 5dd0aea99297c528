#include <doctest.h>

#include <cmath>

#include "conceptflow/errors.hpp"
#include "conceptflow/ops.hpp"
#include "conceptflow/random.hpp"

using namespace conceptflow;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t.raw()[i] = uniform(rng, lo, hi);
  return t;
}

// Direct five-loop convolution, independent of the im2col path.
Tensor naive_conv(const Tensor& in, const Tensor& k, const Tensor& b) {
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2), Co = k.dim(0);
  Tensor out({Co, H, W});
  for (Index o = 0; o < Co; ++o)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        double s = b(o);
        for (Index c = 0; c < C; ++c)
          for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
              const Index sy = y + ky - 1, sx = x + kx - 1;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              s += k(o, c, ky, kx) * in(c, sy, sx);
            }
        out(o, y, x) = s;
      }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  return (a.data() - b.data()).cwiseAbs().maxCoeff();
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); }

}  // namespace

TEST_CASE("conv2d identity kernel returns the input") {
  Rng rng = make_rng(1, "t");
  const Tensor in = random_tensor({1, 5, 5}, rng);
  Tensor k({1, 1, 3, 3});
  k(0, 0, 1, 1) = 1;
  CHECK(conv2d(in, k, Tensor({1})) == in);
}

TEST_CASE("conv2d of zero input is the bias") {
  Rng rng = make_rng(2, "t");
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = Tensor::from_values({3}, {0.5, -1.0, 2.0});
  const Tensor out = conv2d(Tensor({2, 4, 4}), k, b);
  for (Index o = 0; o < 3; ++o)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 4; ++x) CHECK(out(o, y, x) == b(o));
}

TEST_CASE("conv2d matches the direct sum") {
  Rng rng = make_rng(3, "t");
  const Tensor in = random_tensor({2, 6, 6}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  CHECK(max_abs_diff(conv2d(in, k, b), naive_conv(in, k, b)) < 1e-12);
}

TEST_CASE("conv2d agrees with the direct sum on random shapes") {
  Rng rng = make_rng(4, "t");
  std::uniform_int_distribution<Index> small(1, 4), side(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const Index C = small(rng), Co = small(rng), H = side(rng), W = side(rng);
    const Tensor in = random_tensor({C, H, W}, rng);
    const Tensor k = random_tensor({Co, C, 3, 3}, rng);
    const Tensor b = random_tensor({Co}, rng);
    REQUIRE(max_abs_diff(conv2d(in, k, b), naive_conv(in, k, b)) < 1e-10);
  }
}

TEST_CASE("conv2d rejects mismatched shapes") {
  CHECK_THROWS_AS(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor({1})), DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 5, 5}), Tensor({1})), DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor({1, 4, 4}), Tensor({2, 1, 3, 3}), Tensor({3})), DimensionError);
}

TEST_CASE("conv2d_backward: zero upstream, sum loss") {
  Rng rng = make_rng(5, "t");
  const Tensor in = random_tensor({2, 4, 4}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const auto g = conv2d_backward(Tensor({3, 4, 4}), in, k);
  CHECK(g.input.data().isZero());
  CHECK(g.kernels.data().isZero());
  CHECK(g.bias.data().isZero());

  Tensor id({1, 1, 3, 3});
  id(0, 0, 1, 1) = 1;
  const auto ones = conv2d_backward(Tensor::constant({1, 5, 5}, 1.0), random_tensor({1, 5, 5}, rng), id);
  CHECK((ones.input.data().array() == 1.0).all());
  CHECK_THROWS_AS(conv2d_backward(Tensor({3, 5, 5}), in, k), DimensionError);
}

TEST_CASE("conv2d_backward matches central differences") {
  Rng rng = make_rng(6, "t");
  const double h = 1e-5;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor in = random_tensor({2, 4, 3}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    const Tensor w = random_tensor({2, 4, 3}, rng);
    auto loss = [&] { return conv2d(in, k, b).data().dot(w.data()); };
    const auto g = conv2d_backward(w, in, k);
    double worst = 0;
    for (auto [t, grad] : {std::pair{&in, &g.input}, std::pair{&k, &g.kernels}, std::pair{&b, &g.bias}}) {
      for (Index i = 0; i < t->size(); ++i) {
        const double saved = t->raw()[i];
        t->raw()[i] = saved + h;
        const double up = loss();
        t->raw()[i] = saved - h;
        const double down = loss();
        t->raw()[i] = saved;
        worst = std::max(worst, rel_err(grad->raw()[i], (up - down) / (2 * h)));
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("relu and its backward") {
  const Tensor x = Tensor::from_values({3}, {-1, 0, 2});
  CHECK(relu(x) == Tensor::from_values({3}, {0, 0, 2}));
  const Tensor g = relu_backward(Tensor::from_values({2}, {5, 5}), Tensor::from_values({2}, {-1, 2}));
  CHECK(g == Tensor::from_values({2}, {0, 5}));
}

TEST_CASE("relu backward matches central differences off the kink") {
  Rng rng = make_rng(7, "t");
  Tensor x = random_tensor({30}, rng);
  for (Index i = 0; i < x.size(); ++i)
    if (std::abs(x.raw()[i]) < 0.05) x.raw()[i] += 0.1;
  const Tensor w = random_tensor({30}, rng);
  const Tensor g = relu_backward(w, x);
  const double h = 1e-5;
  for (Index i = 0; i < x.size(); ++i) {
    Tensor up = x, down = x;
    up.raw()[i] += h;
    down.raw()[i] -= h;
    const double numeric = (relu(up).data().dot(w.data()) - relu(down).data().dot(w.data())) / (2 * h);
    CHECK(rel_err(g.raw()[i], numeric) < 1e-4);
  }
}

TEST_CASE("softmax_rows basics") {
  const Tensor u = softmax_rows(Tensor({1, 4}));
  for (Index j = 0; j < 4; ++j) CHECK(u(0, j) == doctest::Approx(0.25).epsilon(1e-15));
  const Tensor s = softmax_rows(Tensor::from_values({1, 2}, {1000, 0}));
  CHECK(std::abs(s(0, 0) - 1) < 1e-12);
  CHECK(s(0, 1) < 1e-12);
  CHECK(s.all_finite());
}

TEST_CASE("softmax_rows matches an extended-precision reference") {
  Rng rng = make_rng(8, "t");
  const Tensor m = random_tensor({3, 5}, rng, -4, 4);
  const Tensor s = softmax_rows(m);
  for (Index r = 0; r < 3; ++r) {
    long double z = 0;
    for (Index c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(m(r, c)));
    for (Index c = 0; c < 5; ++c)
      CHECK(std::abs(static_cast<long double>(s(r, c)) - std::exp(static_cast<long double>(m(r, c))) / z) < 1e-15L);
  }
}

TEST_CASE("softmax_rows sums to one and is shift invariant") {
  Rng rng = make_rng(9, "t");
  Matrix m(1000, 7);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1000, 1000);
  const Matrix s = softmax_rows(m);
  CHECK(((s.rowwise().sum().array() - 1).abs() < 1e-12).all());
  CHECK((s.array() >= 0).all());
  const Matrix shifted = softmax_rows((m.array() + 123.0).matrix());
  CHECK((s - shifted).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(softmax_rows(Matrix(3, 0)), DimensionError);
}

TEST_CASE("matmul and sgd_step") {
  Rng rng = make_rng(10, "t");
  const Tensor a = random_tensor({4, 3}, rng);
  Tensor eye({3, 3});
  for (Index i = 0; i < 3; ++i) eye(i, i) = 1;
  CHECK(matmul(a, eye) == a);
  const Tensor b = random_tensor({3, 5}, rng);
  const Tensor c = matmul(a, b);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 5; ++j) {
      double s = 0;
      for (Index t = 0; t < 3; ++t) s += a(i, t) * b(t, j);
      CHECK(std::abs(c(i, j) - s) < 1e-10);
    }
  CHECK_THROWS_AS(matmul(a, a), DimensionError);

  CHECK(sgd_step(a, Tensor(a.shape()), 0.1, 0.0) == a);
  const Tensor g = random_tensor({4, 3}, rng);
  const Tensor p = sgd_step(a, g, 0.1, 0.01);
  for (Index i = 0; i < a.size(); ++i) CHECK(p.raw()[i] == a.raw()[i] - 0.1 * (g.raw()[i] + 0.01 * a.raw()[i]));
  CHECK_THROWS_AS(sgd_step(a, g, 0.0, 0.0), ValidationError);
}

TEST_CASE("maxpool2x2 backward routes to the argmax") {
  Rng rng = make_rng(11, "t");
  const Tensor x = random_tensor({2, 4, 6}, rng);
  std::vector<Index> arg;
  const Tensor y = maxpool2x2(x, &arg);
  CHECK(y.shape() == Shape{2, 2, 3});
  for (Index c = 0; c < 2; ++c)
    for (Index oy = 0; oy < 2; ++oy)
      for (Index ox = 0; ox < 3; ++ox) {
        const double m = std::max({x(c, 2 * oy, 2 * ox), x(c, 2 * oy, 2 * ox + 1), x(c, 2 * oy + 1, 2 * ox),
                                   x(c, 2 * oy + 1, 2 * ox + 1)});
        CHECK(y(c, oy, ox) == m);
      }
  const Tensor g = maxpool2x2_backward(Tensor::constant(y.shape(), 1.0), x.shape(), arg);
  CHECK(g.data().sum() == doctest::Approx(12));
  for (Index i = 0; i < x.size(); ++i)
    if (g.raw()[i] != 0) CHECK(std::find(arg.begin(), arg.end(), i) != arg.end());
}
