#include <canroll/nn.hpp>
#include <canroll/tape.hpp>

#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

using namespace canroll;
using ad::Tape;
using ad::Var;

namespace {

// Rebuilds the loss from parameter leaves; used once for the analytic gradient
// and re-run per perturbed coordinate for the central-difference reference.
// Returns the worst |analytic - fd| / max(|analytic|,|fd|,1e-8) over all
// coordinates.
double check_gradients(const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& build,
                       std::vector<Mat> point, double h = 1e-5) {
  // analytic
  Tape<double> t;
  std::vector<Var<double>> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(t.leaf(p));
  Var<double> loss = build(t, leaves);
  auto grads = t.gradients(loss, leaves);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < point.size(); ++pi) {
    for (Eigen::Index i = 0; i < point[pi].rows(); ++i) {
      for (Eigen::Index j = 0; j < point[pi].cols(); ++j) {
        auto eval_at = [&](double delta) {
          std::vector<Mat> shifted = point;
          shifted[pi](i, j) += delta;
          Tape<double> t2;
          std::vector<Var<double>> lv;
          for (const auto& p : shifted) lv.push_back(t2.leaf(p));
          return build(t2, lv).scalar();
        };
        const double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        const double a = grads[pi].value()(i, j);
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(a - fd) / denom);
      }
    }
  }
  return worst;
}

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  return rng.normal_matrix<double>(r, c, s);
}

// Naive direct convolution used as an independent oracle for the im2col path.
Mat conv2d_reference(const Mat& x, const Mat& w, const Mat& b, const nn::ConvGeom& g) {
  const int n = static_cast<int>(x.rows());
  const int oh = g.out_hw();
  Mat out = Mat::Zero(n, static_cast<Eigen::Index>(g.out_c) * oh * oh);
  for (int nn_ = 0; nn_ < n; ++nn_)
    for (int co = 0; co < g.out_c; ++co)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < oh; ++ox) {
          double acc = b(0, co);
          for (int ci = 0; ci < g.in_c; ++ci)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_hw || ix < 0 || ix >= g.in_hw) continue;
                acc += x(nn_, (static_cast<Eigen::Index>(ci) * g.in_hw + iy) * g.in_hw + ix) *
                       w((static_cast<Eigen::Index>(ci) * g.kernel + ky) * g.kernel + kx, co);
              }
          out(nn_, (static_cast<Eigen::Index>(co) * oh + oy) * oh + ox) = acc;
        }
  return out;
}

Mat conv2d_transpose_reference(const Mat& x, const Mat& w, const Mat& b, const nn::ConvGeom& g) {
  const int n = static_cast<int>(x.rows());
  const int oh = g.out_hw_transposed();
  Mat out = Mat::Zero(n, static_cast<Eigen::Index>(g.out_c) * oh * oh);
  for (int nn_ = 0; nn_ < n; ++nn_) {
    for (int co = 0; co < g.out_c; ++co)
      for (Eigen::Index pix = 0; pix < static_cast<Eigen::Index>(oh) * oh; ++pix)
        out(nn_, static_cast<Eigen::Index>(co) * oh * oh + pix) = b(0, co);
    for (int ci = 0; ci < g.in_c; ++ci)
      for (int iy = 0; iy < g.in_hw; ++iy)
        for (int ix = 0; ix < g.in_hw; ++ix) {
          const double v = x(nn_, (static_cast<Eigen::Index>(ci) * g.in_hw + iy) * g.in_hw + ix);
          for (int co = 0; co < g.out_c; ++co)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int oy = iy * g.stride - g.pad + ky;
                const int ox = ix * g.stride - g.pad + kx;
                if (oy < 0 || oy >= oh || ox < 0 || ox >= oh) continue;
                out(nn_, (static_cast<Eigen::Index>(co) * oh + oy) * oh + ox) +=
                    v * w(ci, (static_cast<Eigen::Index>(co) * g.kernel + ky) * g.kernel + kx);
              }
        }
  }
  return out;
}

}  // namespace

TEST_CASE("basic forward values") {
  Tape<double> t;
  Mat a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  auto va = t.leaf(a), vb = t.leaf(b);
  CHECK(add(va, vb).value()(1, 1) == doctest::Approx(12.0));
  CHECK(mul(va, vb).value()(0, 1) == doctest::Approx(12.0));
  CHECK(matmul(va, vb).value()(0, 0) == doctest::Approx(19.0));
  CHECK(sum_all(va).scalar() == doctest::Approx(10.0));
  CHECK(mean_all(vb).scalar() == doctest::Approx(6.5));
}

TEST_CASE("gradient of sum of squares is 2w") {
  Tape<double> t;
  Rng rng(1);
  Mat w = random_mat(rng, 3, 4);
  auto vw = t.leaf(w);
  auto vu = t.leaf(random_mat(rng, 2, 2));  // untouched by the loss
  auto loss = sum_all(mul(vw, vw));
  std::vector<Var<double>> wrt{vw, vu};
  auto g = t.gradients(loss, wrt);
  CHECK((g[0].value() - 2.0 * w).cwiseAbs().maxCoeff() == doctest::Approx(0.0).epsilon(1e-12));
  // disconnected parameter: zero gradient, not an error
  CHECK(g[1].value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient of a constant is zero") {
  Tape<double> t;
  auto w = t.leaf(Mat::Ones(2, 3));
  auto loss = t.constant(5.0);
  std::vector<Var<double>> wrt{w};
  auto g = t.gradients(loss, wrt);
  CHECK(g[0].value().isZero());
}

TEST_CASE("finite differences across the primitive set") {
  Rng rng(7);
  std::vector<Mat> point{random_mat(rng, 3, 4, 0.5), random_mat(rng, 4, 2, 0.5),
                         random_mat(rng, 1, 2, 0.5)};
  auto build = [](Tape<double>& t, std::vector<Var<double>>& p) {
    auto h = tanh_v(nn::dense(p[0], p[1], p[2]));
    auto s = sigmoid_v(h);
    auto sm = softmax_rows(add(h, h));
    auto mixed = add(mul(s, sm), scale(sqrt_v(add_scalar(mul(h, h), 1.0)), 0.5));
    auto r = rowwise_sum(mixed);
    auto c = colwise_sum(exp_v(scale(mixed, 0.1)));
    return add(mean_all(log_v(add_scalar(mul(r, r), 1.0))), mean_all(c));
  };
  CHECK(check_gradients(build, point) < 1e-7);
}

TEST_CASE("finite differences through reductions, blocks and reshapes") {
  Rng rng(11);
  std::vector<Mat> point{random_mat(rng, 4, 6)};
  auto build = [](Tape<double>& t, std::vector<Var<double>>& p) {
    auto b = block(p[0], 1, 2, 2, 3);
    auto pb = pad_block(b, 0, 1, 3, 5);
    auto rs = reshape(pb, 5, 3);
    auto rep = repeat_cols(rowwise_sum(rs), 4);
    return mean_all(mul(rep, rep));
  };
  CHECK(check_gradients(build, point) < 1e-8);
}

TEST_CASE("clamp and leaky_relu masks") {
  Rng rng(13);
  std::vector<Mat> point{random_mat(rng, 5, 5)};
  auto build = [](Tape<double>& t, std::vector<Var<double>>& p) {
    auto c = clamp(p[0], -0.5, 0.5);
    auto l = leaky_relu(p[0], 0.2);
    return add(mean_all(mul(c, c)), mean_all(l));
  };
  CHECK(check_gradients(build, point) < 1e-6);
}

TEST_CASE("index_select and scatter_add are adjoint linear maps") {
  // <A x, y> == <x, A^T y> for the gather/scatter pair sharing one table
  Rng rng(17);
  auto idx = std::make_shared<const std::vector<std::int32_t>>(
      std::vector<std::int32_t>{3, 0, -1, 5, 5, 1, 2, 4, 0, -1, 7, 6});
  Mat x = random_mat(rng, 2, 4);  // 8 elements
  Mat y = random_mat(rng, 3, 4);  // 12 elements

  Tape<double> t;
  auto vx = t.leaf(x);
  auto ax = index_select(vx, idx, 3, 4);
  const double lhs = ax.value().cwiseProduct(y).sum();

  auto vy = t.leaf(y);
  auto aty = scatter_add(vy, idx, 2, 4);
  const double rhs = aty.value().cwiseProduct(x).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("second derivatives via backward of backward") {
  // f(x) = sum(x^3): df/dx = 3x^2, d2f/dx2 summed = 6x
  Tape<double> t;
  Mat x(2, 2);
  x << 0.5, -1.0, 2.0, 0.25;
  auto vx = t.leaf(x);
  auto f = sum_all(mul(vx, mul(vx, vx)));
  std::vector<Var<double>> wrt{vx};
  auto g1 = t.gradients(f, wrt);
  CHECK((g1[0].value() - 3.0 * x.cwiseProduct(x)).cwiseAbs().maxCoeff() < 1e-12);
  auto gsum = sum_all(g1[0]);
  auto g2 = t.gradients(gsum, wrt);
  CHECK((g2[0].value() - 6.0 * x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient flows through an inner SGD step") {
  // outer(w) = sum( (w - lr * d inner/d w)^2 ) with inner(w) = sum(w^3)
  // hand form: u = w - 3 lr w^2, d outer/dw = 2 u (1 - 6 lr w)
  Tape<double> t;
  Mat w(1, 3);
  w << 0.4, -0.3, 1.1;
  const double lr = 0.05;
  auto vw = t.leaf(w);
  auto inner = sum_all(mul(vw, mul(vw, vw)));
  std::vector<Var<double>> wrt{vw};
  auto gi = t.gradients(inner, wrt);
  auto updated = sub(vw, scale(gi[0], lr));
  auto outer = sum_all(mul(updated, updated));
  auto go = t.gradients(outer, wrt);
  for (int j = 0; j < 3; ++j) {
    const double u = w(0, j) - 3.0 * lr * w(0, j) * w(0, j);
    const double expected = 2.0 * u * (1.0 - 6.0 * lr * w(0, j));
    CHECK(go[0].value()(0, j) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("conv2d matches the naive reference and its gradient checks out") {
  Rng rng(23);
  nn::ConvGeom g{2, 3, 3, 2, 1, 6};
  Mat x = random_mat(rng, 2, 2 * 36);
  Mat w = random_mat(rng, 2 * 9, 3);
  Mat b = random_mat(rng, 1, 3);

  Tape<double> t;
  auto y = nn::conv2d(t.leaf(x), t.leaf(w), t.leaf(b), g);
  Mat ref = conv2d_reference(x, w, b, g);
  CHECK((y.value() - ref).cwiseAbs().maxCoeff() < 1e-12);

  auto build = [g](Tape<double>&, std::vector<Var<double>>& p) {
    auto out = nn::conv2d(p[0], p[1], p[2], g);
    return mean_all(mul(out, out));
  };
  CHECK(check_gradients(build, {x, w, b}) < 1e-5);
}

TEST_CASE("conv2d_transpose matches the naive reference and its gradient checks out") {
  Rng rng(29);
  nn::ConvGeom g{3, 2, 4, 2, 1, 4};  // 4 -> 8
  Mat x = random_mat(rng, 2, 3 * 16);
  Mat w = random_mat(rng, 3, 2 * 16);
  Mat b = random_mat(rng, 1, 2);

  Tape<double> t;
  auto y = nn::conv2d_transpose(t.leaf(x), t.leaf(w), t.leaf(b), g);
  CHECK(y.value().cols() == 2 * 8 * 8);
  Mat ref = conv2d_transpose_reference(x, w, b, g);
  CHECK((y.value() - ref).cwiseAbs().maxCoeff() < 1e-12);

  auto build = [g](Tape<double>&, std::vector<Var<double>>& p) {
    auto out = nn::conv2d_transpose(p[0], p[1], p[2], g);
    return mean_all(mul(out, out));
  };
  CHECK(check_gradients(build, {x, w, b}) < 1e-5);
}

TEST_CASE("batch_norm_train normalizes and differentiates") {
  Rng rng(31);
  const int channels = 3, hw = 4, n = 5;
  Mat x = random_mat(rng, n, channels * hw, 2.0);
  Mat gamma = Mat::Ones(1, channels) + 0.1 * random_mat(rng, 1, channels);
  Mat beta = 0.1 * random_mat(rng, 1, channels);

  Tape<double> t;
  auto out = nn::batch_norm_train(t.leaf(x), t.leaf(gamma), t.leaf(beta), channels, hw, 1e-5);
  // per-channel stats of the normalized activations before scale/shift
  for (int c = 0; c < channels; ++c) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < hw; ++j) mean += x(i, c * hw + j);
    mean /= n * hw;
    CHECK(out.batch_mean(0, c) == doctest::Approx(mean).epsilon(1e-12));
  }

  auto build = [channels, hw](Tape<double>&, std::vector<Var<double>>& p) {
    auto o = nn::batch_norm_train(p[0], p[1], p[2], channels, hw, 1e-5);
    return mean_all(mul(o.y, sigmoid_v(o.y)));
  };
  CHECK(check_gradients(build, {x, gamma, beta}) < 1e-6);
}

TEST_CASE("softmax rows sum to one and differentiate") {
  Rng rng(37);
  Mat x = random_mat(rng, 6, 4, 3.0);
  Tape<double> t;
  auto sm = softmax_rows(t.leaf(x));
  for (int i = 0; i < 6; ++i) CHECK(sm.value().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));

  auto build = [](Tape<double>& t2, std::vector<Var<double>>& p) {
    auto s = softmax_rows(p[0]);
    return mean_all(mul(s, log_v(add_scalar(s, 1e-3))));
  };
  CHECK(check_gradients(build, {x}) < 1e-7);
}
