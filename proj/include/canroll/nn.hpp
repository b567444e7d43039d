#pragma once

#include <canroll/tape.hpp>

#include <cstdint>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

namespace canroll::nn {

using ad::IndexTable;
using ad::Tape;
using ad::Var;

// Square-image convolution geometry. in_hw is the input side; the output side
// follows the usual arithmetic for the direct and transposed directions.
struct ConvGeom {
  int in_c = 0;
  int out_c = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int in_hw = 0;

  int out_hw() const { return (in_hw + 2 * pad - kernel) / stride + 1; }
  int out_hw_transposed() const { return (in_hw - 1) * stride - 2 * pad + kernel; }
};

namespace detail {

inline std::uint64_t table_key(int tag, int n, const ConvGeom& g) {
  std::uint64_t h = fnv1a64(&tag, sizeof(tag));
  h = fnv1a64(&n, sizeof(n), h);
  h = fnv1a64(&g, sizeof(g), h);
  return h;
}

inline IndexTable cached(std::uint64_t key, const std::function<std::vector<std::int32_t>()>& build) {
  static std::mutex mu;
  static std::unordered_map<std::uint64_t, IndexTable> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto table = std::make_shared<const std::vector<std::int32_t>>(build());
  cache.emplace(key, table);
  return table;
}

// gather table: (N*oHW) x (Cin*k*k) patch matrix from an N x (Cin*iHW) batch
inline IndexTable im2col_table(int n, const ConvGeom& g) {
  return cached(table_key(1, n, g), [n, g] {
    const int ih = g.in_hw, k = g.kernel, s = g.stride, p = g.pad;
    const int oh = g.out_hw();
    std::vector<std::int32_t> t(static_cast<std::size_t>(n) * oh * oh * g.in_c * k * k);
    std::size_t i = 0;
    for (int nn = 0; nn < n; ++nn)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < oh; ++ox)
          for (int ci = 0; ci < g.in_c; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * s - p + ky;
                const int ix = ox * s - p + kx;
                t[i++] = (iy < 0 || iy >= ih || ix < 0 || ix >= ih)
                             ? -1
                             : ((nn * g.in_c + ci) * ih + iy) * ih + ix;
              }
    return t;
  });
}

// reorder (N*oHW) x Cout rows into the N x (Cout*oHW) batch layout
inline IndexTable cols_to_image_table(int n, const ConvGeom& g) {
  return cached(table_key(2, n, g), [n, g] {
    const int oh = g.out_hw();
    const int ohw = oh * oh;
    std::vector<std::int32_t> t(static_cast<std::size_t>(n) * g.out_c * ohw);
    std::size_t i = 0;
    for (int nn = 0; nn < n; ++nn)
      for (int co = 0; co < g.out_c; ++co)
        for (int pix = 0; pix < ohw; ++pix) t[i++] = (nn * ohw + pix) * g.out_c + co;
    return t;
  });
}

// reorder N x (Cin*iHW) batch into (N*iHW) x Cin rows
inline IndexTable image_to_rows_table(int n, const ConvGeom& g) {
  return cached(table_key(3, n, g), [n, g] {
    const int ih = g.in_hw;
    const int ihw = ih * ih;
    std::vector<std::int32_t> t(static_cast<std::size_t>(n) * ihw * g.in_c);
    std::size_t i = 0;
    for (int nn = 0; nn < n; ++nn)
      for (int pix = 0; pix < ihw; ++pix)
        for (int ci = 0; ci < g.in_c; ++ci) t[i++] = (nn * g.in_c + ci) * ihw + pix;
    return t;
  });
}

// scatter table: (N*iHW) x (Cout*k*k) contributions into the N x (Cout*oHW)
// transposed-convolution output
inline IndexTable col2im_table(int n, const ConvGeom& g) {
  return cached(table_key(4, n, g), [n, g] {
    const int ih = g.in_hw, k = g.kernel, s = g.stride, p = g.pad;
    const int oh = g.out_hw_transposed();
    std::vector<std::int32_t> t(static_cast<std::size_t>(n) * ih * ih * g.out_c * k * k);
    std::size_t i = 0;
    for (int nn = 0; nn < n; ++nn)
      for (int iy = 0; iy < ih; ++iy)
        for (int ix = 0; ix < ih; ++ix)
          for (int co = 0; co < g.out_c; ++co)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int oy = iy * s - p + ky;
                const int ox = ix * s - p + kx;
                t[i++] = (oy < 0 || oy >= oh || ox < 0 || ox >= oh)
                             ? -1
                             : ((nn * g.out_c + co) * oh + oy) * oh + ox;
              }
    return t;
  });
}

// broadcast a 1 x C row across spatial positions: 1 x (C*HW)
inline IndexTable channel_expand_table(int c, int hw) {
  ConvGeom g{};
  g.in_c = c;
  g.in_hw = hw;
  return cached(table_key(5, 0, g), [c, hw] {
    std::vector<std::int32_t> t(static_cast<std::size_t>(c) * hw);
    std::size_t i = 0;
    for (int ci = 0; ci < c; ++ci)
      for (int j = 0; j < hw; ++j) t[i++] = ci;
    return t;
  });
}

}  // namespace detail

// y = x W + b with x: N x in, W: in x out, b: 1 x out
template <class S>
Var<S> dense(Var<S> x, Var<S> w, Var<S> b) {
  return add(matmul(x, w), repeat_rows(b, x.rows()));
}

// Direct convolution as gather + matmul. x: N x (Cin*iHW), w: (Cin*k*k) x Cout,
// b: 1 x Cout, result N x (Cout*oHW).
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, const ConvGeom& g) {
  const int n = static_cast<int>(x.rows());
  require(x.cols() == static_cast<Eigen::Index>(g.in_c) * g.in_hw * g.in_hw, Errc::ShapeMismatch,
          "conv2d input shape");
  const int oh = g.out_hw();
  Var<S> cols = index_select(x, detail::im2col_table(n, g), static_cast<Eigen::Index>(n) * oh * oh,
                             static_cast<Eigen::Index>(g.in_c) * g.kernel * g.kernel);
  Var<S> y = add(matmul(cols, w), repeat_rows(b, cols.rows()));
  return index_select(y, detail::cols_to_image_table(n, g), n,
                      static_cast<Eigen::Index>(g.out_c) * oh * oh);
}

// Transposed convolution as matmul + scatter-add. x: N x (Cin*iHW),
// w: Cin x (Cout*k*k), b: 1 x Cout, result N x (Cout*oHW) with
// oHW = (in-1)*stride - 2*pad + kernel.
template <class S>
Var<S> conv2d_transpose(Var<S> x, Var<S> w, Var<S> b, const ConvGeom& g) {
  const int n = static_cast<int>(x.rows());
  require(x.cols() == static_cast<Eigen::Index>(g.in_c) * g.in_hw * g.in_hw, Errc::ShapeMismatch,
          "conv2d_transpose input shape");
  const int oh = g.out_hw_transposed();
  const int ohw = oh * oh;
  Var<S> rows = index_select(x, detail::image_to_rows_table(n, g),
                             static_cast<Eigen::Index>(n) * g.in_hw * g.in_hw, g.in_c);
  Var<S> cols = matmul(rows, w);
  Var<S> out = scatter_add(cols, detail::col2im_table(n, g), n,
                           static_cast<Eigen::Index>(g.out_c) * ohw);
  Var<S> bias_row = index_select(b, detail::channel_expand_table(g.out_c, ohw), 1,
                                 static_cast<Eigen::Index>(g.out_c) * ohw);
  return add(out, repeat_rows(bias_row, n));
}

// expand a 1 x C per-channel row to the N x (C*HW) batch layout
template <class S>
Var<S> channel_expand(Var<S> row, int n, int hw) {
  const int c = static_cast<int>(row.cols());
  Var<S> wide = hw == 1 ? row : index_select(row, detail::channel_expand_table(c, hw), 1,
                                             static_cast<Eigen::Index>(c) * hw);
  return repeat_rows(wide, n);
}

template <class S>
struct BatchNormOut {
  Var<S> y;
  MatX<S> batch_mean;  // 1 x C, evaluated
  MatX<S> batch_var;   // 1 x C, evaluated (biased)
};

// Batch statistics over batch and spatial positions per channel. Callers that
// commit a step fold batch_mean/batch_var into the running statistics; virtual
// lookahead steps simply drop them, leaving the committed model untouched.
template <class S>
BatchNormOut<S> batch_norm_train(Var<S> x, Var<S> gamma, Var<S> beta, int channels, int hw, S eps) {
  Tape<S>& t = *x.tape;
  const int n = static_cast<int>(x.rows());
  const S inv_count = S(1) / static_cast<S>(n * hw);
  require(x.cols() == static_cast<Eigen::Index>(channels) * hw, Errc::ShapeMismatch, "batch_norm input shape");

  // per-channel mean: reduce spatial via reshape, then batch via column sum
  Var<S> xs = reshape(x, static_cast<Eigen::Index>(n) * channels, hw);
  Var<S> per_nc = reshape(rowwise_sum(xs), n, channels);
  Var<S> mean = scale(colwise_sum(per_nc), inv_count);  // 1 x C

  Var<S> xc = sub(x, channel_expand(mean, n, hw));
  Var<S> xc2 = reshape(mul(xc, xc), static_cast<Eigen::Index>(n) * channels, hw);
  Var<S> var = scale(colwise_sum(reshape(rowwise_sum(xc2), n, channels)), inv_count);  // 1 x C

  Var<S> inv_std = divide(t.constant(MatX<S>::Ones(1, channels)), sqrt_v(add_scalar(var, eps)));
  Var<S> xhat = mul(xc, channel_expand(inv_std, n, hw));
  Var<S> y = add(mul(xhat, channel_expand(gamma, n, hw)), channel_expand(beta, n, hw));
  return BatchNormOut<S>{y, mean.value(), var.value()};
}

template <class S>
Var<S> batch_norm_inference(Var<S> x, Var<S> gamma, Var<S> beta, Var<S> running_mean, Var<S> running_var,
                            int channels, int hw, S eps) {
  Tape<S>& t = *x.tape;
  const int n = static_cast<int>(x.rows());
  Var<S> xc = sub(x, channel_expand(running_mean, n, hw));
  Var<S> inv_std = divide(t.constant(MatX<S>::Ones(1, channels)), sqrt_v(add_scalar(running_var, eps)));
  Var<S> xhat = mul(xc, channel_expand(inv_std, n, hw));
  return add(mul(xhat, channel_expand(gamma, n, hw)), channel_expand(beta, n, hw));
}

}  // namespace canroll::nn
