#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "patchfill/grid.hpp"
#include "patchfill/rng.hpp"

namespace patchfill {

/// Named parameter with an accumulated gradient of the same shape.
template <typename Scalar>
struct Tensor {
  MatrixX<Scalar> v;
  MatrixX<Scalar> g;

  void setup(Eigen::Index rows, Eigen::Index cols) {
    v = MatrixX<Scalar>::Zero(rows, cols);
    g = MatrixX<Scalar>::Zero(rows, cols);
  }
  void zero_grad() { g.setZero(); }
  void fill_gaussian(double sd, CounterRng& rng) {
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = static_cast<Scalar>(sd * rng.gaussian());
  }
};

// ---------------------------------------------------------------------------
// Activations (value in, value out; backward takes the cached forward input
// unless noted).

template <typename M>
M relu(const M& x) {
  return x.cwiseMax(typename M::Scalar(0));
}

template <typename M>
M relu_backward(const M& dy, const M& x) {
  return ((x.array() > typename M::Scalar(0)).template cast<typename M::Scalar>() * dy.array()).matrix();
}

template <typename M>
M leaky_relu(const M& x, typename M::Scalar slope) {
  return x.cwiseMax(x * slope);
}

template <typename M>
M leaky_relu_backward(const M& dy, const M& x, typename M::Scalar slope) {
  using S = typename M::Scalar;
  return (((x.array() > S(0)).template cast<S>() + (x.array() <= S(0)).template cast<S>() * slope) *
          dy.array())
      .matrix();
}

template <typename M>
M sigmoid(const M& x) {
  using S = typename M::Scalar;
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

/// Backward from the cached output y = sigmoid(x).
template <typename M>
M sigmoid_backward(const M& dy, const M& y) {
  using S = typename M::Scalar;
  return (dy.array() * y.array() * (S(1) - y.array())).matrix();
}

template <typename M>
M gelu(const M& x) {
  using S = typename M::Scalar;
  return x.unaryExpr([](S v) {
    return static_cast<S>(v * S(0.5) * (S(1) + std::erf(v * S(0.70710678118654752440))));
  });
}

template <typename M>
M gelu_backward(const M& dy, const M& x) {
  using S = typename M::Scalar;
  return dy.binaryExpr(x, [](S d, S v) {
    const S cdf = S(0.5) * (S(1) + std::erf(v * S(0.70710678118654752440)));
    const S pdf = S(0.39894228040143267794) * std::exp(S(-0.5) * v * v);
    return static_cast<S>(d * (cdf + v * pdf));
  });
}

/// Row-wise softmax with the max-subtraction trick.
template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Backward through row-wise softmax given the cached output p.
template <typename Scalar>
MatrixX<Scalar> softmax_rows_backward(const MatrixX<Scalar>& dp, const MatrixX<Scalar>& p) {
  MatrixX<Scalar> dx(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Scalar dot = dp.row(i).dot(p.row(i));
    dx.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Scalar>
struct Linear {
  Tensor<Scalar> w;  // in x out
  Tensor<Scalar> b;  // 1 x out

  void setup(int in, int out, CounterRng& rng, double sd = -1.0) {
    w.setup(in, out);
    b.setup(1, out);
    w.fill_gaussian(sd < 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : sd, rng);
  }

  MatrixX<Scalar> forward(const MatrixX<Scalar>& x) const {
    return ((x * w.v).rowwise() + b.v.row(0)).eval();
  }

  /// Accumulates parameter gradients and returns the input gradient.
  MatrixX<Scalar> backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& dy) {
    w.g.noalias() += x.transpose() * dy;
    b.g.row(0) += dy.colwise().sum();
    return dy * w.v.transpose();
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    f(name + ".w", w);
    f(name + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Convolutions. Window anchor (y,x) of a (rows_h x rows_w) anchor grid reads
// source pixel (y*stride - pad + ky, x*stride - pad + kx); im2col gathers with
// that mapping and col2im_add is its exact transpose, so Conv2d and
// ConvTranspose2d share one geometry.

template <typename Scalar>
MatrixX<Scalar> im2col(const Grid<Scalar>& src, int k, int stride, int pad, int rows_h, int rows_w) {
  const int c = src.channels;
  MatrixX<Scalar> cols = MatrixX<Scalar>::Zero(static_cast<Eigen::Index>(rows_h) * rows_w,
                                               static_cast<Eigen::Index>(k) * k * c);
  for (int y = 0; y < rows_h; ++y)
    for (int x = 0; x < rows_w; ++x) {
      auto row = cols.row(static_cast<Eigen::Index>(y) * rows_w + x);
      for (int ky = 0; ky < k; ++ky) {
        const int sy = y * stride - pad + ky;
        if (sy < 0 || sy >= src.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int sx = x * stride - pad + kx;
          if (sx < 0 || sx >= src.width) continue;
          row.segment((static_cast<Eigen::Index>(ky) * k + kx) * c, c) = src.row(sy, sx);
        }
      }
    }
  return cols;
}

template <typename Scalar>
void col2im_add(const MatrixX<Scalar>& cols, int k, int stride, int pad, int rows_h, int rows_w,
                Grid<Scalar>& dst) {
  const int c = dst.channels;
  for (int y = 0; y < rows_h; ++y)
    for (int x = 0; x < rows_w; ++x) {
      const auto row = cols.row(static_cast<Eigen::Index>(y) * rows_w + x);
      for (int ky = 0; ky < k; ++ky) {
        const int sy = y * stride - pad + ky;
        if (sy < 0 || sy >= dst.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int sx = x * stride - pad + kx;
          if (sx < 0 || sx >= dst.width) continue;
          dst.row(sy, sx) += row.segment((static_cast<Eigen::Index>(ky) * k + kx) * c, c);
        }
      }
    }
}

template <typename Scalar>
struct Conv2d {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  Tensor<Scalar> w;  // (k*k*in_c) x out_c, row index ((ky*k)+kx)*in_c + ci
  Tensor<Scalar> b;  // 1 x out_c

  struct Cache {
    MatrixX<Scalar> cols;
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  void setup(int in_channels, int out_channels, int kernel, int stride_, int pad_, CounterRng& rng) {
    in_c = in_channels;
    out_c = out_channels;
    k = kernel;
    stride = stride_;
    pad = pad_;
    w.setup(static_cast<Eigen::Index>(k) * k * in_c, out_c);
    b.setup(1, out_c);
    w.fill_gaussian(std::sqrt(2.0 / (static_cast<double>(k) * k * in_c)), rng);
  }

  Grid<Scalar> forward(const Grid<Scalar>& x, Cache* cache = nullptr) const {
    require(x.channels == in_c, "Conv2d: channel mismatch");
    const int out_h = (x.height + 2 * pad - k) / stride + 1;
    const int out_w = (x.width + 2 * pad - k) / stride + 1;
    require(out_h > 0 && out_w > 0, "Conv2d: input too small for kernel");
    MatrixX<Scalar> cols = im2col(x, k, stride, pad, out_h, out_w);
    Grid<Scalar> out(out_h, out_w, out_c);
    out.data.noalias() = cols * w.v;
    out.data.rowwise() += b.v.row(0);
    if (cache) {
      cache->cols = std::move(cols);
      cache->in_h = x.height;
      cache->in_w = x.width;
      cache->out_h = out_h;
      cache->out_w = out_w;
    }
    return out;
  }

  Grid<Scalar> backward(const Cache& cache, const Grid<Scalar>& dy, bool accumulate = true) {
    if (accumulate) {
      w.g.noalias() += cache.cols.transpose() * dy.data;
      b.g.row(0) += dy.data.colwise().sum();
    }
    return backward_data(cache, dy);
  }

  Grid<Scalar> backward_data(const Cache& cache, const Grid<Scalar>& dy) const {
    MatrixX<Scalar> dcols = dy.data * w.v.transpose();
    Grid<Scalar> dx(cache.in_h, cache.in_w, in_c);
    col2im_add(dcols, k, stride, pad, cache.out_h, cache.out_w, dx);
    return dx;
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    f(name + ".w", w);
    f(name + ".b", b);
  }
};

template <typename Scalar>
struct ConvTranspose2d {
  int in_c = 0, out_c = 0, k = 4, stride = 2, pad = 1;
  Tensor<Scalar> w;  // in_c x (k*k*out_c), column ((ky*k)+kx)*out_c + co
  Tensor<Scalar> b;  // 1 x out_c

  struct Cache {
    MatrixX<Scalar> input;  // (in_h*in_w) x in_c
    int in_h = 0, in_w = 0;
  };

  void setup(int in_channels, int out_channels, int kernel, int stride_, int pad_, CounterRng& rng) {
    in_c = in_channels;
    out_c = out_channels;
    k = kernel;
    stride = stride_;
    pad = pad_;
    w.setup(in_c, static_cast<Eigen::Index>(k) * k * out_c);
    b.setup(1, out_c);
    w.fill_gaussian(std::sqrt(2.0 / (static_cast<double>(k) * k * in_c)), rng);
  }

  Grid<Scalar> forward(const Grid<Scalar>& x, Cache* cache = nullptr) const {
    require(x.channels == in_c, "ConvTranspose2d: channel mismatch");
    const int out_h = (x.height - 1) * stride + k - 2 * pad;
    const int out_w = (x.width - 1) * stride + k - 2 * pad;
    MatrixX<Scalar> cols = x.data * w.v;  // (in positions) x (k*k*out_c)
    Grid<Scalar> out(out_h, out_w, out_c);
    col2im_add(cols, k, stride, pad, x.height, x.width, out);
    out.data.rowwise() += b.v.row(0);
    if (cache) {
      cache->input = x.data;
      cache->in_h = x.height;
      cache->in_w = x.width;
    }
    return out;
  }

  Grid<Scalar> backward(const Cache& cache, const Grid<Scalar>& dy, bool accumulate = true) {
    MatrixX<Scalar> dcols = im2col(dy, k, stride, pad, cache.in_h, cache.in_w);
    if (accumulate) {
      w.g.noalias() += cache.input.transpose() * dcols;
      b.g.row(0) += dy.data.colwise().sum();
    }
    Grid<Scalar> dx(cache.in_h, cache.in_w, in_c);
    dx.data.noalias() = dcols * w.v.transpose();
    return dx;
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    f(name + ".w", w);
    f(name + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last (channel) axis of a positions x channels matrix.

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gain;  // 1 x D
  Tensor<Scalar> bias;  // 1 x D
  static constexpr Scalar kEps = Scalar(1e-5);

  struct Cache {
    MatrixX<Scalar> xhat;
    VectorX<Scalar> inv_std;
  };

  void setup(int dim) {
    gain.setup(1, dim);
    gain.v.setOnes();
    bias.setup(1, dim);
  }

  MatrixX<Scalar> forward(const MatrixX<Scalar>& x, Cache* cache = nullptr) const {
    const Eigen::Index d = x.cols();
    MatrixX<Scalar> xhat(x.rows(), d);
    VectorX<Scalar> inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Scalar mu = x.row(i).mean();
      const Scalar var = (x.row(i).array() - mu).square().sum() / static_cast<Scalar>(d);
      inv_std(i) = Scalar(1) / std::sqrt(var + kEps);
      xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
    }
    MatrixX<Scalar> y = (xhat.array().rowwise() * gain.v.row(0).array()).matrix();
    y.rowwise() += bias.v.row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  MatrixX<Scalar> backward(const Cache& cache, const MatrixX<Scalar>& dy) {
    const Eigen::Index d = dy.cols();
    gain.g.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    bias.g.row(0) += dy.colwise().sum();
    MatrixX<Scalar> dxhat = (dy.array().rowwise() * gain.v.row(0).array()).matrix();
    MatrixX<Scalar> dx(dy.rows(), d);
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const Scalar s1 = dxhat.row(i).sum();
      const Scalar s2 = dxhat.row(i).dot(cache.xhat.row(i));
      dx.row(i) = (cache.inv_std(i) / static_cast<Scalar>(d)) *
                  (static_cast<Scalar>(d) * dxhat.row(i).array() - s1 - cache.xhat.row(i).array() * s2)
                      .matrix();
    }
    return dx;
  }

  template <class F>
  void visit(const std::string& name, F&& f) {
    f(name + ".gain", gain);
    f(name + ".bias", bias);
  }
};

}  // namespace patchfill
