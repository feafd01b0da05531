#pragma once

// Layer primitives with explicit backward passes. Activations are stored as
// Matrix<T> with one row per channel and columns ordered (sample, voxel).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ducisc/tensor.hpp"

namespace ducisc::nn {

template <class T>
struct Act {
    Matrix<T> x;  // [channels, n * shape.size()]
    std::int64_t n = 0;
    Shape3 shape;

    std::int64_t voxels() const { return shape.size(); }
};

struct Offset {
    int dy, dx, dz;
};

// 3-wide neighbourhood: 9 offsets for 2D grids, 27 for 3D grids.
inline std::vector<Offset> kernel_offsets(int dims) {
    std::vector<Offset> k;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
            for (int dz = (dims == 3 ? -1 : 0); dz <= (dims == 3 ? 1 : 0); ++dz) k.push_back({dy, dx, dz});
    return k;
}

template <class T>
Matrix<T> im2col(const Act<T>& in, const std::vector<Offset>& offsets) {
    const auto& s = in.shape;
    const auto P = s.size();
    const auto K = static_cast<std::int64_t>(offsets.size());
    Matrix<T> cols(in.x.rows() * K, in.n * P);
    for (std::int64_t c = 0; c < in.x.rows(); ++c) {
        const T* src = in.x.row(c).data();
        for (std::int64_t k = 0; k < K; ++k) {
            const auto [dy, dx, dz] = offsets[static_cast<std::size_t>(k)];
            T* dst = cols.row(c * K + k).data();
            for (std::int64_t n = 0; n < in.n; ++n) {
                const T* sp = src + n * P;
                T* dp = dst + n * P;
                for (std::int64_t y = 0; y < s.h; ++y) {
                    const auto yy = y + dy;
                    const bool yin = yy >= 0 && yy < s.h;
                    for (std::int64_t x = 0; x < s.w; ++x) {
                        const auto xx = x + dx;
                        const bool in_plane = yin && xx >= 0 && xx < s.w;
                        for (std::int64_t z = 0; z < s.d; ++z) {
                            const auto zz = z + dz;
                            dp[s.index(y, x, z)] = (in_plane && zz >= 0 && zz < s.d) ? sp[s.index(yy, xx, zz)] : T(0);
                        }
                    }
                }
            }
        }
    }
    return cols;
}

template <class T>
Matrix<T> col2im(const Matrix<T>& cols, std::int64_t channels, std::int64_t n, const Shape3& s,
                 const std::vector<Offset>& offsets) {
    const auto P = s.size();
    const auto K = static_cast<std::int64_t>(offsets.size());
    Matrix<T> out = Matrix<T>::Zero(channels, n * P);
    for (std::int64_t c = 0; c < channels; ++c) {
        T* dst = out.row(c).data();
        for (std::int64_t k = 0; k < K; ++k) {
            const auto [dy, dx, dz] = offsets[static_cast<std::size_t>(k)];
            const T* src = cols.row(c * K + k).data();
            for (std::int64_t b = 0; b < n; ++b) {
                const T* sp = src + b * P;
                T* dp = dst + b * P;
                for (std::int64_t y = 0; y < s.h; ++y) {
                    const auto yy = y + dy;
                    if (yy < 0 || yy >= s.h) continue;
                    for (std::int64_t x = 0; x < s.w; ++x) {
                        const auto xx = x + dx;
                        if (xx < 0 || xx >= s.w) continue;
                        for (std::int64_t z = 0; z < s.d; ++z) {
                            const auto zz = z + dz;
                            if (zz < 0 || zz >= s.d) continue;
                            dp[s.index(yy, xx, zz)] += sp[s.index(y, x, z)];
                        }
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// 3x3(x3) convolution, zero padding 1, stride 1.

template <class T>
struct ConvCache {
    Matrix<T> cols;
    std::int64_t in_channels = 0;
};

template <class T>
Act<T> conv3_forward(const Matrix<T>& w, const Matrix<T>& b, const Act<T>& in, const std::vector<Offset>& offsets,
                     ConvCache<T>* cache) {
    Matrix<T> cols = im2col(in, offsets);
    Act<T> out{Matrix<T>(w.rows(), cols.cols()), in.n, in.shape};
    out.x.noalias() = w * cols;
    out.x.colwise() += b.col(0);
    if (cache) {
        cache->cols = std::move(cols);
        cache->in_channels = in.x.rows();
    }
    return out;
}

// Accumulates parameter gradients into gw/gb and returns d(input).
template <class T>
Matrix<T> conv3_backward(const Matrix<T>& w, const ConvCache<T>& cache, const Matrix<T>& dy, std::int64_t n,
                         const Shape3& shape, const std::vector<Offset>& offsets, Matrix<T>& gw, Matrix<T>& gb,
                         bool need_input_grad = true) {
    gw.noalias() += dy * cache.cols.transpose();
    gb.col(0) += dy.rowwise().sum();
    if (!need_input_grad) return {};
    Matrix<T> dcols = w.transpose() * dy;
    return col2im(dcols, cache.in_channels, n, shape, offsets);
}

// 1x1(x1) convolution (prediction heads).
template <class T>
Matrix<T> conv1_forward(const Matrix<T>& w, const Matrix<T>& b, const Matrix<T>& x) {
    Matrix<T> y = w * x;
    y.colwise() += b.col(0);
    return y;
}

template <class T>
Matrix<T> conv1_backward(const Matrix<T>& w, const Matrix<T>& x, const Matrix<T>& dy, Matrix<T>& gw, Matrix<T>& gb) {
    gw.noalias() += dy * x.transpose();
    gb.col(0) += dy.rowwise().sum();
    return w.transpose() * dy;
}

// ---------------------------------------------------------------------------
// Instance normalisation with per-channel affine, statistics per (channel, sample).

template <class T>
struct NormCache {
    Matrix<T> xhat;
    Matrix<T> inv_std;  // [channels, n]
};

inline constexpr double kNormEps = 1e-5;

template <class T>
Matrix<T> instnorm_forward(const Matrix<T>& gamma, const Matrix<T>& beta, const Matrix<T>& x, std::int64_t n,
                           std::int64_t voxels, NormCache<T>* cache) {
    Matrix<T> y(x.rows(), x.cols());
    Matrix<T> xhat(x.rows(), x.cols());
    Matrix<T> inv(x.rows(), n);
    for (std::int64_t c = 0; c < x.rows(); ++c)
        for (std::int64_t b = 0; b < n; ++b) {
            auto seg = x.row(c).segment(b * voxels, voxels);
            const T mean = seg.mean();
            const T var = (seg.array() - mean).square().mean();
            const T is = T(1) / std::sqrt(var + T(kNormEps));
            inv(c, b) = is;
            xhat.row(c).segment(b * voxels, voxels) = (seg.array() - mean) * is;
            y.row(c).segment(b * voxels, voxels) =
                xhat.row(c).segment(b * voxels, voxels).array() * gamma(c, 0) + beta(c, 0);
        }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return y;
}

template <class T>
Matrix<T> instnorm_backward(const Matrix<T>& gamma, const NormCache<T>& cache, const Matrix<T>& dy, std::int64_t n,
                            std::int64_t voxels, Matrix<T>& ggamma, Matrix<T>& gbeta) {
    Matrix<T> dx(dy.rows(), dy.cols());
    const T P = static_cast<T>(voxels);
    for (std::int64_t c = 0; c < dy.rows(); ++c)
        for (std::int64_t b = 0; b < n; ++b) {
            auto g = dy.row(c).segment(b * voxels, voxels).array();
            auto xh = cache.xhat.row(c).segment(b * voxels, voxels).array();
            ggamma(c, 0) += (g * xh).sum();
            gbeta(c, 0) += g.sum();
            const auto dxhat = g * gamma(c, 0);
            const T s1 = dxhat.sum();
            const T s2 = (dxhat * xh).sum();
            dx.row(c).segment(b * voxels, voxels) = (cache.inv_std(c, b) / P) * (P * dxhat - s1 - xh * s2);
        }
    return dx;
}

// ---------------------------------------------------------------------------

template <class T>
void relu_inplace(Matrix<T>& x) {
    x = x.cwiseMax(T(0));
}

template <class T>
Matrix<T> relu_backward(const Matrix<T>& y, const Matrix<T>& dy) {
    return (y.array() > T(0)).select(dy, T(0));
}

// Max pooling by an integer factor per axis. argmax holds the source column
// for every output element.
template <class T>
Act<T> maxpool_forward(const Act<T>& in, const Factor3& f, std::vector<std::int64_t>* argmax) {
    const Shape3 s = in.shape, o = shrink(s, f);
    const auto P = s.size(), Q = o.size();
    Act<T> out{Matrix<T>(in.x.rows(), in.n * Q), in.n, o};
    if (argmax) argmax->assign(static_cast<std::size_t>(in.x.rows() * in.n * Q), 0);
    for (std::int64_t c = 0; c < in.x.rows(); ++c)
        for (std::int64_t b = 0; b < in.n; ++b)
            for (std::int64_t y = 0; y < o.h; ++y)
                for (std::int64_t x = 0; x < o.w; ++x)
                    for (std::int64_t z = 0; z < o.d; ++z) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::int64_t at = 0;
                        for (std::int64_t a = 0; a < f.h; ++a)
                            for (std::int64_t e = 0; e < f.w; ++e)
                                for (std::int64_t g = 0; g < f.d; ++g) {
                                    const auto col = b * P + s.index(y * f.h + a, x * f.w + e, z * f.d + g);
                                    if (in.x(c, col) > best) {
                                        best = in.x(c, col);
                                        at = col;
                                    }
                                }
                        const auto oc = b * Q + o.index(y, x, z);
                        out.x(c, oc) = best;
                        if (argmax) (*argmax)[static_cast<std::size_t>(c * in.n * Q + oc)] = at;
                    }
    return out;
}

template <class T>
Matrix<T> maxpool_backward(const Matrix<T>& dy, const std::vector<std::int64_t>& argmax, std::int64_t in_cols) {
    Matrix<T> dx = Matrix<T>::Zero(dy.rows(), in_cols);
    for (std::int64_t c = 0; c < dy.rows(); ++c)
        for (std::int64_t k = 0; k < dy.cols(); ++k)
            dx(c, argmax[static_cast<std::size_t>(c * dy.cols() + k)]) += dy(c, k);
    return dx;
}

// Nearest-neighbour upsampling by an integer factor per axis.
template <class T>
Act<T> upsample_forward(const Act<T>& in, const Factor3& f) {
    const Shape3 s = in.shape;
    const Shape3 o{s.h * f.h, s.w * f.w, s.d * f.d};
    const auto P = s.size(), Q = o.size();
    Act<T> out{Matrix<T>(in.x.rows(), in.n * Q), in.n, o};
    for (std::int64_t c = 0; c < in.x.rows(); ++c)
        for (std::int64_t b = 0; b < in.n; ++b)
            for (std::int64_t y = 0; y < o.h; ++y)
                for (std::int64_t x = 0; x < o.w; ++x)
                    for (std::int64_t z = 0; z < o.d; ++z)
                        out.x(c, b * Q + o.index(y, x, z)) = in.x(c, b * P + s.index(y / f.h, x / f.w, z / f.d));
    return out;
}

template <class T>
Matrix<T> upsample_backward(const Matrix<T>& dy, std::int64_t n, const Shape3& coarse, const Factor3& f) {
    const Shape3 o{coarse.h * f.h, coarse.w * f.w, coarse.d * f.d};
    const auto P = coarse.size(), Q = o.size();
    Matrix<T> dx = Matrix<T>::Zero(dy.rows(), n * P);
    for (std::int64_t c = 0; c < dy.rows(); ++c)
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t y = 0; y < o.h; ++y)
                for (std::int64_t x = 0; x < o.w; ++x)
                    for (std::int64_t z = 0; z < o.d; ++z)
                        dx(c, b * P + coarse.index(y / f.h, x / f.w, z / f.d)) += dy(c, b * Q + o.index(y, x, z));
    return dx;
}

// Column-wise softmax over the class rows.
template <class T>
Matrix<T> softmax_columns(const Matrix<T>& logits) {
    Matrix<T> p(logits.rows(), logits.cols());
    for (std::int64_t v = 0; v < logits.cols(); ++v) {
        const T m = logits.col(v).maxCoeff();
        T sum = 0;
        for (std::int64_t c = 0; c < logits.rows(); ++c) sum += (p(c, v) = std::exp(logits(c, v) - m));
        p.col(v) /= sum;
    }
    return p;
}

}  // namespace ducisc::nn
