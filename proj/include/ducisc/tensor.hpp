#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ducisc/errors.hpp"

namespace ducisc {

// Row-major dense matrix. Feature maps are stored channel-major: one row per
// channel, one column per voxel (and per sample when batched, sample-major).
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Spatial extent of a 2D ([H,W], d == 1) or 3D ([H,W,D]) grid.
struct Shape3 {
    std::int64_t h = 1;
    std::int64_t w = 1;
    std::int64_t d = 1;

    constexpr std::int64_t size() const { return h * w * d; }
    constexpr std::int64_t index(std::int64_t y, std::int64_t x, std::int64_t z) const {
        return (y * w + x) * d + z;
    }
    constexpr std::int64_t operator[](int axis) const { return axis == 0 ? h : axis == 1 ? w : d; }
    friend constexpr bool operator==(const Shape3&, const Shape3&) = default;

    std::string str() const {
        return std::to_string(h) + "x" + std::to_string(w) + (d > 1 ? "x" + std::to_string(d) : "");
    }
};

// Per-axis pooling factor: 2x2 for 2D grids, 2x2x2 for 3D grids.
struct Factor3 {
    std::int64_t h = 1;
    std::int64_t w = 1;
    std::int64_t d = 1;
};

inline Factor3 pool_factor(int dims, int levels) {
    const std::int64_t f = std::int64_t{1} << levels;
    return dims == 3 ? Factor3{f, f, f} : Factor3{f, f, 1};
}

inline Shape3 shrink(const Shape3& s, const Factor3& f) {
    return Shape3{s.h / f.h, s.w / f.w, s.d / f.d};
}

inline bool divisible(const Shape3& s, const Factor3& f) {
    return s.h % f.h == 0 && s.w % f.w == 0 && s.d % f.d == 0;
}

inline Factor3 ratio(const Shape3& fine, const Shape3& coarse) {
    if (coarse.size() <= 0 || fine.h % coarse.h || fine.w % coarse.w || fine.d % coarse.d)
        throw ShapeMismatchError("cannot rescale " + fine.str() + " to " + coarse.str());
    return Factor3{fine.h / coarse.h, fine.w / coarse.w, fine.d / coarse.d};
}

// Nearest-neighbour downsampling of a [rows, fine voxels] map. Each coarse voxel
// copies the fine voxel at the centre of its block (offset f/2 per axis).
template <class T>
Matrix<T> downsample_nearest(const Matrix<T>& m, const Shape3& fine, const Shape3& coarse) {
    if (fine == coarse) return m;
    const Factor3 f = ratio(fine, coarse);
    Matrix<T> out(m.rows(), coarse.size());
    for (std::int64_t y = 0; y < coarse.h; ++y)
        for (std::int64_t x = 0; x < coarse.w; ++x)
            for (std::int64_t z = 0; z < coarse.d; ++z) {
                const auto src = fine.index(y * f.h + f.h / 2, x * f.w + f.w / 2, z * f.d + f.d / 2);
                out.col(coarse.index(y, x, z)) = m.col(src);
            }
    return out;
}

// Area-average (box) downsampling; preserves the mean of every row.
template <class T>
Matrix<T> downsample_box(const Matrix<T>& m, const Shape3& fine, const Shape3& coarse) {
    if (fine == coarse) return m;
    const Factor3 f = ratio(fine, coarse);
    Matrix<T> out = Matrix<T>::Zero(m.rows(), coarse.size());
    for (std::int64_t y = 0; y < fine.h; ++y)
        for (std::int64_t x = 0; x < fine.w; ++x)
            for (std::int64_t z = 0; z < fine.d; ++z)
                out.col(coarse.index(y / f.h, x / f.w, z / f.d)) += m.col(fine.index(y, x, z));
    out /= static_cast<T>(f.h * f.w * f.d);
    return out;
}

// Columns [n*voxels, (n+1)*voxels) of a batched map.
template <class T>
Matrix<T> sample_block(const Matrix<T>& batched, std::int64_t n, std::int64_t voxels) {
    return batched.middleCols(n * voxels, voxels);
}

}  // namespace ducisc
