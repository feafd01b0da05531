#pragma once

// Soft Dice + cross-entropy on softmax heads, optionally restricted to a
// voxel subset, with gradients with respect to the logits.

#include <cmath>
#include <vector>

#include "ducisc/errors.hpp"
#include "ducisc/layers.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

inline constexpr double kDiceSmooth = 1e-5;

template <class T>
struct LossTerms {
    T dice = 0;
    T ce = 0;
    T total() const { return dice + ce; }
};

template <class T>
struct LossWithGrad {
    LossTerms<T> terms;
    Matrix<T> d_logits;  // same shape as the logits
};

// logits, target: [C, P]; target columns are simplices (one-hot or soft).
// weights: per-voxel inclusion weights (nullptr = every voxel counts with 1).
// An empty selection yields zero loss and zero gradient.
template <class T>
LossWithGrad<T> dice_ce(const Matrix<T>& logits, const Matrix<T>& target, const std::vector<T>* weights) {
    if (logits.rows() != target.rows() || logits.cols() != target.cols())
        throw ShapeMismatchError("logits and target shapes differ");
    if (weights && static_cast<std::int64_t>(weights->size()) != logits.cols())
        throw ShapeMismatchError("mask and logits voxel counts differ");
    const auto C = logits.rows(), P = logits.cols();
    auto w = [&](std::int64_t v) { return weights ? (*weights)[static_cast<std::size_t>(v)] : T(1); };

    LossWithGrad<T> out;
    out.d_logits = Matrix<T>::Zero(C, P);
    T mass = 0;
    for (std::int64_t v = 0; v < P; ++v) mass += w(v);
    if (mass == T(0)) return out;

    const Matrix<T> p = nn::softmax_columns(logits);

    // Cross-entropy via log-softmax.
    T ce = 0;
    for (std::int64_t v = 0; v < P; ++v) {
        if (w(v) == T(0)) continue;
        const T m = logits.col(v).maxCoeff();
        const T lse = m + std::log((logits.col(v).array() - m).exp().sum());
        T tsum = 0;
        for (std::int64_t c = 0; c < C; ++c) {
            ce -= w(v) * target(c, v) * (logits(c, v) - lse);
            tsum += target(c, v);
        }
        for (std::int64_t c = 0; c < C; ++c) out.d_logits(c, v) += w(v) / mass * (p(c, v) * tsum - target(c, v));
    }
    out.terms.ce = ce / mass;

    // Soft Dice over all classes.
    const T eps = static_cast<T>(kDiceSmooth);
    Matrix<T> dp = Matrix<T>::Zero(C, P);
    T dice_sum = 0;
    for (std::int64_t c = 0; c < C; ++c) {
        T inter = 0, ps = 0, ts = 0;
        for (std::int64_t v = 0; v < P; ++v) {
            inter += w(v) * p(c, v) * target(c, v);
            ps += w(v) * p(c, v);
            ts += w(v) * target(c, v);
        }
        const T den = ps + ts + eps;
        const T num = T(2) * inter + eps;
        dice_sum += num / den;
        for (std::int64_t v = 0; v < P; ++v)
            dp(c, v) = -(w(v) / static_cast<T>(C)) * (T(2) * target(c, v) / den - num / (den * den));
    }
    out.terms.dice = T(1) - dice_sum / static_cast<T>(C);

    // Softmax Jacobian.
    for (std::int64_t v = 0; v < P; ++v) {
        const T dot = p.col(v).dot(dp.col(v));
        for (std::int64_t c = 0; c < C; ++c) out.d_logits(c, v) += p(c, v) * (dp(c, v) - dot);
    }
    return out;
}

enum class TargetKind { Hard, Soft };

// Rescales a finest-level target to a coarser level: nearest for hard
// (one-hot) maps, box average for soft maps.
template <class T>
Matrix<T> rescale_target(const Matrix<T>& target, const Shape3& fine, const Shape3& coarse, TargetKind kind) {
    return kind == TargetKind::Hard ? downsample_nearest(target, fine, coarse) : downsample_box(target, fine, coarse);
}

template <class T>
struct DeepLoss {
    LossTerms<T> terms;               // averaged over levels
    std::vector<Matrix<T>> d_logits;  // per level
};

// Dice + CE applied at every deep-supervision level with uniform level
// weights. target and include are at the finest level; include may be empty
// (all voxels).
template <class T>
DeepLoss<T> deep_dice_ce(const std::vector<Matrix<T>>& logits, const std::vector<Shape3>& shapes, const Matrix<T>& target,
                         TargetKind kind, const std::vector<std::uint8_t>* include) {
    if (logits.empty() || logits.size() != shapes.size()) throw ShapeMismatchError("logit levels and shapes differ");
    const Shape3 fine = shapes.back();
    if (target.cols() != fine.size()) throw ShapeMismatchError("target must match the finest level");
    const T scale = T(1) / static_cast<T>(logits.size());

    Matrix<T> mask_fine;
    if (include) {
        if (static_cast<std::int64_t>(include->size()) != fine.size()) throw ShapeMismatchError("mask shape mismatch");
        mask_fine.resize(1, fine.size());
        for (std::int64_t v = 0; v < fine.size(); ++v) mask_fine(0, v) = (*include)[static_cast<std::size_t>(v)] ? T(1) : T(0);
    }

    DeepLoss<T> out;
    for (std::size_t s = 0; s < logits.size(); ++s) {
        const Matrix<T> tgt = rescale_target(target, fine, shapes[s], kind);
        LossWithGrad<T> lg;
        if (include) {
            const Matrix<T> m = downsample_nearest(mask_fine, fine, shapes[s]);
            std::vector<T> w(m.data(), m.data() + m.size());
            lg = dice_ce(logits[s], tgt, &w);
        } else {
            lg = dice_ce<T>(logits[s], tgt, nullptr);
        }
        out.terms.dice += scale * lg.terms.dice;
        out.terms.ce += scale * lg.terms.ce;
        out.d_logits.push_back(scale * lg.d_logits);
    }
    return out;
}

// One-hot [C, P] matrix from class indices.
template <class T>
Matrix<T> one_hot(const std::vector<int>& classes, int num_classes) {
    Matrix<T> m = Matrix<T>::Zero(num_classes, static_cast<std::int64_t>(classes.size()));
    for (std::size_t v = 0; v < classes.size(); ++v) m(classes[v], static_cast<std::int64_t>(v)) = T(1);
    return m;
}

}  // namespace ducisc
