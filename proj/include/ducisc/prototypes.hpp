#pragma once

#include <vector>

#include "ducisc/errors.hpp"
#include "ducisc/losses.hpp"
#include "ducisc/segnet.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

template <class T>
struct Pooled {
    Vector<T> value;
    bool present = false;
    T mass = 0;
};

// Weighted mean of the feature columns: sum(mask * F) / sum(mask).
// features: [Z, P]; mask: P weights in [0, 1]. A zero mask is reported absent.
template <class T>
Pooled<T> masked_average_pool(const Matrix<T>& features, const Vector<T>& mask) {
    if (features.cols() != mask.size()) throw ShapeMismatchError("mask and feature voxel counts differ");
    Pooled<T> out;
    out.mass = mask.sum();
    out.present = out.mass > T(0);
    if (out.present) out.value = (features * mask) / out.mass;
    else out.value = Vector<T>::Zero(features.rows());
    return out;
}

// Class-wise, scale-wise prototypes. Entry (c, s) is stored at c * scales + s.
template <class T>
struct PrototypeSet {
    int classes = 0;
    int scales = 0;
    std::vector<Vector<T>> vectors;
    std::vector<bool> present;

    const Vector<T>& at(int c, int s) const { return vectors[static_cast<std::size_t>(c * scales + s)]; }
    bool has(int c, int s) const { return present[static_cast<std::size_t>(c * scales + s)]; }
};

// Class masks rescaled to every pyramid level: result[s] is [C, voxels^s].
template <class T>
std::vector<Matrix<T>> level_masks(const std::vector<Shape3>& shapes, const Matrix<T>& label, TargetKind kind) {
    const Shape3 fine = shapes.back();
    if (label.cols() != fine.size()) throw ShapeMismatchError("label must match the finest pyramid level");
    std::vector<Matrix<T>> out;
    for (const auto& s : shapes) out.push_back(rescale_target(label, fine, s, kind));
    return out;
}

// label: [C, finest voxels], one-hot (kind Hard, nearest rescaling) or soft
// (kind Soft, box rescaling).
template <class T>
PrototypeSet<T> extract_prototypes(const FeaturePyramid<T>& pyramid, const Matrix<T>& label, TargetKind kind) {
    const auto masks = level_masks(pyramid.shapes, label, kind);
    PrototypeSet<T> ps;
    ps.classes = static_cast<int>(label.rows());
    ps.scales = static_cast<int>(pyramid.depth());
    for (int c = 0; c < ps.classes; ++c)
        for (int s = 0; s < ps.scales; ++s) {
            const Vector<T> m = masks[static_cast<std::size_t>(s)].row(c).transpose();
            auto pooled = masked_average_pool(pyramid.levels[static_cast<std::size_t>(s)], m);
            ps.vectors.push_back(std::move(pooled.value));
            ps.present.push_back(pooled.present);
        }
    return ps;
}

inline void check_compatible_sets(int ca, int sa, int cb, int sb) {
    if (ca != cb || sa != sb) throw ValidationError("prototype sets differ in class or scale count");
}

template <class T>
struct AlignmentResult {
    T loss = 0;
    std::vector<Vector<T>> d_a;  // d loss / d prototype, same indexing as PrototypeSet
    std::vector<Vector<T>> d_b;
};

// (1/C) * sum_s sum_c ||a^{c,s} - b^{c,s}||^2 over pairs present on both sides.
// normalize_by_scales additionally divides by S.
template <class T>
AlignmentResult<T> prototype_alignment(const PrototypeSet<T>& a, const PrototypeSet<T>& b, bool normalize_by_scales = false) {
    check_compatible_sets(a.classes, a.scales, b.classes, b.scales);
    AlignmentResult<T> r;
    const T norm = T(1) / static_cast<T>(a.classes * (normalize_by_scales ? a.scales : 1));
    for (std::size_t i = 0; i < a.vectors.size(); ++i) {
        if (a.vectors[i].size() != b.vectors[i].size()) throw ValidationError("prototype channel widths differ");
        if (a.present[i] && b.present[i]) {
            const Vector<T> diff = a.vectors[i] - b.vectors[i];
            r.loss += norm * diff.squaredNorm();
            r.d_a.push_back(T(2) * norm * diff);
            r.d_b.push_back(T(-2) * norm * diff);
        } else {
            r.d_a.push_back(Vector<T>::Zero(a.vectors[i].size()));
            r.d_b.push_back(Vector<T>::Zero(b.vectors[i].size()));
        }
    }
    return r;
}

template <class T>
T prototype_alignment_loss(const PrototypeSet<T>& a, const PrototypeSet<T>& b, bool normalize_by_scales = false) {
    return prototype_alignment(a, b, normalize_by_scales).loss;
}

// Chain rule through masked average pooling: d loss / d F^s.
template <class T>
std::vector<Matrix<T>> prototype_feature_grad(const FeaturePyramid<T>& pyramid, const Matrix<T>& label, TargetKind kind,
                                              const std::vector<Vector<T>>& d_protos) {
    const auto masks = level_masks(pyramid.shapes, label, kind);
    const int C = static_cast<int>(label.rows());
    const int S = static_cast<int>(pyramid.depth());
    std::vector<Matrix<T>> out;
    for (int s = 0; s < S; ++s) {
        const auto& F = pyramid.levels[static_cast<std::size_t>(s)];
        Matrix<T> g = Matrix<T>::Zero(F.rows(), F.cols());
        for (int c = 0; c < C; ++c) {
            const auto& m = masks[static_cast<std::size_t>(s)];
            const T mass = m.row(c).sum();
            const auto& dp = d_protos[static_cast<std::size_t>(c * S + s)];
            if (mass <= T(0) || dp.isZero(0)) continue;
            g.noalias() += dp * (m.row(c) / mass);
        }
        out.push_back(std::move(g));
    }
    return out;
}

template <class T>
struct CrossImageAlignment {
    T loss = 0;
    std::vector<Matrix<T>> d_features_a;
    std::vector<Matrix<T>> d_features_b;
};

// Full cross-image prototype consistency term for one image pair, with
// gradients flowing into both feature pyramids.
template <class T>
CrossImageAlignment<T> cross_image_alignment(const FeaturePyramid<T>& pa, const Matrix<T>& label_a, TargetKind kind_a,
                                             const FeaturePyramid<T>& pb, const Matrix<T>& label_b, TargetKind kind_b,
                                             bool normalize_by_scales = false) {
    const auto a = extract_prototypes(pa, label_a, kind_a);
    const auto b = extract_prototypes(pb, label_b, kind_b);
    const auto r = prototype_alignment(a, b, normalize_by_scales);
    return {r.loss, prototype_feature_grad(pa, label_a, kind_a, r.d_a), prototype_feature_grad(pb, label_b, kind_b, r.d_b)};
}

template <class T>
struct FeatureConsistency {
    T loss = 0;
    std::vector<Matrix<T>> d_student;
};

// Direct feature matching baseline: sum_s ||F_tea^s - F_stu^s||_F^2 / voxels^s.
// The teacher side is a constant target.
template <class T>
FeatureConsistency<T> feature_consistency(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student) {
    if (teacher.depth() != student.depth()) throw ShapeMismatchError("pyramid depths differ");
    FeatureConsistency<T> r;
    for (std::size_t s = 0; s < teacher.depth(); ++s) {
        const auto& ft = teacher.levels[s];
        const auto& fs = student.levels[s];
        if (ft.rows() != fs.rows() || ft.cols() != fs.cols()) throw ShapeMismatchError("pyramid level shapes differ");
        const T vox = static_cast<T>(ft.cols());
        r.loss += (ft - fs).squaredNorm() / vox;
        r.d_student.push_back(T(2) * (fs - ft) / vox);
    }
    return r;
}

template <class T>
T feature_consistency_loss(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student) {
    return feature_consistency(teacher, student).loss;
}

}  // namespace ducisc
