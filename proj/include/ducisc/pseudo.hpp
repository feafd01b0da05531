#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ducisc/errors.hpp"
#include "ducisc/losses.hpp"
#include "ducisc/segnet.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

// Per-class confidence thresholds evolved by EMA over training iterations.
struct ThresholdState {
    std::vector<double> values;
    double beta = 0.99;
    std::int64_t t = 0;

    static ThresholdState initial(int num_classes, double beta) {
        if (num_classes < 1) throw ValidationError("threshold state needs at least one class");
        if (!(beta > 0.0 && beta < 1.0)) throw ValidationError("beta must lie in (0, 1)");
        return {std::vector<double>(static_cast<std::size_t>(num_classes), 1.0 / num_classes), beta, 0};
    }
};

// One-hot argmax of the teacher's finest-level probabilities; ties go to the
// lowest class index.
template <class T>
Matrix<T> teacher_pseudo_label(const Prediction<T>& teacher) {
    return one_hot<T>(argmax_columns(teacher.finest()), static_cast<int>(teacher.finest().rows()));
}

struct ClassAverage {
    std::vector<double> value;
    std::vector<bool> present;
};

// Mean student probability of class c over the voxels the teacher assigns to c.
template <class T>
ClassAverage average_class_probability(const Matrix<T>& student_probs, const Matrix<T>& teacher_one_hot) {
    if (student_probs.rows() != teacher_one_hot.rows() || student_probs.cols() != teacher_one_hot.cols())
        throw ShapeMismatchError("student probabilities and teacher mask differ in shape");
    ClassAverage r;
    for (std::int64_t c = 0; c < student_probs.rows(); ++c) {
        const double sel = static_cast<double>(teacher_one_hot.row(c).sum());
        const bool present = sel > 0.0;
        r.present.push_back(present);
        r.value.push_back(present ? static_cast<double>(teacher_one_hot.row(c).dot(student_probs.row(c))) / sel : 0.0);
    }
    return r;
}

// Per-class mean over the samples in which the class is present.
inline ClassAverage batch_average(const std::vector<ClassAverage>& per_sample) {
    if (per_sample.empty()) throw ValidationError("no samples to average");
    const auto C = per_sample.front().value.size();
    ClassAverage r{std::vector<double>(C, 0.0), std::vector<bool>(C, false)};
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        int count = 0;
        for (const auto& s : per_sample)
            if (s.present[c]) {
                sum += s.value[c];
                ++count;
            }
        if (count > 0) {
            r.value[c] = sum / count;
            r.present[c] = true;
        }
    }
    return r;
}

// T^c <- beta * T^c + (1 - beta) * P_avg^c for present classes; absent
// classes keep their threshold. The iteration counter always advances.
inline ThresholdState update_thresholds(const ThresholdState& state, const ClassAverage& avg) {
    if (avg.value.size() != state.values.size() || avg.present.size() != state.values.size())
        throw ValidationError("class count of P_avg does not match the threshold state");
    ThresholdState next = state;
    for (std::size_t c = 0; c < next.values.size(); ++c)
        if (avg.present[c]) next.values[c] = state.beta * state.values[c] + (1.0 - state.beta) * avg.value[c];
    ++next.t;
    return next;
}

struct ConfidenceMask {
    std::vector<std::uint8_t> include;
    double coverage = 0.0;

    friend bool operator==(const ConfidenceMask&, const ConfidenceMask&) = default;
};

inline ConfidenceMask finish_mask(std::vector<std::uint8_t> include) {
    std::size_t on = 0;
    for (auto v : include) on += v;
    const double cov = include.empty() ? 0.0 : static_cast<double>(on) / static_cast<double>(include.size());
    return {std::move(include), cov};
}

// Voxel v is included iff the teacher probability of its pseudo-label class
// c(v) reaches T^{c(v)}.
template <class T>
ConfidenceMask confidence_mask(const Matrix<T>& teacher_probs, const Matrix<T>& teacher_one_hot,
                               const std::vector<double>& thresholds) {
    if (teacher_probs.rows() != teacher_one_hot.rows() || teacher_probs.cols() != teacher_one_hot.cols())
        throw ShapeMismatchError("teacher probabilities and pseudo label differ in shape");
    if (static_cast<std::int64_t>(thresholds.size()) != teacher_probs.rows())
        throw ShapeMismatchError("threshold count does not match class count");
    std::vector<std::uint8_t> inc(static_cast<std::size_t>(teacher_probs.cols()), 0);
    for (std::int64_t v = 0; v < teacher_probs.cols(); ++v) {
        Eigen::Index c = 0;
        teacher_one_hot.col(v).maxCoeff(&c);
        inc[static_cast<std::size_t>(v)] = static_cast<double>(teacher_probs(c, v)) >= thresholds[static_cast<std::size_t>(c)];
    }
    return finish_mask(std::move(inc));
}

// Threshold-masked Dice + CE at every deep-supervision level. The mask lives at
// the finest level and is rescaled by nearest neighbour; an empty mask gives 0.
template <class T>
DeepLoss<T> masked_consistency_loss(const std::vector<Matrix<T>>& student_logits, const std::vector<Shape3>& shapes,
                                    const Matrix<T>& target, TargetKind kind, const ConfidenceMask& mask) {
    return deep_dice_ce(student_logits, shapes, target, kind, &mask.include);
}

// Confidence estimators: the self-aware thresholds plus the fixed-probability
// and entropy baselines, and "none" (every voxel).
struct ConfidenceKind {
    enum class Type { SelfAware, None, Fixed, Entropy } type = Type::SelfAware;
    double parameter = 0.0;  // p for Fixed, tau for Entropy

    static ConfidenceKind parse(const std::string& s) {
        auto arg = [&](std::size_t prefix) {
            if (s.size() < prefix + 2 || s.back() != ')') throw ConfigError("malformed confidence kind: " + s);
            return std::stod(s.substr(prefix, s.size() - prefix - 1));
        };
        if (s == "self_aware" || s == "self-aware") return {Type::SelfAware, 0.0};
        if (s == "none") return {Type::None, 0.0};
        if (s.rfind("fixed(", 0) == 0) return {Type::Fixed, arg(6)};
        if (s.rfind("entropy(", 0) == 0) return {Type::Entropy, arg(8)};
        throw ConfigError("unknown confidence kind: " + s);
    }

    std::string str() const {
        switch (type) {
            case Type::SelfAware: return "self_aware";
            case Type::None: return "none";
            case Type::Fixed: return "fixed(" + std::to_string(parameter) + ")";
            case Type::Entropy: return "entropy(" + std::to_string(parameter) + ")";
        }
        return "self_aware";
    }
};

template <class T>
ConfidenceMask baseline_confidence(const ConfidenceKind& kind, const Matrix<T>& teacher_probs) {
    std::vector<std::uint8_t> inc(static_cast<std::size_t>(teacher_probs.cols()), 0);
    for (std::int64_t v = 0; v < teacher_probs.cols(); ++v) {
        bool keep = true;
        switch (kind.type) {
            case ConfidenceKind::Type::None: keep = true; break;
            case ConfidenceKind::Type::Fixed:
                keep = static_cast<double>(teacher_probs.col(v).maxCoeff()) >= kind.parameter;
                break;
            case ConfidenceKind::Type::Entropy: {
                double h = 0.0;
                for (std::int64_t c = 0; c < teacher_probs.rows(); ++c) {
                    const double p = static_cast<double>(teacher_probs(c, v));
                    if (p > 0.0) h -= p * std::log(p);
                }
                // Slack absorbs rounding when tau sits exactly at ln C.
                keep = h <= kind.parameter + 1e-12;
                break;
            }
            case ConfidenceKind::Type::SelfAware:
                throw ValidationError("self-aware confidence needs thresholds; use confidence_mask");
        }
        inc[static_cast<std::size_t>(v)] = keep;
    }
    return finish_mask(std::move(inc));
}

}  // namespace ducisc
