#pragma once

#include <memory>
#include <string>

#include "ducisc/errors.hpp"
#include "ducisc/random.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

inline constexpr double kSigmaLow = 0.25;
inline constexpr double kSigmaHigh = 0.75;

// Mixing ratio for one labeled/unlabeled pair, uniform on [0.25, 0.75].
inline double sample_sigma(Rng& rng) { return rng.uniform(kSigmaLow, kSigmaHigh); }

template <class T>
struct FusedSample {
    Matrix<T> image;       // [1, P]
    Matrix<T> soft_label;  // [C, P]
    double sigma = 0.5;
    std::string labeled_id;
    std::string unlabeled_id;
};

// x_k = sigma * x_i + (1 - sigma) * x_j, y_k = sigma * y_i + (1 - sigma) * ybar_j.
template <class T>
FusedSample<T> mixup(const Matrix<T>& x_i, const Matrix<T>& y_i, const Matrix<T>& x_j, const Matrix<T>& ybar_j, double sigma) {
    if (!(sigma >= 0.0 && sigma <= 1.0)) throw ValidationError("mixing ratio must lie in [0, 1]");
    if (x_i.rows() != x_j.rows() || x_i.cols() != x_j.cols()) throw ShapeMismatchError("mixup image shapes differ");
    if (y_i.rows() != ybar_j.rows() || y_i.cols() != ybar_j.cols() || y_i.cols() != x_i.cols())
        throw ShapeMismatchError("mixup label shapes differ");
    const T a = static_cast<T>(sigma), b = static_cast<T>(1.0 - sigma);
    return {a * x_i + b * x_j, a * y_i + b * ybar_j, sigma, {}, {}};
}

// Extension point for alternative image fusion schemes. Only Mixup ships.
template <class T>
class Mixer {
public:
    virtual ~Mixer() = default;
    virtual std::string name() const = 0;
    // Draws whatever randomness the mixer needs for one pair.
    virtual double draw(Rng& rng) const = 0;
    virtual FusedSample<T> mix(const Matrix<T>& x_i, const Matrix<T>& y_i, const Matrix<T>& x_j, const Matrix<T>& ybar_j,
                               double draw) const = 0;
};

template <class T>
class MixupMixer final : public Mixer<T> {
public:
    std::string name() const override { return "mixup"; }
    double draw(Rng& rng) const override { return sample_sigma(rng); }
    FusedSample<T> mix(const Matrix<T>& x_i, const Matrix<T>& y_i, const Matrix<T>& x_j, const Matrix<T>& ybar_j,
                       double sigma) const override {
        return mixup(x_i, y_i, x_j, ybar_j, sigma);
    }
};

template <class T>
std::unique_ptr<Mixer<T>> make_mixer(const std::string& kind) {
    if (kind == "mixup") return std::make_unique<MixupMixer<T>>();
    throw ConfigError("unknown mixer kind: " + kind);
}

}  // namespace ducisc
