#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"

using namespace ducisc;
using namespace ducisc::testing;

namespace {

Prediction<double> prediction_of(const Matrix<double>& probs) {
    Prediction<double> p;
    p.probs = {probs};
    p.shapes = {Shape3{1, probs.cols(), 1}};
    p.hard = argmax_columns(probs);
    return p;
}

ClassAverage constant_average(const std::vector<double>& v) { return {v, std::vector<bool>(v.size(), true)}; }

}  // namespace

TEST(PseudoLabel, ArgmaxWithLowIndexTies) {
    Matrix<double> p(2, 3);
    p << 0.9, 0.5, 0.2,  //
        0.1, 0.5, 0.8;
    const auto y = teacher_pseudo_label(prediction_of(p));
    EXPECT_EQ(y, one_hot<double>({0, 0, 1}, 2));
}

TEST(PseudoLabel, RandomProbabilitiesGiveOneHotColumns) {
    std::mt19937_64 g(1);
    const auto y = teacher_pseudo_label(prediction_of(random_simplex(4, 30, g)));
    for (int v = 0; v < 30; ++v) {
        EXPECT_EQ(y.col(v).sum(), 1.0);
        EXPECT_EQ(y.col(v).maxCoeff(), 1.0);
    }
}

TEST(AverageClassProbability, HandCaseAndAbsence) {
    Matrix<double> student(2, 2), teacher(2, 2);
    student << 0.2, 0.4,  //
        0.8, 0.6;
    teacher << 0, 0,  //
        1, 1;
    const auto a = average_class_probability(student, teacher);
    EXPECT_FALSE(a.present[0]);
    EXPECT_TRUE(a.present[1]);
    EXPECT_NEAR(a.value[1], 0.7, 1e-15);
}

TEST(AverageClassProbability, UniformAndCertainStudents) {
    std::mt19937_64 g(2);
    const auto teacher = random_one_hot(3, 40, g);
    const auto uni = average_class_probability(Matrix<double>(Matrix<double>::Constant(3, 40, 1.0 / 3)), teacher);
    const auto same = average_class_probability(teacher, teacher);
    for (int c = 0; c < 3; ++c)
        if (uni.present[static_cast<std::size_t>(c)]) {
            EXPECT_NEAR(uni.value[static_cast<std::size_t>(c)], 1.0 / 3, 1e-15);
            EXPECT_EQ(same.value[static_cast<std::size_t>(c)], 1.0);
        }
}

TEST(BatchAverage, MeansOverPresentSamples) {
    const ClassAverage a{{0.4, 0.9}, {true, true}}, b{{0.0, 0.5}, {false, true}};
    const auto r = batch_average({a, b});
    EXPECT_DOUBLE_EQ(r.value[0], 0.4);
    EXPECT_DOUBLE_EQ(r.value[1], 0.7);
    EXPECT_THROW(batch_average({}), ValidationError);
}

TEST(Thresholds, InitialValueIsOneOverC) {
    const auto s = ThresholdState::initial(2, 0.99);
    EXPECT_EQ(s.values, (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(s.t, 0);
    EXPECT_THROW(ThresholdState::initial(0, 0.99), ValidationError);
    EXPECT_THROW(ThresholdState::initial(2, 1.0), ValidationError);
}

TEST(Thresholds, SingleUpdate) {
    const auto s = update_thresholds(ThresholdState::initial(2, 0.99), constant_average({0.9, 0.9}));
    EXPECT_NEAR(s.values[0], 0.504, 1e-12);
    EXPECT_EQ(s.t, 1);
}

TEST(Thresholds, AbsentClassKeepsValue) {
    ClassAverage a{{0.9, 0.9}, {true, false}};
    const auto s = update_thresholds(ThresholdState::initial(2, 0.9), a);
    EXPECT_NEAR(s.values[0], 0.54, 1e-12);
    EXPECT_EQ(s.values[1], 0.5);
}

TEST(Thresholds, GeometricContractionUnderConstantAverage) {
    const double p = 0.83, beta = 0.99;
    auto s = ThresholdState::initial(3, beta);
    for (int t = 1; t <= 500; ++t) {
        s = update_thresholds(s, constant_average({p, p, p}));
        EXPECT_NEAR(std::abs(s.values[0] - p), std::pow(beta, t) * std::abs(1.0 / 3 - p), 1e-12);
    }
}

TEST(Thresholds, StayInRangeAndAreMonotoneInTheStream) {
    std::mt19937_64 g(3);
    std::uniform_real_distribution<double> u(0.5, 0.999);
    auto lo = ThresholdState::initial(2, 0.95), hi = lo;
    for (int t = 0; t < 300; ++t) {
        const double a = u(g), b = u(g);
        lo = update_thresholds(lo, constant_average({std::min(a, b), std::min(a, b)}));
        hi = update_thresholds(hi, constant_average({std::max(a, b), std::max(a, b)}));
        EXPECT_GE(lo.values[0], 0.5);
        EXPECT_LT(hi.values[0], 1.0);
        EXPECT_LE(lo.values[0], hi.values[0]);
    }
}

TEST(Thresholds, MismatchedClassCountThrows) {
    EXPECT_THROW(update_thresholds(ThresholdState::initial(2, 0.9), constant_average({0.5})), ValidationError);
}

TEST(ConfidenceMask, ThresholdRule) {
    Matrix<double> p(2, 3);
    p << 0.7, 0.55, 0.1,  //
        0.3, 0.45, 0.9;
    const auto y = one_hot<double>(argmax_columns(p), 2);
    const auto m = confidence_mask(p, y, {0.6, 0.95});
    EXPECT_EQ(m.include, (std::vector<std::uint8_t>{1, 0, 0}));
    EXPECT_NEAR(m.coverage, 1.0 / 3, 1e-15);
    EXPECT_DOUBLE_EQ(confidence_mask(p, y, {0.0, 0.0}).coverage, 1.0);
    EXPECT_DOUBLE_EQ(confidence_mask(p, y, {1.0, 1.0}).coverage, 0.0);
    EXPECT_THROW(confidence_mask(p, y, {0.5}), ShapeMismatchError);
}

TEST(MaskedConsistency, FullMaskEqualsUnmaskedAndEmptyIsZero) {
    std::mt19937_64 g(4);
    const Shape3 s{1, 5, 1};
    const auto logits = random_matrix(2, 5, g);
    const auto target = random_simplex(2, 5, g);
    const auto full = finish_mask(std::vector<std::uint8_t>(5, 1));
    const auto empty = finish_mask(std::vector<std::uint8_t>(5, 0));
    EXPECT_EQ(masked_consistency_loss<double>({logits}, {s}, target, TargetKind::Soft, full).terms.total(),
              deep_dice_ce<double>({logits}, {s}, target, TargetKind::Soft, nullptr).terms.total());
    EXPECT_EQ(masked_consistency_loss<double>({logits}, {s}, target, TargetKind::Soft, empty).terms.total(), 0.0);
}

TEST(MaskedConsistency, GradientOnThreeVoxels) {
    std::mt19937_64 g(5);
    const Shape3 s{1, 3, 1};
    std::vector<Matrix<double>> logits{random_matrix(2, 3, g, -2, 2)};
    const auto target = random_simplex(2, 3, g);
    const auto mask = finish_mask({1, 0, 1});
    const auto r = masked_consistency_loss(logits, {s}, target, TargetKind::Soft, mask);
    const auto n = numeric_grad(logits[0], [&] {
        return masked_consistency_loss(logits, {s}, target, TargetKind::Soft, mask).terms.total();
    });
    EXPECT_LT(matrix_rel_err(r.d_logits[0], n), 1e-4);
}

TEST(ConfidenceKind, ParsesAndPrints) {
    EXPECT_EQ(ConfidenceKind::parse("self_aware").type, ConfidenceKind::Type::SelfAware);
    EXPECT_EQ(ConfidenceKind::parse("none").type, ConfidenceKind::Type::None);
    const auto f = ConfidenceKind::parse("fixed(0.95)");
    EXPECT_EQ(f.type, ConfidenceKind::Type::Fixed);
    EXPECT_DOUBLE_EQ(f.parameter, 0.95);
    EXPECT_DOUBLE_EQ(ConfidenceKind::parse("entropy(0.3)").parameter, 0.3);
    EXPECT_EQ(ConfidenceKind::parse(f.str()).parameter, 0.95);
    EXPECT_THROW(ConfidenceKind::parse("mc_dropout"), ConfigError);
    EXPECT_THROW(ConfidenceKind::parse("fixed("), ConfigError);
}

TEST(BaselineConfidence, Coverage) {
    const Matrix<double> uniform = Matrix<double>::Constant(2, 10, 0.5);
    EXPECT_DOUBLE_EQ(baseline_confidence(ConfidenceKind::parse("none"), uniform).coverage, 1.0);
    EXPECT_DOUBLE_EQ(baseline_confidence(ConfidenceKind::parse("fixed(0.95)"), uniform).coverage, 0.0);
    ConfidenceKind ent{ConfidenceKind::Type::Entropy, std::log(2.0)};
    std::mt19937_64 g(6);
    EXPECT_DOUBLE_EQ(baseline_confidence(ent, random_simplex(2, 50, g)).coverage, 1.0);
    EXPECT_DOUBLE_EQ(baseline_confidence(ent, uniform).coverage, 1.0);
    EXPECT_THROW(baseline_confidence(ConfidenceKind{}, uniform), ValidationError);
}
