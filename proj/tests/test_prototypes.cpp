#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace ducisc;
using namespace ducisc::testing;

namespace {

FeaturePyramid<double> random_pyramid(const std::vector<Shape3>& shapes, const std::vector<int>& widths, std::mt19937_64& g) {
    FeaturePyramid<double> p;
    p.shapes = shapes;
    for (std::size_t s = 0; s < shapes.size(); ++s) p.levels.push_back(random_matrix(widths[s], shapes[s].size(), g));
    return p;
}

// Nested-loop prototypes: rescale each class mask by explicit block walks,
// then average features voxel by voxel.
std::vector<std::vector<double>> loop_prototypes(const FeaturePyramid<double>& pyr, const Matrix<double>& label, bool soft,
                                                 std::vector<bool>& present) {
    const Shape3 fine = pyr.shapes.back();
    std::vector<std::vector<double>> out;
    present.clear();
    for (std::int64_t c = 0; c < label.rows(); ++c)
        for (std::size_t s = 0; s < pyr.depth(); ++s) {
            const Shape3 sh = pyr.shapes[s];
            const std::int64_t fh = fine.h / sh.h, fw = fine.w / sh.w, fd = fine.d / sh.d;
            std::vector<double> mask;
            for (std::int64_t y = 0; y < sh.h; ++y)
                for (std::int64_t x = 0; x < sh.w; ++x)
                    for (std::int64_t z = 0; z < sh.d; ++z) {
                        if (!soft) {
                            mask.push_back(label(c, fine.index(y * fh + fh / 2, x * fw + fw / 2, z * fd + fd / 2)));
                            continue;
                        }
                        double acc = 0;
                        for (std::int64_t a = 0; a < fh; ++a)
                            for (std::int64_t b = 0; b < fw; ++b)
                                for (std::int64_t e = 0; e < fd; ++e) acc += label(c, fine.index(y * fh + a, x * fw + b, z * fd + e));
                        mask.push_back(acc / static_cast<double>(fh * fw * fd));
                    }
            const auto& F = pyr.levels[s];
            std::vector<std::vector<double>> table(static_cast<std::size_t>(F.rows()));
            for (std::int64_t zc = 0; zc < F.rows(); ++zc)
                for (std::int64_t v = 0; v < F.cols(); ++v) table[static_cast<std::size_t>(zc)].push_back(F(zc, v));
            bool here = false;
            out.push_back(loop_masked_average(table, mask, &here));
            present.push_back(here);
        }
    return out;
}

}  // namespace

TEST(MaskedAveragePool, HandExample) {
    Matrix<double> f(1, 4);
    f << 1, 2, 3, 4;
    Vector<double> m(4);
    m << 1, 0, 0, 1;
    const auto r = masked_average_pool(f, m);
    EXPECT_TRUE(r.present);
    EXPECT_DOUBLE_EQ(r.value(0), 2.5);
}

TEST(MaskedAveragePool, ConstantFeatureAndEmptyMask) {
    const Matrix<double> f = Matrix<double>::Constant(3, 5, 1.75);
    Vector<double> m = Vector<double>::Zero(5);
    EXPECT_FALSE(masked_average_pool(f, m).present);
    m(2) = 0.3;
    m(4) = 1.0;
    const auto r = masked_average_pool(f, m);
    for (int z = 0; z < 3; ++z) EXPECT_NEAR(r.value(z), 1.75, 1e-15);
}

TEST(MaskedAveragePool, StaysInsideMaskedHull) {
    std::mt19937_64 g(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto f = random_matrix(4, 9, g);
        const auto mask = random_mask(9, 0.5, g);
        Vector<double> m(9);
        for (int v = 0; v < 9; ++v) m(v) = mask[static_cast<std::size_t>(v)];
        const auto r = masked_average_pool(f, m);
        if (!r.present) continue;
        for (int z = 0; z < 4; ++z) {
            double lo = 1e9, hi = -1e9;
            for (int v = 0; v < 9; ++v)
                if (mask[static_cast<std::size_t>(v)]) {
                    lo = std::min(lo, f(z, v));
                    hi = std::max(hi, f(z, v));
                }
            EXPECT_GE(r.value(z), lo - 1e-12);
            EXPECT_LE(r.value(z), hi + 1e-12);
        }
    }
}

TEST(ExtractPrototypes, MatchesLoopOracle) {
    std::mt19937_64 g(2);
    const std::vector<std::vector<Shape3>> layouts{
        {{4, 4, 1}},
        {{2, 2, 1}, {4, 4, 1}},
        {{2, 2, 2}, {4, 4, 4}},
        {{1, 2, 1}, {2, 4, 1}},
        {{3, 3, 1}},
    };
    for (const auto& shapes : layouts)
        for (int C = 1; C <= 3; ++C)
            for (int soft = 0; soft <= 1; ++soft) {
                std::vector<int> widths;
                for (std::size_t s = 0; s < shapes.size(); ++s) widths.push_back(2 + static_cast<int>(s));
                const auto pyr = random_pyramid(shapes, widths, g);
                const auto P = shapes.back().size();
                const auto label = soft ? random_simplex(C, P, g) : random_one_hot(C, P, g);
                const auto ps = extract_prototypes(pyr, label, soft ? TargetKind::Soft : TargetKind::Hard);
                std::vector<bool> present;
                const auto oracle = loop_prototypes(pyr, label, soft != 0, present);
                for (int c = 0; c < C; ++c)
                    for (int s = 0; s < ps.scales; ++s) {
                        const auto i = static_cast<std::size_t>(c * ps.scales + s);
                        ASSERT_EQ(ps.has(c, s), present[i]);
                        for (std::size_t z = 0; z < oracle[i].size(); ++z)
                            EXPECT_LE(rel_err(ps.at(c, s)(static_cast<Eigen::Index>(z)), oracle[i][z]), 1e-6);
                    }
            }
}

TEST(ExtractPrototypes, SingleClassGivesGlobalMeans) {
    std::mt19937_64 g(3);
    const auto pyr = random_pyramid({{2, 2, 1}, {4, 4, 1}}, {3, 2}, g);
    const Matrix<double> label = Matrix<double>::Ones(1, 16);
    const auto ps = extract_prototypes(pyr, label, TargetKind::Hard);
    for (int s = 0; s < 2; ++s) {
        const Vector<double> mean = pyr.levels[static_cast<std::size_t>(s)].rowwise().mean();
        EXPECT_LT((ps.at(0, s) - mean).norm(), 1e-12);
    }
}

TEST(ExtractPrototypes, LabelMustMatchFinestLevel) {
    std::mt19937_64 g(4);
    const auto pyr = random_pyramid({{2, 2, 1}}, {2}, g);
    EXPECT_THROW(extract_prototypes(pyr, Matrix<double>(Matrix<double>::Ones(1, 5)), TargetKind::Hard), ShapeMismatchError);
}

TEST(PrototypeAlignment, DirectEvaluation) {
    PrototypeSet<double> a{1, 1, {Vector<double>::Zero(2)}, {true}};
    PrototypeSet<double> b = a;
    b.vectors[0] << 3, 4;
    EXPECT_DOUBLE_EQ(prototype_alignment_loss(a, b), 25.0);
    EXPECT_DOUBLE_EQ(prototype_alignment_loss(a, a), 0.0);
}

TEST(PrototypeAlignment, NormalizesByClassesAndOptionallyScales) {
    std::mt19937_64 g(5);
    PrototypeSet<double> a{2, 2, {}, {true, true, true, true}}, b = a;
    for (int i = 0; i < 4; ++i) {
        a.vectors.push_back(random_matrix(3, 1, g));
        b.vectors.push_back(random_matrix(3, 1, g));
    }
    double sum = 0;
    for (int i = 0; i < 4; ++i) sum += (a.vectors[static_cast<std::size_t>(i)] - b.vectors[static_cast<std::size_t>(i)]).squaredNorm();
    EXPECT_NEAR(prototype_alignment_loss(a, b), sum / 2.0, 1e-12);
    EXPECT_NEAR(prototype_alignment_loss(a, b, true), sum / 4.0, 1e-12);
}

TEST(PrototypeAlignment, AbsentClassContributesNothing) {
    PrototypeSet<double> a{2, 1, {Vector<double>::Zero(1), Vector<double>::Zero(1)}, {true, true}};
    PrototypeSet<double> b = a;
    b.vectors[0](0) = 2.0;
    b.vectors[1](0) = 100.0;
    b.present[1] = false;
    const auto r = prototype_alignment(a, b);
    EXPECT_DOUBLE_EQ(r.loss, 2.0);
    EXPECT_EQ(r.d_a[1].norm(), 0.0);
    EXPECT_EQ(r.d_b[1].norm(), 0.0);
}

TEST(PrototypeAlignment, NonNegativeAndZeroOnlyWhenEqual) {
    std::mt19937_64 g(6);
    for (int trial = 0; trial < 20; ++trial) {
        const auto pa = random_pyramid({{2, 2, 1}, {4, 4, 1}}, {2, 3}, g);
        const auto pb = random_pyramid({{2, 2, 1}, {4, 4, 1}}, {2, 3}, g);
        const auto la = random_one_hot(2, 16, g), lb = random_one_hot(2, 16, g);
        const auto a = extract_prototypes(pa, la, TargetKind::Hard);
        const auto b = extract_prototypes(pb, lb, TargetKind::Hard);
        EXPECT_GT(prototype_alignment_loss(a, b), 0.0);
        EXPECT_EQ(prototype_alignment_loss(a, a), 0.0);
    }
}

TEST(PrototypeAlignment, StructuralMismatchThrows) {
    PrototypeSet<double> a{1, 1, {Vector<double>::Zero(2)}, {true}};
    PrototypeSet<double> b{2, 1, {Vector<double>::Zero(2), Vector<double>::Zero(2)}, {true, true}};
    EXPECT_THROW(prototype_alignment_loss(a, b), ValidationError);
    PrototypeSet<double> c{1, 1, {Vector<double>::Zero(3)}, {true}};
    EXPECT_THROW(prototype_alignment_loss(a, c), ValidationError);
}

class CrossAlignmentGradient : public ::testing::TestWithParam<int> {};

TEST_P(CrossAlignmentGradient, MatchesFiniteDifferencesOnBothSides) {
    const int seed = GetParam();
    std::mt19937_64 g(static_cast<std::uint64_t>(seed));
    const bool multi = seed % 2 == 1;
    const std::vector<Shape3> shapes = multi ? std::vector<Shape3>{{1, 1, 1}, {2, 2, 1}} : std::vector<Shape3>{{3, 3, 1}};
    const std::vector<int> widths = multi ? std::vector<int>{3, 2} : std::vector<int>{2};
    auto pa = random_pyramid(shapes, widths, g), pb = random_pyramid(shapes, widths, g);
    const auto P = shapes.back().size();
    const auto la = random_one_hot(2, P, g);
    const auto kind_b = seed % 3 == 0 ? TargetKind::Soft : TargetKind::Hard;
    const auto lb = kind_b == TargetKind::Soft ? random_simplex(2, P, g) : random_one_hot(2, P, g);
    auto loss = [&] { return cross_image_alignment(pa, la, TargetKind::Hard, pb, lb, kind_b).loss; };
    const auto r = cross_image_alignment(pa, la, TargetKind::Hard, pb, lb, kind_b);
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        const auto na = numeric_grad(pa.levels[s], loss);
        const auto nb = numeric_grad(pb.levels[s], loss);
        EXPECT_LT(matrix_rel_err(r.d_features_a[s], na), 1e-4);
        EXPECT_LT(matrix_rel_err(r.d_features_b[s], nb), 1e-4);
    }
}

INSTANTIATE_TEST_SUITE_P(Random, CrossAlignmentGradient, ::testing::Range(0, 6));

TEST(FeatureConsistency, DirectEvaluation) {
    FeaturePyramid<double> t, s;
    t.shapes = s.shapes = {{1, 1, 1}};
    t.levels = {Matrix<double>::Zero(2, 1)};
    s.levels = {Matrix<double>::Ones(2, 1)};
    EXPECT_DOUBLE_EQ(feature_consistency_loss(t, s), 2.0);
    EXPECT_DOUBLE_EQ(feature_consistency_loss(t, t), 0.0);
}

TEST(FeatureConsistency, ScalesQuadraticallyAndHasCorrectGradient) {
    std::mt19937_64 g(7);
    auto t = random_pyramid({{2, 2, 1}, {4, 4, 1}}, {3, 2}, g);
    auto s = random_pyramid({{2, 2, 1}, {4, 4, 1}}, {3, 2}, g);
    auto t3 = t, s3 = s;
    for (auto& l : t3.levels) l *= 3.0;
    for (auto& l : s3.levels) l *= 3.0;
    EXPECT_NEAR(feature_consistency_loss(t3, s3), 9.0 * feature_consistency_loss(t, s), 1e-10);
    const auto r = feature_consistency(t, s);
    for (std::size_t k = 0; k < 2; ++k) {
        const auto n = numeric_grad(s.levels[k], [&] { return feature_consistency_loss(t, s); });
        EXPECT_LT(matrix_rel_err(r.d_student[k], n), 1e-6);
    }
}

TEST(FeatureConsistency, ShapeMismatchThrows) {
    std::mt19937_64 g(8);
    const auto a = random_pyramid({{2, 2, 1}}, {2}, g);
    const auto b = random_pyramid({{2, 2, 1}}, {3}, g);
    EXPECT_THROW(feature_consistency_loss(a, b), ShapeMismatchError);
}
