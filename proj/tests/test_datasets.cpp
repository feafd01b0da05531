#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"

using namespace ducisc;
using namespace ducisc::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

SyntheticOptions sixty_image_options(double test_fraction = 0.0) {
    SyntheticOptions o;
    o.seed = 7;
    o.n = 60;
    o.test_fraction = test_fraction;
    return o;
}

}  // namespace

TEST(Generator, SixtyImagesMostlyContainBothClasses) {
    TempDir dir("gen");
    const auto m = generate_synthetic_corpus(sixty_image_options(), dir.path());
    ASSERT_EQ(m.samples.size(), 60u);
    const Corpus corpus(load_corpus(dir.path()));
    int both = 0;
    for (const auto& e : m.samples) {
        const auto classes = class_map(*corpus.ground_truth(e.id));
        const std::set<int> present(classes.begin(), classes.end());
        both += present.count(0) && present.count(1);
        for (float v : corpus.image(e.id).data) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
    EXPECT_GE(both, 54);
}

TEST(Generator, TenPercentSplitOfSixty) {
    TempDir dir("split60");
    const auto m = generate_synthetic_corpus(sixty_image_options(), dir.path());
    EXPECT_EQ(m.labeled.size(), 6u);
    EXPECT_EQ(m.unlabeled.size(), 54u);
    EXPECT_TRUE(m.test.empty());
    const auto loaded = load_corpus(dir.path() / "manifest.json");
    EXPECT_EQ(loaded.labeled, m.labeled);
    EXPECT_EQ(loaded.unlabeled, m.unlabeled);
}

TEST(Generator, ByteIdenticalForFixedSeed) {
    TempDir a("gena"), b("genb");
    generate_synthetic_corpus(sixty_image_options(0.2), a.path());
    generate_synthetic_corpus(sixty_image_options(0.2), b.path());
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
        if (!entry.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(entry.path(), a.path());
        EXPECT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
    }
}

TEST(Generator, RejectsTooFewSamplesAndSmallShapes) {
    TempDir dir("genbad");
    auto o = sixty_image_options();
    o.n = 5;
    EXPECT_THROW(generate_synthetic_corpus(o, dir.path()), ValidationError);
    o.n = 20;
    o.shape = {8, 64, 1};
    EXPECT_THROW(generate_synthetic_corpus(o, dir.path()), ValidationError);
}

TEST(Generator, HardModeAndThreeDimensions) {
    TempDir dir("gen3d");
    SyntheticOptions o;
    o.n = 10;
    o.dims = 3;
    o.shape = {16, 16, 16};
    o.num_classes = 3;
    o.difficulty = Difficulty::Hard;
    generate_synthetic_corpus(o, dir.path());
    const Corpus corpus(load_corpus(dir.path()));
    int with_last_class = 0;
    for (const auto& e : corpus.manifest().samples) {
        const auto* gt = corpus.ground_truth(e.id);
        EXPECT_EQ(gt->shape, (std::vector<std::uint64_t>{16, 16, 16, 3}));
        const auto cls = class_map(*gt);
        with_last_class += std::count(cls.begin(), cls.end(), 2) > 0;
    }
    EXPECT_EQ(with_last_class, 10);
}

TEST(Generator, UnwritableDirectoryIsIoError) {
    TempDir dir("genro");
    std::ofstream(dir.path() / "file") << "x";
    EXPECT_THROW(generate_synthetic_corpus(sixty_image_options(), dir.path() / "file" / "sub"), IoError);
}

TEST(Split, TenAndTwentyPercentOfEightyTrainImages) {
    CorpusManifest m;
    for (int i = 0; i < 80; ++i) {
        m.samples.push_back({"s" + std::to_string(i), "x", std::string("y")});
        m.unlabeled.push_back("s" + std::to_string(i));
    }
    m.test = {};
    const auto ten = split_labeled_fraction(m, 0.10, 1);
    EXPECT_EQ(ten.labeled.size(), 8u);
    EXPECT_EQ(ten.unlabeled.size(), 72u);
    const auto twenty = split_labeled_fraction(m, 0.20, 1);
    EXPECT_EQ(twenty.labeled.size(), 16u);
    EXPECT_EQ(twenty.unlabeled.size(), 64u);
    EXPECT_THROW(split_labeled_fraction(m, 0.0, 1), ValidationError);
    EXPECT_THROW(split_labeled_fraction(m, 1.0, 1), ValidationError);
}

TEST(Split, IsAPartitionForManySeeds) {
    CorpusManifest m;
    for (int i = 0; i < 37; ++i) {
        m.samples.push_back({"s" + std::to_string(i), "x", std::string("y")});
        (i < 30 ? m.unlabeled : m.test).push_back("s" + std::to_string(i));
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = split_labeled_fraction(m, 0.3, seed);
        std::set<std::string> lab(s.labeled.begin(), s.labeled.end()), unl(s.unlabeled.begin(), s.unlabeled.end());
        EXPECT_EQ(lab.size(), 9u);
        EXPECT_EQ(lab.size() + unl.size(), 30u);
        for (const auto& id : lab) EXPECT_FALSE(unl.count(id));
        EXPECT_EQ(s.test, m.test);
    }
}

TEST(Manifest, MissingFileAndBadLabelsAreDistinctErrors) {
    TempDir dir("manifest");
    auto o = sixty_image_options();
    o.n = 10;
    const auto m = generate_synthetic_corpus(o, dir.path());

    const auto& victim = m.samples[3];
    std::filesystem::rename(dir.path() / victim.image, dir.path() / "moved.bin");
    EXPECT_THROW(load_corpus(dir.path()), MissingFileError);
    std::filesystem::rename(dir.path() / "moved.bin", dir.path() / victim.image);
    EXPECT_NO_THROW(load_corpus(dir.path()));

    auto label = load_array<std::uint8_t>(dir.path() / *victim.label);
    const auto keep = label;
    label.data[0] = label.data[1] = 1;
    save_array(dir.path() / *victim.label, label);
    EXPECT_THROW(load_corpus(dir.path()), LabelInvariantError);

    auto wrong = keep;
    wrong.shape[0] = 32;
    wrong.shape[1] = 128;
    save_array(dir.path() / *victim.label, wrong);
    EXPECT_THROW(load_corpus(dir.path()), ShapeMismatchError);
    save_array(dir.path() / *victim.label, keep);
    EXPECT_NO_THROW(load_corpus(dir.path()));
}

TEST(Manifest, OverlappingSplitsRejected) {
    TempDir dir("overlap");
    auto o = sixty_image_options();
    o.n = 10;
    auto m = generate_synthetic_corpus(o, dir.path());
    m.test.push_back(m.labeled.front());
    save_manifest(m, dir.path() / "manifest.json");
    EXPECT_THROW(load_corpus(dir.path()), ValidationError);
}

TEST(Batch, PairingAndShapes) {
    TempDir dir("batch");
    const Corpus corpus(small_corpus(dir.path(), 20, {32, 32, 1}));
    Rng rng(1);
    const auto b = sample_batch(corpus, rng, {16, 16, 1}, 2, 2);
    ASSERT_EQ(b.labeled.size(), 2u);
    ASSERT_EQ(b.unlabeled.size(), 2u);
    EXPECT_EQ(b.pairing, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}}));
    for (const auto& s : b.labeled) {
        EXPECT_TRUE(s.label.has_value());
        EXPECT_EQ(spatial_shape(s.image), (Shape3{16, 16, 1}));
    }
    for (const auto& s : b.unlabeled) EXPECT_FALSE(s.label.has_value());
    const auto c = sample_batch(corpus, rng, {16, 16, 1}, 3, 1);
    EXPECT_EQ(c.pairing.size(), 1u);
}

TEST(Batch, DeterministicForSeed) {
    TempDir dir("batchdet");
    const Corpus corpus(small_corpus(dir.path(), 20, {32, 32, 1}));
    Rng a(9), b(9);
    const auto x = sample_batch(corpus, a, {16, 16, 1}, 2, 2);
    const auto y = sample_batch(corpus, b, {16, 16, 1}, 2, 2);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(x.labeled[i].image.data, y.labeled[i].image.data);
        EXPECT_EQ(x.unlabeled[i].image.data, y.unlabeled[i].image.data);
    }
}

TEST(Batch, LabeledCropsPreferForeground) {
    TempDir dir("batchfg");
    const Corpus corpus(small_corpus(dir.path(), 20, {64, 64, 1}));
    Rng rng(2);
    int with_fg = 0, total = 0;
    for (int i = 0; i < 50; ++i)
        for (const auto& s : sample_batch(corpus, rng, {8, 8, 1}, 2, 1).labeled) {
            const auto cls = class_map(*s.label);
            with_fg += std::count(cls.begin(), cls.end(), 1) > 0;
            ++total;
        }
    EXPECT_GT(with_fg, total * 9 / 10);
}

TEST(Batch, Errors) {
    TempDir dir("batcherr");
    const Corpus corpus(small_corpus(dir.path()));
    Rng rng(3);
    EXPECT_THROW(sample_batch(corpus, rng, {32, 32, 1}, 2, 2), ValidationError);
    EXPECT_THROW(sample_batch(corpus, rng, {8, 8, 1}, 0, 2), ConfigError);
    auto m = corpus.manifest();
    m.unlabeled.clear();
    const Corpus no_unlabeled(m);
    EXPECT_THROW(sample_batch(no_unlabeled, rng, {8, 8, 1}, 1, 1), ConfigError);
}

TEST(Corpus, UnlabeledSamplesHideLabels) {
    TempDir dir("hide");
    const Corpus corpus(small_corpus(dir.path()));
    const auto& id = corpus.manifest().unlabeled.front();
    EXPECT_FALSE(corpus.sample(id).label.has_value());
    EXPECT_NE(corpus.ground_truth(id), nullptr);
    EXPECT_TRUE(corpus.sample(corpus.manifest().labeled.front()).is_labeled);
}
