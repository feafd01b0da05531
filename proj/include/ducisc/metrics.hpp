#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ducisc/datasets.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/prototypes.hpp"
#include "ducisc/random.hpp"
#include "ducisc/segnet.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

using Mask = std::vector<std::uint8_t>;

struct Overlap {
    double dice = 0.0;
    double jaccard = 0.0;
};

// Both empty -> (1, 1); exactly one empty -> (0, 0).
inline Overlap dice_jaccard(const Mask& pred, const Mask& gt) {
    if (pred.size() != gt.size()) throw ShapeMismatchError("masks differ in size");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t v = 0; v < pred.size(); ++v) {
        a += pred[v] != 0;
        b += gt[v] != 0;
        both += (pred[v] != 0) && (gt[v] != 0);
    }
    if (a + b == 0) return {1.0, 1.0};
    const double uni = static_cast<double>(a + b - both);
    return {2.0 * static_cast<double>(both) / static_cast<double>(a + b), static_cast<double>(both) / uni};
}

// Mask voxels with at least one face neighbour outside the mask (the image
// exterior counts as outside): mask minus its face-connected erosion.
inline Mask boundary(const Mask& m, const Shape3& s) {
    Mask out(m.size(), 0);
    const int axes = s.d > 1 ? 3 : 2;
    for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
            for (std::int64_t z = 0; z < s.d; ++z) {
                const auto v = static_cast<std::size_t>(s.index(y, x, z));
                if (!m[v]) continue;
                bool edge = false;
                const std::array<std::array<int, 3>, 6> nb{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
                for (int k = 0; k < 2 * axes && !edge; ++k) {
                    const auto yy = y + nb[static_cast<std::size_t>(k)][0], xx = x + nb[static_cast<std::size_t>(k)][1],
                               zz = z + nb[static_cast<std::size_t>(k)][2];
                    if (yy < 0 || xx < 0 || zz < 0 || yy >= s.h || xx >= s.w || zz >= s.d) edge = true;
                    else if (!m[static_cast<std::size_t>(s.index(yy, xx, zz))]) edge = true;
                }
                out[v] = edge;
            }
    return out;
}

namespace detail {

// Exact 1D squared distance transform (lower envelope of parabolas) along a
// strided line, with grid spacing h.
inline void edt_line(const std::vector<double>& f, std::int64_t n, double h, std::vector<double>& d,
                     std::vector<std::int64_t>& v, std::vector<double>& z) {
    const double inf = std::numeric_limits<double>::infinity();
    d.assign(static_cast<std::size_t>(n), inf);
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n + 1), 0.0);
    auto at = [](auto& c, std::int64_t i) -> auto& { return c[static_cast<std::size_t>(i)]; };
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
        if (at(f, q) == inf) continue;
        if (k < 0) {
            k = 0;
            at(v, 0) = q;
            at(z, 0) = -inf;
            at(z, 1) = inf;
            continue;
        }
        const double qh = static_cast<double>(q) * h;
        double s;
        while (true) {
            const double ph = static_cast<double>(at(v, k)) * h;
            s = ((at(f, q) + qh * qh) - (at(f, at(v, k)) + ph * ph)) / (2.0 * (qh - ph));
            if (s > at(z, k)) break;
            --k;  // z[0] = -inf stops this before k < 0
        }
        ++k;
        at(v, k) = q;
        at(z, k) = s;
        at(z, k + 1) = inf;
    }
    if (k < 0) return;
    std::int64_t j = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        const double qh = static_cast<double>(q) * h;
        while (at(z, j + 1) < qh) ++j;
        const double diff = static_cast<double>(q - at(v, j)) * h;
        at(d, q) = diff * diff + at(f, at(v, j));
    }
}

}  // namespace detail

// Squared Euclidean distance from every voxel to the nearest seed voxel.
inline std::vector<double> squared_distance_transform(const Mask& seeds, const Shape3& s, const std::array<double, 3>& spacing) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> g(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) g[i] = seeds[i] ? 0.0 : inf;
    std::vector<double> line, d, z;
    std::vector<std::int64_t> v;
    auto pass = [&](int axis) {
        const std::int64_t n = s[axis];
        if (n <= 1) return;
        const std::int64_t stride = axis == 0 ? s.w * s.d : axis == 1 ? s.d : 1;
        for (std::int64_t y = 0; y < (axis == 0 ? 1 : s.h); ++y)
            for (std::int64_t x = 0; x < (axis == 1 ? 1 : s.w); ++x)
                for (std::int64_t zz = 0; zz < (axis == 2 ? 1 : s.d); ++zz) {
                    const auto base = s.index(y, x, zz);
                    line.resize(static_cast<std::size_t>(n));
                    for (std::int64_t q = 0; q < n; ++q) line[static_cast<std::size_t>(q)] = g[static_cast<std::size_t>(base + q * stride)];
                    detail::edt_line(line, n, spacing[static_cast<std::size_t>(axis)], d, v, z);
                    for (std::int64_t q = 0; q < n; ++q) g[static_cast<std::size_t>(base + q * stride)] = d[static_cast<std::size_t>(q)];
                }
    };
    pass(0);
    pass(1);
    pass(2);
    return g;
}

struct SurfaceDistance {
    double hd95 = 0.0;
    double asd = 0.0;
};

// Linear interpolation between order statistics at rank q * (n - 1).
inline double percentile(std::vector<double> xs, double q) {
    if (xs.empty()) throw MetricUndefinedError("percentile of an empty set");
    std::sort(xs.begin(), xs.end());
    const double rank = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (rank - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

// Pooled directed boundary distances in both directions: asd is their mean,
// hd95 their 95th percentile. Both masks must be nonempty.
inline SurfaceDistance surface_distances(const Mask& pred, const Mask& gt, const Shape3& s,
                                         const std::array<double, 3>& spacing = {1.0, 1.0, 1.0}) {
    if (pred.size() != gt.size() || static_cast<std::int64_t>(pred.size()) != s.size())
        throw ShapeMismatchError("masks differ in size");
    const Mask bp = boundary(pred, s), bg = boundary(gt, s);
    const bool ep = std::none_of(bp.begin(), bp.end(), [](auto x) { return x != 0; });
    const bool eg = std::none_of(bg.begin(), bg.end(), [](auto x) { return x != 0; });
    if (ep || eg) throw MetricUndefinedError("surface distance undefined for an empty mask");
    const auto dg = squared_distance_transform(bg, s, spacing);
    const auto dp = squared_distance_transform(bp, s, spacing);
    std::vector<double> pooled;
    double sum = 0.0;
    for (std::size_t v = 0; v < bp.size(); ++v) {
        if (bp[v]) pooled.push_back(std::sqrt(dg[v]));
        if (bg[v]) pooled.push_back(std::sqrt(dp[v]));
    }
    for (double x : pooled) sum += x;
    return {percentile(pooled, 0.95), sum / static_cast<double>(pooled.size())};
}

// ---------------------------------------------------------------------------
// Labeled/unlabeled semantic matching

struct MatchingReport {
    std::size_t labeled = 0, unlabeled = 0, classes = 0;
    std::vector<double> m;  // [labeled, unlabeled, classes]; NaN where excluded
    double q = 0.0;
    std::size_t included = 0;

    double at(std::size_t i, std::size_t j, std::size_t c) const { return m[(i * unlabeled + j) * classes + c]; }
};

// Finest-scale prototypes of one image, one per class.
template <class T>
struct ClassPrototypes {
    std::vector<Vector<T>> vectors;
    std::vector<bool> present;
};

template <class T>
ClassPrototypes<T> finest_prototypes(const PrototypeSet<T>& set) {
    ClassPrototypes<T> out;
    for (int c = 0; c < set.classes; ++c) {
        out.vectors.push_back(set.at(c, set.scales - 1));
        out.present.push_back(set.has(c, set.scales - 1));
    }
    return out;
}

// M^c(i, j) = exp(-||p_i^c - p_j^c||^2); Q = mean over entries where both
// prototypes are present (and c > 0 when foreground_only).
template <class T>
MatchingReport matching_matrix(const std::vector<ClassPrototypes<T>>& labeled, const std::vector<ClassPrototypes<T>>& unlabeled,
                               bool foreground_only = false) {
    MatchingReport r;
    r.labeled = labeled.size();
    r.unlabeled = unlabeled.size();
    r.classes = labeled.empty() ? 0 : labeled.front().vectors.size();
    r.m.assign(r.labeled * r.unlabeled * r.classes, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    for (std::size_t i = 0; i < r.labeled; ++i)
        for (std::size_t j = 0; j < r.unlabeled; ++j) {
            if (unlabeled[j].vectors.size() != r.classes) throw ValidationError("class counts differ between prototype lists");
            for (std::size_t c = foreground_only ? 1 : 0; c < r.classes; ++c) {
                if (!labeled[i].present[c] || !unlabeled[j].present[c]) continue;
                const double d2 = static_cast<double>((labeled[i].vectors[c] - unlabeled[j].vectors[c]).squaredNorm());
                const double v = std::exp(-d2);
                r.m[(i * r.unlabeled + j) * r.classes + c] = v;
                sum += v;
                ++r.included;
            }
        }
    if (r.included == 0) throw MetricUndefinedError("no co-present prototype pairs");
    r.q = sum / static_cast<double>(r.included);
    return r;
}

// ---------------------------------------------------------------------------
// Whole-image inference helpers

template <class T>
nn::Act<T> image_input(const NdArray<float>& image) {
    return make_input<T>({&image}, spatial_shape(image));
}

template <class T>
Matrix<T> label_matrix(const NdArray<std::uint8_t>& label) {
    const int C = label_classes(label);
    return one_hot<T>(class_map(label), C);
}

inline Mask class_mask(const std::vector<int>& classes, int c) {
    Mask m(classes.size());
    for (std::size_t v = 0; v < classes.size(); ++v) m[v] = classes[v] == c;
    return m;
}

// Prototypes of every labeled image (ground truth masks) and every unlabeled
// image (the model's own argmax segmentation), both on whole-image forwards.
template <class T>
MatchingReport corpus_matching(const SegNet<T>& net, const ParamTree<T>& params, const Corpus& corpus,
                               bool foreground_only = false) {
    std::vector<ClassPrototypes<T>> lab, unl;
    for (const auto& id : corpus.manifest().labeled) {
        const auto out = net.forward(params, image_input<T>(corpus.image(id)));
        lab.push_back(finest_prototypes(extract_prototypes(out.pyramid(0), label_matrix<T>(*corpus.ground_truth(id)), TargetKind::Hard)));
    }
    for (const auto& id : corpus.manifest().unlabeled) {
        const auto out = net.forward(params, image_input<T>(corpus.image(id)));
        const auto pred = out.prediction(0);
        unl.push_back(finest_prototypes(
            extract_prototypes(out.pyramid(0), one_hot<T>(pred.hard, net.config().num_classes), TargetKind::Hard)));
    }
    return matching_matrix(lab, unl, foreground_only);
}

// ---------------------------------------------------------------------------
// Feature export for density analysis

struct FeatureSamples {
    std::vector<std::pair<std::string, double>> rows;  // (group, value)
    bool labeled_with_replacement = false;
    bool unlabeled_with_replacement = false;
};

// Draws n true-positive foreground voxels per group (labeled / unlabeled
// training images) and records the channel mean of the finest decoder feature.
template <class T>
FeatureSamples export_feature_samples(const SegNet<T>& net, const ParamTree<T>& params, const Corpus& corpus,
                                      std::size_t n, std::uint64_t seed) {
    FeatureSamples fs;
    Rng rng(seed);
    auto collect = [&](const std::vector<std::string>& ids, const std::string& group, bool& replaced) {
        std::vector<double> pool;
        for (const auto& id : ids) {
            const auto out = net.forward(params, image_input<T>(corpus.image(id)));
            const auto pred = out.prediction(0);
            const auto* gt = corpus.ground_truth(id);
            const std::vector<int> truth = gt ? class_map(*gt) : pred.hard;
            const auto& F = out.features.back();
            for (std::size_t v = 0; v < truth.size(); ++v)
                if (truth[v] > 0 && pred.hard[v] == truth[v])
                    pool.push_back(static_cast<double>(F.col(static_cast<std::int64_t>(v)).mean()));
        }
        if (pool.empty()) throw MetricUndefinedError("no true-positive foreground voxels in group " + group);
        replaced = n > pool.size();
        for (auto i : rng.choose(pool.size(), n)) fs.rows.emplace_back(group, pool[i]);
    };
    collect(corpus.manifest().labeled, "labeled", fs.labeled_with_replacement);
    collect(corpus.manifest().unlabeled, "unlabeled", fs.unlabeled_with_replacement);
    return fs;
}

inline void write_feature_samples(const std::filesystem::path& file, const FeatureSamples& fs) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    os << "# labeled_with_replacement=" << fs.labeled_with_replacement
       << " unlabeled_with_replacement=" << fs.unlabeled_with_replacement << '\n';
    os << "group,value\n";
    os.precision(9);
    for (const auto& [g, v] : fs.rows) os << g << ',' << v << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation

struct CaseMetric {
    std::string case_id;
    int cls = 1;
    double dice = 0.0, jaccard = 0.0, hd95 = 0.0, asd = 0.0;
    bool surface_defined = true;
};

struct EvalReport {
    std::vector<CaseMetric> rows;
    // Per foreground class (index c - 1), then the mean over classes.
    std::vector<CaseMetric> class_means;
    CaseMetric mean;
};

inline CaseMetric score_case(const std::string& id, int cls, const std::vector<int>& pred, const std::vector<int>& gt,
                             const Shape3& shape, const std::array<double, 3>& spacing) {
    const Mask p = class_mask(pred, cls), g = class_mask(gt, cls);
    CaseMetric r{id, cls};
    const auto o = dice_jaccard(p, g);
    r.dice = o.dice;
    r.jaccard = o.jaccard;
    try {
        const auto sd = surface_distances(p, g, shape, spacing);
        r.hd95 = sd.hd95;
        r.asd = sd.asd;
    } catch (const MetricUndefinedError&) {
        r.hd95 = r.asd = std::numeric_limits<double>::quiet_NaN();
        r.surface_defined = false;
    }
    return r;
}

// Means skip NaN surface rows.
inline EvalReport summarize(std::vector<CaseMetric> rows, int num_classes) {
    EvalReport rep;
    rep.rows = std::move(rows);
    auto mean_of = [](const std::vector<const CaseMetric*>& rs, int cls) {
        CaseMetric m{"mean", cls};
        std::size_t ns = 0;
        for (const auto* r : rs) {
            m.dice += r->dice;
            m.jaccard += r->jaccard;
            if (r->surface_defined) {
                m.hd95 += r->hd95;
                m.asd += r->asd;
                ++ns;
            }
        }
        const double n = static_cast<double>(std::max<std::size_t>(rs.size(), 1));
        m.dice /= n;
        m.jaccard /= n;
        if (ns) {
            m.hd95 /= static_cast<double>(ns);
            m.asd /= static_cast<double>(ns);
        } else {
            m.hd95 = m.asd = std::numeric_limits<double>::quiet_NaN();
            m.surface_defined = false;
        }
        return m;
    };
    std::vector<const CaseMetric*> all;
    for (int c = 1; c < num_classes; ++c) {
        std::vector<const CaseMetric*> rs;
        for (const auto& r : rep.rows)
            if (r.cls == c) rs.push_back(&r);
        rep.class_means.push_back(mean_of(rs, c));
    }
    for (const auto& m : rep.class_means) all.push_back(&m);
    rep.mean = mean_of(all, 0);
    return rep;
}

// Sliding-window prediction on every test case; metrics per foreground class.
template <class T>
EvalReport evaluate(const SegNet<T>& net, const ParamTree<T>& params, const Corpus& corpus, const Shape3& patch,
                    const Shape3& stride, const std::vector<std::string>* ids = nullptr) {
    const auto& list = ids ? *ids : corpus.manifest().test;
    if (list.empty()) throw ValidationError("evaluation split is empty");
    std::vector<CaseMetric> rows;
    for (const auto& id : list) {
        const auto* gt = corpus.ground_truth(id);
        if (!gt) throw ValidationError("test case without ground truth: " + id);
        const auto& image = corpus.image(id);
        const auto pred = sliding_window_predict(net, params, image, patch, stride);
        const auto truth = class_map(*gt);
        for (int c = 1; c < corpus.num_classes(); ++c)
            rows.push_back(score_case(id, c, pred.hard, truth, spatial_shape(image), corpus.manifest().spacing));
    }
    return summarize(std::move(rows), corpus.num_classes());
}

inline void write_eval_csv(const std::filesystem::path& file, const EvalReport& rep) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    os.precision(10);
    os << "case_id,class,dice,jaccard,hd95,asd\n";
    auto line = [&](const CaseMetric& r, const std::string& cls) {
        os << r.case_id << ',' << cls << ',' << r.dice << ',' << r.jaccard << ',';
        if (r.surface_defined) os << r.hd95 << ',' << r.asd << '\n';
        else os << "nan,nan\n";
    };
    for (const auto& r : rep.rows) line(r, std::to_string(r.cls));
    for (const auto& r : rep.class_means) line(r, std::to_string(r.cls));
    line(rep.mean, "all");
}

}  // namespace ducisc
