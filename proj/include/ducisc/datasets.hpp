#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ducisc/array_io.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/random.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

namespace fs = std::filesystem;

// One image with an optional one-hot label. Image is [H,W] or [H,W,D] float;
// label is the same spatial shape with a trailing class axis.
struct Sample {
    std::string id;
    NdArray<float> image;
    std::optional<NdArray<std::uint8_t>> label;
    bool is_labeled = false;
};

inline Shape3 spatial_shape(const NdArray<float>& image) {
    const auto& s = image.shape;
    if (s.size() == 2) return Shape3{static_cast<std::int64_t>(s[0]), static_cast<std::int64_t>(s[1]), 1};
    if (s.size() == 3)
        return Shape3{static_cast<std::int64_t>(s[0]), static_cast<std::int64_t>(s[1]),
                      static_cast<std::int64_t>(s[2])};
    throw ValidationError("image must be 2D or 3D");
}

inline Shape3 label_spatial_shape(const NdArray<std::uint8_t>& label) {
    const auto& s = label.shape;
    if (s.size() == 3) return Shape3{static_cast<std::int64_t>(s[0]), static_cast<std::int64_t>(s[1]), 1};
    if (s.size() == 4)
        return Shape3{static_cast<std::int64_t>(s[0]), static_cast<std::int64_t>(s[1]),
                      static_cast<std::int64_t>(s[2])};
    throw ValidationError("label must be [H,W,C] or [H,W,D,C]");
}

inline int label_classes(const NdArray<std::uint8_t>& label) { return static_cast<int>(label.shape.back()); }

// Throws LabelInvariantError unless every voxel has exactly one class set to 1.
inline void check_one_hot(const NdArray<std::uint8_t>& label, const std::string& id) {
    const auto c = static_cast<std::size_t>(label.shape.back());
    for (std::size_t v = 0; v < label.data.size() / c; ++v) {
        int ones = 0;
        for (std::size_t k = 0; k < c; ++k) {
            const auto x = label.data[v * c + k];
            if (x > 1) throw LabelInvariantError(id + ": label value other than 0/1 at voxel " + std::to_string(v));
            ones += x;
        }
        if (ones != 1)
            throw LabelInvariantError(id + ": voxel " + std::to_string(v) + " has " + std::to_string(ones) +
                                      " active classes");
    }
}

// Class index per voxel.
inline std::vector<int> class_map(const NdArray<std::uint8_t>& label) {
    const auto c = static_cast<std::size_t>(label.shape.back());
    std::vector<int> out(label.data.size() / c, 0);
    for (std::size_t v = 0; v < out.size(); ++v)
        for (std::size_t k = 0; k < c; ++k)
            if (label.data[v * c + k]) {
                out[v] = static_cast<int>(k);
                break;
            }
    return out;
}

struct ManifestEntry {
    std::string id;
    std::string image;                 // relative to the manifest directory
    std::optional<std::string> label;  // relative to the manifest directory
};

struct CorpusManifest {
    fs::path root;  // directory holding manifest.json
    std::vector<ManifestEntry> samples;
    std::vector<std::string> labeled;
    std::vector<std::string> unlabeled;
    std::vector<std::string> test;
    int num_classes = 2;
    int dims = 2;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};

    const ManifestEntry& entry(const std::string& id) const {
        for (const auto& e : samples)
            if (e.id == id) return e;
        throw ValidationError("unknown sample id: " + id);
    }

    std::vector<std::string> train_ids() const {
        std::vector<std::string> t = labeled;
        t.insert(t.end(), unlabeled.begin(), unlabeled.end());
        return t;
    }
};

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
    nlohmann::json j;
    j["format"] = "ducisc-manifest";
    j["version"] = 1;
    j["num_classes"] = m.num_classes;
    j["dims"] = m.dims;
    j["spacing"] = m.spacing;
    auto& arr = j["samples"] = nlohmann::json::array();
    for (const auto& e : m.samples) {
        nlohmann::json s{{"id", e.id}, {"image", e.image}};
        if (e.label) s["label"] = *e.label;
        arr.push_back(std::move(s));
    }
    j["split"] = {{"labeled", m.labeled}, {"unlabeled", m.unlabeled}, {"test", m.test}};
    return j;
}

inline void save_manifest(const CorpusManifest& m, const fs::path& file) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest " + file.string());
    os << manifest_to_json(m).dump(1) << '\n';
}

inline fs::path manifest_file(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

// Parses and eagerly validates a manifest and every array it references.
// Accepts either the manifest file or the corpus directory that contains it.
inline CorpusManifest load_corpus(const fs::path& manifest_path) {
    const fs::path file = manifest_file(manifest_path);
    if (!fs::exists(file)) throw MissingFileError("missing manifest: " + file.string());
    std::ifstream is(file);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest " + file.string() + ": " + e.what());
    }

    CorpusManifest m;
    m.root = file.parent_path();
    try {
        m.num_classes = j.at("num_classes").get<int>();
        m.dims = j.at("dims").get<int>();
        if (j.contains("spacing")) m.spacing = j.at("spacing").get<std::array<double, 3>>();
        for (const auto& s : j.at("samples")) {
            ManifestEntry e{s.at("id").get<std::string>(), s.at("image").get<std::string>(), std::nullopt};
            if (s.contains("label") && !s.at("label").is_null()) e.label = s.at("label").get<std::string>();
            m.samples.push_back(std::move(e));
        }
        const auto& split = j.at("split");
        m.labeled = split.at("labeled").get<std::vector<std::string>>();
        m.unlabeled = split.at("unlabeled").get<std::vector<std::string>>();
        m.test = split.value("test", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest field error in " + file.string() + ": " + e.what());
    }

    if (m.num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (m.dims != 2 && m.dims != 3) throw ValidationError("dims must be 2 or 3");

    std::set<std::string> known;
    for (const auto& e : m.samples)
        if (!known.insert(e.id).second) throw ValidationError("duplicate sample id: " + e.id);
    std::set<std::string> seen;
    for (const auto* list : {&m.labeled, &m.unlabeled, &m.test})
        for (const auto& id : *list) {
            if (!known.count(id)) throw ValidationError("split references unknown id: " + id);
            if (!seen.insert(id).second) throw ValidationError("id in more than one split: " + id);
        }

    for (const auto& id : m.labeled)
        if (!m.entry(id).label) throw ValidationError("labeled id without label file: " + id);

    for (const auto& e : m.samples) {
        const auto image = load_array<float>(m.root / e.image);
        const Shape3 shape = spatial_shape(image);
        if (static_cast<int>(image.shape.size()) != m.dims)
            throw ShapeMismatchError(e.id + ": image rank does not match dims");
        if (!e.label) continue;
        const auto label = load_array<std::uint8_t>(m.root / *e.label);
        if (label.shape.size() != image.shape.size() + 1 || label_spatial_shape(label) != shape)
            throw ShapeMismatchError(e.id + ": label shape does not match image shape");
        if (label_classes(label) != m.num_classes)
            throw ShapeMismatchError(e.id + ": label has " + std::to_string(label_classes(label)) +
                                     " classes, manifest says " + std::to_string(m.num_classes));
        check_one_hot(label, e.id);
    }
    return m;
}

// Re-partitions the train ids (labeled and unlabeled) so that the first
// ceil(fraction * |train|) ids of a seeded shuffle are labeled. Test ids are
// untouched.
inline CorpusManifest split_labeled_fraction(const CorpusManifest& manifest, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("labeled fraction must lie in (0, 1)");
    auto train = manifest.train_ids();
    std::sort(train.begin(), train.end());
    Rng rng(seed);
    rng.shuffle(train);
    const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size()) - 1e-9));
    CorpusManifest out = manifest;
    out.labeled.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(count));
    out.unlabeled.assign(train.begin() + static_cast<std::ptrdiff_t>(count), train.end());
    for (const auto& id : out.labeled)
        if (!out.entry(id).label) throw ValidationError("cannot label " + id + ": no label file");
    return out;
}

// In-memory corpus. Read-only after construction.
class Corpus {
public:
    explicit Corpus(CorpusManifest manifest) : manifest_(std::move(manifest)) {
        for (const auto& e : manifest_.samples) {
            images_.emplace(e.id, load_array<float>(manifest_.root / e.image));
            if (e.label) labels_.emplace(e.id, load_array<std::uint8_t>(manifest_.root / *e.label));
        }
    }

    const CorpusManifest& manifest() const { return manifest_; }
    int num_classes() const { return manifest_.num_classes; }
    int dims() const { return manifest_.dims; }

    // Training view: unlabeled ids never expose their label.
    Sample sample(const std::string& id) const {
        Sample s;
        s.id = id;
        s.image = images_.at(id);
        s.is_labeled = std::find(manifest_.labeled.begin(), manifest_.labeled.end(), id) != manifest_.labeled.end();
        if (s.is_labeled) s.label = labels_.at(id);
        return s;
    }

    // Ground truth for analysis and evaluation, regardless of the split role.
    const NdArray<std::uint8_t>* ground_truth(const std::string& id) const {
        auto it = labels_.find(id);
        return it == labels_.end() ? nullptr : &it->second;
    }

    const NdArray<float>& image(const std::string& id) const { return images_.at(id); }

private:
    CorpusManifest manifest_;
    std::map<std::string, NdArray<float>> images_;
    std::map<std::string, NdArray<std::uint8_t>> labels_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus generator

enum class Difficulty { Easy, Hard };

struct SyntheticOptions {
    std::uint64_t seed = 7;
    int n = 60;
    int dims = 2;
    Shape3 shape{64, 64, 1};
    int num_classes = 2;
    Difficulty difficulty = Difficulty::Easy;
    double test_fraction = 0.2;
    double labeled_fraction = 0.1;
};

namespace detail {

struct Canvas {
    Shape3 shape;
    std::vector<float> image;
    std::vector<int> label;
};

inline double scale_of(const Shape3& s, int dims) {
    const double m = dims == 3 ? std::min({s.h, s.w, s.d}) : std::min(s.h, s.w);
    return m / 64.0;
}

// Rotated ellipse (2D) or axis-aligned ellipsoid (3D). Calls paint(voxel) for
// every voxel inside.
template <class F>
void rasterize_ellipsoid(const Shape3& s, int dims, Rng& rng, double rmin, double rmax, F&& paint) {
    const double ry = rng.uniform(rmin, rmax), rx = rng.uniform(rmin, rmax);
    const double rz = dims == 3 ? rng.uniform(rmin, rmax) : 1.0;
    const double cy = rng.uniform(ry, static_cast<double>(s.h) - ry);
    const double cx = rng.uniform(rx, static_cast<double>(s.w) - rx);
    const double cz = dims == 3 ? rng.uniform(rz, static_cast<double>(s.d) - rz) : 0.0;
    const double th = rng.uniform(0.0, std::numbers::pi);
    const double c = std::cos(th), sn = std::sin(th);
    for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
            for (std::int64_t z = 0; z < s.d; ++z) {
                const double dy = y + 0.5 - cy, dx = x + 0.5 - cx, dz = z + 0.5 - cz;
                const double u = (dy * c + dx * sn) / ry, v = (-dy * sn + dx * c) / rx;
                const double w = dims == 3 ? dz / rz : 0.0;
                if (u * u + v * v + w * w <= 1.0) paint(s.index(y, x, z));
            }
}

// Axis-aligned box used as background clutter.
template <class F>
void rasterize_box(const Shape3& s, int dims, Rng& rng, double rmin, double rmax, F&& paint) {
    const double hy = rng.uniform(rmin, rmax), hx = rng.uniform(rmin, rmax);
    const double hz = dims == 3 ? rng.uniform(rmin, rmax) : 1.0;
    const double cy = rng.uniform(hy, s.h - hy), cx = rng.uniform(hx, s.w - hx);
    const double cz = dims == 3 ? rng.uniform(hz, s.d - hz) : 0.0;
    for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x)
            for (std::int64_t z = 0; z < s.d; ++z)
                if (std::abs(y + 0.5 - cy) <= hy && std::abs(x + 0.5 - cx) <= hx &&
                    (dims == 2 || std::abs(z + 0.5 - cz) <= hz))
                    paint(s.index(y, x, z));
}

// Thin tube along a quadratic Bezier curve between two border-near points.
template <class F>
void rasterize_tube(const Shape3& s, int dims, Rng& rng, double radius, F&& paint) {
    auto point = [&] {
        return std::array<double, 3>{rng.uniform(0.1, 0.9) * s.h, rng.uniform(0.1, 0.9) * s.w,
                                     dims == 3 ? rng.uniform(0.1, 0.9) * s.d : 0.5};
    };
    const auto a = point(), b = point(), ctrl = point();
    const int steps = static_cast<int>(4 * (s.h + s.w + s.d));
    std::vector<std::array<double, 3>> curve;
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps, u = 1.0 - t;
        std::array<double, 3> p{};
        for (int k = 0; k < 3; ++k) p[k] = u * u * a[k] + 2 * u * t * ctrl[k] + t * t * b[k];
        curve.push_back(p);
    }
    std::vector<char> hit(static_cast<std::size_t>(s.size()), 0);
    const auto r = static_cast<std::int64_t>(std::ceil(radius));
    for (const auto& p : curve) {
        const auto py = static_cast<std::int64_t>(p[0]), px = static_cast<std::int64_t>(p[1]);
        const auto pz = static_cast<std::int64_t>(p[2]);
        for (std::int64_t y = py - r; y <= py + r; ++y)
            for (std::int64_t x = px - r; x <= px + r; ++x)
                for (std::int64_t z = (dims == 3 ? pz - r : 0); z <= (dims == 3 ? pz + r : 0); ++z) {
                    if (y < 0 || x < 0 || z < 0 || y >= s.h || x >= s.w || z >= s.d) continue;
                    const double dy = y + 0.5 - p[0], dx = x + 0.5 - p[1], dz = dims == 3 ? z + 0.5 - p[2] : 0.0;
                    if (dy * dy + dx * dx + dz * dz <= radius * radius) hit[static_cast<std::size_t>(s.index(y, x, z))] = 1;
                }
    }
    for (std::size_t v = 0; v < hit.size(); ++v)
        if (hit[v]) paint(static_cast<std::int64_t>(v));
}

inline Canvas synthesize(const SyntheticOptions& o, Rng& rng) {
    Canvas cv;
    cv.shape = o.shape;
    const auto nvox = static_cast<std::size_t>(o.shape.size());
    cv.image.assign(nvox, 0.0f);
    cv.label.assign(nvox, 0);
    const double sc = scale_of(o.shape, o.dims);

    // Per-image acquisition style: background level, smooth bias field,
    // contrast and noise all vary between images.
    const double bg = rng.uniform(0.15, 0.45);
    const double bias_amp = rng.uniform(0.0, 0.15);
    const double fy = rng.uniform(0.3, 1.0), fx = rng.uniform(0.3, 1.0), fz = rng.uniform(0.3, 1.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double contrast = rng.uniform(0.12, 0.40);
    const double noise = rng.uniform(0.04, 0.12);

    std::vector<double> base(nvox);
    for (std::int64_t y = 0; y < o.shape.h; ++y)
        for (std::int64_t x = 0; x < o.shape.w; ++x)
            for (std::int64_t z = 0; z < o.shape.d; ++z) {
                const double arg = 2.0 * std::numbers::pi *
                                       (fy * y / o.shape.h + fx * x / o.shape.w + (o.dims == 3 ? fz * z / o.shape.d : 0.0)) +
                                   phase;
                base[static_cast<std::size_t>(o.shape.index(y, x, z))] = bg + bias_amp * std::cos(arg);
            }
    std::vector<double> level = base;

    // Clutter: boxes as bright as the objects but labeled background.
    const int clutter = static_cast<int>(rng.between(0, 2));
    for (int i = 0; i < clutter; ++i) {
        const double amp = contrast * rng.uniform(0.8, 1.2);
        rasterize_box(o.shape, o.dims, rng, 2.5 * sc, 6.0 * sc,
                      [&](std::int64_t v) { level[static_cast<std::size_t>(v)] = base[static_cast<std::size_t>(v)] + amp; });
    }

    // Foreground: every class gets at least one blob; brighter per class index.
    for (int c = 1; c < o.num_classes; ++c) {
        const int blobs = static_cast<int>(rng.between(1, o.difficulty == Difficulty::Hard ? 1 : 2));
        const double amp = contrast * (1.0 + 0.6 * (c - 1));
        for (int b = 0; b < blobs; ++b)
            rasterize_ellipsoid(o.shape, o.dims, rng, 4.0 * sc, 11.0 * sc, [&](std::int64_t v) {
                level[static_cast<std::size_t>(v)] = base[static_cast<std::size_t>(v)] + amp;
                cv.label[static_cast<std::size_t>(v)] = c;
            });
    }

    if (o.difficulty == Difficulty::Hard) {
        const int tubes = static_cast<int>(rng.between(1, 2));
        const int c = o.num_classes - 1;
        for (int t = 0; t < tubes; ++t) {
            const double amp = contrast * rng.uniform(0.7, 1.0) * (1.0 + 0.6 * (c - 1));
            rasterize_tube(o.shape, o.dims, rng, rng.uniform(1.0, 1.6) * std::max(1.0, sc), [&](std::int64_t v) {
                level[static_cast<std::size_t>(v)] = base[static_cast<std::size_t>(v)] + amp;
                cv.label[static_cast<std::size_t>(v)] = c;
            });
        }
    }

    for (std::size_t v = 0; v < nvox; ++v)
        cv.image[v] = static_cast<float>(std::clamp(level[v] + rng.normal(0.0, noise), 0.0, 1.0));
    return cv;
}

inline std::string sample_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04d", i);
    return buf;
}

}  // namespace detail

// Writes images/, labels/ and manifest.json under out_dir. Deterministic for a
// fixed seed: repeated calls produce byte-identical files.
inline CorpusManifest generate_synthetic_corpus(const SyntheticOptions& o, const fs::path& out_dir) {
    if (o.n < 10) throw ValidationError("synthetic corpus needs n >= 10");
    if (o.dims != 2 && o.dims != 3) throw ValidationError("dims must be 2 or 3");
    if (o.shape.h < 16 || o.shape.w < 16 || (o.dims == 3 ? o.shape.d < 16 : o.shape.d != 1))
        throw ValidationError("every spatial dim must be >= 16 (2D shapes have depth 1)");
    if (o.num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (!(o.test_fraction >= 0.0 && o.test_fraction < 1.0)) throw ValidationError("test fraction must lie in [0, 1)");

    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    fs::create_directories(out_dir / "labels", ec);
    if (ec || !fs::is_directory(out_dir / "images")) throw IoError("cannot create corpus directory " + out_dir.string());

    Rng master(o.seed);
    CorpusManifest m;
    m.root = out_dir;
    m.num_classes = o.num_classes;
    m.dims = o.dims;

    std::vector<std::uint64_t> spatial{static_cast<std::uint64_t>(o.shape.h), static_cast<std::uint64_t>(o.shape.w)};
    if (o.dims == 3) spatial.push_back(static_cast<std::uint64_t>(o.shape.d));

    for (int i = 0; i < o.n; ++i) {
        Rng rng = master.fork();
        const auto cv = detail::synthesize(o, rng);
        const std::string id = detail::sample_name(i);

        NdArray<float> image{spatial, cv.image};
        NdArray<std::uint8_t> label;
        label.shape = spatial;
        label.shape.push_back(static_cast<std::uint64_t>(o.num_classes));
        label.data.assign(cv.label.size() * static_cast<std::size_t>(o.num_classes), 0);
        for (std::size_t v = 0; v < cv.label.size(); ++v)
            label.data[v * static_cast<std::size_t>(o.num_classes) + static_cast<std::size_t>(cv.label[v])] = 1;

        const std::string img_rel = "images/" + id + ".bin", lbl_rel = "labels/" + id + ".bin";
        save_array(out_dir / img_rel, image);
        save_array(out_dir / lbl_rel, label);
        m.samples.push_back({id, img_rel, lbl_rel});
    }

    const auto n_test = static_cast<std::size_t>(std::floor(o.test_fraction * o.n + 1e-9));
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        if (i >= m.samples.size() - n_test) m.test.push_back(m.samples[i].id);
        else m.unlabeled.push_back(m.samples[i].id);
    }
    m = split_labeled_fraction(m, o.labeled_fraction, o.seed);
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

// ---------------------------------------------------------------------------
// Batch sampling

struct Batch {
    std::vector<Sample> labeled;
    std::vector<Sample> unlabeled;
    std::vector<std::pair<std::size_t, std::size_t>> pairing;  // labeled index -> unlabeled index
};

namespace detail {

inline NdArray<float> crop_image(const NdArray<float>& img, const Shape3& full, const Shape3& at, const Shape3& patch) {
    NdArray<float> out;
    out.shape = img.shape;
    out.shape[0] = static_cast<std::uint64_t>(patch.h);
    out.shape[1] = static_cast<std::uint64_t>(patch.w);
    if (out.shape.size() == 3) out.shape[2] = static_cast<std::uint64_t>(patch.d);
    out.data.resize(static_cast<std::size_t>(patch.size()));
    for (std::int64_t y = 0; y < patch.h; ++y)
        for (std::int64_t x = 0; x < patch.w; ++x)
            for (std::int64_t z = 0; z < patch.d; ++z)
                out.data[static_cast<std::size_t>(patch.index(y, x, z))] =
                    img.data[static_cast<std::size_t>(full.index(at.h + y, at.w + x, at.d + z))];
    return out;
}

inline NdArray<std::uint8_t> crop_label(const NdArray<std::uint8_t>& lbl, const Shape3& full, const Shape3& at,
                                        const Shape3& patch) {
    const auto c = static_cast<std::size_t>(lbl.shape.back());
    NdArray<std::uint8_t> out;
    out.shape = lbl.shape;
    out.shape[0] = static_cast<std::uint64_t>(patch.h);
    out.shape[1] = static_cast<std::uint64_t>(patch.w);
    if (out.shape.size() == 4) out.shape[2] = static_cast<std::uint64_t>(patch.d);
    out.data.resize(static_cast<std::size_t>(patch.size()) * c);
    for (std::int64_t y = 0; y < patch.h; ++y)
        for (std::int64_t x = 0; x < patch.w; ++x)
            for (std::int64_t z = 0; z < patch.d; ++z) {
                const auto src = static_cast<std::size_t>(full.index(at.h + y, at.w + x, at.d + z)) * c;
                const auto dst = static_cast<std::size_t>(patch.index(y, x, z)) * c;
                std::copy_n(lbl.data.begin() + static_cast<std::ptrdiff_t>(src), c,
                            out.data.begin() + static_cast<std::ptrdiff_t>(dst));
            }
    return out;
}

inline bool has_foreground(const NdArray<std::uint8_t>& lbl) {
    const auto c = static_cast<std::size_t>(lbl.shape.back());
    for (std::size_t v = 0; v < lbl.data.size() / c; ++v)
        if (!lbl.data[v * c]) return true;
    return false;
}

inline Shape3 random_corner(Rng& rng, const Shape3& full, const Shape3& patch) {
    return Shape3{rng.between(0, full.h - patch.h), rng.between(0, full.w - patch.w), rng.between(0, full.d - patch.d)};
}

}  // namespace detail

inline constexpr int kForegroundCropRetries = 10;

// Random patches: B_l labeled and B_u unlabeled, pairing k -> k. Labeled
// crops are redrawn up to kForegroundCropRetries times until they contain a
// foreground voxel; the last draw is kept otherwise.
inline Batch sample_batch(const Corpus& corpus, Rng& rng, const Shape3& patch, std::size_t b_l, std::size_t b_u) {
    const auto& m = corpus.manifest();
    if (m.labeled.empty() || m.unlabeled.empty()) throw ConfigError("labeled and unlabeled pools must be nonempty");
    if (b_l == 0 || b_u == 0) throw ConfigError("batch needs at least one labeled and one unlabeled sample");

    auto crop = [&](const std::string& id, bool want_fg) {
        Sample s = corpus.sample(id);
        const Shape3 full = spatial_shape(s.image);
        if (patch.h > full.h || patch.w > full.w || patch.d > full.d)
            throw ValidationError("patch " + patch.str() + " larger than image " + full.str());
        Shape3 at = detail::random_corner(rng, full, patch);
        if (want_fg && s.label) {
            for (int attempt = 1; attempt < kForegroundCropRetries; ++attempt) {
                if (detail::has_foreground(detail::crop_label(*s.label, full, at, patch))) break;
                at = detail::random_corner(rng, full, patch);
            }
        }
        Sample out;
        out.id = s.id;
        out.is_labeled = s.is_labeled;
        out.image = detail::crop_image(s.image, full, at, patch);
        if (s.label) out.label = detail::crop_label(*s.label, full, at, patch);
        return out;
    };

    Batch batch;
    for (auto i : rng.choose(m.labeled.size(), b_l)) batch.labeled.push_back(crop(m.labeled[i], true));
    for (auto i : rng.choose(m.unlabeled.size(), b_u)) batch.unlabeled.push_back(crop(m.unlabeled[i], false));
    for (std::size_t k = 0; k < std::min(b_l, b_u); ++k) batch.pairing.emplace_back(k, k);
    return batch;
}

}  // namespace ducisc
