#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ducisc/ducisc.hpp"

namespace ducisc::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ducisc_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline double rel_err(double a, double b) {
    const double den = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / den;
}

// ||a - n|| / max(||a||, ||n||) over a list of analytic/numeric pairs.
inline double vector_rel_err(const std::vector<double>& a, const std::vector<double>& n) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - n[i]) * (a[i] - n[i]);
        na += a[i] * a[i];
        nn += n[i] * n[i];
    }
    const double den = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    return std::sqrt(diff) / den;
}

// Central difference of f with respect to every entry of x.
inline Matrix<double> numeric_grad(Matrix<double>& x, const std::function<double()>& f, double h = 1e-6) {
    Matrix<double> g(x.rows(), x.cols());
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = f();
        x.data()[i] = keep - h;
        const double down = f();
        x.data()[i] = keep;
        g.data()[i] = (up - down) / (2 * h);
    }
    return g;
}

inline double matrix_rel_err(const Matrix<double>& a, const Matrix<double>& n) {
    const double den = std::max({a.norm(), n.norm(), 1e-12});
    return (a - n).norm() / den;
}

inline Matrix<double> random_matrix(std::int64_t r, std::int64_t c, std::mt19937_64& g, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix<double> m(r, c);
    for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = u(g);
    return m;
}

inline Matrix<double> random_one_hot(int C, std::int64_t P, std::mt19937_64& g) {
    std::uniform_int_distribution<int> u(0, C - 1);
    Matrix<double> m = Matrix<double>::Zero(C, P);
    for (std::int64_t v = 0; v < P; ++v) m(u(g), v) = 1.0;
    return m;
}

inline Matrix<double> random_simplex(int C, std::int64_t P, std::mt19937_64& g) {
    Matrix<double> m = random_matrix(C, P, g, 0.05, 1.0);
    for (std::int64_t v = 0; v < P; ++v) m.col(v) /= m.col(v).sum();
    return m;
}

// ---------------------------------------------------------------------------
// Oracles written independently of the library code paths.

// Masked average by explicit loops over a [Z][P] feature table.
inline std::vector<double> loop_masked_average(const std::vector<std::vector<double>>& f, const std::vector<double>& mask,
                                               bool* present) {
    double mass = 0;
    for (double m : mask) mass += m;
    *present = mass > 0;
    std::vector<double> out(f.size(), 0.0);
    if (!*present) return out;
    for (std::size_t z = 0; z < f.size(); ++z) {
        double acc = 0;
        for (std::size_t v = 0; v < mask.size(); ++v) acc += f[z][v] * mask[v];
        out[z] = acc / mass;
    }
    return out;
}

struct Vox {
    int y, x, z;
};

inline std::vector<Vox> loop_boundary(const std::vector<std::uint8_t>& m, int H, int W, int D) {
    auto in = [&](int y, int x, int z) {
        if (y < 0 || x < 0 || z < 0 || y >= H || x >= W || z >= D) return false;
        return m[static_cast<std::size_t>((y * W + x) * D + z)] != 0;
    };
    std::vector<Vox> out;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int z = 0; z < D; ++z) {
                if (!in(y, x, z)) continue;
                bool interior = in(y - 1, x, z) && in(y + 1, x, z) && in(y, x - 1, z) && in(y, x + 1, z);
                if (D > 1) interior = interior && in(y, x, z - 1) && in(y, x, z + 1);
                if (!interior) out.push_back({y, x, z});
            }
    return out;
}

struct BruteSurface {
    double hd95, asd;
};

// All-pairs directed distances between the two boundaries.
inline BruteSurface brute_surface(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, int H, int W, int D,
                                  const std::array<double, 3>& sp = {1, 1, 1}) {
    const auto ba = loop_boundary(a, H, W, D), bb = loop_boundary(b, H, W, D);
    std::vector<double> all;
    auto directed = [&](const std::vector<Vox>& from, const std::vector<Vox>& to) {
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                const double dy = (p.y - q.y) * sp[0], dx = (p.x - q.x) * sp[1], dz = (p.z - q.z) * sp[2];
                best = std::min(best, dy * dy + dx * dx + dz * dz);
            }
            all.push_back(std::sqrt(best));
        }
    };
    directed(ba, bb);
    directed(bb, ba);
    double sum = 0;
    for (double d : all) sum += d;
    std::sort(all.begin(), all.end());
    const double rank = 0.95 * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const auto hi = std::min(lo + 1, all.size() - 1);
    return {all[lo] + (rank - static_cast<double>(lo)) * (all[hi] - all[lo]), sum / static_cast<double>(all.size())};
}

inline std::vector<std::uint8_t> random_mask(std::size_t n, double p, std::mt19937_64& g) {
    std::bernoulli_distribution b(p);
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = b(g);
    return m;
}

// Solid box plus speckle, so masks have both interiors and ragged borders.
inline std::vector<std::uint8_t> blob_mask(int H, int W, int D, std::mt19937_64& g) {
    std::uniform_int_distribution<int> uy(0, H - 1), ux(0, W - 1), uz(0, D - 1);
    std::vector<std::uint8_t> m(static_cast<std::size_t>(H * W * D), 0);
    int y0 = uy(g), y1 = uy(g), x0 = ux(g), x1 = ux(g), z0 = uz(g), z1 = uz(g);
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    if (z0 > z1) std::swap(z0, z1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int z = z0; z <= z1; ++z) m[static_cast<std::size_t>((y * W + x) * D + z)] = 1;
    std::bernoulli_distribution flip(0.08);
    for (auto& v : m)
        if (flip(g)) v = !v;
    return m;
}

// Small corpus on disk for trainer and CLI tests.
inline CorpusManifest small_corpus(const std::filesystem::path& dir, int n = 20, Shape3 shape = {16, 16, 1}, int classes = 2,
                                   std::uint64_t seed = 3) {
    SyntheticOptions o;
    o.seed = seed;
    o.n = n;
    o.shape = shape;
    o.num_classes = classes;
    o.labeled_fraction = 0.25;
    return generate_synthetic_corpus(o, dir);
}

inline TrainConfig tiny_config() {
    TrainConfig c;
    c.max_iters = 5;
    c.patch_shape = {8, 8, 1};
    c.levels = 2;
    c.base_width = 2;
    c.b_l = 2;
    c.b_u = 2;
    return c;
}

}  // namespace ducisc::testing
