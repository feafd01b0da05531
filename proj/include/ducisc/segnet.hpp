#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ducisc/array_io.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/layers.hpp"
#include "ducisc/random.hpp"
#include "ducisc/tensor.hpp"

namespace ducisc {

struct NetConfig {
    int dims = 2;
    int in_channels = 1;
    int num_classes = 2;
    int levels = 4;  // S: decoder feature levels, also the encoder depth
    int base_width = 16;
    bool instance_norm = true;

    int width(int encoder_level) const { return base_width << encoder_level; }
    // Channel width Z^s of decoder level s (0 = coarsest).
    int feature_width(int s) const { return width(levels - 1 - s); }

    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
    j = {{"dims", c.dims},   {"in_channels", c.in_channels}, {"num_classes", c.num_classes},
         {"levels", c.levels}, {"base_width", c.base_width},   {"instance_norm", c.instance_norm}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
    c.dims = j.at("dims");
    c.in_channels = j.value("in_channels", 1);
    c.num_classes = j.at("num_classes");
    c.levels = j.at("levels");
    c.base_width = j.at("base_width");
    c.instance_norm = j.value("instance_norm", true);
}

// Named parameter tensors in a fixed order.
template <class T>
struct ParamTree {
    std::vector<std::string> names;
    std::vector<Matrix<T>> values;

    std::size_t size() const { return values.size(); }

    std::size_t add(std::string name, Matrix<T> value) {
        names.push_back(std::move(name));
        values.push_back(std::move(value));
        return values.size() - 1;
    }

    const Matrix<T>& at(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        throw ValidationError("no parameter named " + name);
    }

    ParamTree zeros_like() const {
        ParamTree z;
        z.names = names;
        for (const auto& v : values) z.values.push_back(Matrix<T>::Zero(v.rows(), v.cols()));
        return z;
    }

    bool same_structure(const ParamTree& o) const {
        if (names != o.names) return false;
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i].rows() != o.values[i].rows() || values[i].cols() != o.values[i].cols()) return false;
        return true;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values) n += static_cast<std::size_t>(v.size());
        return n;
    }

    template <class U>
    ParamTree<U> cast() const {
        ParamTree<U> o;
        o.names = names;
        for (const auto& v : values) o.values.push_back(v.template cast<U>());
        return o;
    }

    friend bool operator==(const ParamTree& a, const ParamTree& b) {
        if (!a.same_structure(b)) return false;
        for (std::size_t i = 0; i < a.values.size(); ++i)
            if (a.values[i] != b.values[i]) return false;
        return true;
    }
};

// Multi-level decoder features of one image, coarsest level first.
template <class T>
struct FeaturePyramid {
    std::vector<Matrix<T>> levels;  // [Z^s, voxels^s]
    std::vector<Shape3> shapes;

    std::size_t depth() const { return levels.size(); }
};

// Softmax heads of one image, coarsest first, plus the finest-level argmax.
template <class T>
struct Prediction {
    std::vector<Matrix<T>> probs;  // [C, voxels^s]
    std::vector<Shape3> shapes;
    std::vector<int> hard;

    const Matrix<T>& finest() const { return probs.back(); }
};

// Argmax per column; ties resolve to the lowest class index.
template <class T>
std::vector<int> argmax_columns(const Matrix<T>& probs) {
    std::vector<int> out(static_cast<std::size_t>(probs.cols()), 0);
    for (std::int64_t v = 0; v < probs.cols(); ++v) {
        int best = 0;
        for (int c = 1; c < probs.rows(); ++c)
            if (probs(c, v) > probs(best, v)) best = c;
        out[static_cast<std::size_t>(v)] = best;
    }
    return out;
}

// Batched forward result.
template <class T>
struct NetOutput {
    std::int64_t n = 0;
    std::vector<Shape3> shapes;
    std::vector<Matrix<T>> features;  // [Z^s, n * voxels^s]
    std::vector<Matrix<T>> logits;    // [C, n * voxels^s]
    std::vector<Matrix<T>> probs;

    FeaturePyramid<T> pyramid(std::int64_t i) const {
        FeaturePyramid<T> p;
        p.shapes = shapes;
        for (std::size_t s = 0; s < features.size(); ++s)
            p.levels.push_back(sample_block(features[s], i, shapes[s].size()));
        return p;
    }

    Prediction<T> prediction(std::int64_t i) const {
        Prediction<T> p;
        p.shapes = shapes;
        for (std::size_t s = 0; s < probs.size(); ++s) p.probs.push_back(sample_block(probs[s], i, shapes[s].size()));
        p.hard = argmax_columns(p.probs.back());
        return p;
    }

    std::vector<Matrix<T>> sample_logits(std::int64_t i) const {
        std::vector<Matrix<T>> out;
        for (std::size_t s = 0; s < logits.size(); ++s) out.push_back(sample_block(logits[s], i, shapes[s].size()));
        return out;
    }
};

template <class T>
struct BlockCache {
    nn::ConvCache<T> conv_a, conv_b;
    nn::NormCache<T> norm_a, norm_b;
    Matrix<T> out_a, out_b;  // post-activation outputs
};

template <class T>
struct ForwardCache {
    std::vector<BlockCache<T>> enc, dec;
    std::vector<std::vector<std::int64_t>> pool_argmax;  // per encoder level >= 1
    std::vector<std::int64_t> pool_in_cols;
    std::vector<Shape3> enc_shapes;
    std::vector<Matrix<T>> enc_out;
};

// U-Net style encoder/decoder with S decoder levels and one 1x1 softmax head
// per level (deep supervision). Level s has spatial size input / 2^(S-1-s).
template <class T>
class SegNet {
public:
    explicit SegNet(NetConfig cfg) : cfg_(cfg), offsets_(nn::kernel_offsets(cfg.dims)), pool_(pool_factor(cfg.dims, 1)) {
        if (cfg.dims != 2 && cfg.dims != 3) throw ValidationError("dims must be 2 or 3");
        if (cfg.levels < 1) throw ValidationError("levels must be >= 1");
        if (cfg.base_width < 1 || cfg.num_classes < 2 || cfg.in_channels < 1)
            throw ValidationError("invalid network widths");
        build_layout();
    }

    const NetConfig& config() const { return cfg_; }

    ParamTree<T> init(Rng& rng) const {
        ParamTree<T> p;
        for (const auto& spec : layout_) {
            Matrix<T> m(spec.rows, spec.cols);
            switch (spec.kind) {
                case Init::He: {
                    const double sd = std::sqrt(2.0 / static_cast<double>(spec.cols));
                    for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal(0.0, sd));
                    break;
                }
                case Init::Xavier: {
                    const double sd = std::sqrt(1.0 / static_cast<double>(spec.cols));
                    for (std::int64_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal(0.0, sd));
                    break;
                }
                case Init::Zero: m.setZero(); break;
                case Init::One: m.setOnes(); break;
            }
            p.add(spec.name, std::move(m));
        }
        return p;
    }

    void check_input(const Shape3& s) const {
        const Factor3 f = pool_factor(cfg_.dims, cfg_.levels - 1);
        if (!divisible(s, f))
            throw ValidationError("input " + s.str() + " not divisible by 2^" + std::to_string(cfg_.levels - 1));
    }

    // Deterministic: the network has no stochastic layers.
    NetOutput<T> forward(const ParamTree<T>& p, const nn::Act<T>& input, ForwardCache<T>* cache = nullptr) const {
        check_input(input.shape);
        if (input.x.rows() != cfg_.in_channels) throw ShapeMismatchError("input channel count mismatch");
        if (p.size() != layout_.size()) throw InternalError("parameter tree does not match the network layout");
        const int S = cfg_.levels;
        if (cache) {
            cache->enc.assign(static_cast<std::size_t>(S), {});
            cache->dec.assign(static_cast<std::size_t>(S), {});
            cache->pool_argmax.assign(static_cast<std::size_t>(S), {});
            cache->pool_in_cols.assign(static_cast<std::size_t>(S), 0);
            cache->enc_shapes.assign(static_cast<std::size_t>(S), {});
        }

        std::vector<nn::Act<T>> enc_out;
        nn::Act<T> x = input;
        for (int l = 0; l < S; ++l) {
            if (l > 0) {
                if (cache) cache->pool_in_cols[static_cast<std::size_t>(l)] = x.x.cols();
                x = nn::maxpool_forward(x, pool_, cache ? &cache->pool_argmax[static_cast<std::size_t>(l)] : nullptr);
            }
            if (cache) cache->enc_shapes[static_cast<std::size_t>(l)] = x.shape;
            x = block_forward(p, enc_block_[static_cast<std::size_t>(l)], x,
                              cache ? &cache->enc[static_cast<std::size_t>(l)] : nullptr);
            enc_out.push_back(x);
        }

        NetOutput<T> out;
        out.n = input.n;
        std::vector<nn::Act<T>> feats{enc_out.back()};
        for (int s = 1; s < S; ++s) {
            const auto up = nn::upsample_forward(feats.back(), pool_);
            const auto& skip = enc_out[static_cast<std::size_t>(S - 1 - s)];
            nn::Act<T> cat{Matrix<T>(up.x.rows() + skip.x.rows(), up.x.cols()), up.n, up.shape};
            cat.x << up.x, skip.x;
            feats.push_back(block_forward(p, dec_block_[static_cast<std::size_t>(s)], cat,
                                          cache ? &cache->dec[static_cast<std::size_t>(s)] : nullptr));
        }
        for (int s = 0; s < S; ++s) {
            const auto& f = feats[static_cast<std::size_t>(s)];
            const auto& h = heads_[static_cast<std::size_t>(s)];
            out.shapes.push_back(f.shape);
            out.features.push_back(f.x);
            out.logits.push_back(nn::conv1_forward(p.values[h.w], p.values[h.b], f.x));
            out.probs.push_back(nn::softmax_columns(out.logits.back()));
        }
        if (cache) {
            cache->enc_out.clear();
            for (auto& e : enc_out) cache->enc_out.push_back(std::move(e.x));
        }
        return out;
    }

    // Backpropagates gradients supplied per decoder level for the features and
    // the head logits (an empty matrix means zero) into parameter gradients.
    ParamTree<T> backward(const ParamTree<T>& p, const ForwardCache<T>& cache, const NetOutput<T>& out,
                          const std::vector<Matrix<T>>& d_features, const std::vector<Matrix<T>>& d_logits) const {
        const int S = cfg_.levels;
        ParamTree<T> g = p.zeros_like();
        std::vector<Matrix<T>> gf(static_cast<std::size_t>(S));
        for (int s = 0; s < S; ++s) {
            const auto us = static_cast<std::size_t>(s);
            gf[us] = Matrix<T>::Zero(out.features[us].rows(), out.features[us].cols());
            if (us < d_features.size() && d_features[us].size() > 0) gf[us] += d_features[us];
            if (us < d_logits.size() && d_logits[us].size() > 0) {
                const auto& h = heads_[us];
                gf[us] += nn::conv1_backward(p.values[h.w], out.features[us], d_logits[us], g.values[h.w], g.values[h.b]);
            }
        }

        std::vector<Matrix<T>> genc(static_cast<std::size_t>(S));
        for (int l = 0; l < S; ++l) {
            const auto& e = cache.enc_out[static_cast<std::size_t>(l)];
            genc[static_cast<std::size_t>(l)] = Matrix<T>::Zero(e.rows(), e.cols());
        }
        for (int s = S - 1; s >= 1; --s) {
            const auto us = static_cast<std::size_t>(s);
            const Shape3 shape = out.shapes[us];
            Matrix<T> gcat = block_backward(p, dec_block_[us], cache.dec[us], gf[us], out.n, shape, g, true);
            const auto up_rows = out.features[us - 1].rows();
            gf[us - 1] += nn::upsample_backward<T>(gcat.topRows(up_rows), out.n, out.shapes[us - 1], pool_);
            genc[static_cast<std::size_t>(S - 1 - s)] += gcat.bottomRows(gcat.rows() - up_rows);
        }
        genc[static_cast<std::size_t>(S - 1)] += gf[0];

        for (int l = S - 1; l >= 0; --l) {
            const auto ul = static_cast<std::size_t>(l);
            Matrix<T> gin = block_backward(p, enc_block_[ul], cache.enc[ul], genc[ul], out.n, cache.enc_shapes[ul], g, l > 0);
            if (l > 0) genc[ul - 1] += nn::maxpool_backward(gin, cache.pool_argmax[ul], cache.pool_in_cols[ul]);
        }
        return g;
    }

private:
    enum class Init { He, Xavier, Zero, One };
    struct ParamSpec {
        std::string name;
        std::int64_t rows, cols;
        Init kind;
    };
    struct ConvIdx {
        std::size_t w = 0, b = 0;
    };
    struct BlockIdx {
        ConvIdx conv_a, conv_b;
        ConvIdx norm_a, norm_b;  // gamma, beta
    };

    std::size_t add_param(std::string name, std::int64_t rows, std::int64_t cols, Init kind) {
        layout_.push_back({std::move(name), rows, cols, kind});
        return layout_.size() - 1;
    }

    BlockIdx add_block(const std::string& prefix, std::int64_t in, std::int64_t out) {
        const auto K = static_cast<std::int64_t>(offsets_.size());
        BlockIdx b;
        b.conv_a = {add_param(prefix + ".conv_a.weight", out, in * K, Init::He),
                    add_param(prefix + ".conv_a.bias", out, 1, Init::Zero)};
        if (cfg_.instance_norm)
            b.norm_a = {add_param(prefix + ".norm_a.gamma", out, 1, Init::One),
                        add_param(prefix + ".norm_a.beta", out, 1, Init::Zero)};
        b.conv_b = {add_param(prefix + ".conv_b.weight", out, out * K, Init::He),
                    add_param(prefix + ".conv_b.bias", out, 1, Init::Zero)};
        if (cfg_.instance_norm)
            b.norm_b = {add_param(prefix + ".norm_b.gamma", out, 1, Init::One),
                        add_param(prefix + ".norm_b.beta", out, 1, Init::Zero)};
        return b;
    }

    void build_layout() {
        const int S = cfg_.levels;
        for (int l = 0; l < S; ++l)
            enc_block_.push_back(add_block("enc" + std::to_string(l), l == 0 ? cfg_.in_channels : cfg_.width(l - 1),
                                           cfg_.width(l)));
        dec_block_.push_back({});  // level 0 is the encoder bottleneck
        for (int s = 1; s < S; ++s)
            dec_block_.push_back(add_block("dec" + std::to_string(s),
                                           cfg_.feature_width(s - 1) + cfg_.width(S - 1 - s), cfg_.feature_width(s)));
        for (int s = 0; s < S; ++s)
            heads_.push_back({add_param("head" + std::to_string(s) + ".weight", cfg_.num_classes, cfg_.feature_width(s),
                                        Init::Xavier),
                              add_param("head" + std::to_string(s) + ".bias", cfg_.num_classes, 1, Init::Zero)});
    }

    nn::Act<T> block_forward(const ParamTree<T>& p, const BlockIdx& b, const nn::Act<T>& in, BlockCache<T>* c) const {
        auto stage = [&](const nn::Act<T>& x, const ConvIdx& conv, const ConvIdx& norm, nn::ConvCache<T>* cc,
                         nn::NormCache<T>* nc, Matrix<T>* keep) {
            nn::Act<T> y = nn::conv3_forward(p.values[conv.w], p.values[conv.b], x, offsets_, cc);
            if (cfg_.instance_norm) y.x = nn::instnorm_forward(p.values[norm.w], p.values[norm.b], y.x, y.n, y.voxels(), nc);
            nn::relu_inplace(y.x);
            if (keep) *keep = y.x;
            return y;
        };
        auto a = stage(in, b.conv_a, b.norm_a, c ? &c->conv_a : nullptr, c ? &c->norm_a : nullptr, c ? &c->out_a : nullptr);
        return stage(a, b.conv_b, b.norm_b, c ? &c->conv_b : nullptr, c ? &c->norm_b : nullptr, c ? &c->out_b : nullptr);
    }

    Matrix<T> block_backward(const ParamTree<T>& p, const BlockIdx& b, const BlockCache<T>& c, const Matrix<T>& dy,
                             std::int64_t n, const Shape3& shape, ParamTree<T>& g, bool need_input_grad) const {
        auto stage = [&](const Matrix<T>& out, const Matrix<T>& d, const ConvIdx& conv, const ConvIdx& norm,
                         const nn::ConvCache<T>& cc, const nn::NormCache<T>& nc, bool input_grad) {
            Matrix<T> dz = nn::relu_backward(out, d);
            if (cfg_.instance_norm)
                dz = nn::instnorm_backward(p.values[norm.w], nc, dz, n, shape.size(), g.values[norm.w], g.values[norm.b]);
            return nn::conv3_backward(p.values[conv.w], cc, dz, n, shape, offsets_, g.values[conv.w], g.values[conv.b],
                                      input_grad);
        };
        Matrix<T> da = stage(c.out_b, dy, b.conv_b, b.norm_b, c.conv_b, c.norm_b, true);
        return stage(c.out_a, da, b.conv_a, b.norm_a, c.conv_a, c.norm_a, need_input_grad);
    }

    NetConfig cfg_;
    std::vector<nn::Offset> offsets_;
    Factor3 pool_;
    std::vector<ParamSpec> layout_;
    std::vector<BlockIdx> enc_block_, dec_block_;
    std::vector<ConvIdx> heads_;
};

// Stacks single-channel images of one spatial shape into a batched input.
template <class T>
nn::Act<T> make_input(const std::vector<const NdArray<float>*>& images, const Shape3& shape) {
    nn::Act<T> a{Matrix<T>(1, static_cast<std::int64_t>(images.size()) * shape.size()),
                 static_cast<std::int64_t>(images.size()), shape};
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (static_cast<std::int64_t>(images[i]->data.size()) != shape.size())
            throw ShapeMismatchError("batched images must share one spatial shape");
        for (std::int64_t v = 0; v < shape.size(); ++v)
            a.x(0, static_cast<std::int64_t>(i) * shape.size() + v) = static_cast<T>(images[i]->data[static_cast<std::size_t>(v)]);
    }
    return a;
}

// ---------------------------------------------------------------------------
// Student / teacher pair

template <class T>
struct DualModel {
    NetConfig net;
    ParamTree<T> student;
    ParamTree<T> teacher;
    double ema_alpha = 0.99;

    static DualModel create(const NetConfig& cfg, Rng& rng, double alpha) {
        SegNet<T> net(cfg);
        DualModel d{cfg, net.init(rng), {}, alpha};
        d.teacher = d.student;
        return d;
    }
};

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
template <class T>
void ema_update(DualModel<T>& dual, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("EMA alpha must lie in [0, 1]");
    if (!dual.student.same_structure(dual.teacher))
        throw InternalError("student and teacher parameter trees differ in structure");
    const T a = static_cast<T>(alpha), b = static_cast<T>(1.0 - alpha);
    for (std::size_t i = 0; i < dual.teacher.size(); ++i)
        dual.teacher.values[i] = a * dual.teacher.values[i] + b * dual.student.values[i];
}

// ---------------------------------------------------------------------------
// Sliding-window inference

// Window start positions along one axis; the last window is clamped to the border.
inline std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t patch, std::int64_t stride) {
    std::vector<std::int64_t> starts;
    for (std::int64_t s = 0;; s += stride) {
        if (s + patch >= size) {
            starts.push_back(size - patch);
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

// Generic form: predict_windows maps a batch of patches [1, k * patch voxels]
// to finest-level probabilities [C, k * patch voxels]. Probabilities of
// overlapping windows are averaged, then argmaxed.
template <class T>
Prediction<T> sliding_window_predict(
    const std::function<Matrix<T>(const nn::Act<T>&)>& predict_windows, const NdArray<float>& image,
    const Shape3& shape, const Shape3& patch, const Shape3& stride, int num_classes, std::int64_t windows_per_call = 8) {
    if (patch.h > shape.h || patch.w > shape.w || patch.d > shape.d)
        throw ValidationError("patch " + patch.str() + " larger than image " + shape.str());
    if (stride.h < 1 || stride.w < 1 || stride.d < 1 || stride.h > patch.h || stride.w > patch.w || stride.d > patch.d)
        throw ValidationError("stride must satisfy 1 <= stride <= patch per axis");

    std::vector<Shape3> corners;
    for (auto y : window_starts(shape.h, patch.h, stride.h))
        for (auto x : window_starts(shape.w, patch.w, stride.w))
            for (auto z : window_starts(shape.d, patch.d, stride.d)) corners.push_back({y, x, z});

    Matrix<T> acc = Matrix<T>::Zero(num_classes, shape.size());
    std::vector<T> count(static_cast<std::size_t>(shape.size()), T(0));
    const auto P = patch.size();
    for (std::size_t first = 0; first < corners.size(); first += static_cast<std::size_t>(windows_per_call)) {
        const auto k = std::min<std::size_t>(static_cast<std::size_t>(windows_per_call), corners.size() - first);
        nn::Act<T> in{Matrix<T>(1, static_cast<std::int64_t>(k) * P), static_cast<std::int64_t>(k), patch};
        for (std::size_t i = 0; i < k; ++i) {
            const auto& at = corners[first + i];
            for (std::int64_t y = 0; y < patch.h; ++y)
                for (std::int64_t x = 0; x < patch.w; ++x)
                    for (std::int64_t z = 0; z < patch.d; ++z)
                        in.x(0, static_cast<std::int64_t>(i) * P + patch.index(y, x, z)) = static_cast<T>(
                            image.data[static_cast<std::size_t>(shape.index(at.h + y, at.w + x, at.d + z))]);
        }
        const Matrix<T> probs = predict_windows(in);
        for (std::size_t i = 0; i < k; ++i) {
            const auto& at = corners[first + i];
            for (std::int64_t y = 0; y < patch.h; ++y)
                for (std::int64_t x = 0; x < patch.w; ++x)
                    for (std::int64_t z = 0; z < patch.d; ++z) {
                        const auto dst = shape.index(at.h + y, at.w + x, at.d + z);
                        acc.col(dst) += probs.col(static_cast<std::int64_t>(i) * P + patch.index(y, x, z));
                        count[static_cast<std::size_t>(dst)] += T(1);
                    }
        }
    }
    for (std::int64_t v = 0; v < shape.size(); ++v) acc.col(v) /= count[static_cast<std::size_t>(v)];

    Prediction<T> out;
    out.shapes = {shape};
    out.hard = argmax_columns(acc);
    out.probs = {std::move(acc)};
    return out;
}

template <class T>
Prediction<T> sliding_window_predict(const SegNet<T>& net, const ParamTree<T>& params, const NdArray<float>& image,
                                     const Shape3& patch, const Shape3& stride) {
    const Shape3 shape = image.shape.size() == 2
                             ? Shape3{static_cast<std::int64_t>(image.shape[0]), static_cast<std::int64_t>(image.shape[1]), 1}
                             : Shape3{static_cast<std::int64_t>(image.shape[0]), static_cast<std::int64_t>(image.shape[1]),
                                      static_cast<std::int64_t>(image.shape[2])};
    return sliding_window_predict<T>(
        [&](const nn::Act<T>& in) { return net.forward(params, in).probs.back(); }, image, shape, patch, stride,
        net.config().num_classes);
}

// ---------------------------------------------------------------------------
// Checkpoints: bundle of "student/<name>" and "teacher/<name>" tensors with
// JSON metadata (network config, iteration, thresholds, config hash).

struct CheckpointMeta {
    NetConfig net;
    std::int64_t iteration = 0;
    std::vector<double> thresholds;
    std::string config_hash;
    double ema_alpha = 0.99;
    nlohmann::json extra = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const std::filesystem::path& file, const DualModel<T>& dual, const CheckpointMeta& meta) {
    TensorBundle<T> b;
    nlohmann::json j{{"format", "ducisc-checkpoint"},
                     {"net", meta.net},
                     {"iteration", meta.iteration},
                     {"thresholds", meta.thresholds},
                     {"config_hash", meta.config_hash},
                     {"ema_alpha", meta.ema_alpha},
                     {"extra", meta.extra}};
    b.meta = j.dump();
    auto put = [&](const std::string& prefix, const ParamTree<T>& tree) {
        for (std::size_t i = 0; i < tree.size(); ++i) {
            const auto& m = tree.values[i];
            NdArray<T> a{{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                         std::vector<T>(m.data(), m.data() + m.size())};
            b.entries.emplace_back(prefix + tree.names[i], std::move(a));
        }
    };
    put("student/", dual.student);
    put("teacher/", dual.teacher);
    save_bundle(file, b);
}

template <class T>
DualModel<T> load_checkpoint(const std::filesystem::path& file, CheckpointMeta* meta_out = nullptr) {
    const auto b = load_bundle<T>(file);
    CheckpointMeta meta;
    try {
        const auto j = nlohmann::json::parse(b.meta);
        meta.net = j.at("net").template get<NetConfig>();
        meta.iteration = j.at("iteration");
        meta.thresholds = j.at("thresholds").template get<std::vector<double>>();
        meta.config_hash = j.value("config_hash", "");
        meta.ema_alpha = j.value("ema_alpha", 0.99);
        meta.extra = j.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint metadata in " + file.string() + ": " + e.what());
    }
    SegNet<T> net(meta.net);
    Rng rng(0);
    DualModel<T> d{meta.net, net.init(rng), {}, meta.ema_alpha};
    d.teacher = d.student;
    auto fill = [&](const std::string& prefix, ParamTree<T>& tree) {
        for (std::size_t i = 0; i < tree.size(); ++i) {
            const auto* a = b.find(prefix + tree.names[i]);
            if (!a) throw FormatError("checkpoint lacks tensor " + prefix + tree.names[i]);
            auto& m = tree.values[i];
            if (a->shape.size() != 2 || static_cast<std::int64_t>(a->shape[0]) != m.rows() ||
                static_cast<std::int64_t>(a->shape[1]) != m.cols())
                throw FormatError("checkpoint tensor " + prefix + tree.names[i] + " has the wrong shape");
            std::copy(a->data.begin(), a->data.end(), m.data());
        }
    };
    fill("student/", d.student);
    fill("teacher/", d.teacher);
    if (meta_out) *meta_out = meta;
    return d;
}

}  // namespace ducisc
