#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ducisc/datasets.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/fusion.hpp"
#include "ducisc/losses.hpp"
#include "ducisc/metrics.hpp"
#include "ducisc/prototypes.hpp"
#include "ducisc/pseudo.hpp"
#include "ducisc/segnet.hpp"

namespace ducisc {

struct TrainConfig {
    // Loss weights: proto_ulb, proto_mix, cs_ulb, cs_mix.
    double lambda1 = 0.1;
    double lambda2 = 0.1;
    double lambda3 = 0.3;
    double lambda4 = 0.1;

    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::int64_t max_iters = 15000;
    std::string lr_schedule = "poly";  // poly | const

    double ema_alpha = 0.99;
    double beta = 0.99;

    int b_l = 2;
    int b_u = 2;
    Shape3 patch_shape{32, 32, 1};
    std::uint64_t seed = 0;

    std::string confidence_kind = "self_aware";   // self_aware | none | fixed(p) | entropy(tau)
    std::string mixer_kind = "mixup";
    std::string consistency_kind = "prototype";   // prototype | feature
    bool include_labeled_in_cs = false;
    bool normalize_proto_by_scales = false;
    // Evaluate loss terms even when their weight is zero.
    bool compute_all_terms = false;

    int levels = 4;
    int base_width = 16;
    bool instance_norm = true;

    std::int64_t checkpoint_every = 0;  // 0: final checkpoint only

    void validate() const {
        for (double l : {lambda1, lambda2, lambda3, lambda4})
            if (!(l >= 0.0)) throw ConfigError("loss weights must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
        if (lr_schedule != "poly" && lr_schedule != "const") throw ConfigError("lr_schedule must be poly or const");
        if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) throw ConfigError("ema_alpha must lie in [0, 1]");
        if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("beta must lie in (0, 1)");
        if (b_l < 1 || b_u < 1) throw ConfigError("B_l and B_u must be >= 1");
        if (consistency_kind != "prototype" && consistency_kind != "feature")
            throw ConfigError("consistency_kind must be prototype or feature");
        ConfidenceKind::parse(confidence_kind);
        if (mixer_kind != "mixup") throw ConfigError("unknown mixer kind: " + mixer_kind);
        if (levels < 1 || base_width < 1) throw ConfigError("levels and base_width must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    }

    bool uses_unlabeled() const {
        return compute_all_terms || lambda1 > 0 || lambda2 > 0 || lambda3 > 0 || lambda4 > 0;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    std::vector<std::int64_t> patch{c.patch_shape.h, c.patch_shape.w};
    if (c.patch_shape.d > 1) patch.push_back(c.patch_shape.d);
    j = {{"lambda1", c.lambda1},
         {"lambda2", c.lambda2},
         {"lambda3", c.lambda3},
         {"lambda4", c.lambda4},
         {"lr", c.lr},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"max_iters", c.max_iters},
         {"lr_schedule", c.lr_schedule},
         {"ema_alpha", c.ema_alpha},
         {"beta", c.beta},
         {"B_l", c.b_l},
         {"B_u", c.b_u},
         {"patch_shape", patch},
         {"seed", c.seed},
         {"confidence_kind", c.confidence_kind},
         {"mixer_kind", c.mixer_kind},
         {"consistency_kind", c.consistency_kind},
         {"include_labeled_in_cs", c.include_labeled_in_cs},
         {"normalize_proto_by_scales", c.normalize_proto_by_scales},
         {"compute_all_terms", c.compute_all_terms},
         {"levels", c.levels},
         {"base_width", c.base_width},
         {"instance_norm", c.instance_norm},
         {"checkpoint_every", c.checkpoint_every}};
}

inline Shape3 shape_from_list(const std::vector<std::int64_t>& v) {
    if (v.size() == 2) return {v[0], v[1], 1};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw ConfigError("shape must have 2 or 3 entries");
}

// Overlays the keys present in j onto c. Unknown keys are rejected.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
    static const std::set<std::string> known{
        "lambda1", "lambda2", "lambda3", "lambda4", "lr", "momentum", "weight_decay", "max_iters", "lr_schedule",
        "ema_alpha", "beta", "B_l", "B_u", "patch_shape", "seed", "confidence_kind", "mixer_kind", "consistency_kind",
        "include_labeled_in_cs", "normalize_proto_by_scales", "compute_all_terms", "levels", "base_width",
        "instance_norm", "checkpoint_every"};
    if (!j.is_object()) throw ConfigError("config must be a key/value object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("unknown config key: " + k);
    try {
        auto get = [&](const char* k, auto& field) {
            if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
        };
        get("lambda1", c.lambda1);
        get("lambda2", c.lambda2);
        get("lambda3", c.lambda3);
        get("lambda4", c.lambda4);
        get("lr", c.lr);
        get("momentum", c.momentum);
        get("weight_decay", c.weight_decay);
        get("max_iters", c.max_iters);
        get("lr_schedule", c.lr_schedule);
        get("ema_alpha", c.ema_alpha);
        get("beta", c.beta);
        get("B_l", c.b_l);
        get("B_u", c.b_u);
        if (j.contains("patch_shape")) c.patch_shape = shape_from_list(j.at("patch_shape").get<std::vector<std::int64_t>>());
        get("seed", c.seed);
        get("confidence_kind", c.confidence_kind);
        get("mixer_kind", c.mixer_kind);
        get("consistency_kind", c.consistency_kind);
        get("include_labeled_in_cs", c.include_labeled_in_cs);
        get("normalize_proto_by_scales", c.normalize_proto_by_scales);
        get("compute_all_terms", c.compute_all_terms);
        get("levels", c.levels);
        get("base_width", c.base_width);
        get("instance_norm", c.instance_norm);
        get("checkpoint_every", c.checkpoint_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
}

inline TrainConfig load_train_config(const std::filesystem::path& file) {
    if (!std::filesystem::exists(file)) throw MissingFileError("missing config: " + file.string());
    std::ifstream is(file);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config " + file.string() + ": " + e.what());
    }
    TrainConfig c;
    apply_json(c, j);
    return c;
}

// FNV-1a 64 over arbitrary text, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string config_hash(const TrainConfig& c) { return fnv1a_hex(nlohmann::json(c).dump()); }

inline double learning_rate(const TrainConfig& c, std::int64_t iter) {
    if (c.lr_schedule == "const" || c.max_iters == 0) return c.lr;
    return c.lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(c.max_iters), 0.9);
}

inline NetConfig net_config(const TrainConfig& c, int dims, int num_classes) {
    return NetConfig{dims, 1, num_classes, c.levels, c.base_width, c.instance_norm};
}

// ---------------------------------------------------------------------------

struct StepRecord {
    std::int64_t iter = 0;
    double lr = 0.0;
    double sup = 0.0;
    double proto_ulb = 0.0;
    double proto_mix = 0.0;
    double cs_ulb = 0.0;
    double cs_mix = 0.0;
    double total = 0.0;
    double coverage = 0.0;  // mean confidence-mask coverage over unlabeled samples
    std::vector<double> thresholds;  // after this step's update
};

struct EvalRecord {
    std::int64_t iter = 0;
    double dice = 0.0, jaccard = 0.0, hd95 = 0.0, asd = 0.0;
};

// Append-only training log.
struct RunLog {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    nlohmann::json config;

    void append(StepRecord r) {
        if (!steps.empty() && r.iter <= steps.back().iter) throw InternalError("run log iterations must increase");
        steps.push_back(std::move(r));
    }

    void write_csv(const std::filesystem::path& file) const {
        std::ofstream os(file, std::ios::trunc);
        if (!os) throw IoError("cannot write " + file.string());
        os.precision(17);
        const auto C = steps.empty() ? 0 : steps.front().thresholds.size();
        os << "iter,lr,total,sup,proto_ulb,proto_mix,cs_ulb,cs_mix,coverage";
        for (std::size_t c = 0; c < C; ++c) os << ",T" << c;
        os << '\n';
        for (const auto& s : steps) {
            os << s.iter << ',' << s.lr << ',' << s.total << ',' << s.sup << ',' << s.proto_ulb << ',' << s.proto_mix << ','
               << s.cs_ulb << ',' << s.cs_mix << ',' << s.coverage;
            for (double t : s.thresholds) os << ',' << t;
            os << '\n';
        }
    }

    // CSV: t, T^0 .. T^{C-1}
    void write_thresholds(const std::filesystem::path& file) const {
        std::ofstream os(file, std::ios::trunc);
        if (!os) throw IoError("cannot write " + file.string());
        os.precision(17);
        const auto C = steps.empty() ? 0 : steps.front().thresholds.size();
        os << 't';
        for (std::size_t c = 0; c < C; ++c) os << ",T" << c;
        os << '\n';
        for (const auto& s : steps) {
            os << s.iter + 1;
            for (double t : s.thresholds) os << ',' << t;
            os << '\n';
        }
    }
};

template <class T>
struct TrainState {
    DualModel<T> dual;
    ThresholdState thresholds;
    ParamTree<T> velocity;
    bool has_velocity = false;
    std::int64_t iteration = 0;
    Rng data_rng;
    Rng mix_rng;
};

// Parameter initialisation, batch sampling and mixing ratios use separate
// streams derived from the seed so that toggling a loss term never shifts
// another stream.
template <class T>
TrainState<T> make_train_state(const TrainConfig& cfg, const NetConfig& net) {
    Rng master(cfg.seed);
    Rng init_rng = master.fork();
    TrainState<T> st{DualModel<T>::create(net, init_rng, cfg.ema_alpha),
                     ThresholdState::initial(net.num_classes, cfg.beta),
                     {},
                     false,
                     0,
                     master.fork(),
                     master.fork()};
    return st;
}

namespace detail {

template <class T>
Matrix<T> row_image(const NdArray<float>& a) {
    Matrix<T> m(1, static_cast<std::int64_t>(a.data.size()));
    for (std::size_t v = 0; v < a.data.size(); ++v) m(0, static_cast<std::int64_t>(v)) = static_cast<T>(a.data[v]);
    return m;
}

template <class T>
void add_cols(Matrix<T>& dst, std::int64_t n, const Matrix<T>& g, T scale) {
    dst.middleCols(n * g.cols(), g.cols()) += scale * g;
}

template <class T>
void sgd_step(TrainState<T>& st, const ParamTree<T>& grad, const TrainConfig& cfg, double lr) {
    auto& p = st.dual.student;
    if (!st.has_velocity) st.velocity = p.zeros_like();
    const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.size(); ++i) {
        Matrix<T> d = grad.values[i] + wd * p.values[i];
        if (st.has_velocity) st.velocity.values[i] = mu * st.velocity.values[i] + d;
        else st.velocity.values[i] = d;
        p.values[i] -= eta * st.velocity.values[i];
    }
    st.has_velocity = true;
}

}  // namespace detail

template <class T>
struct Objective {
    StepRecord record;  // loss terms; lr and thresholds are filled in by train_step
    ParamTree<T> grad;  // d total / d student parameters
    std::optional<ClassAverage> p_avg;
};

// Evaluates L = L_sup + l1 L_proto^ulb + l2 L_proto^mix + l3 L_cs^ulb + l4 L_cs^mix
// for one batch at the current student/teacher, with its gradient. draws holds
// one mixing ratio per pairing.
template <class T>
Objective<T> evaluate_objective(const TrainState<T>& st, const Batch& batch, const TrainConfig& cfg, const Mixer<T>& mixer,
                                const std::vector<double>& draws, bool with_grad = true) {
    const SegNet<T> net(st.dual.net);
    const int C = st.dual.net.num_classes;
    if (batch.labeled.empty() || batch.unlabeled.empty())
        throw ValidationError("batch needs at least one labeled and one unlabeled sample");
    const Shape3 shape = spatial_shape(batch.labeled.front().image);
    const auto BL = static_cast<std::int64_t>(batch.labeled.size());
    const auto BU = static_cast<std::int64_t>(batch.unlabeled.size());
    const auto NP = static_cast<std::int64_t>(batch.pairing.size());
    if (static_cast<std::int64_t>(draws.size()) != NP) throw ValidationError("need one mixing draw per pairing");
    const bool all = cfg.compute_all_terms;
    const bool feature_mode = cfg.consistency_kind == "feature";
    const bool want_proto_ulb = all || cfg.lambda1 > 0, want_proto_mix = all || cfg.lambda2 > 0;
    const bool want_cs_ulb = all || cfg.lambda3 > 0, want_cs_mix = all || cfg.lambda4 > 0;
    const bool use_unlabeled = cfg.uses_unlabeled();
    const bool use_mixed = want_proto_mix || want_cs_mix;
    const auto conf = ConfidenceKind::parse(cfg.confidence_kind);

    std::vector<Matrix<T>> x_i, y_i, x_j;
    for (const auto& s : batch.labeled) {
        if (!s.label) throw ValidationError("labeled sample " + s.id + " has no label");
        if (spatial_shape(s.image) != shape) throw ShapeMismatchError("batch samples differ in shape");
        x_i.push_back(detail::row_image<T>(s.image));
        y_i.push_back(one_hot<T>(class_map(*s.label), C));
    }
    for (const auto& s : batch.unlabeled) {
        if (spatial_shape(s.image) != shape) throw ShapeMismatchError("batch samples differ in shape");
        x_j.push_back(detail::row_image<T>(s.image));
    }
    const auto P = shape.size();

    auto stack = [&](const std::vector<const Matrix<T>*>& rows) {
        nn::Act<T> a{Matrix<T>(1, static_cast<std::int64_t>(rows.size()) * P), static_cast<std::int64_t>(rows.size()), shape};
        for (std::size_t i = 0; i < rows.size(); ++i) a.x.middleCols(static_cast<std::int64_t>(i) * P, P) = *rows[i];
        return a;
    };

    // (a) teacher pseudo labels and confidence masks for the unlabeled images.
    std::vector<Matrix<T>> ybar_j, tprob_j, ybar_i;
    std::vector<ConfidenceMask> mask_j, mask_i;
    NetOutput<T> teacher_out;
    auto masks_for = [&](const Matrix<T>& probs, const Matrix<T>& ybar) {
        return conf.type == ConfidenceKind::Type::SelfAware ? confidence_mask(probs, ybar, st.thresholds.values)
                                                            : baseline_confidence(conf, probs);
    };
    if (use_unlabeled) {
        std::vector<const Matrix<T>*> rows;
        for (const auto& x : x_j) rows.push_back(&x);
        teacher_out = net.forward(st.dual.teacher, stack(rows));
        for (std::int64_t b = 0; b < BU; ++b) {
            const auto pred = teacher_out.prediction(b);
            tprob_j.push_back(pred.finest());
            ybar_j.push_back(one_hot<T>(pred.hard, C));
            mask_j.push_back(masks_for(tprob_j.back(), ybar_j.back()));
        }
        if (cfg.include_labeled_in_cs && want_cs_ulb) {
            std::vector<const Matrix<T>*> lrows;
            for (const auto& x : x_i) lrows.push_back(&x);
            const auto tl = net.forward(st.dual.teacher, stack(lrows));
            for (std::int64_t a = 0; a < BL; ++a) {
                const auto pred = tl.prediction(a);
                ybar_i.push_back(one_hot<T>(pred.hard, C));
                mask_i.push_back(masks_for(pred.finest(), ybar_i.back()));
            }
        }
    }

    // (b) Mixup per pairing.
    std::vector<FusedSample<T>> fused;
    if (use_mixed)
        for (std::int64_t k = 0; k < NP; ++k) {
            const auto [a, b] = batch.pairing[static_cast<std::size_t>(k)];
            fused.push_back(mixer.mix(x_i[a], y_i[a], x_j[b], ybar_j[b], draws[static_cast<std::size_t>(k)]));
            fused.back().labeled_id = batch.labeled[a].id;
            fused.back().unlabeled_id = batch.unlabeled[b].id;
        }

    // (c) one student forward over [labeled | unlabeled | mixed].
    std::vector<const Matrix<T>*> rows;
    for (const auto& x : x_i) rows.push_back(&x);
    const std::int64_t off_u = BL;
    if (use_unlabeled)
        for (const auto& x : x_j) rows.push_back(&x);
    const std::int64_t off_m = static_cast<std::int64_t>(rows.size());
    for (const auto& f : fused) rows.push_back(&f.image);
    ForwardCache<T> cache;
    const auto out = net.forward(st.dual.student, stack(rows), &cache);

    const auto S = out.shapes.size();
    std::vector<Matrix<T>> d_logits, d_feat;
    for (std::size_t s = 0; s < S; ++s) {
        d_logits.push_back(Matrix<T>::Zero(out.logits[s].rows(), out.logits[s].cols()));
        d_feat.push_back(Matrix<T>::Zero(out.features[s].rows(), out.features[s].cols()));
    }
    auto add_logit_grads = [&](std::int64_t n, const std::vector<Matrix<T>>& g, T scale) {
        for (std::size_t s = 0; s < S; ++s) detail::add_cols(d_logits[s], n, g[s], scale);
    };
    auto add_feat_grads = [&](std::int64_t n, const std::vector<Matrix<T>>& g, T scale) {
        for (std::size_t s = 0; s < S; ++s) detail::add_cols(d_feat[s], n, g[s], scale);
    };

    // (d) loss terms.
    StepRecord rec;
    rec.iter = st.iteration;
    for (std::int64_t a = 0; a < BL; ++a) {
        const auto l = deep_dice_ce(out.sample_logits(a), out.shapes, y_i[static_cast<std::size_t>(a)], TargetKind::Hard, nullptr);
        rec.sup += static_cast<double>(l.terms.total()) / static_cast<double>(BL);
        add_logit_grads(a, l.d_logits, T(1) / static_cast<T>(BL));
    }

    if (use_unlabeled && want_cs_ulb) {
        const std::int64_t count = BU + (cfg.include_labeled_in_cs ? BL : 0);
        const T w = static_cast<T>(cfg.lambda3) / static_cast<T>(count);
        for (std::int64_t b = 0; b < BU; ++b) {
            const auto l = masked_consistency_loss(out.sample_logits(off_u + b), out.shapes, ybar_j[static_cast<std::size_t>(b)],
                                                   TargetKind::Hard, mask_j[static_cast<std::size_t>(b)]);
            rec.cs_ulb += static_cast<double>(l.terms.total()) / static_cast<double>(count);
            add_logit_grads(off_u + b, l.d_logits, w);
        }
        for (std::size_t a = 0; a < ybar_i.size(); ++a) {
            const auto l = masked_consistency_loss(out.sample_logits(static_cast<std::int64_t>(a)), out.shapes, ybar_i[a],
                                                   TargetKind::Hard, mask_i[a]);
            rec.cs_ulb += static_cast<double>(l.terms.total()) / static_cast<double>(count);
            add_logit_grads(static_cast<std::int64_t>(a), l.d_logits, w);
        }
    }

    if (want_cs_mix) {
        const T w = static_cast<T>(cfg.lambda4) / static_cast<T>(NP);
        for (std::int64_t k = 0; k < NP; ++k) {
            const auto b = batch.pairing[static_cast<std::size_t>(k)].second;
            // The mixed image reuses its unlabeled source's mask.
            const ConfidenceMask& m = mask_j[b];
            const auto l = masked_consistency_loss(out.sample_logits(off_m + k), out.shapes, fused[static_cast<std::size_t>(k)].soft_label,
                                                   TargetKind::Soft, m);
            rec.cs_mix += static_cast<double>(l.terms.total()) / static_cast<double>(NP);
            add_logit_grads(off_m + k, l.d_logits, w);
        }
    }

    if (want_proto_ulb) {
        if (feature_mode) {
            const T w = static_cast<T>(cfg.lambda1) / static_cast<T>(BU);
            for (std::int64_t b = 0; b < BU; ++b) {
                const auto r = feature_consistency(teacher_out.pyramid(b), out.pyramid(off_u + b));
                rec.proto_ulb += static_cast<double>(r.loss) / static_cast<double>(BU);
                add_feat_grads(off_u + b, r.d_student, w);
            }
        } else {
            const T w = static_cast<T>(cfg.lambda1) / static_cast<T>(NP);
            for (std::int64_t k = 0; k < NP; ++k) {
                const auto [a, b] = batch.pairing[static_cast<std::size_t>(k)];
                const auto r = cross_image_alignment(out.pyramid(static_cast<std::int64_t>(a)), y_i[a], TargetKind::Hard,
                                                     out.pyramid(off_u + static_cast<std::int64_t>(b)), ybar_j[b], TargetKind::Hard,
                                                     cfg.normalize_proto_by_scales);
                rec.proto_ulb += static_cast<double>(r.loss) / static_cast<double>(NP);
                add_feat_grads(static_cast<std::int64_t>(a), r.d_features_a, w);
                add_feat_grads(off_u + static_cast<std::int64_t>(b), r.d_features_b, w);
            }
        }
    }

    if (want_proto_mix) {
        const T w = static_cast<T>(cfg.lambda2) / static_cast<T>(NP);
        if (feature_mode) {
            std::vector<const Matrix<T>*> mrows;
            for (const auto& f : fused) mrows.push_back(&f.image);
            const auto tm = net.forward(st.dual.teacher, stack(mrows));
            for (std::int64_t k = 0; k < NP; ++k) {
                const auto r = feature_consistency(tm.pyramid(k), out.pyramid(off_m + k));
                rec.proto_mix += static_cast<double>(r.loss) / static_cast<double>(NP);
                add_feat_grads(off_m + k, r.d_student, w);
            }
        } else {
            for (std::int64_t k = 0; k < NP; ++k) {
                const auto a = batch.pairing[static_cast<std::size_t>(k)].first;
                const auto r = cross_image_alignment(out.pyramid(static_cast<std::int64_t>(a)), y_i[a], TargetKind::Hard,
                                                     out.pyramid(off_m + k), fused[static_cast<std::size_t>(k)].soft_label,
                                                     TargetKind::Soft, cfg.normalize_proto_by_scales);
                rec.proto_mix += static_cast<double>(r.loss) / static_cast<double>(NP);
                add_feat_grads(static_cast<std::int64_t>(a), r.d_features_a, w);
                add_feat_grads(off_m + k, r.d_features_b, w);
            }
        }
    }

    rec.total = rec.sup + cfg.lambda1 * rec.proto_ulb + cfg.lambda2 * rec.proto_mix + cfg.lambda3 * rec.cs_ulb +
                cfg.lambda4 * rec.cs_mix;
    if (!std::isfinite(rec.total)) {
        std::ostringstream msg;
        msg.precision(6);
        msg << "non-finite loss at iteration " << rec.iter << ": sup=" << rec.sup << " proto_ulb=" << rec.proto_ulb
            << " proto_mix=" << rec.proto_mix << " cs_ulb=" << rec.cs_ulb << " cs_mix=" << rec.cs_mix;
        throw NonFiniteLossError(msg.str());
    }

    Objective<T> obj;
    if (with_grad) obj.grad = net.backward(st.dual.student, cache, out, d_feat, d_logits);
    if (use_unlabeled) {
        std::vector<ClassAverage> avgs;
        for (std::int64_t b = 0; b < BU; ++b)
            avgs.push_back(average_class_probability<T>(sample_block(out.probs.back(), off_u + b, P), ybar_j[static_cast<std::size_t>(b)]));
        obj.p_avg = batch_average(avgs);
        for (const auto& m : mask_j) rec.coverage += m.coverage / static_cast<double>(BU);
    }
    obj.record = std::move(rec);
    return obj;
}

// One optimisation step: teacher pseudo labels, Mixup, student forward, the
// five loss terms, SGD on the student, EMA teacher update, threshold update.
template <class T>
StepRecord train_step(TrainState<T>& st, const Batch& batch, const TrainConfig& cfg, const Mixer<T>& mixer) {
    // Drawn unconditionally to keep the stream aligned across loss toggles.
    std::vector<double> draws;
    for (std::size_t k = 0; k < batch.pairing.size(); ++k) draws.push_back(mixer.draw(st.mix_rng));

    auto obj = evaluate_objective(st, batch, cfg, mixer, draws);
    StepRecord rec = std::move(obj.record);
    rec.lr = learning_rate(cfg, st.iteration);
    detail::sgd_step(st, obj.grad, cfg, rec.lr);
    ema_update(st.dual, st.dual.ema_alpha);
    // Thresholds move from the batch-averaged P_avg of the student.
    if (obj.p_avg) st.thresholds = update_thresholds(st.thresholds, *obj.p_avg);
    rec.thresholds = st.thresholds.values;
    ++st.iteration;
    return rec;
}

// ---------------------------------------------------------------------------

template <class T>
struct TrainResult {
    TrainState<T> state;
    RunLog log;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
};

template <class T>
CheckpointMeta checkpoint_meta(const TrainState<T>& st, const TrainConfig& cfg) {
    CheckpointMeta meta;
    meta.net = st.dual.net;
    meta.iteration = st.iteration;
    meta.thresholds = st.thresholds.values;
    meta.config_hash = config_hash(cfg);
    meta.ema_alpha = st.dual.ema_alpha;
    meta.extra = {{"config", cfg}, {"threshold_t", st.thresholds.t}};
    return meta;
}

inline void validate_run(const TrainConfig& cfg, const Corpus& corpus) {
    cfg.validate();
    const auto& m = corpus.manifest();
    if (m.labeled.empty() || m.unlabeled.empty()) throw ValidationError("corpus needs nonempty labeled and unlabeled pools");
    if (m.dims == 2 && cfg.patch_shape.d != 1) throw ConfigError("2D corpus needs a 2D patch shape");
    if (!divisible(cfg.patch_shape, pool_factor(m.dims, cfg.levels - 1)))
        throw ConfigError("patch shape " + cfg.patch_shape.str() + " not divisible by 2^(levels-1)");
    for (const auto& id : m.train_ids()) {
        const Shape3 s = spatial_shape(corpus.image(id));
        if (cfg.patch_shape.h > s.h || cfg.patch_shape.w > s.w || cfg.patch_shape.d > s.d)
            throw ConfigError("patch shape larger than image " + id);
    }
}

// Runs max_iters steps. When out_dir is non-empty, writes the resolved config,
// run log, thresholds log, summary, manifest hash and checkpoints there.
template <class T>
TrainResult<T> train(const TrainConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir = {},
                     const TrainHooks& hooks = {}) {
    validate_run(cfg, corpus);
    const auto& m = corpus.manifest();
    auto mixer = make_mixer<T>(cfg.mixer_kind);
    TrainResult<T> r{make_train_state<T>(cfg, net_config(cfg, m.dims, m.num_classes)), {}};
    r.log.config = cfg;

    const bool write = !out_dir.empty();
    if (write) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(out_dir / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
        std::ostringstream man;
        man << manifest_to_json(m).dump();
        std::ofstream(out_dir / "manifest_hash.txt") << fnv1a_hex(man.str()) << '\n';
    }

    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t it = 0; it < cfg.max_iters; ++it) {
        const auto batch = sample_batch(corpus, r.state.data_rng, cfg.patch_shape, static_cast<std::size_t>(cfg.b_l),
                                        static_cast<std::size_t>(cfg.b_u));
        auto rec = train_step(r.state, batch, cfg, *mixer);
        if (hooks.on_step) hooks.on_step(rec);
        r.log.append(std::move(rec));
        if (write && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(out_dir / ("iter_" + std::to_string(it + 1) + ".ckpt"), r.state.dual, checkpoint_meta(r.state, cfg));
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (write) {
        save_checkpoint(out_dir / "last.ckpt", r.state.dual, checkpoint_meta(r.state, cfg));
        r.log.write_csv(out_dir / "runlog.csv");
        r.log.write_thresholds(out_dir / "thresholds.csv");
        nlohmann::json summary{{"iterations", r.state.iteration},
                               {"seconds", seconds},
                               {"config_hash", config_hash(cfg)},
                               {"thresholds", r.state.thresholds.values},
                               {"final_total_loss", r.log.steps.empty() ? 0.0 : r.log.steps.back().total}};
        std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';
    }
    return r;
}

// ---------------------------------------------------------------------------
// Loss-term ablations

struct AblationToggle {
    bool cs_ulb = true;
    bool cs_mix = true;
    bool proto_ulb = true;
    bool proto_mix = true;

    std::string name() const {
        std::string n;
        auto add = [&](bool on, const char* s) {
            if (on) n += (n.empty() ? "" : "+") + std::string(s);
        };
        add(cs_ulb, "cs_ulb");
        add(cs_mix, "cs_mix");
        add(proto_ulb, "proto_ulb");
        add(proto_mix, "proto_mix");
        return n.empty() ? "sup_only" : n;
    }

    TrainConfig apply(TrainConfig c) const {
        if (!proto_ulb) c.lambda1 = 0;
        if (!proto_mix) c.lambda2 = 0;
        if (!cs_ulb) c.lambda3 = 0;
        if (!cs_mix) c.lambda4 = 0;
        return c;
    }
};

struct AblationRow {
    AblationToggle toggle;
    std::vector<std::uint64_t> seeds;
    std::vector<double> seed_dice;
    std::vector<double> seed_q;
    double dice = 0.0, jaccard = 0.0, hd95 = 0.0, asd = 0.0, q = 0.0;
};

struct AblationOptions {
    std::vector<std::uint64_t> seeds{0};
    Shape3 eval_patch{32, 32, 1};
    Shape3 eval_stride{16, 16, 1};
    std::function<void(const std::string&)> progress;
};

// Trains every grid configuration on the same seeds and evaluates it on the
// same test split.
template <class T>
std::vector<AblationRow> run_ablation_suite(const TrainConfig& base, const Corpus& corpus,
                                            const std::vector<AblationToggle>& grid, const AblationOptions& opt) {
    if (grid.empty()) throw ValidationError("ablation grid is empty");
    if (opt.seeds.empty()) throw ValidationError("ablation needs at least one seed");
    std::vector<AblationRow> rows;
    for (const auto& g : grid) {
        AblationRow row;
        row.toggle = g;
        row.seeds = opt.seeds;
        double hd = 0, asd = 0, jac = 0;
        for (auto seed : opt.seeds) {
            TrainConfig cfg = g.apply(base);
            cfg.seed = seed;
            const auto res = train<T>(cfg, corpus);
            const SegNet<T> net(res.state.dual.net);
            const auto rep = evaluate(net, res.state.dual.student, corpus, opt.eval_patch, opt.eval_stride);
            const auto match = corpus_matching(net, res.state.dual.student, corpus);
            row.seed_dice.push_back(rep.mean.dice);
            row.seed_q.push_back(match.q);
            jac += rep.mean.jaccard;
            hd += rep.mean.hd95;
            asd += rep.mean.asd;
            if (opt.progress)
                opt.progress(g.name() + " seed " + std::to_string(seed) + ": dice " + std::to_string(rep.mean.dice) +
                             " Q " + std::to_string(match.q));
        }
        const double n = static_cast<double>(opt.seeds.size());
        for (double d : row.seed_dice) row.dice += d / n;
        for (double q : row.seed_q) row.q += q / n;
        row.jaccard = jac / n;
        row.hd95 = hd / n;
        row.asd = asd / n;
        rows.push_back(std::move(row));
    }
    return rows;
}

// Table layout: one row per configuration, check marks for active terms.
inline void write_ablation_csv(const std::filesystem::path& file, const std::vector<AblationRow>& rows) {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + file.string());
    os.precision(8);
    os << "config,cs_ulb,cs_mix,proto_ulb,proto_mix,dice,jaccard,hd95,asd,Q,seeds\n";
    for (const auto& r : rows) {
        os << r.toggle.name() << ',' << r.toggle.cs_ulb << ',' << r.toggle.cs_mix << ',' << r.toggle.proto_ulb << ','
           << r.toggle.proto_mix << ',' << r.dice << ',' << r.jaccard << ',' << r.hd95 << ',' << r.asd << ',' << r.q << ',';
        for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? ";" : "") << r.seeds[i];
        os << '\n';
    }
}

// The layout's default grid: supervised only, then terms added one at a time.
inline std::vector<AblationToggle> default_ablation_grid() {
    return {{false, false, false, false}, {true, false, false, false}, {true, true, false, false},
            {true, false, true, false},   {true, true, true, false},   {true, true, true, true}};
}

}  // namespace ducisc
