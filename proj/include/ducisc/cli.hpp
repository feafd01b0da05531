#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ducisc/array_io.hpp"
#include "ducisc/datasets.hpp"
#include "ducisc/errors.hpp"
#include "ducisc/metrics.hpp"
#include "ducisc/segnet.hpp"
#include "ducisc/trainer.hpp"

namespace ducisc::cli {

namespace fs = std::filesystem;

inline bool deterministic_mode() {
    const char* v = std::getenv("DUCISC_DETERMINISTIC");
    return v && std::string(v) == "1";
}

// "64x64" or "64x64x32"
inline Shape3 parse_shape(const std::string& s) {
    std::vector<std::int64_t> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoll(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw ConfigError("bad shape: " + s);
        }
    }
    for (auto x : v)
        if (x < 1) throw ConfigError("bad shape: " + s);
    return shape_from_list(v);
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            out.push_back(std::stoull(part));
        } catch (const std::exception&) {
            throw ConfigError("bad seed list: " + s);
        }
    }
    if (out.empty()) throw ConfigError("empty seed list");
    return out;
}

inline void write_echo(const fs::path& dir, const std::vector<std::string>& args) {
    fs::create_directories(dir);
    std::ofstream os(dir / "command.txt", std::ios::trunc);
    for (std::size_t i = 0; i < args.size(); ++i) os << (i ? " " : "") << args[i];
    os << '\n';
}

inline fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::is_regular_file(p)) return p;
    if (fs::is_directory(p) && fs::exists(p / "last.ckpt")) return p / "last.ckpt";
    fs::path with_ext = p;
    with_ext += ".ckpt";
    if (fs::exists(with_ext)) return with_ext;
    throw MissingFileError("checkpoint not found: " + p.string());
}

// Train flags that override config-file values only when given.
struct TrainOverrides {
    std::optional<double> lambda1, lambda2, lambda3, lambda4, lr, momentum, weight_decay, ema_alpha, beta;
    std::optional<std::int64_t> max_iters, checkpoint_every;
    std::optional<int> b_l, b_u, levels, base_width;
    std::optional<std::string> patch, lr_schedule, confidence_kind, mixer_kind, consistency_kind;
    std::optional<bool> include_labeled_in_cs, normalize_proto_by_scales, compute_all_terms, instance_norm;

    void bind(CLI::App* app) {
        app->add_option("--lambda1", lambda1, "weight of the unlabeled prototype term");
        app->add_option("--lambda2", lambda2, "weight of the mixed prototype term");
        app->add_option("--lambda3", lambda3, "weight of the unlabeled consistency term");
        app->add_option("--lambda4", lambda4, "weight of the mixed consistency term");
        app->add_option("--lr", lr);
        app->add_option("--momentum", momentum);
        app->add_option("--weight-decay", weight_decay);
        app->add_option("--max-iters", max_iters);
        app->add_option("--lr-schedule", lr_schedule, "poly or const");
        app->add_option("--ema-alpha", ema_alpha);
        app->add_option("--beta", beta, "threshold EMA rate");
        app->add_option("--B-l,--b-l", b_l, "labeled samples per batch");
        app->add_option("--B-u,--b-u", b_u, "unlabeled samples per batch");
        app->add_option("--patch-shape", patch, "e.g. 32x32 or 64x64x32");
        app->add_option("--confidence-kind", confidence_kind, "self_aware, none, fixed(p) or entropy(tau)");
        app->add_option("--mixer-kind", mixer_kind);
        app->add_option("--consistency-kind", consistency_kind, "prototype or feature");
        app->add_option("--include-labeled-in-cs", include_labeled_in_cs);
        app->add_option("--normalize-proto-by-scales", normalize_proto_by_scales);
        app->add_option("--compute-all-terms", compute_all_terms);
        app->add_option("--levels", levels);
        app->add_option("--base-width", base_width);
        app->add_option("--instance-norm", instance_norm);
        app->add_option("--checkpoint-every", checkpoint_every);
    }

    void apply(TrainConfig& c) const {
        auto set = [](auto& field, const auto& opt) {
            if (opt) field = *opt;
        };
        set(c.lambda1, lambda1);
        set(c.lambda2, lambda2);
        set(c.lambda3, lambda3);
        set(c.lambda4, lambda4);
        set(c.lr, lr);
        set(c.momentum, momentum);
        set(c.weight_decay, weight_decay);
        set(c.max_iters, max_iters);
        set(c.lr_schedule, lr_schedule);
        set(c.ema_alpha, ema_alpha);
        set(c.beta, beta);
        set(c.b_l, b_l);
        set(c.b_u, b_u);
        if (patch) c.patch_shape = parse_shape(*patch);
        set(c.confidence_kind, confidence_kind);
        set(c.mixer_kind, mixer_kind);
        set(c.consistency_kind, consistency_kind);
        set(c.include_labeled_in_cs, include_labeled_in_cs);
        set(c.normalize_proto_by_scales, normalize_proto_by_scales);
        set(c.compute_all_terms, compute_all_terms);
        set(c.levels, levels);
        set(c.base_width, base_width);
        set(c.instance_norm, instance_norm);
        set(c.checkpoint_every, checkpoint_every);
    }
};

struct Options {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string corpus;
    std::string config;
    std::string checkpoint;

    // gen-data
    int n = 60;
    int dims = 2;
    std::string shape;
    int classes = 2;
    std::string difficulty = "easy";
    double labeled_fraction = 0.1;
    double test_fraction = 0.2;

    // evaluate / matching / export
    std::string patch;
    std::string stride;
    bool use_teacher = false;
    bool foreground_only = false;
    std::size_t samples = 10000;

    // ablate
    std::string seeds = "0";
    std::string grid = "default";

    bool quiet = false;
    TrainOverrides train;
};

template <class T>
struct Loaded {
    DualModel<T> dual;
    CheckpointMeta meta;
    SegNet<T> net;
    const ParamTree<T>& params(bool teacher) const { return teacher ? dual.teacher : dual.student; }
};

template <class T>
Loaded<T> load_model(const std::string& path) {
    CheckpointMeta meta;
    auto dual = load_checkpoint<T>(resolve_checkpoint(path), &meta);
    SegNet<T> net(meta.net);
    return {std::move(dual), std::move(meta), std::move(net)};
}

// Default inference window: the training patch recorded in the checkpoint.
inline Shape3 window_or_default(const std::string& flag, const CheckpointMeta& meta, const Corpus& corpus) {
    if (!flag.empty()) return parse_shape(flag);
    if (meta.extra.contains("config")) {
        TrainConfig c;
        apply_json(c, meta.extra.at("config"));
        return c.patch_shape;
    }
    const auto& id = corpus.manifest().samples.front().id;
    return spatial_shape(corpus.image(id));
}

inline Shape3 half_stride(const Shape3& patch) {
    return {std::max<std::int64_t>(1, patch.h / 2), std::max<std::int64_t>(1, patch.w / 2),
            std::max<std::int64_t>(1, patch.d / 2)};
}

inline fs::path out_dir_or(const Options& o, const fs::path& fallback) { return o.out.empty() ? fallback : fs::path(o.out); }

inline int cmd_gen_data(const Options& o) {
    SyntheticOptions s;
    s.seed = o.seed.value_or(7);
    s.n = o.n;
    s.dims = o.dims;
    s.num_classes = o.classes;
    s.labeled_fraction = o.labeled_fraction;
    s.test_fraction = o.test_fraction;
    if (o.difficulty == "easy") s.difficulty = Difficulty::Easy;
    else if (o.difficulty == "hard") s.difficulty = Difficulty::Hard;
    else throw ConfigError("difficulty must be easy or hard");
    if (s.dims != 2 && s.dims != 3) throw ConfigError("dims must be 2 or 3");
    s.shape = o.shape.empty() ? (s.dims == 2 ? Shape3{64, 64, 1} : Shape3{32, 32, 32}) : parse_shape(o.shape);
    if (s.dims == 2 && s.shape.d != 1) throw ConfigError("2D corpus needs a 2D shape");
    const auto m = generate_synthetic_corpus(s, o.out);
    if (!o.quiet)
        std::cout << "wrote " << m.samples.size() << " samples (" << m.labeled.size() << " labeled, " << m.unlabeled.size()
                  << " unlabeled, " << m.test.size() << " test) to " << o.out << '\n';
    return 0;
}

template <class T>
int cmd_train(const Options& o) {
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
    o.train.apply(cfg);
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();
    const Corpus corpus(load_corpus(o.corpus));
    const auto every = std::max<std::int64_t>(1, cfg.max_iters / 20);
    TrainHooks hooks;
    if (!o.quiet)
        hooks.on_step = [&](const StepRecord& r) {
            if ((r.iter + 1) % every == 0 || r.iter == 0)
                std::cout << "iter " << r.iter + 1 << "/" << cfg.max_iters << " loss " << r.total << " sup " << r.sup
                          << " coverage " << r.coverage << '\n';
        };
    const auto res = train<T>(cfg, corpus, o.out, hooks);
    if (!o.quiet) std::cout << "checkpoint " << (fs::path(o.out) / "last.ckpt").string() << '\n';
    (void)res;
    return 0;
}

template <class T>
int cmd_evaluate(const Options& o) {
    const auto model = load_model<T>(o.checkpoint);
    const Corpus corpus(load_corpus(o.corpus));
    const Shape3 patch = window_or_default(o.patch, model.meta, corpus);
    const Shape3 stride = o.stride.empty() ? half_stride(patch) : parse_shape(o.stride);
    const auto rep = evaluate(model.net, model.params(o.use_teacher), corpus, patch, stride);
    const fs::path dir = out_dir_or(o, resolve_checkpoint(o.checkpoint).parent_path());
    fs::create_directories(dir);
    write_eval_csv(dir / "eval.csv", rep);
    if (!o.quiet)
        std::cout << "mean dice " << rep.mean.dice << " jaccard " << rep.mean.jaccard << " hd95 " << rep.mean.hd95 << " asd "
                  << rep.mean.asd << "\nreport " << (dir / "eval.csv").string() << '\n';
    return 0;
}

template <class T>
int cmd_matching(const Options& o) {
    const auto model = load_model<T>(o.checkpoint);
    const Corpus corpus(load_corpus(o.corpus));
    const auto rep = corpus_matching(model.net, model.params(o.use_teacher), corpus, o.foreground_only);
    const fs::path dir = out_dir_or(o, resolve_checkpoint(o.checkpoint).parent_path());
    fs::create_directories(dir);
    save_array(dir / "matching_M.bin", NdArray<double>{{rep.labeled, rep.unlabeled, rep.classes}, rep.m});
    nlohmann::json j{{"Q", rep.q},
                     {"included_entries", rep.included},
                     {"labeled", rep.labeled},
                     {"unlabeled", rep.unlabeled},
                     {"classes", rep.classes},
                     {"foreground_only", o.foreground_only}};
    std::ofstream(dir / "matching.json") << j.dump(2) << '\n';
    if (!o.quiet) std::cout << "Q " << rep.q << '\n';
    return 0;
}

template <class T>
int cmd_export(const Options& o) {
    const auto model = load_model<T>(o.checkpoint);
    const Corpus corpus(load_corpus(o.corpus));
    if (o.samples < 1) throw ConfigError("--samples must be >= 1");
    const auto fsamp = export_feature_samples(model.net, model.params(o.use_teacher), corpus, o.samples, o.seed.value_or(0));
    const fs::path dir = out_dir_or(o, resolve_checkpoint(o.checkpoint).parent_path());
    fs::create_directories(dir);
    write_feature_samples(dir / "features.csv", fsamp);
    if (!o.quiet) std::cout << "wrote " << fsamp.rows.size() << " rows to " << (dir / "features.csv").string() << '\n';
    return 0;
}

template <class T>
int cmd_ablate(const Options& o) {
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
    o.train.apply(cfg);
    cfg.validate();
    const Corpus corpus(load_corpus(o.corpus));
    AblationOptions opt;
    opt.seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : parse_seeds(o.seeds);
    opt.eval_patch = o.patch.empty() ? cfg.patch_shape : parse_shape(o.patch);
    opt.eval_stride = o.stride.empty() ? half_stride(opt.eval_patch) : parse_shape(o.stride);
    if (!o.quiet) opt.progress = [](const std::string& s) { std::cout << s << '\n'; };
    std::vector<AblationToggle> grid;
    if (o.grid == "default") grid = default_ablation_grid();
    else if (o.grid == "full-vs-sup") grid = {{false, false, false, false}, {true, true, true, true}};
    else if (o.grid == "full") grid = {{true, true, true, true}};
    else throw ConfigError("grid must be default, full-vs-sup or full");
    const auto rows = run_ablation_suite<T>(cfg, corpus, grid, opt);
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "config.json") << nlohmann::json(cfg).dump(2) << '\n';
    write_ablation_csv(fs::path(o.out) / "ablation.csv", rows);
    if (!o.quiet) std::cout << "table " << (fs::path(o.out) / "ablation.csv").string() << '\n';
    return 0;
}

// Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Dual cross-image semantic consistency segmentation toolkit", "ducisc"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub, bool need_out) {
        sub->add_option("--seed", o.seed, "random seed");
        auto* out = sub->add_option("--out", o.out, "output directory");
        if (need_out) out->required();
        sub->add_flag("--quiet", o.quiet);
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    common(gen, true);
    gen->add_option("--n", o.n, "number of images");
    gen->add_option("--dims", o.dims, "2 or 3");
    gen->add_option("--shape", o.shape, "image shape, e.g. 64x64");
    gen->add_option("--classes", o.classes, "classes including background");
    gen->add_option("--difficulty", o.difficulty, "easy or hard");
    gen->add_option("--labeled-fraction", o.labeled_fraction);
    gen->add_option("--test-fraction", o.test_fraction);

    auto* tr = app.add_subcommand("train", "train a student/teacher pair");
    common(tr, true);
    tr->add_option("--config", o.config, "config file (JSON)");
    tr->add_option("--corpus", o.corpus, "corpus directory")->required();
    o.train.bind(tr);

    auto* ev = app.add_subcommand("evaluate", "sliding-window evaluation on the test split");
    common(ev, false);
    ev->add_option("--checkpoint", o.checkpoint)->required();
    ev->add_option("--corpus", o.corpus)->required();
    ev->add_option("--patch", o.patch, "window shape");
    ev->add_option("--stride", o.stride, "window stride");
    ev->add_flag("--teacher", o.use_teacher, "use teacher weights");

    auto* ma = app.add_subcommand("matching", "labeled/unlabeled semantic matching score");
    common(ma, false);
    ma->add_option("--checkpoint", o.checkpoint)->required();
    ma->add_option("--corpus", o.corpus)->required();
    ma->add_flag("--foreground-only", o.foreground_only);
    ma->add_flag("--teacher", o.use_teacher, "use teacher weights");

    auto* ex = app.add_subcommand("export-features", "sample finest-level feature values");
    common(ex, false);
    ex->add_option("--checkpoint", o.checkpoint)->required();
    ex->add_option("--corpus", o.corpus)->required();
    ex->add_option("--samples", o.samples, "voxels per group");
    ex->add_flag("--teacher", o.use_teacher, "use teacher weights");

    auto* ab = app.add_subcommand("ablate", "loss-term ablation table");
    common(ab, true);
    ab->add_option("--config", o.config);
    ab->add_option("--corpus", o.corpus)->required();
    ab->add_option("--seeds", o.seeds, "comma-separated seeds");
    ab->add_option("--grid", o.grid, "default, full-vs-sup or full");
    ab->add_option("--patch", o.patch, "evaluation window");
    ab->add_option("--stride", o.stride, "evaluation stride");
    o.train.bind(ab);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 1;
    }

    const bool f64 = deterministic_mode();
    try {
        if (!o.out.empty()) write_echo(o.out, args);
        if (gen->parsed()) return cmd_gen_data(o);
        if (tr->parsed()) return f64 ? cmd_train<double>(o) : cmd_train<float>(o);
        if (ev->parsed()) return f64 ? cmd_evaluate<double>(o) : cmd_evaluate<float>(o);
        if (ma->parsed()) return f64 ? cmd_matching<double>(o) : cmd_matching<float>(o);
        if (ex->parsed()) return f64 ? cmd_export<double>(o) : cmd_export<float>(o);
        if (ab->parsed()) return f64 ? cmd_ablate<double>(o) : cmd_ablate<float>(o);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

}  // namespace ducisc::cli
