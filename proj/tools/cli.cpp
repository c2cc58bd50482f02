#include "cli.hpp"

#include "wemoe/analysis.hpp"
#include "wemoe/cliio.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <ostream>
#include <sstream>

namespace wemoe {

namespace fs = std::filesystem;

namespace {

// Flag name to settings key: "--shared-router" -> "shared_router".
std::string key_of(const CLI::Option & opt) {
    auto name = opt.get_name(false, false);
    name.erase(0, name.find_first_not_of('-'));
    std::replace(name.begin(), name.end(), '-', '_');
    return name;
}

void collect_flags(const CLI::App & app, Settings & s) {
    for (const auto * opt : app.get_options()) {
        if (opt->count() == 0 || opt->get_name() == "--help") continue;
        s.set_flag(key_of(*opt), opt->get_expected_max() == 0 ? "1" : opt->results().back());
    }
}

struct Stage {
    Settings settings;
    fs::path out;
    std::ostream & log;

    fs::path path(const std::string & name) const { return out / name; }
    fs::path base_path() const { return path("theta0.wemc"); }
    fs::path expert_path(std::size_t i) const { return path("expert_" + std::to_string(i) + ".wemc"); }
    fs::path input(const std::string & key, const std::string & fallback) const {
        auto v = settings.str(key, "");
        return v.empty() ? path(fallback) : fs::path(v);
    }

    void wrote(const fs::path & p) const { log << "wrote " << p.string() << " " << file_hash(p) << '\n'; }
    void save(const Checkpoint & c, const fs::path & p) const {
        write_checkpoint_file(c, p);
        wrote(p);
    }
    void save_text(const std::string & text, const fs::path & p) const {
        write_text_atomic(p, text);
        wrote(p);
    }
};

Optimizer parse_optimizer(const std::string & s) {
    if (s == "adam") return Optimizer::Adam;
    if (s == "sgd") return Optimizer::SgdMomentum;
    throw DataError("unknown optimizer '" + s + "' (adam, sgd)");
}

Precision parse_precision(const std::string & s) {
    if (s == "f32") return Precision::F32;
    if (s == "f64") return Precision::F64;
    throw DataError("unknown precision '" + s + "' (f32, f64)");
}

BenchConfig bench_config(const Settings & s) {
    auto c = BenchConfig::standard(s.size("seed", 0));
    c.arch.image_size = s.size("image_size", c.arch.image_size);
    c.arch.patch_size = s.size("patch_size", c.arch.patch_size);
    c.arch.d_model = s.size("d_model", c.arch.d_model);
    c.arch.n_heads = s.size("heads", c.arch.n_heads);
    c.arch.n_blocks = s.size("blocks", c.arch.n_blocks);
    c.arch.mlp_hidden = s.size("mlp_hidden", c.arch.mlp_hidden);
    if (auto t = s.list("tasks"); !t.empty()) {
        c.families.clear();
        for (const auto & f : t) c.families.push_back(parse_family(f));
    }
    c.classes = s.size("classes", c.classes);
    c.train_size = s.size("train_size", c.train_size);
    c.test_size = s.size("test_size", c.test_size);
    c.noise = s.real("noise", c.noise);
    c.pretrain_size = s.size("pretrain_size", c.pretrain_size);
    c.pretrain_cfg.epochs = s.size("pretrain_epochs", c.pretrain_cfg.epochs);
    c.pretrain_cfg.lr = s.real("pretrain_lr", c.pretrain_cfg.lr);
    c.pretrain_cfg.seed = s.size("pretrain_seed", c.pretrain_cfg.seed);
    c.finetune_cfg.optimizer = parse_optimizer(s.str("optimizer", c.finetune_cfg.optimizer == Optimizer::Adam ? "adam" : "sgd"));
    c.finetune_cfg.epochs = s.size("finetune_epochs", c.finetune_cfg.epochs);
    c.finetune_cfg.head_epochs = s.size("head_epochs", c.finetune_cfg.head_epochs);
    c.finetune_cfg.lr = s.real("finetune_lr", c.finetune_cfg.lr);
    c.pretrain_cfg.batch = c.finetune_cfg.batch = s.size("train_batch", c.finetune_cfg.batch);
    c.ta_lambda = s.real("lambda", c.ta_lambda);
    c.wemoe.lambda = c.ewemoe.lambda = c.ta_lambda;
    c.tta.steps = s.size("steps", c.tta.steps);
    c.tta.lr = s.real("lr", c.tta.lr);
    c.tta.batch = s.size("batch", c.tta.batch);
    return c;
}

struct LoadedExpert {
    Expert expert;
    SyntheticTaskSpec spec;
};

struct Loaded {
    ViTConfig arch;
    ParamTree theta_0;
    std::vector<LoadedExpert> experts;
};

Loaded load_base(const Stage & st) {
    auto ck = read_checkpoint_file(st.base_path());
    return {get_arch(ck.manifest), checkpoint_tree(ck), {}};
}

Loaded load_all(const Stage & st) {
    auto l = load_base(st);
    for (std::size_t i = 0; fs::exists(st.expert_path(i)); ++i) {
        auto ck = read_checkpoint_file(st.expert_path(i));
        if (get_arch(ck.manifest).d_model != l.arch.d_model)
            throw DataError(st.expert_path(i).string() + " was trained on a different architecture");
        auto head = checkpoint_head(ck);
        l.experts.push_back({{checkpoint_tree(ck), head, 0.0}, get_task_spec(ck.manifest, "task.")});
        l.experts.back().expert.params.require_same_structure(l.theta_0);
    }
    if (l.experts.size() < 2)
        throw DataError("need at least 2 experts under " + st.out.string() + "; run finetune first");
    return l;
}

std::vector<TaskVector> task_vectors(const Loaded & l) {
    std::vector<TaskVector> tvs;
    for (std::size_t i = 0; i < l.experts.size(); ++i)
        tvs.push_back(compute_task_vector(l.experts[i].expert.params, l.theta_0, static_cast<int>(i)));
    return tvs;
}

Workbench workbench(const Stage & st, Loaded l) {
    Workbench wb;
    wb.config = bench_config(st.settings);
    wb.config.arch = l.arch;
    wb.config.families.clear();
    for (const auto & e : l.experts) wb.config.families.push_back(e.spec.family);
    wb.config.classes = l.experts.front().spec.classes;
    for (std::size_t i = 0; i < l.experts.size(); ++i) {
        wb.store.add(generate_task_dataset(l.experts[i].spec));
        auto tv = compute_task_vector(l.experts[i].expert.params, l.theta_0, static_cast<int>(i));
        wb.store.set_expert(i, std::move(l.experts[i].expert), std::move(tv));
    }
    wb.theta_0 = std::move(l.theta_0);
    wb.store.clear_log();
    return wb;
}

Manifest task_manifest(const std::vector<SyntheticTaskSpec> & specs) {
    Manifest m;
    m["task.count"] = std::to_string(specs.size());
    for (std::size_t t = 0; t < specs.size(); ++t) put_task_spec(m, "task." + std::to_string(t) + ".", specs[t]);
    return m;
}

std::vector<SyntheticTaskSpec> manifest_tasks(const Manifest & m) {
    auto it = m.find("task.count");
    if (it == m.end()) throw DataError("checkpoint does not record its tasks");
    std::vector<SyntheticTaskSpec> specs;
    for (std::size_t t = 0; t < std::stoul(it->second); ++t)
        specs.push_back(get_task_spec(m, "task." + std::to_string(t) + "."));
    return specs;
}

Manifest keep_tasks(const Manifest & m) {
    Manifest out;
    for (const auto & [k, v] : m)
        if (k.rfind("task.", 0) == 0) out.emplace(k, v);
    return out;
}

std::vector<std::vector<Tensor>> test_images(const std::vector<SyntheticTaskSpec> & specs) {
    std::vector<std::vector<Tensor>> out;
    for (const auto & s : specs) out.push_back(generate_task_dataset(s).test.images);
    return out;
}

std::vector<std::size_t> index_list(const Settings & s, const std::string & key, std::vector<std::size_t> fallback) {
    auto items = s.list(key);
    if (items.empty()) return fallback;
    std::vector<std::size_t> v;
    for (const auto & x : items) {
        std::size_t i = 0;
        auto r = std::from_chars(x.data(), x.data() + x.size(), i);
        if (r.ec != std::errc() || r.ptr != x.data() + x.size())
            throw DataError("setting " + key + ": '" + x + "' is not a task index");
        v.push_back(i);
    }
    return v;
}

// ---- stages

void cmd_pretrain(const Stage & st) {
    const auto cfg = bench_config(st.settings);
    cfg.arch.validate();
    const auto theta = pretrain_base(cfg);
    Manifest m;
    m["kind"] = "base";
    put_arch(m, cfg.arch);
    m["seeds"] = std::to_string(cfg.pretrain_cfg.seed);
    m["pretrain.size"] = std::to_string(cfg.pretrain_size);
    m["pretrain.epochs"] = std::to_string(cfg.pretrain_cfg.epochs);
    m["pretrain.lr"] = format_real(cfg.pretrain_cfg.lr);
    st.save(tree_checkpoint(theta, m), st.base_path());
}

void cmd_finetune(const Stage & st) {
    auto cfg = bench_config(st.settings);
    const auto base = load_base(st);
    cfg.arch = base.arch;
    std::vector<std::size_t> all(cfg.families.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    for (auto i : index_list(st.settings, "task", all)) {
        const auto spec = task_spec(cfg, i);
        const auto fcfg = finetune_config(cfg, i);
        const auto data = generate_task_dataset(spec);
        const auto ex = finetune(cfg.arch, base.theta_0, data.train, spec.classes, static_cast<int>(i), fcfg);
        Manifest m;
        m["kind"] = "expert";
        put_arch(m, cfg.arch);
        put_task_spec(m, "task.", spec);
        m["seeds"] = std::to_string(spec.seed) + "," + std::to_string(fcfg.seed);
        m["finetune.epochs"] = std::to_string(fcfg.epochs);
        m["finetune.lr"] = format_real(fcfg.lr);
        m["train_accuracy"] = format_real(ex.train_accuracy);
        st.save(expert_checkpoint(ex.params, ex.head, m), st.expert_path(i));
    }
}

void cmd_taskvec(const Stage & st) {
    const auto l = load_all(st);
    const double rho = st.settings.real("rho", 0.0);
    const auto tvs = task_vectors(l);
    for (std::size_t i = 0; i < tvs.size(); ++i) {
        Checkpoint c;
        c.manifest["kind"] = "taskvec";
        put_arch(c.manifest, l.arch);
        put_task_spec(c.manifest, "task.", l.experts[i].spec);
        c.manifest["task_id"] = std::to_string(i);
        c.manifest["rho"] = format_real(rho);
        for (const auto & [name, t] : tvs[i].tree)
            if (rho == 0.0 || ParamTree::tag_of(name) != ModuleTag::MLP) c.dense.emplace(name, t);
        if (rho > 0.0)
            for (std::size_t layer = 0; layer < l.arch.n_blocks; ++layer)
                for (auto & [name, sp] : prune_task_vector(tvs[i], layer, rho).tensors) c.sparse.emplace(name, sp);
        st.save(c, st.path("taskvec_" + std::to_string(i) + ".wemc"));
    }
}

void cmd_merge(const Stage & st) {
    const auto & s = st.settings;
    const auto l = load_all(st);
    const auto cfg = bench_config(s);
    const auto method = parse_method(s.str("method", "wemoe"));
    const auto tvs = task_vectors(l);
    std::vector<SyntheticTaskSpec> specs;
    std::vector<TaskHead> heads;
    for (const auto & e : l.experts) {
        specs.push_back(e.spec);
        heads.push_back(e.expert.head);
    }
    auto extra = task_manifest(specs);
    extra["method"] = method_name(method);
    const auto name = s.str("name", "merged.wemc");

    if (method == Method::WEMoE || method == Method::EWEMoE) {
        auto u = method == Method::WEMoE ? cfg.wemoe : cfg.ewemoe;
        u.strategy = parse_strategy(s.str("strategy", strategy_name(u.strategy)));
        u.lambda = s.real("lambda", u.lambda);
        u.l_fc = static_cast<int>(s.integer("lfc", u.l_fc));
        u.rho = s.real("rho", u.rho);
        u.shared_router = s.flag("shared_router", u.shared_router);
        u.router_input = parse_router_input(s.str("router_input", router_input_name(u.router_input)));
        u.seed = s.size("seed", 0);
        const auto model = upscale_to_wemoe(l.arch, l.theta_0, tvs, heads, u);
        st.save(merged_checkpoint(model, extra), st.path(name));
        return;
    }
    ParamTree merged;
    switch (method) {
        case Method::WeightAverage: {
            std::vector<ParamTree> trees;
            for (const auto & e : l.experts) trees.push_back(e.expert.params);
            merged = merge_weight_average(trees);
            break;
        }
        case Method::TaskArithmetic: merged = merge_task_arithmetic(l.theta_0, tvs, cfg.ta_lambda); break;
        case Method::Pretrained: merged = l.theta_0; break;
        default: throw DataError(std::string("merge cannot build ") + method_name(method));
    }
    extra["kind"] = "static";
    extra["lambda"] = format_real(cfg.ta_lambda);
    put_arch(extra, l.arch);
    auto c = tree_checkpoint(merged, extra);
    for (std::size_t t = 0; t < heads.size(); ++t) {
        c.dense.emplace("head/" + std::to_string(t) + "/weight", heads[t].weight);
        c.dense.emplace("head/" + std::to_string(t) + "/bias", heads[t].bias);
    }
    st.save(c, st.path(name));
}

void cmd_tta(const Stage & st) {
    const auto & s = st.settings;
    const auto ck = read_checkpoint_file(st.input("model", "merged.wemc"));
    const auto model = checkpoint_merged(ck);
    const auto specs = manifest_tasks(ck.manifest);
    auto tcfg = bench_config(s).tta;
    tcfg.seed = s.size("seed", 0);
    const auto res = tta_train(model, test_images(specs), tcfg);
    auto extra = keep_tasks(ck.manifest);
    if (auto it = ck.manifest.find("method"); it != ck.manifest.end()) extra["method"] = it->second;
    extra["tta.steps"] = std::to_string(tcfg.steps);
    extra["tta.lr"] = format_real(tcfg.lr);
    extra["tta.batch"] = std::to_string(tcfg.batch);
    st.save(merged_checkpoint(res.model, extra), st.path(s.str("name", "adapted.wemc")));
    std::ostringstream os;
    write_trace_csv(os, res.trace);
    st.save_text(os.str(), st.path("tta_trace.csv"));
}

void eval_model(const Stage & st, const fs::path & model_path) {
    const auto ck = read_checkpoint_file(model_path);
    const auto kind = ck.meta("kind");
    std::ostringstream os;
    os.precision(10);
    os << "task,family,accuracy\n";
    if (kind == "expert") {
        const auto spec = get_task_spec(ck.manifest, "task.");
        const auto acc = evaluate_accuracy(get_arch(ck.manifest), checkpoint_tree(ck), checkpoint_head(ck),
                                           generate_task_dataset(spec).test);
        os << 0 << ',' << family_name(spec.family) << ',' << acc << '\n';
    } else {
        const auto specs = manifest_tasks(ck.manifest);
        std::optional<MergedModel> dyn;
        std::optional<ParamTree> stat;
        if (kind == "merged")
            dyn = checkpoint_merged(ck);
        else if (kind == "static")
            stat = checkpoint_tree(ck);
        else
            throw DataError("cannot evaluate a checkpoint of kind '" + kind + "'");
        for (std::size_t t = 0; t < specs.size(); ++t) {
            const auto data = generate_task_dataset(specs[t]).test;
            double acc = 0.0;
            if (dyn) {
                acc = evaluate_accuracy(*dyn, dyn->heads.at(t), data);
            } else {
                TaskHead h;
                h.task_id = static_cast<int>(t);
                const auto pre = "head/" + std::to_string(t) + "/";
                h.weight = ck.dense.at(pre + "weight");
                h.bias = ck.dense.at(pre + "bias");
                acc = evaluate_accuracy(get_arch(ck.manifest), *stat, h, data);
            }
            os << t << ',' << family_name(specs[t].family) << ',' << acc << '\n';
        }
    }
    st.save_text(os.str(), st.path("eval_" + model_path.stem().string() + ".csv"));
}

void cmd_eval(const Stage & st) {
    const auto & s = st.settings;
    if (auto m = s.str("model", ""); !m.empty()) return eval_model(st, m);

    const auto protocol = parse_protocol(s.str("protocol", "standard"));
    const auto wb = workbench(st, load_all(st));
    const auto n = wb.store.size();
    std::vector<Method> methods;
    for (const auto & m : s.list("methods", {"pretrained", "individual", "weight-averaging", "task-arithmetic",
                                             "wemoe", "e-wemoe"}))
        methods.push_back(parse_method(m));
    if (protocol == Protocol::Generalization)
        methods.erase(std::remove(methods.begin(), methods.end(), Method::Individual), methods.end());

    ProtocolOptions opt;
    std::vector<std::size_t> first_half;
    for (std::size_t i = 0; i < (n + 1) / 2; ++i) first_half.push_back(i);
    opt.seen = index_list(s, "seen", first_half);
    for (const auto & c : s.list("corruptions", {"gaussian-noise@3", "impulse-noise@3", "contrast@3", "pixelate@3"})) {
        const auto at = c.find('@');
        Corruption k;
        k.kind = parse_corruption(c.substr(0, at));
        k.severity = at == std::string::npos ? 3 : std::stoi(c.substr(at + 1));
        k.seed = s.size("seed", 0);
        opt.corruptions.push_back(k);
    }
    opt.tta_on_clean = s.flag("tta_on_clean", false);

    const auto report = run_merge_benchmark(wb, methods, protocol, opt);
    std::ostringstream md, csv;
    write_markdown(md, report);
    write_csv(csv, report);
    const std::string stem = std::string("report_") + protocol_name(protocol);
    st.save_text(md.str(), st.path(stem + ".md"));
    st.save_text(csv.str(), st.path(stem + ".csv"));
    st.log << md.str();
}

void cmd_analyze(const Stage & st) {
    const auto & s = st.settings;
    bool drift = s.flag("drift", false), mags = s.flag("magnitudes", false), routing = s.flag("routing", false),
         first = s.flag("firstchoice", false);
    if (!drift && !mags && !routing && !first) drift = mags = routing = first = true;

    if (drift || mags) {
        const auto l = load_all(st);
        if (drift) {
            std::vector<ParamTree> experts;
            for (const auto & e : l.experts) experts.push_back(e.expert.params);
            std::ostringstream os;
            write_drift_csv(os, drift_report(l.theta_0, experts));
            st.save_text(os.str(), st.path("drift.csv"));
        }
        if (mags) {
            std::ostringstream os;
            write_magnitude_csv(os, magnitude_table(task_vectors(l)));
            st.save_text(os.str(), st.path("magnitudes.csv"));
        }
    }
    if (routing || first) {
        const auto ck = read_checkpoint_file(st.input("model", "adapted.wemc"));
        const auto model = checkpoint_merged(ck);
        const auto images = test_images(manifest_tasks(ck.manifest));
        if (routing) {
            std::vector<std::size_t> modules(model.modules.size());
            for (std::size_t i = 0; i < modules.size(); ++i) modules[i] = i;
            std::ostringstream os;
            write_routing_csv(os, routing_distribution(model, images, modules));
            st.save_text(os.str(), st.path("routing.csv"));
        }
        if (first) {
            std::ostringstream os;
            write_first_choice_csv(os, first_choice_matrix(model, images));
            st.save_text(os.str(), st.path("firstchoice.csv"));
        }
    }
}

void cmd_landscape(const Stage & st) {
    const auto & s = st.settings;
    const auto l = load_all(st);
    const auto pair = index_list(s, "pair", {0, 1});
    if (pair.size() != 2 || pair[0] == pair[1] || pair[0] >= l.experts.size() || pair[1] >= l.experts.size())
        throw DataError("--pair needs two distinct task indices below " + std::to_string(l.experts.size()));
    GridAxis axis;
    axis.lo = s.real("lo", axis.lo);
    axis.hi = s.real("hi", axis.hi);
    axis.step = s.real("step", axis.step);
    const auto tvs = task_vectors(l);
    const auto d1 = generate_task_dataset(l.experts[pair[0]].spec).test;
    const auto d2 = generate_task_dataset(l.experts[pair[1]].spec).test;
    const LandscapeTask t1{&tvs[pair[0]], &l.experts[pair[0]].expert.head, &d1};
    const LandscapeTask t2{&tvs[pair[1]], &l.experts[pair[1]].expert.head, &d2};
    std::ostringstream os;
    write_landscape_csv(os, loss_landscape_grid(l.arch, l.theta_0, t1, t2, axis, axis));
    st.save_text(os.str(), st.path("landscape.csv"));
}

} // namespace

int run_cli(int argc, const char * const * argv, std::ostream & out, std::ostream & err) {
    CLI::App app{"Weight-ensembling MoE model merging pipeline", "wemoe"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--seed", "seed for data, training, routers and TTA");
    app.add_option("--precision", "f32 (default) or f64 arithmetic");
    app.add_option("--config", "key=value settings file; flags override it");
    app.add_option("--out", "artifact directory (default: out)");

    using Fn = void (*)(const Stage &);
    std::vector<std::pair<CLI::App *, Fn>> cmds;
    auto sub = [&](const char * name, const char * help, Fn fn) {
        auto * c = app.add_subcommand(name, help);
        cmds.emplace_back(c, fn);
        return c;
    };

    sub("pretrain", "pre-train the shared base encoder -> theta0.wemc", cmd_pretrain);
    auto * ft = sub("finetune", "fine-tune one expert per task -> expert_<i>.wemc", cmd_finetune);
    ft->add_option("--task", "comma-separated task indices (default: all)");
    auto * tv = sub("taskvec", "write task vectors -> taskvec_<i>.wemc", cmd_taskvec);
    tv->add_option("--rho", "prune MLP deltas to this sparsity ratio");
    auto * mg = sub("merge", "merge the experts -> merged.wemc", cmd_merge);
    mg->add_option("--method", "wemoe (default), e-wemoe, task-arithmetic, weight-averaging, pretrained");
    mg->add_option("--strategy", "mlp-only, att-and-mlp, entire-block");
    mg->add_option("--lambda", "task-arithmetic scale and router bias init");
    mg->add_option("--lfc", "router depth 0, 1 or 2");
    mg->add_option("--rho", "sparsity ratio of the MLP task vectors");
    mg->add_flag("--shared-router", "one router for all layers");
    mg->add_option("--router-input", "residual or normalized");
    mg->add_option("--name", "output file name");
    auto * tt = sub("tta", "adapt the routers on unlabeled test data -> adapted.wemc", cmd_tta);
    tt->add_option("--model", "merged checkpoint (default: merged.wemc)");
    tt->add_option("--steps", "Adam steps");
    tt->add_option("--lr", "learning rate");
    tt->add_option("--batch", "unlabeled samples per task per step");
    tt->add_option("--name", "output file name");
    auto * ev = sub("eval", "run a benchmark protocol, or score one checkpoint with --model", cmd_eval);
    ev->add_option("--protocol", "standard, generalization, robustness");
    ev->add_option("--methods", "comma-separated methods");
    ev->add_option("--seen", "generalization: merged task indices");
    ev->add_option("--corruptions", "robustness: kind@severity list");
    ev->add_flag("--tta-on-clean", "robustness: adapt on clean test data");
    ev->add_option("--model", "checkpoint to score");
    auto * an = sub("analyze", "write analysis CSVs (all when no flag is given)", cmd_analyze);
    an->add_flag("--drift", "drift.csv");
    an->add_flag("--magnitudes", "magnitudes.csv");
    an->add_flag("--routing", "routing.csv");
    an->add_flag("--firstchoice", "firstchoice.csv");
    an->add_option("--model", "adapted checkpoint (default: adapted.wemc)");
    auto * ls = sub("landscape", "two-task loss grid -> landscape.csv", cmd_landscape);
    ls->add_option("--pair", "two task indices (default: 0,1)");
    ls->add_option("--lo", "grid lower bound");
    ls->add_option("--hi", "grid upper bound");
    ls->add_option("--step", "grid step");

    if (argc <= 1) {
        err << app.help();
        return kExitUsage;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError & e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    try {
        Settings settings;
        if (auto * c = app.get_option("--config"); c->count()) settings = Settings(KeyValueConfig::load(c->as<std::string>()));
        collect_flags(app, settings);
        for (auto & [cmd, fn] : cmds) {
            if (!cmd->parsed()) continue;
            collect_flags(*cmd, settings);
            PrecisionScope scope(parse_precision(settings.str("precision", "f32")));
            Stage st{settings, settings.str("out", "out"), out};
            fn(st);
        }
        return kExitOk;
    } catch (const NumericalError & e) {
        err << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const ContractError & e) {
        err << "invalid arguments: " << e.what() << '\n';
        return kExitUsage;
    } catch (const Error & e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error & e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::invalid_argument & e) {
        err << "invalid arguments: " << e.what() << '\n';
        return kExitUsage;
    }
}

} // namespace wemoe
