#include "wemoe/merging.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace wemoe {

using ad::Tape;
using ad::Var;

ParamFilter all_params() {
    return [](const std::string &) { return true; };
}

ParamFilter params_tagged(std::vector<ModuleTag> tags) {
    return [tags = std::move(tags)](const std::string & name) {
        return std::find(tags.begin(), tags.end(), ParamTree::tag_of(name)) != tags.end();
    };
}

ParamFilter params_not_tagged(std::vector<ModuleTag> tags) {
    return [tags = std::move(tags)](const std::string & name) {
        return std::find(tags.begin(), tags.end(), ParamTree::tag_of(name)) == tags.end();
    };
}

ParamTree merge_weight_average(std::span<const ParamTree> models) {
    if (models.empty()) throw ContractError("merge_weight_average: no models");
    for (const auto & m : models.subspan(1)) models[0].require_same_structure(m);
    ParamTree out;
    const double inv = 1.0 / static_cast<double>(models.size());
    for (const auto & [name, first] : models[0]) {
        std::vector<double> acc(first.size(), 0.0);
        for (const auto & m : models) {
            const auto d = m.at(name).data();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
        for (auto & v : acc) v = round_to_precision(v * inv);
        out.set(name, Tensor(first.shape(), std::move(acc)));
    }
    return out;
}

ParamTree merge_task_arithmetic(const ParamTree & theta_0, std::span<const TaskVector> tvs, double lambda,
                                const ParamFilter & filter) {
    if (lambda < 0.0) throw ContractError("merge_task_arithmetic: lambda must be non-negative");
    for (const auto & tv : tvs) theta_0.require_same_structure(tv.tree);
    ParamTree out;
    for (const auto & [name, base] : theta_0) {
        if (!filter(name) || tvs.empty()) {
            out.set(name, base);
            continue;
        }
        std::vector<double> acc(base.size(), 0.0);
        for (const auto & tv : tvs) {
            const auto d = tv.tree.at(name).data();
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
        const auto b = base.data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = round_to_precision(b[i] + lambda * acc[i]);
        out.set(name, Tensor(base.shape(), std::move(acc)));
    }
    return out;
}

std::size_t RouterParams::outputs() const { return depth == 2 ? b1.size() : b0.size(); }

std::size_t RouterParams::input_dim() const { return depth == 0 ? 0 : w0.rows(); }

std::size_t RouterParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto & [k, t] : tensors()) n += t.size();
    return n;
}

std::vector<std::pair<std::string, Tensor>> RouterParams::tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (depth >= 1) out.emplace_back("w0", w0);
    out.emplace_back("b0", b0);
    if (depth == 2) {
        out.emplace_back("w1", w1);
        out.emplace_back("b1", b1);
    }
    return out;
}

void RouterParams::set(const std::string & name, Tensor value) {
    if (name == "w0") w0 = std::move(value);
    else if (name == "b0") b0 = std::move(value);
    else if (name == "w1") w1 = std::move(value);
    else if (name == "b1") b1 = std::move(value);
    else throw DataError("unknown router tensor '" + name + "'");
}

std::size_t router_parameter_count(std::size_t d, std::size_t n, int depth, std::size_t hidden) {
    const std::size_t h = hidden ? hidden : d;
    switch (depth) {
        case 0: return n;
        case 1: return d * n + n;
        case 2: return d * h + h + h * n + n;
        default: throw ContractError("router depth must be 0, 1 or 2");
    }
}

RouterParams init_router(std::size_t n, std::size_t d, int depth, const RouterInit & init, std::uint64_t seed) {
    if (depth < 0 || depth > 2) throw ContractError("router depth must be 0, 1 or 2, got " + std::to_string(depth));
    if (n == 0) throw ContractError("router needs at least one task");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, init.weight_std);
    auto weights = [&](std::size_t r, std::size_t c) {
        std::vector<double> v(r * c, 0.0);
        if (!init.zero_weights)
            for (auto & x : v) x = round_to_precision(nd(rng));
        return Tensor({r, c}, std::move(v));
    };
    const double lam = round_to_precision(init.lambda);
    RouterParams r;
    r.depth = depth;
    if (depth == 0) {
        r.b0 = Tensor::full({n}, lam);
    } else if (depth == 1) {
        r.w0 = weights(d, n);
        r.b0 = Tensor::full({n}, lam);
    } else {
        const std::size_t h = init.hidden ? init.hidden : d;
        r.w0 = weights(d, h);
        r.b0 = Tensor::zeros({h});
        r.w1 = weights(h, n);
        r.b1 = Tensor::full({n}, lam);
    }
    return r;
}

RouterVars bind_router(Tape & tape, const RouterParams & r, bool requires_grad) {
    RouterVars v;
    v.depth = r.depth;
    auto bind = [&](const Tensor & t) { return requires_grad ? tape.leaf(t, true) : tape.constant(t); };
    if (r.depth >= 1) v.w0 = bind(r.w0);
    v.b0 = bind(r.b0);
    if (r.depth == 2) {
        v.w1 = bind(r.w1);
        v.b1 = bind(r.b1);
    }
    return v;
}

Var router_forward(const RouterVars & r, Var h) {
    switch (r.depth) {
        case 0: {
            auto & tape = *h.tape;
            return ad::add_bias(tape.constant(Tensor::zeros({h.value().rows(), r.b0.value().size()})), r.b0);
        }
        case 1: return ad::add_bias(ad::matmul(h, r.w0), r.b0);
        default: return ad::add_bias(ad::matmul(ad::relu(ad::add_bias(ad::matmul(h, r.w0), r.b0)), r.w1), r.b1);
    }
}

Var routing_weights(const RouterVars & r, Var h) {
    if (h.value().rows() == 0) throw ContractError("routing needs at least one token");
    // every row of a depth-0 router equals b0, so the token mean is b0 itself
    if (r.depth == 0) return r.b0;
    return ad::mean_rows(router_forward(r, h));
}

Tensor router_forward(const RouterParams & router, const Tensor & h) {
    Tape tape;
    return router_forward(bind_router(tape, router, false), tape.constant(h)).value();
}

const char * strategy_name(UpscaleStrategy s) {
    switch (s) {
        case UpscaleStrategy::MlpOnly: return "mlp-only";
        case UpscaleStrategy::AttAndMlpSeparately: return "att-and-mlp";
        case UpscaleStrategy::EntireBlock: return "entire-block";
    }
    return "?";
}

UpscaleStrategy parse_strategy(const std::string & s) {
    if (s == "mlp-only" || s == "mlp") return UpscaleStrategy::MlpOnly;
    if (s == "att-and-mlp" || s == "att-mlp") return UpscaleStrategy::AttAndMlpSeparately;
    if (s == "entire-block" || s == "block") return UpscaleStrategy::EntireBlock;
    throw DataError("unknown up-scaling strategy '" + s + "'");
}

const char * router_input_name(RouterInput r) { return r == RouterInput::Residual ? "residual" : "normalized"; }

RouterInput parse_router_input(const std::string & s) {
    if (s == "residual") return RouterInput::Residual;
    if (s == "normalized") return RouterInput::Normalized;
    throw DataError("unknown router input '" + s + "'");
}

const char * submodule_name(Submodule s) {
    switch (s) {
        case Submodule::Attention: return "attention";
        case Submodule::Mlp: return "mlp";
        case Submodule::Block: return "block";
    }
    return "?";
}

Submodule parse_submodule(const std::string & s) {
    if (s == "attention") return Submodule::Attention;
    if (s == "mlp") return Submodule::Mlp;
    if (s == "block") return Submodule::Block;
    throw DataError("unknown submodule '" + s + "'");
}

std::size_t WEMoEModule::dictionary_values() const {
    std::size_t n = 0;
    for (const auto & col : dense)
        for (const auto & [k, t] : col) n += t.size();
    for (const auto & col : sparse)
        for (const auto & [k, s] : col) n += s.nnz();
    return n;
}

std::size_t WEMoEModule::base_values() const {
    std::size_t n = 0;
    for (const auto & [k, t] : base) n += t.size();
    return n;
}

void WEMoEModule::validate() const {
    if (!dense.empty() && !sparse.empty()) throw ContractError("module has both dense and sparse dictionaries");
    for (const auto & col : dense) {
        if (col.size() != base.size()) throw StructureError("", "dictionary column does not cover the module");
        for (const auto & [k, t] : base) {
            auto it = col.find(k);
            if (it == col.end() || it->second.shape() != t.shape()) {
                throw StructureError(k, "dictionary column mismatch at '" + k + "'");
            }
        }
    }
    for (const auto & col : sparse) {
        if (col.size() != base.size()) throw StructureError("", "sparse column does not cover the module");
        for (const auto & [k, t] : base) {
            auto it = col.find(k);
            if (it == col.end() || it->second.dense_shape != t.shape()) {
                throw StructureError(k, "sparse dictionary column mismatch at '" + k + "'");
            }
            it->second.validate();
        }
    }
}

std::size_t MergedModel::tasks() const { return modules.empty() ? 0 : modules.front().experts(); }

const WEMoEModule * MergedModel::module_at(std::size_t layer, Submodule kind) const {
    for (const auto & m : modules)
        if (m.layer == layer && m.kind == kind) return &m;
    return nullptr;
}

namespace {

std::vector<std::string> covered_names(const ParamTree & tree, std::size_t layer, Submodule kind) {
    switch (kind) {
        case Submodule::Mlp: return tree.select(ModuleTag::MLP, layer);
        case Submodule::Attention: return tree.select(ModuleTag::Attention, layer);
        case Submodule::Block: {
            std::vector<std::string> out;
            for (const auto & [k, v] : tree)
                if (ParamTree::layer_of(k) == layer) out.push_back(k);
            return out;
        }
    }
    return {};
}

std::vector<Submodule> submodules_for(UpscaleStrategy s) {
    switch (s) {
        case UpscaleStrategy::MlpOnly: return {Submodule::Mlp};
        case UpscaleStrategy::AttAndMlpSeparately: return {Submodule::Attention, Submodule::Mlp};
        case UpscaleStrategy::EntireBlock: return {Submodule::Block};
    }
    return {};
}

} // namespace

MergedModel upscale_to_wemoe(const ViTConfig & config, const ParamTree & theta_0, std::span<const TaskVector> tvs,
                             std::vector<TaskHead> heads, const UpscaleConfig & cfg) {
    if (tvs.empty()) throw ContractError("upscale_to_wemoe: need at least one task vector");
    if (!(cfg.rho >= 0.0 && cfg.rho < 1.0)) throw ContractError("upscale_to_wemoe: rho must lie in [0, 1)");
    config.validate();
    MergedModel model;
    model.config = config;
    model.strategy = cfg.strategy;
    model.shared_router = cfg.shared_router;
    model.lambda_init = cfg.lambda;
    model.rho = cfg.rho;
    model.l_fc = cfg.l_fc;
    model.router_input = cfg.router_input;
    model.seed = cfg.seed;
    model.heads = std::move(heads);

    std::map<std::string, bool> covered;
    for (std::size_t l = 0; l < config.n_blocks; ++l) {
        for (auto kind : submodules_for(cfg.strategy)) {
            WEMoEModule m;
            m.layer = l;
            m.kind = kind;
            m.router = cfg.shared_router ? 0 : model.modules.size();
            const auto names = covered_names(theta_0, l, kind);
            for (const auto & n : names) {
                m.base.emplace(n, theta_0.at(n));
                covered[n] = true;
            }
            for (const auto & tv : tvs) {
                std::map<std::string, Tensor> col;
                for (const auto & n : names) col.emplace(n, tv.tree.at(n));
                if (cfg.rho > 0.0) {
                    m.sparse.push_back(prune_tensors(col, cfg.rho, cfg.grouping));
                } else {
                    m.dense.push_back(std::move(col));
                }
            }
            m.validate();
            model.modules.push_back(std::move(m));
        }
    }

    const auto merged = merge_task_arithmetic(theta_0, tvs, cfg.lambda, all_params());
    for (const auto & [name, t] : merged)
        if (!covered.count(name)) model.static_tree.set(name, t);

    // biases start at the same lambda as the static merge
    RouterInit ri = cfg.router;
    ri.lambda = cfg.lambda;
    const std::size_t n_routers = cfg.shared_router ? 1 : model.modules.size();
    for (std::size_t r = 0; r < n_routers; ++r) {
        model.routers.push_back(
            init_router(tvs.size(), config.d_model, cfg.l_fc, ri, cfg.seed * 1000003ULL + r * 7919ULL + 17));
    }
    return model;
}

BoundRouters bind_routers(Tape & tape, const MergedModel & model, bool requires_grad) {
    BoundRouters b;
    for (const auto & r : model.routers) b.routers.push_back(bind_router(tape, r, requires_grad));
    return b;
}

namespace {

Var merged_param(Tape & tape, const WEMoEModule & m, const std::string & name, Var lambda) {
    const auto base = tape.constant(m.base.at(name));
    if (m.is_sparse()) {
        std::vector<const SparseTensor *> cols;
        for (const auto & c : m.sparse) cols.push_back(&c.at(name));
        return ad::sparse_weighted_sum(base, cols, lambda);
    }
    std::vector<const Tensor *> cols;
    for (const auto & c : m.dense) cols.push_back(&c.at(name));
    return ad::weighted_sum(base, cols, lambda);
}

// Resolves block tensors from the static tree or from the active module.
struct Resolver {
    Tape & tape;
    const MergedModel & model;
    const WEMoEModule * module = nullptr;
    Var lambda;
    ExecPath path = ExecPath::Materialized;

    bool covers(const std::string & name) const { return module && module->base.count(name); }

    Var param(const std::string & name) const {
        if (covers(name)) return merged_param(tape, *module, name, lambda);
        return tape.constant(model.static_tree.at(name));
    }

    LinearFn linear(const std::string & w, const std::string & b) const {
        if (!covers(w) || path == ExecPath::Materialized) return dense_linear(param(w), param(b));
        const WEMoEModule * m = module;
        Tape * tp = &tape;
        const Var lam = lambda;
        const Var bias = param(b);
        return LinearFn{[m, tp, lam, bias, w](Var x) {
            auto y = ad::matmul(x, tp->constant(m->base.at(w)));
            for (std::size_t i = 0; i < m->experts(); ++i) {
                const auto delta = m->is_sparse() ? ad::sparse_matmul(x, m->sparse[i].at(w))
                                                  : ad::matmul(x, tp->constant(m->dense[i].at(w)));
                y = ad::add(y, ad::scale_by(ad::element(lam, i), delta));
            }
            return ad::add_bias(y, bias);
        }};
    }

    AttentionWeights attention(std::size_t l) const {
        auto n = [l](const char * local) { return block_param(l, local); };
        return {param(n("ln1.gamma")), param(n("ln1.beta")), linear(n("att.wq"), n("att.bq")),
                linear(n("att.wk"), n("att.bk")), linear(n("att.wv"), n("att.bv")), linear(n("att.wo"), n("att.bo"))};
    }

    MlpWeights mlp(std::size_t l) const {
        auto n = [l](const char * local) { return block_param(l, local); };
        return {param(n("ln2.gamma")), param(n("ln2.beta")), linear(n("mlp.w0"), n("mlp.b0")),
                linear(n("mlp.w1"), n("mlp.b1"))};
    }
};

std::size_t module_index(const MergedModel & model, const WEMoEModule * m) {
    return static_cast<std::size_t>(m - model.modules.data());
}

} // namespace

namespace {

Var router_view(const ViTConfig & c, Var h, RouterInput input) {
    if (input == RouterInput::Residual) return h;
    auto & tape = *h.tape;
    const std::size_t d = h.value().cols();
    return ad::layer_norm(h, tape.constant(Tensor::full({d}, 1.0)), tape.constant(Tensor::zeros({d})), c.ln_eps);
}

} // namespace

MoEOutput wemoe_mlp_forward(const ViTConfig & config, const WEMoEModule & module, const RouterVars & router, Var h_in,
                            Var ln_gamma, Var ln_beta, ExecPath path, RouterInput input) {
    if (h_in.value().rows() == 0) throw ContractError("wemoe_mlp_forward: no tokens");
    auto & tape = *h_in.tape;
    const auto lambda = routing_weights(router, router_view(config, h_in, input));
    if (lambda.value().size() != module.experts()) {
        throw ShapeError("router emits " + std::to_string(lambda.value().size()) + " weights for " +
                         std::to_string(module.experts()) + " experts");
    }
    MergedModel dummy;
    Resolver r{tape, dummy, &module, lambda, path};
    const auto l = module.layer;
    MlpWeights w{ln_gamma, ln_beta, r.linear(block_param(l, "mlp.w0"), block_param(l, "mlp.b0")),
                 r.linear(block_param(l, "mlp.w1"), block_param(l, "mlp.b1"))};
    return {mlp_forward(config, h_in, w), lambda};
}

MergedForward merged_encode(Tape & tape, const MergedModel & model, const BoundRouters & routers, const Tensor & image,
                            ExecPath path) {
    const auto & c = model.config;
    MergedForward out;
    out.lambdas.resize(model.modules.size());
    const auto embed = bind_embedding(tape, model.static_tree);
    auto route = [&](const WEMoEModule * m, Var h) {
        const auto lam = routing_weights(routers.routers.at(m->router), router_view(c, h, model.router_input));
        out.lambdas[module_index(model, m)] = lam;
        return lam;
    };
    BlockFn block = [&](std::size_t l, Var h) {
        Resolver plain{tape, model, nullptr, {}, path};
        if (const auto * blk = model.module_at(l, Submodule::Block)) {
            Resolver r{tape, model, blk, route(blk, h), path};
            h = attention_block_forward(c, h, r.attention(l));
            return mlp_forward(c, h, r.mlp(l));
        }
        if (const auto * att = model.module_at(l, Submodule::Attention)) {
            Resolver r{tape, model, att, route(att, h), path};
            h = attention_block_forward(c, h, r.attention(l));
        } else {
            h = attention_block_forward(c, h, plain.attention(l));
        }
        if (const auto * mlp = model.module_at(l, Submodule::Mlp)) {
            Resolver r{tape, model, mlp, route(mlp, h), path};
            return mlp_forward(c, h, r.mlp(l));
        }
        return mlp_forward(c, h, plain.mlp(l));
    };
    std::span<const Tensor> one(&image, 1);
    out.features = encode_with(c, one, embed, block, tape.constant(model.static_tree.at("final_ln.gamma")),
                               tape.constant(model.static_tree.at("final_ln.beta")));
    return out;
}

Tensor merged_logits(const MergedModel & model, const Tensor & image, const TaskHead & head, ExecPath path) {
    Tape tape;
    const auto routers = bind_routers(tape, model, false);
    const auto fwd = merged_encode(tape, model, routers, image, path);
    const auto logits = classify(fwd.features, tape.constant(head.weight), tape.constant(head.bias));
    return logits.value().reshaped({head.classes()});
}

Tensor merged_routing(const MergedModel & model, const Tensor & image) {
    Tape tape;
    const auto routers = bind_routers(tape, model, false);
    const auto fwd = merged_encode(tape, model, routers, image);
    const std::size_t n = model.tasks();
    std::vector<double> out;
    out.reserve(fwd.lambdas.size() * n);
    for (const auto & lam : fwd.lambdas) {
        const auto d = lam.value().data();
        out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor({fwd.lambdas.size(), n}, std::move(out));
}

Tensor static_logits(const ViTConfig & config, const ParamTree & params, const Tensor & image, const TaskHead & head) {
    return classify(vit_encode(config, params, image), head);
}

std::size_t encoder_parameter_count(const ViTConfig & c) {
    const std::size_t d = c.d_model, m = c.mlp_hidden;
    const std::size_t embed = c.patch_dim() * d + d + d + c.tokens() * d;
    const std::size_t block = 2 * 2 * d + 4 * (d * d + d) + (d * m + m + m * d + d);
    return embed + c.n_blocks * block + 2 * d;
}

ParameterCountRequest ParameterCountRequest::vitb32(std::size_t n_tasks, int l_fc, double rho, bool shared_router) {
    ParameterCountRequest r;
    r.arch = ViTConfig::vitb32_dims();
    // The published totals cover CLIP's image tower plus the frozen text-side classifier inputs.
    // Relative to this encoder the image tower adds a pre-LayerNorm and a 768x512 projection and
    // has no patch bias; the text side contributes token/positional embeddings (49408x512, 77x512),
    // its final LayerNorm, a 512x512 projection and the logit scale.
    constexpr std::size_t image_tower_extra = 2 * 768 + 768 * 512 - 768;
    constexpr std::size_t text_side = 49408 * 512 + 77 * 512 + 2 * 512 + 512 * 512 + 1;
    r.frozen_extra = image_tower_extra + text_side;
    r.n_tasks = n_tasks;
    r.l_fc = l_fc;
    r.rho = rho;
    r.shared_router = shared_router;
    return r;
}

ParameterCount count_parameters(const ParameterCountRequest & req) {
    const auto & c = req.arch;
    c.validate();
    const std::size_t d = c.d_model, m = c.mlp_hidden;
    const std::vector<std::size_t> mlp{d * m, m, m * d, d};
    const std::vector<std::size_t> att{d * d, d, d * d, d, d * d, d, d * d, d};
    std::vector<std::size_t> block = mlp;
    block.insert(block.end(), att.begin(), att.end());
    block.insert(block.end(), {d, d, d, d});

    std::vector<std::vector<std::size_t>> groups;
    switch (req.strategy) {
        case UpscaleStrategy::MlpOnly: groups = {mlp}; break;
        case UpscaleStrategy::AttAndMlpSeparately: groups = {att, mlp}; break;
        case UpscaleStrategy::EntireBlock: groups = {block}; break;
    }
    std::size_t per_task_per_layer = 0;
    for (const auto & g : groups) {
        if (req.rho <= 0.0) {
            for (auto s : g) per_task_per_layer += s;
        } else if (req.grouping == PruneGrouping::Module) {
            std::size_t total = 0;
            for (auto s : g) total += s;
            per_task_per_layer += kept_count(total, req.rho);
        } else {
            for (auto s : g) per_task_per_layer += kept_count(s, req.rho);
        }
    }
    std::size_t dictionary = req.n_tasks * c.n_blocks * per_task_per_layer;
    if (req.include_indices && req.rho > 0.0) dictionary *= 2;
    const std::size_t modules = c.n_blocks * groups.size();
    const std::size_t routers = req.shared_router ? 1 : modules;
    ParameterCount pc;
    pc.trainable = routers * router_parameter_count(d, req.n_tasks, req.l_fc, req.router_hidden);
    pc.total = encoder_parameter_count(c) + req.frozen_extra + dictionary + pc.trainable;
    return pc;
}

ParameterCount count_parameters(const MergedModel & model, bool include_indices) {
    ParameterCount pc;
    for (const auto & r : model.routers) pc.trainable += r.parameter_count();
    pc.total = model.static_tree.parameter_count() + pc.trainable;
    for (const auto & m : model.modules) {
        pc.total += m.base_values() + m.dictionary_values();
        if (include_indices && m.is_sparse()) pc.total += m.dictionary_values();
    }
    return pc;
}

} // namespace wemoe
