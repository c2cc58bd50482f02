#include "doctest.h"

#include "wemoe/merging.hpp"

#include <cmath>
#include <random>

using namespace wemoe;
using ad::Tape;
using ad::Var;

namespace {

ViTConfig tiny() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_blocks = 2;
    c.mlp_hidden = 16;
    return c;
}

ParamTree perturbed(const ParamTree & p, std::uint64_t seed, double sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sd);
    ParamTree out;
    for (const auto & [n, t] : p) {
        auto d = t.to_vector();
        for (auto & x : d) x += nd(rng);
        out.set(n, Tensor(t.shape(), std::move(d)));
    }
    return out;
}

Tensor random_image(const ViTConfig & c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> d(c.image_size * c.image_size * c.channels);
    for (auto & x : d) x = u(rng);
    return Tensor({c.image_size, c.image_size, c.channels}, std::move(d));
}

struct Fixture {
    ViTConfig config = tiny();
    ParamTree base;
    std::vector<ParamTree> experts;
    std::vector<TaskVector> tvs;
    std::vector<TaskHead> heads;

    explicit Fixture(std::size_t n, double sd = 0.2) {
        base = init_vit(config, 1);
        for (std::size_t i = 0; i < n; ++i) {
            experts.push_back(perturbed(base, 10 + i, sd));
            tvs.push_back(compute_task_vector(experts.back(), base, static_cast<int>(i)));
            heads.push_back(init_head(config, static_cast<int>(i), 3, 50 + i));
        }
    }
};

// Round-half-even rendering of a count in millions to two decimals, as tabulated.
double millions(std::size_t n) { return std::round(static_cast<double>(n) / 1e4) / 100.0; }

} // namespace

TEST_CASE("weight averaging") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    const ParamTree one[] = {f.experts[0]};
    CHECK(merge_weight_average(one).identical(f.experts[0]));

    ParamTree neg;
    for (const auto & [n, t] : f.experts[0]) {
        auto d = t.to_vector();
        for (auto & x : d) x = -x;
        neg.set(n, Tensor(t.shape(), d));
    }
    const ParamTree pair[] = {f.experts[0], neg};
    for (const auto & [n, t] : merge_weight_average(pair))
        for (double v : t.data()) CHECK(v == 0.0);

    const auto avg = merge_weight_average(f.experts);
    for (const auto & [n, t] : avg)
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double want = (f.experts[0].at(n)[i] + f.experts[1].at(n)[i] + f.experts[2].at(n)[i]) / 3.0;
            CHECK(std::abs(t[i] - want) < 1e-7);
        }
    CHECK_THROWS_AS(merge_weight_average(std::span<const ParamTree>{}), ContractError);
}

TEST_CASE("task arithmetic") {
    PrecisionScope f64(Precision::F64);
    Fixture f(2);
    const auto one = merge_task_arithmetic(f.base, std::span(f.tvs).first(1), 1.0);
    CHECK(max_abs_diff(one.at("embed.pos"), f.experts[0].at("embed.pos")) < 1e-15);
    CHECK(merge_task_arithmetic(f.base, f.tvs, 0.0).identical(f.base));

    ParamTree zero;
    zero.set("embed.cls", Tensor::vector({0}));
    TaskVector t1{0, {}}, t2{1, {}};
    t1.tree.set("embed.cls", Tensor::vector({1}));
    t2.tree.set("embed.cls", Tensor::vector({3}));
    const TaskVector both[] = {t1, t2};
    CHECK(merge_task_arithmetic(zero, both, 0.3).at("embed.cls")[0] == doctest::Approx(1.2).epsilon(1e-15));

    const auto mlp_only = merge_task_arithmetic(f.base, f.tvs, 0.3, params_tagged({ModuleTag::MLP}));
    CHECK(mlp_only.at(block_param(0, "att.wq")).identical(f.base.at(block_param(0, "att.wq"))));
    CHECK_FALSE(mlp_only.at(block_param(0, "mlp.w0")).identical(f.base.at(block_param(0, "mlp.w0"))));
    CHECK_THROWS_AS(merge_task_arithmetic(f.base, f.tvs, -0.1), ContractError);
}

TEST_CASE("router init and forward") {
    PrecisionScope f64(Precision::F64);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    std::vector<double> hv(5 * 6);
    for (auto & x : hv) x = nd(rng);
    const Tensor h({5, 6}, hv);

    RouterInit init;
    const auto r0 = init_router(4, 6, 0, init, 1);
    const auto y0 = router_forward(r0, h);
    for (double v : y0.data()) CHECK(v == 0.3);

    RouterInit zero = init;
    zero.zero_weights = true;
    const auto r2z = init_router(4, 6, 2, zero, 1);
    const auto y2z = router_forward(r2z, h);
    for (double v : y2z.data()) CHECK(v == 0.3);

    CHECK(init_router(4, 6, 2, init, 9).w0.identical(init_router(4, 6, 2, init, 9).w0));
    CHECK_THROWS_AS(init_router(4, 6, 3, init, 1), ContractError);

    // W1 = 0 -> every row equals b1
    auto r2 = init_router(4, 6, 2, init, 2);
    r2.w1 = Tensor::zeros(r2.w1.shape());
    r2.b1 = Tensor::vector({0.1, -0.2, 0.3, 0.4});
    const auto y = router_forward(r2, h);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(y.at(i, j) == r2.b1[j]);

    // two-matmul oracle
    const auto r = init_router(4, 6, 2, init, 3);
    const auto got = router_forward(r, h);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = r.b1[j];
            for (std::size_t k = 0; k < 6; ++k) {
                double hid = r.b0[k];
                for (std::size_t e = 0; e < 6; ++e) hid += h.at(i, e) * r.w0.at(e, k);
                acc += std::max(hid, 0.0) * r.w1.at(k, j);
            }
            CHECK(std::abs(got.at(i, j) - acc) < 1e-6);
        }

    // init statistics: variance 0.01
    const auto big = init_router(8, 400, 2, init, 4);
    double ss = 0;
    for (double v : big.w0.data()) ss += v * v;
    CHECK(std::sqrt(ss / big.w0.size()) == doctest::Approx(0.1).epsilon(0.02));
    CHECK(big.b0.identical(Tensor::zeros({400})));
    CHECK(big.b1.identical(Tensor::full({8}, 0.3)));
    const auto r1 = init_router(8, 10, 1, init, 4);
    CHECK(r1.b0.identical(Tensor::full({8}, 0.3)));
}

TEST_CASE("depth-0 routing weights are invariant to hidden-state scaling") {
    PrecisionScope f64(Precision::F64);
    const auto r = init_router(3, 4, 0, RouterInit{}, 1);
    Tape t;
    auto rv = bind_router(t, r, false);
    auto h = t.constant(Tensor::matrix({{1, 2, 3, 4}, {-1, 0, 2, 5}}));
    auto a = routing_weights(rv, h);
    auto b = routing_weights(rv, ad::scale(h, 7.5));
    CHECK(a.value().identical(b.value()));
    const auto r2 = init_router(3, 4, 2, RouterInit{}, 1);
    auto rv2 = bind_router(t, r2, false);
    CHECK_FALSE(routing_weights(rv2, h).value().identical(routing_weights(rv2, ad::scale(h, 7.5)).value()));
}

TEST_CASE("module counts per strategy") {
    PrecisionScope f64(Precision::F64);
    Fixture f(2);
    for (auto [s, expect] : {std::pair{UpscaleStrategy::MlpOnly, 2}, std::pair{UpscaleStrategy::AttAndMlpSeparately, 4},
                             std::pair{UpscaleStrategy::EntireBlock, 2}}) {
        UpscaleConfig cfg;
        cfg.strategy = s;
        const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
        CHECK(m.modules.size() == static_cast<std::size_t>(expect));
        CHECK(m.routers.size() == static_cast<std::size_t>(expect));
        cfg.shared_router = true;
        CHECK(upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg).routers.size() == 1);
    }
    UpscaleConfig bad;
    bad.rho = 1.0;
    CHECK_THROWS_AS(upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, bad), ContractError);
    CHECK_THROWS_AS(upscale_to_wemoe(f.config, f.base, std::span<const TaskVector>{}, f.heads, UpscaleConfig{}),
                    ContractError);
}

TEST_CASE("mlp-only leaves attention identical to the static merge") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, UpscaleConfig{});
    const auto ta = merge_task_arithmetic(f.base, f.tvs, 0.3);
    for (const auto & n : ta.select(ModuleTag::Attention)) CHECK(m.static_tree.at(n).identical(ta.at(n)));
    for (const auto & n : ta.select(ModuleTag::LayerNorm)) CHECK(m.static_tree.at(n).identical(ta.at(n)));
    CHECK_FALSE(m.static_tree.contains(block_param(0, "mlp.w0")));
}

TEST_CASE("init equivalence with task arithmetic") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    const auto ta = merge_task_arithmetic(f.base, f.tvs, 0.3);
    for (int depth : {0, 2}) {
        for (auto strategy : {UpscaleStrategy::MlpOnly, UpscaleStrategy::AttAndMlpSeparately,
                              UpscaleStrategy::EntireBlock}) {
            UpscaleConfig cfg;
            cfg.l_fc = depth;
            cfg.strategy = strategy;
            cfg.router.zero_weights = true;
            const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
            for (std::uint64_t s = 0; s < 5; ++s) {
                const auto img = random_image(f.config, s);
                const auto a = merged_logits(m, img, f.heads[s % 3]);
                const auto b = static_logits(f.config, ta, img, f.heads[s % 3]);
                CHECK(max_rel_diff(a, b) < 1e-12);
            }
        }
    }
}

TEST_CASE("single expert at lambda one reproduces the expert") {
    PrecisionScope f64(Precision::F64);
    Fixture f(1);
    UpscaleConfig cfg;
    cfg.lambda = 1.0;
    cfg.router.zero_weights = true;
    const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto img = random_image(f.config, s);
        CHECK(max_rel_diff(merged_logits(m, img, f.heads[0]), static_logits(f.config, f.experts[0], img, f.heads[0])) <
              1e-5);
    }
}

TEST_CASE("wemoe_mlp_forward examples") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, UpscaleConfig{});
    const auto & mod = m.modules[1];
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::vector<double> hv(f.config.tokens() * f.config.d_model);
    for (auto & x : hv) x = nd(rng);
    const Tensor h0({f.config.tokens(), f.config.d_model}, hv);
    const auto lng = m.static_tree.at(block_param(1, "ln2.gamma"));
    const auto lnb = m.static_tree.at(block_param(1, "ln2.beta"));

    auto run = [&](const WEMoEModule & module, const RouterParams & router, ExecPath path) {
        Tape t;
        return wemoe_mlp_forward(f.config, module, bind_router(t, router, false), t.constant(h0), t.constant(lng),
                                 t.constant(lnb), path)
            .h.value();
    };
    auto plain = [&](const ParamTree & p) {
        ParamTree q = p;
        q.set(block_param(1, "ln2.gamma"), lng);
        q.set(block_param(1, "ln2.beta"), lnb);
        Tape t;
        return mlp_forward(f.config, t.constant(h0), bind_mlp(t, q, 1)).value();
    };

    SUBCASE("zero dictionary equals the pre-trained MLP") {
        WEMoEModule z = mod;
        for (auto & col : z.dense)
            for (auto & [n, t] : col) t = Tensor::zeros(t.shape());
        CHECK(max_abs_diff(run(z, m.routers[1], ExecPath::Materialized), plain(f.base)) == 0.0);
    }
    SUBCASE("constant lambda equals the statically merged MLP") {
        RouterInit zi;
        zi.zero_weights = true;
        const auto r = init_router(3, f.config.d_model, 2, zi, 0);
        const auto ta = merge_task_arithmetic(f.base, f.tvs, 0.3);
        CHECK(max_abs_diff(run(mod, r, ExecPath::Materialized), plain(ta)) < 1e-14);
    }
    SUBCASE("materialized and decomposed paths agree") {
        const auto a = run(mod, m.routers[1], ExecPath::Materialized);
        const auto b = run(mod, m.routers[1], ExecPath::Decomposed);
        CHECK(max_rel_diff(a, b) < 1e-5);
    }
}

TEST_CASE("sparse dictionaries") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    UpscaleConfig dense_cfg;
    dense_cfg.shared_router = true;
    const auto dense = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, dense_cfg);

    // rho = 0 pruning gives the same dictionary in sparse form
    MergedModel sparse0 = dense;
    for (auto & m : sparse0.modules) {
        for (const auto & col : m.dense) m.sparse.push_back(prune_tensors(col, 0.0));
        m.dense.clear();
    }
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto img = random_image(f.config, 20 + s);
        CHECK(max_abs_diff(merged_logits(sparse0, img, f.heads[0]), merged_logits(dense, img, f.heads[0])) < 1e-6);
    }

    for (double rho : {0.5, 0.9, 0.99}) {
        UpscaleConfig cfg = dense_cfg;
        cfg.rho = rho;
        const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
        CHECK(m.modules[0].is_sparse());
        for (std::uint64_t s = 0; s < 3; ++s) {
            const auto img = random_image(f.config, 30 + s);
            const auto a = merged_logits(m, img, f.heads[1], ExecPath::Materialized);
            const auto b = merged_logits(m, img, f.heads[1], ExecPath::Decomposed);
            CHECK(max_rel_diff(a, b) < 1e-5);
            CHECK(a.all_finite());
        }
    }
}

TEST_CASE("shared router gradient accumulates over layers") {
    PrecisionScope f64(Precision::F64);
    Fixture f(2);
    UpscaleConfig cfg;
    cfg.shared_router = true;
    cfg.rho = 0.5;
    const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
    const auto img = random_image(f.config, 7);

    // d loss / d b1 through the shared router
    Tape t;
    auto routers = bind_routers(t, m, true);
    auto fwd = merged_encode(t, m, routers, img);
    auto loss = ad::entropy_mean(ad::softmax_lastdim(
        classify(fwd.features, t.constant(f.heads[0].weight), t.constant(f.heads[0].bias))));
    const auto g = t.backward(loss).of(routers.routers[0].b1);

    // per-layer partials: perturb lambda of one layer at a time by the same offset
    auto loss_with = [&](std::size_t layer, const Tensor & offset) {
        MergedModel q = m;
        q.shared_router = false;
        q.routers.assign(m.modules.size(), m.routers[0]);
        for (std::size_t i = 0; i < q.modules.size(); ++i) q.modules[i].router = i;
        auto b = q.routers[layer].b1.to_vector();
        for (std::size_t j = 0; j < b.size(); ++j) b[j] += offset[j];
        q.routers[layer].b1 = Tensor(q.routers[layer].b1.shape(), b);
        Tape u;
        auto r = bind_routers(u, q, false);
        auto fw = merged_encode(u, q, r, img);
        return ad::entropy_mean(ad::softmax_lastdim(
                                    classify(fw.features, u.constant(f.heads[0].weight), u.constant(f.heads[0].bias))))
            .value()
            .item();
    };
    std::vector<double> summed(2, 0.0);
    for (std::size_t l = 0; l < m.modules.size(); ++l) {
        const auto fd = ad::finite_diff_grad([&](const Tensor & off) { return loss_with(l, off); }, Tensor::zeros({2}),
                                             1e-6);
        for (std::size_t j = 0; j < 2; ++j) summed[j] += fd[j];
    }
    CHECK(max_rel_diff(g, Tensor({2}, summed), 1e-6) < 1e-4);
}

TEST_CASE("parameter counts against published ViT-B/32 tables") {
    // per-block MLP size
    const auto c = ViTConfig::vitb32_dims();
    CHECK(2 * 768 * 3072 + 3072 + 768 == 4722432);

    const auto wemoe8 = count_parameters(ParameterCountRequest::vitb32(8, 2, 0.0, false));
    CHECK(millions(wemoe8.trainable) == doctest::Approx(7.16));
    CHECK(millions(wemoe8.total) == doctest::Approx(573.96));
    CHECK(std::round(wemoe8.ratio() * 10000) / 100 == doctest::Approx(1.25));

    const auto e8 = count_parameters(ParameterCountRequest::vitb32(8, 2, 0.9, true));
    CHECK(std::abs(static_cast<double>(e8.trainable) / 1e6 - 0.59) <= 0.01);
    CHECK(millions(e8.total) == doctest::Approx(159.38));
    CHECK(std::round(e8.ratio() * 10000) / 100 == doctest::Approx(0.37));

    CHECK(count_parameters(ParameterCountRequest::vitb32(8, 1, 0.0, false)).trainable == 73824);  // 73.8K
    CHECK(count_parameters(ParameterCountRequest::vitb32(8, 1, 0.9, true)).trainable == 6152);    // 6.15K
    CHECK(count_parameters(ParameterCountRequest::vitb32(8, 0, 0.0, false)).trainable == 96);
    CHECK(millions(count_parameters(ParameterCountRequest::vitb32(8, 0, 0.0, false)).total) == doctest::Approx(566.80));

    const double wemoe_totals[] = {233.89, 290.57, 347.25, 403.93, 460.61, 517.28, 573.96};
    const double wemoe_trainable[] = {7.11, 7.11, 7.12, 7.13, 7.14, 7.15, 7.16};
    const double ewemoe_totals[] = {125.37, 131.04, 136.71, 142.38, 148.04, 153.71, 159.38};
    for (std::size_t n = 2; n <= 8; ++n) {
        const auto w = count_parameters(ParameterCountRequest::vitb32(n, 2, 0.0, false));
        CHECK(millions(w.total) == doctest::Approx(wemoe_totals[n - 2]));
        CHECK(millions(w.trainable) == doctest::Approx(wemoe_trainable[n - 2]));
        const auto e = count_parameters(ParameterCountRequest::vitb32(n, 2, 0.9, true));
        // the table mixes rounding modes (6 tasks: 148.045 printed as 148.04); compare at +-0.01M
        CHECK(std::abs(static_cast<double>(e.total) / 1e6 - ewemoe_totals[n - 2]) <= 0.01);
    }
    // the merged-model delta over the single pre-trained model is n·L·|mlp| plus routers
    const auto single = encoder_parameter_count(c) + ParameterCountRequest::vitb32(1, 2, 0, false).frozen_extra;
    CHECK(millions(single) == doctest::Approx(113.45));
    CHECK(wemoe8.total - single - wemoe8.trainable == 8u * 12u * 4722432u);
}

TEST_CASE("analytic count matches a built model") {
    PrecisionScope f64(Precision::F64);
    Fixture f(3);
    for (auto strategy : {UpscaleStrategy::MlpOnly, UpscaleStrategy::AttAndMlpSeparately, UpscaleStrategy::EntireBlock}) {
        for (double rho : {0.0, 0.9}) {
            for (int depth : {0, 1, 2}) {
                UpscaleConfig cfg;
                cfg.strategy = strategy;
                cfg.rho = rho;
                cfg.l_fc = depth;
                cfg.shared_router = rho > 0;
                const auto m = upscale_to_wemoe(f.config, f.base, f.tvs, f.heads, cfg);
                ParameterCountRequest req;
                req.arch = f.config;
                req.n_tasks = 3;
                req.l_fc = depth;
                req.rho = rho;
                req.shared_router = cfg.shared_router;
                req.strategy = strategy;
                const auto a = count_parameters(req);
                const auto b = count_parameters(m);
                CHECK(a.total == b.total);
                CHECK(a.trainable == b.trainable);
            }
        }
    }
}
