#include "doctest.h"

#include "wemoe/taskvec.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace wemoe;

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

// Single-tensor MLP group for block 0 holding the given values.
TaskVector mlp_values(std::vector<double> vals) {
    TaskVector tv;
    const auto n = vals.size();
    tv.tree.set(block_param(0, "mlp.w0"), Tensor({n}, std::move(vals)));
    return tv;
}

} // namespace

TEST_CASE("compute_task_vector examples") {
    PrecisionScope f64(Precision::F64);
    const auto base = init_vit(tiny(), 1);
    const auto ft = perturbed(base, 2, 0.01);

    const auto zero = compute_task_vector(base, base);
    for (const auto & [n, t] : zero.tree)
        for (double v : t.data()) CHECK(v == 0.0);

    const auto tv = compute_task_vector(ft, base, 3);
    CHECK(tv.task_id == 3);
    CHECK(apply_task_vector(base, tv).identical(ft));

    for (const auto & [n, t] : tv.tree) {
        const auto a = ft.at(n).data(), b = base.at(n).data();
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == a[i] - b[i]);
    }
}

TEST_CASE("structural mismatch names the tensor") {
    const auto base = init_vit(tiny(), 1);
    ParamTree other = base;
    other.set(block_param(1, "mlp.b0"), Tensor::zeros({3}));
    try {
        compute_task_vector(other, base);
        FAIL("expected StructureError");
    } catch (const StructureError & e) {
        CHECK(e.key() == block_param(1, "mlp.b0"));
    }
}

TEST_CASE("l2_module_distance examples") {
    PrecisionScope f64(Precision::F64);
    const auto base = init_vit(tiny(), 1);
    CHECK(l2_module_distance(base, base, ModuleTag::MLP, 0) == 0.0);

    TaskVector tv;
    tv.tree.set(block_param(0, "mlp.b1"), Tensor::vector({3, 4}));
    CHECK(l2_module_distance(tv, ModuleTag::MLP, 0) == 25.0);
    CHECK_THROWS_AS(l2_module_distance(tv, ModuleTag::Attention, 0), ContractError);

    const auto ft = perturbed(base, 5, 0.1);
    const auto full = compute_task_vector(ft, base);
    double flat = 0.0;
    for (const auto & n : full.tree.select(ModuleTag::MLP, 1))
        for (double v : full.tree.at(n).data()) flat += v * v;
    CHECK(l2_module_distance(ft, base, ModuleTag::MLP, 1) == flat);
}

TEST_CASE("module distances reconcile with the full task vector norm") {
    PrecisionScope f64(Precision::F64);
    const auto c = tiny();
    const auto base = init_vit(c, 1);
    const auto tv = compute_task_vector(perturbed(base, 7, 0.05), base);
    double total = 0.0;
    for (const auto & [n, t] : tv.tree)
        for (double v : t.data()) total += v * v;
    double parts = 0.0;
    for (std::size_t l = 0; l < c.n_blocks; ++l)
        for (auto tag : {ModuleTag::Attention, ModuleTag::LayerNorm, ModuleTag::MLP})
            parts += l2_module_distance(tv, tag, l);
    for (const auto & n : tv.tree.names())
        if (!ParamTree::layer_of(n))
            for (double v : tv.tree.at(n).data()) parts += v * v;
    CHECK(std::abs(parts - total) <= 1e-6 * total);
}

TEST_CASE("magnitude quantiles") {
    PrecisionScope f64(Precision::F64);
    const double qs[] = {0.1, 0.5, 0.9};
    auto eq = magnitude_quantiles(mlp_values({-0.7, 0.7, 0.7, -0.7}), 0, qs);
    for (double v : eq) CHECK(v == doctest::Approx(0.7));
    const double half[] = {0.5};
    CHECK(magnitude_quantiles(mlp_values({1, -2, 3, 4}), 0, half)[0] == doctest::Approx(2.5));
    const double bad[] = {1.0};
    CHECK_THROWS_AS(magnitude_quantiles(mlp_values({1}), 0, bad), ContractError);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::vector<double> v(200);
    for (auto & x : v) x = nd(rng);
    const double grid[] = {0.05, 0.2, 0.25, 0.5, 0.51, 0.75, 0.99};
    auto r = magnitude_quantiles(mlp_values(v), 0, grid);
    CHECK(std::is_sorted(r.begin(), r.end()));
}

TEST_CASE("kept count rounding") {
    CHECK(kept_count(4, 0.5) == 2);
    CHECK(kept_count(4, 0.75) == 1);
    CHECK(kept_count(5, 0.9) == 1); // 0.5 rounds up
    CHECK(kept_count(4722432, 0.9) == 472243);
    CHECK(kept_count(10, 0.0) == 10);
    CHECK_THROWS_AS(kept_count(10, 1.0), ContractError);
}

TEST_CASE("prune_task_vector examples") {
    PrecisionScope f64(Precision::F64);
    const auto tv = mlp_values({0.1, -0.2, 0.05, 0.3});
    const auto name = block_param(0, "mlp.w0");

    auto half = prune_task_vector(tv, 0, 0.5);
    CHECK(half.tensors.at(name).indices == std::vector<std::uint32_t>{1, 3});
    CHECK(half.tensors.at(name).values == std::vector<double>{-0.2, 0.3});

    auto quarter = prune_task_vector(tv, 0, 0.75);
    CHECK(quarter.nnz() == 1);
    CHECK(quarter.tensors.at(name).values[0] == 0.3);

    auto dense = prune_task_vector(tv, 0, 0.0);
    CHECK(dense.tensors.at(name).to_dense().identical(tv.tree.at(name)));

    // ties: the lower flat index wins
    auto ties = prune_task_vector(mlp_values({0.5, -0.5, 0.5, 0.1}), 0, 0.5);
    CHECK(ties.tensors.at(name).indices == std::vector<std::uint32_t>{0, 1});
}

TEST_CASE("pruning is joint across the module's tensors") {
    PrecisionScope f64(Precision::F64);
    TaskVector tv;
    tv.tree.set(block_param(0, "mlp.w0"), Tensor::vector({0.01, 0.02}));
    tv.tree.set(block_param(0, "mlp.b0"), Tensor::vector({0.9, 0.8}));
    auto joint = prune_task_vector(tv, 0, 0.5);
    CHECK(joint.tensors.at(block_param(0, "mlp.w0")).nnz() == 0);
    CHECK(joint.tensors.at(block_param(0, "mlp.b0")).nnz() == 2);
    auto per = prune_task_vector(tv, 0, 0.5, PruneGrouping::PerTensor);
    CHECK(per.tensors.at(block_param(0, "mlp.w0")).nnz() == 1);
    CHECK(per.tensors.at(block_param(0, "mlp.b0")).nnz() == 1);
}

TEST_CASE("pruning properties on random task vectors") {
    PrecisionScope f64(Precision::F64);
    const auto c = tiny();
    const auto base = init_vit(c, 1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto tv = compute_task_vector(perturbed(base, 100 + seed, 0.01), base);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.0, 0.99);
        double r1 = u(rng), r2 = u(rng);
        if (r1 > r2) std::swap(r1, r2);
        const auto a = prune_task_vector(tv, 1, r1);
        const auto b = prune_task_vector(tv, 1, r2);
        std::size_t total = 0;
        for (const auto & n : tv.tree.select(ModuleTag::MLP, 1)) total += tv.tree.at(n).size();
        CHECK(a.nnz() == kept_count(total, r1));
        for (const auto & [n, s] : b.tensors) {
            s.validate();
            const auto & sa = a.tensors.at(n);
            // nested: kept at r2 is a subset of kept at r1
            CHECK(std::includes(sa.indices.begin(), sa.indices.end(), s.indices.begin(), s.indices.end()));
            // round trip: nonzero positions are exactly the kept indices with source values
            const auto dense = s.to_dense();
            const auto src = tv.tree.at(n);
            std::size_t e = 0;
            for (std::size_t i = 0; i < dense.size(); ++i) {
                if (e < s.nnz() && s.indices[e] == i) {
                    CHECK(dense[i] == src[i]);
                    ++e;
                } else {
                    CHECK(dense[i] == 0.0);
                }
            }
        }
        // minimum kept magnitude dominates every dropped magnitude
        double min_kept = 1e300, max_dropped = 0.0;
        for (const auto & [n, s] : b.tensors) {
            const auto src = tv.tree.at(n);
            std::vector<bool> kept(src.size(), false);
            for (auto i : s.indices) kept[i] = true;
            for (std::size_t i = 0; i < src.size(); ++i) {
                if (kept[i]) min_kept = std::min(min_kept, std::abs(src[i]));
                else max_dropped = std::max(max_dropped, std::abs(src[i]));
            }
        }
        CHECK(min_kept >= max_dropped);
    }
}

TEST_CASE("sparse_axpy") {
    PrecisionScope f64(Precision::F64);
    const auto dest = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    SparseTensor s{{2, 3}, {0, 4, 5}, {0.5, -1.25, 2.0}};
    CHECK(sparse_axpy(dest, 0.0, s).identical(dest));
    CHECK(sparse_axpy(dest, 3.0, SparseTensor{{2, 3}, {}, {}}).identical(dest));

    const auto got = sparse_axpy(dest, 0.7, s);
    const auto dense = s.to_dense();
    for (std::size_t i = 0; i < dest.size(); ++i) CHECK(std::abs(got[i] - (dest[i] + 0.7 * dense[i])) < 1e-7);

    CHECK_THROWS_AS(sparse_axpy(dest, 1.0, SparseTensor{{2, 3}, {6}, {1.0}}), ContractError);
    CHECK_THROWS_AS(sparse_axpy(dest, 1.0, SparseTensor{{3, 2}, {0}, {1.0}}), ShapeError);
}
