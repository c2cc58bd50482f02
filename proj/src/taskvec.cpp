#include "wemoe/taskvec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wemoe {

std::size_t SparseTaskVector::nnz() const {
    std::size_t n = 0;
    for (const auto & [k, s] : tensors) n += s.nnz();
    return n;
}

TaskVector compute_task_vector(const ParamTree & theta_i, const ParamTree & theta_0, int task_id) {
    theta_i.require_same_structure(theta_0);
    TaskVector tv;
    tv.task_id = task_id;
    for (const auto & [name, ti] : theta_i) {
        const auto a = ti.data();
        const auto b = theta_0.at(name).data();
        std::vector<double> d(a.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
        tv.tree.set(name, Tensor(ti.shape(), std::move(d)));
    }
    return tv;
}

ParamTree apply_task_vector(const ParamTree & theta_0, const TaskVector & tv, double coeff) {
    theta_0.require_same_structure(tv.tree);
    ParamTree out;
    for (const auto & [name, base] : theta_0) {
        auto d = base.to_vector();
        const auto delta = tv.tree.at(name).data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += coeff * delta[i];
        out.set(name, Tensor(base.shape(), std::move(d)));
    }
    return out;
}

double l2_module_distance(const TaskVector & tv, ModuleTag tag, std::size_t layer) {
    const auto names = tv.tree.select(tag, layer);
    if (names.empty()) {
        throw ContractError(std::string("no ") + tag_name(tag) + " tensors in block " + std::to_string(layer));
    }
    double s = 0.0;
    for (const auto & n : names)
        for (double v : tv.tree.at(n).data()) s += v * v;
    return s;
}

double l2_module_distance(const ParamTree & theta_i, const ParamTree & theta_0, ModuleTag tag, std::size_t layer) {
    return l2_module_distance(compute_task_vector(theta_i, theta_0), tag, layer);
}

std::vector<double> quantiles(std::vector<double> values, std::span<const double> qs) {
    if (values.empty()) throw ContractError("quantiles of an empty selection");
    std::sort(values.begin(), values.end());
    std::vector<double> out;
    out.reserve(qs.size());
    for (double q : qs) {
        if (!(q >= 0.0 && q <= 1.0)) throw ContractError("quantile outside [0, 1]");
        const double pos = q * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        out.push_back(values[lo] + (values[hi] - values[lo]) * frac);
    }
    return out;
}

std::vector<double> magnitude_quantiles(const TaskVector & tv, std::size_t layer, std::span<const double> qs,
                                        ModuleTag tag) {
    for (double q : qs) {
        if (!(q > 0.0 && q < 1.0)) throw ContractError("magnitude quantiles must lie in (0, 1)");
    }
    std::vector<double> mags;
    for (const auto & n : tv.tree.select(tag, layer))
        for (double v : tv.tree.at(n).data()) mags.push_back(std::abs(v));
    if (mags.empty()) throw ContractError("magnitude_quantiles: empty selection");
    return quantiles(std::move(mags), qs);
}

std::size_t kept_count(std::size_t total, double rho) {
    if (!(rho >= 0.0 && rho < 1.0)) throw ContractError("sparsity ratio must lie in [0, 1)");
    return static_cast<std::size_t>(std::floor((1.0 - rho) * static_cast<double>(total) + 0.5 + 1e-9));
}

namespace {

struct FlatRef {
    const std::string * name;
    std::uint32_t index;
    double value;
};

void select_top(std::vector<FlatRef> & refs, std::size_t keep, std::map<std::string, SparseTensor> & out) {
    // refs arrive in (name, index) order, so position breaks magnitude ties toward the lower flat index
    std::vector<std::size_t> order(refs.size());
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(refs[a].value), mb = std::abs(refs[b].value);
        return ma != mb ? ma > mb : a < b;
    };
    if (keep < order.size()) {
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
        order.resize(keep);
    }
    std::sort(order.begin(), order.end());
    for (auto i : order) {
        auto & s = out.at(*refs[i].name);
        s.indices.push_back(refs[i].index);
        s.values.push_back(refs[i].value);
    }
}

} // namespace

std::map<std::string, SparseTensor> prune_tensors(const std::map<std::string, Tensor> & group, double rho,
                                                  PruneGrouping grouping) {
    std::map<std::string, SparseTensor> out;
    std::vector<FlatRef> refs;
    for (const auto & [name, t] : group) {
        out.emplace(name, SparseTensor{t.shape(), {}, {}});
        if (grouping == PruneGrouping::PerTensor) refs.clear();
        const auto d = t.data();
        for (std::size_t i = 0; i < d.size(); ++i) refs.push_back({&name, static_cast<std::uint32_t>(i), d[i]});
        if (grouping == PruneGrouping::PerTensor) select_top(refs, kept_count(refs.size(), rho), out);
    }
    if (grouping == PruneGrouping::Module) select_top(refs, kept_count(refs.size(), rho), out);
    return out;
}

SparseTaskVector prune_task_vector(const TaskVector & tv, std::size_t layer, double rho, PruneGrouping grouping,
                                   ModuleTag tag) {
    std::map<std::string, Tensor> group;
    for (const auto & n : tv.tree.select(tag, layer)) group.emplace(n, tv.tree.at(n));
    if (group.empty()) {
        throw ContractError(std::string("no ") + tag_name(tag) + " tensors in block " + std::to_string(layer));
    }
    SparseTaskVector sv;
    sv.task_id = tv.task_id;
    sv.layer = layer;
    sv.rho = rho;
    sv.tensors = prune_tensors(group, rho, grouping);
    return sv;
}

Tensor sparse_axpy(const Tensor & dest, double coeff, const SparseTensor & sv) {
    if (sv.dense_shape != dest.shape()) {
        throw ShapeError("sparse_axpy: record shape " + shape_str(sv.dense_shape) + " vs destination " +
                         shape_str(dest.shape()));
    }
    sv.validate();
    auto d = dest.to_vector();
    for (std::size_t e = 0; e < sv.nnz(); ++e) d[sv.indices[e]] += coeff * sv.values[e];
    return Tensor(dest.shape(), std::move(d));
}

} // namespace wemoe
