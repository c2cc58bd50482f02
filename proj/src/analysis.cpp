#include "wemoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace wemoe {

namespace {

constexpr ModuleTag kBlockTags[] = {ModuleTag::Attention, ModuleTag::LayerNorm, ModuleTag::MLP};

std::size_t block_count(const ParamTree & tree) {
    std::size_t n = 0;
    for (const auto & [name, t] : tree)
        if (auto l = ParamTree::layer_of(name)) n = std::max(n, *l + 1);
    return n;
}

WeightSummary summarize(std::vector<double> v) {
    static constexpr double qs[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    const auto q = quantiles(std::move(v), qs);
    return {mean, q[0], q[1], q[2], q[3], q[4]};
}

void check_datasets(const MergedModel & model, const std::vector<std::vector<Tensor>> & datasets) {
    if (datasets.size() != model.tasks())
        throw ContractError("analysis: " + std::to_string(datasets.size()) + " datasets for a model of " +
                            std::to_string(model.tasks()) + " tasks");
    if (model.routers.empty()) throw ContractError("analysis: model has no routers");
}

} // namespace

double DriftReport::at(std::size_t layer, ModuleTag module) const {
    for (const auto & r : rows)
        if (r.layer == layer && r.module == module) return r.mean_sq_l2;
    throw ContractError(std::string("drift report has no ") + tag_name(module) + " entry for block " +
                        std::to_string(layer));
}

std::size_t DriftReport::layers() const {
    std::size_t n = 0;
    for (const auto & r : rows) n = std::max(n, r.layer + 1);
    return n;
}

std::size_t DriftReport::mlp_exceeds_attention() const {
    std::size_t k = 0;
    for (std::size_t l = 0; l < layers(); ++l)
        if (at(l, ModuleTag::MLP) > at(l, ModuleTag::Attention)) ++k;
    return k;
}

DriftReport drift_report(const ParamTree & theta_0, const std::vector<ParamTree> & experts) {
    if (experts.empty()) throw ContractError("drift_report needs at least one expert");
    std::vector<TaskVector> tvs;
    for (const auto & e : experts) tvs.push_back(compute_task_vector(e, theta_0));
    DriftReport rep;
    const auto inv = 1.0 / static_cast<double>(experts.size());
    for (std::size_t l = 0; l < block_count(theta_0); ++l) {
        for (auto tag : kBlockTags) {
            double s = 0.0;
            for (const auto & tv : tvs) s += l2_module_distance(tv, tag, l);
            rep.rows.push_back({l, tag, s * inv});
        }
    }
    return rep;
}

void write_drift_csv(std::ostream & os, const DriftReport & report) {
    const auto old = os.precision(12);
    os << "layer,module,mean_sq_l2\n";
    for (const auto & r : report.rows) os << r.layer << ',' << tag_name(r.module) << ',' << r.mean_sq_l2 << '\n';
    os.precision(old);
}

std::vector<MagnitudeRow> magnitude_table(const std::vector<TaskVector> & tvs, ModuleTag tag) {
    static constexpr double qs[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<MagnitudeRow> out;
    for (std::size_t t = 0; t < tvs.size(); ++t) {
        for (std::size_t l = 0; l < block_count(tvs[t].tree); ++l) {
            std::vector<double> mags;
            for (const auto & n : tvs[t].tree.select(tag, l))
                for (double v : tvs[t].tree.at(n).data()) mags.push_back(std::abs(v));
            if (mags.empty()) continue;
            const auto q = quantiles(std::move(mags), qs);
            out.push_back({t, l, q[0], q[1], q[2], q[3], q[4]});
        }
    }
    return out;
}

void write_magnitude_csv(std::ostream & os, const std::vector<MagnitudeRow> & rows) {
    const auto old = os.precision(10);
    os << "task,layer,min,q25,median,q75,max\n";
    for (const auto & r : rows)
        os << r.task << ',' << r.layer << ',' << r.min << ',' << r.q25 << ',' << r.median << ',' << r.q75 << ','
           << r.max << '\n';
    os.precision(old);
}

std::vector<std::vector<Tensor>> collect_routing(const MergedModel & model,
                                                 const std::vector<std::vector<Tensor>> & datasets) {
    check_datasets(model, datasets);
    std::vector<std::vector<Tensor>> out(datasets.size());
    for (std::size_t t = 0; t < datasets.size(); ++t)
        for (const auto & img : datasets[t]) out[t].push_back(merged_routing(model, img));
    return out;
}

RoutingDistribution routing_distribution(const MergedModel & model, const std::vector<std::vector<Tensor>> & datasets,
                                         const std::vector<std::size_t> & modules) {
    check_datasets(model, datasets);
    for (auto m : modules)
        if (m >= model.modules.size())
            throw ContractError("routing_distribution: module " + std::to_string(m) + " out of range (model has " +
                                std::to_string(model.modules.size()) + ")");
    const auto raw = collect_routing(model, datasets);
    const std::size_t n = model.tasks();
    RoutingDistribution d;
    d.modules = modules;
    for (auto m : modules) {
        auto & per_task = d.stats.emplace_back();
        for (std::size_t t = 0; t < raw.size(); ++t) {
            if (raw[t].empty()) throw DataError("routing_distribution: no samples for task " + std::to_string(t));
            auto & comps = per_task.emplace_back();
            for (std::size_t c = 0; c < n; ++c) {
                std::vector<double> v;
                for (const auto & lam : raw[t]) v.push_back(lam.at(m, c));
                comps.push_back(summarize(std::move(v)));
            }
        }
    }
    return d;
}

void write_routing_csv(std::ostream & os, const RoutingDistribution & dist) {
    const auto old = os.precision(10);
    os << "layer,task,component,mean,min,q25,median,q75,max\n";
    for (std::size_t i = 0; i < dist.modules.size(); ++i)
        for (std::size_t t = 0; t < dist.stats[i].size(); ++t)
            for (std::size_t c = 0; c < dist.stats[i][t].size(); ++c) {
                const auto & s = dist.stats[i][t][c];
                os << dist.modules[i] << ',' << t << ',' << c << ',' << s.mean << ',' << s.min << ',' << s.q25 << ','
                   << s.median << ',' << s.q75 << ',' << s.max << '\n';
            }
    os.precision(old);
}

double FirstChoiceMatrix::share(std::size_t task, std::size_t module, std::size_t choice) const {
    if (task >= tasks || module >= modules || choice >= tasks) throw ContractError("first-choice index out of range");
    return shares[(task * modules + module) * tasks + choice];
}

FirstChoiceMatrix first_choice_matrix(const std::vector<std::vector<Tensor>> & routing) {
    FirstChoiceMatrix m;
    m.tasks = routing.size();
    if (m.tasks == 0) return m;
    for (const auto & r : routing)
        if (!r.empty()) {
            m.modules = r.front().rows();
            break;
        }
    m.shares.assign(m.tasks * m.modules * m.tasks, 0.0);
    m.ties.assign(m.tasks * m.modules, 0);
    for (std::size_t t = 0; t < m.tasks; ++t) {
        m.samples.push_back(routing[t].size());
        if (routing[t].empty()) continue;
        std::vector<std::size_t> counts(m.modules * m.tasks, 0);
        for (const auto & lam : routing[t]) {
            if (lam.rows() != m.modules || lam.cols() != m.tasks)
                throw ShapeError("first_choice_matrix: routing weights " + shape_str(lam.shape()) + ", expected [" +
                                 std::to_string(m.modules) + " x " + std::to_string(m.tasks) + "]");
            for (std::size_t l = 0; l < m.modules; ++l) {
                std::size_t best = 0;
                bool tie = false;
                for (std::size_t c = 1; c < m.tasks; ++c) {
                    if (lam.at(l, c) > lam.at(l, best)) {
                        best = c;
                        tie = false;
                    } else if (lam.at(l, c) == lam.at(l, best)) {
                        tie = true;
                    }
                }
                ++counts[l * m.tasks + best];
                if (tie) ++m.ties[t * m.modules + l];
            }
        }
        const auto n = static_cast<double>(routing[t].size());
        for (std::size_t k = 0; k < counts.size(); ++k)
            m.shares[t * m.modules * m.tasks + k] = static_cast<double>(counts[k]) / n;
    }
    return m;
}

FirstChoiceMatrix first_choice_matrix(const MergedModel & model, const std::vector<std::vector<Tensor>> & datasets) {
    return first_choice_matrix(collect_routing(model, datasets));
}

void write_first_choice_csv(std::ostream & os, const FirstChoiceMatrix & m) {
    const auto old = os.precision(10);
    os << "task,layer,choice,share\n";
    for (std::size_t t = 0; t < m.tasks; ++t)
        for (std::size_t l = 0; l < m.modules; ++l)
            for (std::size_t c = 0; c < m.tasks; ++c) os << t << ',' << l << ',' << c << ',' << m.share(t, l, c) << '\n';
    os.precision(old);
}

std::vector<double> GridAxis::values() const {
    if (!(step > 0.0)) throw ContractError("grid step must be positive");
    if (!(hi >= lo)) throw ContractError("grid upper bound below lower bound");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    std::vector<double> v;
    v.reserve(n);
    // snap so that 0 and ±1 land exactly on the grid
    for (std::size_t i = 0; i < n; ++i) v.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
    return v;
}

std::vector<LandscapeCell> loss_landscape_grid(const ViTConfig & config, const ParamTree & theta_0,
                                               const LandscapeTask & task1, const LandscapeTask & task2,
                                               const GridAxis & axis1, const GridAxis & axis2) {
    std::vector<LandscapeCell> out;
    for (double a : axis1.values()) {
        for (double b : axis2.values()) {
            ParamTree p = theta_0;
            if (a != 0.0) p = apply_task_vector(p, *task1.tv, a);
            if (b != 0.0) p = apply_task_vector(p, *task2.tv, b);
            out.push_back({a, b, evaluate_loss(config, p, *task1.head, *task1.data),
                           evaluate_loss(config, p, *task2.head, *task2.data)});
        }
    }
    return out;
}

const LandscapeCell & landscape_argmin(const std::vector<LandscapeCell> & grid) {
    if (grid.empty()) throw ContractError("empty landscape grid");
    return *std::min_element(grid.begin(), grid.end(),
                             [](const LandscapeCell & x, const LandscapeCell & y) { return x.sum() < y.sum(); });
}

std::size_t dominating_cells(const std::vector<LandscapeCell> & grid) {
    const auto & best = landscape_argmin(grid);
    return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [&](const LandscapeCell & c) {
        return c.loss1 < best.loss1 && c.loss2 < best.loss2;
    }));
}

void write_landscape_csv(std::ostream & os, const std::vector<LandscapeCell> & grid) {
    const auto old = os.precision(12);
    os << "l1,l2,loss1,loss2,losssum\n";
    for (const auto & c : grid) os << c.l1 << ',' << c.l2 << ',' << c.loss1 << ',' << c.loss2 << ',' << c.sum() << '\n';
    os.precision(old);
}

} // namespace wemoe
