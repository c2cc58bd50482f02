#include "wemoe/tta.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

namespace wemoe {

using ad::Tape;
using ad::Var;

void TTAConfig::validate() const {
    if (!(lr > 0.0)) throw ContractError("tta: learning rate must be positive");
    if (batch == 0) throw ContractError("tta: batch size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ContractError("tta: betas must be in [0,1)");
    if (!(eps > 0.0)) throw ContractError("tta: eps must be positive");
}

double entropy_loss(const Tensor & probs) {
    if (probs.rank() != 2) throw ShapeError("entropy_loss: expected [B x C], got " + shape_str(probs.shape()));
    const std::size_t b = probs.rows(), c = probs.cols();
    if (b == 0) throw ContractError("entropy_loss: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double sum = 0.0, h = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = probs.at(i, j);
            if (p < -1e-12 || !std::isfinite(p)) throw ContractError("entropy_loss: row " + std::to_string(i) + " is not a probability vector");
            sum += p;
            h -= p * std::log(std::max(p, 1e-12));
        }
        if (std::abs(sum - 1.0) > 1e-5)
            throw ContractError("entropy_loss: row " + std::to_string(i) + " sums to " + std::to_string(sum));
        total += h;
    }
    return total / static_cast<double>(b);
}

void adam_step(std::vector<Tensor> & params, const std::vector<Tensor> & grads, AdamState & st, const AdamConfig & cfg) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
    if (st.m.empty()) {
        for (const auto & p : params) {
            st.m.emplace_back(p.size(), 0.0);
            st.v.emplace_back(p.size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
    ++st.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].shape() != grads[k].shape())
            throw ShapeError("adam_step: gradient " + shape_str(grads[k].shape()) + " does not match parameter " +
                             shape_str(params[k].shape()));
        auto p = params[k].to_vector();
        const auto g = grads[k].data();
        auto & m = st.m[k];
        auto & v = st.v[k];
        if (m.size() != p.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            p[i] = round_to_precision(p[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
        }
        params[k] = Tensor(params[k].shape(), std::move(p));
    }
}

std::vector<Tensor> router_tensors(const MergedModel & model) {
    std::vector<Tensor> out;
    for (const auto & r : model.routers)
        for (auto & [name, t] : r.tensors()) out.push_back(t);
    return out;
}

void set_router_tensors(MergedModel & model, const std::vector<Tensor> & values) {
    std::size_t k = 0;
    for (auto & r : model.routers) {
        for (const auto & [name, t] : r.tensors()) {
            if (k >= values.size()) throw ContractError("set_router_tensors: too few tensors");
            if (values[k].shape() != t.shape()) throw ShapeError("set_router_tensors: shape mismatch for " + name);
            r.set(name, values[k++]);
        }
    }
    if (k != values.size()) throw ContractError("set_router_tensors: too many tensors");
}

namespace {

std::vector<Var> router_vars(const BoundRouters & b) {
    std::vector<Var> out;
    for (const auto & r : b.routers) {
        if (r.depth >= 1) out.push_back(r.w0);
        out.push_back(r.b0);
        if (r.depth == 2) {
            out.push_back(r.w1);
            out.push_back(r.b1);
        }
    }
    return out;
}

} // namespace

EntropyGradient multitask_entropy_gradient(const MergedModel & model,
                                           const std::vector<std::vector<const Tensor *>> & batches, ExecPath path) {
    if (batches.size() != model.heads.size())
        throw ContractError("tta: " + std::to_string(batches.size()) + " batches for " +
                            std::to_string(model.heads.size()) + " task heads");
    EntropyGradient out;
    std::vector<std::vector<double>> acc;
    for (const auto & t : router_tensors(model)) acc.emplace_back(t.size(), 0.0);

    // one tape per sample; gradients reduced in ascending (task, sample) order
    for (std::size_t task = 0; task < batches.size(); ++task) {
        const auto & batch = batches[task];
        if (batch.empty()) throw ContractError("tta: empty batch for task " + std::to_string(task));
        const auto & head = model.heads[task];
        const double inv = 1.0 / static_cast<double>(batch.size());
        double task_h = 0.0;
        for (const Tensor * img : batch) {
            Tape tape;
            const auto routers = bind_routers(tape, model, true);
            const auto fwd = merged_encode(tape, model, routers, *img, path);
            auto logits = classify(fwd.features, tape.constant(head.weight), tape.constant(head.bias));
            auto loss = ad::scale(ad::entropy_mean(ad::softmax_lastdim(logits)), inv);
            task_h += loss.value().item();
            const auto g = tape.backward(loss);
            const auto vars = router_vars(routers);
            for (std::size_t k = 0; k < vars.size(); ++k) {
                if (!g.contains(vars[k])) continue;
                const auto gk = g.of(vars[k]);
                const auto d = gk.data();
                for (std::size_t i = 0; i < d.size(); ++i) acc[k][i] += d[i];
            }
        }
        out.task_entropy.push_back(task_h);
        out.total += task_h;
    }
    const auto shapes = router_tensors(model);
    for (std::size_t k = 0; k < acc.size(); ++k) out.grads.emplace_back(shapes[k].shape(), std::move(acc[k]));
    return out;
}

namespace {

// Endless without-replacement index stream over one task's test set.
class BatchStream {
public:
    BatchStream(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) { reshuffle(); }

    std::vector<std::size_t> next(std::size_t b) {
        std::vector<std::size_t> out;
        out.reserve(b);
        while (out.size() < b) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
    }
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

} // namespace

TTAResult tta_train(const MergedModel & model, const std::vector<std::vector<Tensor>> & unlabeled,
                    const TTAConfig & cfg) {
    cfg.validate();
    if (unlabeled.size() != model.heads.size())
        throw ContractError("tta: " + std::to_string(unlabeled.size()) + " unlabeled sets for " +
                            std::to_string(model.heads.size()) + " task heads");
    for (std::size_t i = 0; i < unlabeled.size(); ++i)
        if (unlabeled[i].empty()) throw DataError("tta: empty test set for task " + std::to_string(i));

    TTAResult res{model, {}};
    std::vector<BatchStream> streams;
    for (std::size_t i = 0; i < unlabeled.size(); ++i)
        streams.emplace_back(unlabeled[i].size(), cfg.seed * 0x9E3779B97F4A7C15ULL + i * 1315423911ULL + 1);

    AdamState adam;
    auto params = router_tensors(res.model);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<const Tensor *>> batches(unlabeled.size());
        for (std::size_t i = 0; i < unlabeled.size(); ++i)
            for (auto idx : streams[i].next(std::min(cfg.batch, unlabeled[i].size())))
                batches[i].push_back(&unlabeled[i][idx]);
        auto eg = multitask_entropy_gradient(res.model, batches, cfg.path);
        res.trace.push_back({step, std::move(eg.task_entropy), eg.total});
        adam_step(params, eg.grads, adam, cfg);
        set_router_tensors(res.model, params);
    }
    return res;
}

void write_trace_csv(std::ostream & os, const std::vector<TTAStep> & trace) {
    const std::size_t n = trace.empty() ? 0 : trace.front().task_entropy.size();
    os << "step";
    for (std::size_t i = 0; i < n; ++i) os << ",entropy_task" << i;
    os << ",total\n";
    const auto old = os.precision(10);
    for (const auto & s : trace) {
        os << s.step;
        for (double h : s.task_entropy) os << ',' << h;
        os << ',' << s.total << '\n';
    }
    os.precision(old);
}

} // namespace wemoe
