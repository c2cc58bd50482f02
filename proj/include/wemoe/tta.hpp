#pragma once

#include "wemoe/merging.hpp"

#include <iosfwd>
#include <vector>

namespace wemoe {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TTAConfig {
    std::size_t steps = 200;
    double lr = 1e-3;
    std::size_t batch = 16; // per task
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    ExecPath path = ExecPath::Materialized;

    void validate() const;
    AdamConfig adam() const { return {lr, beta1, beta2, eps}; }
};

// Mean over rows of -sum p log p, log clamped at 1e-12.
double entropy_loss(const Tensor & probs);

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t t = 0;
};

// In-place bias-corrected Adam update of `params`.
void adam_step(std::vector<Tensor> & params, const std::vector<Tensor> & grads, AdamState & state,
               const AdamConfig & config);
inline void adam_step(std::vector<Tensor> & params, const std::vector<Tensor> & grads, AdamState & state,
                      const TTAConfig & config) {
    adam_step(params, grads, state, config.adam());
}

// Router tensors of a model in a fixed order (router index, then w0, b0, w1, b1).
std::vector<Tensor> router_tensors(const MergedModel & model);
void set_router_tensors(MergedModel & model, const std::vector<Tensor> & values);

struct EntropyGradient {
    double total = 0.0;
    std::vector<double> task_entropy;
    std::vector<Tensor> grads; // aligned with router_tensors()
};

// Sum over tasks of the batch-mean prediction entropy under each task's head, and its gradient
// with respect to all router parameters. batches[i] holds images of task i.
EntropyGradient multitask_entropy_gradient(const MergedModel & model,
                                           const std::vector<std::vector<const Tensor *>> & batches,
                                           ExecPath path = ExecPath::Materialized);

struct TTAStep {
    std::size_t step = 0;
    std::vector<double> task_entropy;
    double total = 0.0;
};

struct TTAResult {
    MergedModel model;
    std::vector<TTAStep> trace;
};

// Adapts routers on unlabeled images; unlabeled[i] belongs to task i and is scored with model.heads[i].
// Batches are drawn without replacement from a per-task shuffled stream, reshuffled each epoch.
TTAResult tta_train(const MergedModel & model, const std::vector<std::vector<Tensor>> & unlabeled,
                    const TTAConfig & config);

void write_trace_csv(std::ostream & os, const std::vector<TTAStep> & trace);

} // namespace wemoe
