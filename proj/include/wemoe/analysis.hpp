#pragma once

#include "wemoe/bench.hpp"

#include <iosfwd>
#include <vector>

namespace wemoe {

struct DriftRow {
    std::size_t layer = 0;
    ModuleTag module = ModuleTag::MLP;
    double mean_sq_l2 = 0.0;
};

struct DriftReport {
    std::vector<DriftRow> rows; // layer-major, then Attention, LayerNorm, MLP

    double at(std::size_t layer, ModuleTag module) const;
    std::size_t layers() const;
    // Layers where the MLP moved further than attention.
    std::size_t mlp_exceeds_attention() const;
};

// Per block and module, the mean over experts of the squared L2 distance to theta_0.
DriftReport drift_report(const ParamTree & theta_0, const std::vector<ParamTree> & experts);
void write_drift_csv(std::ostream & os, const DriftReport & report);

struct MagnitudeRow {
    std::size_t task = 0, layer = 0;
    double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};

// |tau| quantiles of one module per task and block (violin data as a table).
std::vector<MagnitudeRow> magnitude_table(const std::vector<TaskVector> & tvs, ModuleTag tag = ModuleTag::MLP);
void write_magnitude_csv(std::ostream & os, const std::vector<MagnitudeRow> & rows);

// Raw per-sample routing weights: [task][sample] -> [modules x n].
std::vector<std::vector<Tensor>> collect_routing(const MergedModel & model,
                                                 const std::vector<std::vector<Tensor>> & datasets);

struct WeightSummary {
    double mean = 0, min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};

struct RoutingDistribution {
    std::vector<std::size_t> modules;
    // [i][source task][component], i indexing `modules`
    std::vector<std::vector<std::vector<WeightSummary>>> stats;
};

// "Layer" here is a routed module index; with MLP-only up-scaling it is the block index.
RoutingDistribution routing_distribution(const MergedModel & model, const std::vector<std::vector<Tensor>> & datasets,
                                         const std::vector<std::size_t> & modules);
void write_routing_csv(std::ostream & os, const RoutingDistribution & dist);

struct FirstChoiceMatrix {
    std::size_t tasks = 0, modules = 0;
    // shares[(t * modules + l) * tasks + c]: fraction of task t's samples whose λ at module l peaks at c
    std::vector<double> shares;
    // samples whose maximum was shared by several components (counted for the lowest index)
    std::vector<std::size_t> ties; // [t * modules + l]
    std::vector<std::size_t> samples; // per task

    double share(std::size_t task, std::size_t module, std::size_t choice) const;
    double own(std::size_t task, std::size_t module) const { return share(task, module, task); }
};

FirstChoiceMatrix first_choice_matrix(const MergedModel & model, const std::vector<std::vector<Tensor>> & datasets);
FirstChoiceMatrix first_choice_matrix(const std::vector<std::vector<Tensor>> & routing);
void write_first_choice_csv(std::ostream & os, const FirstChoiceMatrix & m);

struct GridAxis {
    double lo = -1.0, hi = 1.0, step = 0.25;
    std::vector<double> values() const;
};

struct LandscapeCell {
    double l1 = 0, l2 = 0;
    double loss1 = 0, loss2 = 0;
    double sum() const { return loss1 + loss2; }
};

struct LandscapeTask {
    const TaskVector * tv;
    const TaskHead * head;
    const LabeledImages * data;
};

// Cross-entropy of theta_0 + l1 tau_1 + l2 tau_2 on both tasks' data at every grid point, l1-major.
std::vector<LandscapeCell> loss_landscape_grid(const ViTConfig & config, const ParamTree & theta_0,
                                               const LandscapeTask & task1, const LandscapeTask & task2,
                                               const GridAxis & axis1 = {}, const GridAxis & axis2 = {});
const LandscapeCell & landscape_argmin(const std::vector<LandscapeCell> & grid);
// Cells strictly better than the argmin of the summed loss on both tasks.
std::size_t dominating_cells(const std::vector<LandscapeCell> & grid);
void write_landscape_csv(std::ostream & os, const std::vector<LandscapeCell> & grid);

} // namespace wemoe
