#pragma once

#include "wemoe/vit.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace wemoe {

// Dense delta theta_i - theta_0 over a full parameter tree.
struct TaskVector {
    int task_id = 0;
    ParamTree tree;
};

// Magnitude-pruned delta of one pruning group (by default the MLP of one block).
struct SparseTaskVector {
    int task_id = 0;
    std::size_t layer = 0;
    double rho = 0.0;
    std::map<std::string, SparseTensor> tensors;

    std::size_t nnz() const;
};

enum class PruneGrouping {
    Module,    // one top-k over all tensors of the group
    PerTensor, // independent top-k per tensor
};

TaskVector compute_task_vector(const ParamTree & theta_i, const ParamTree & theta_0, int task_id = 0);
// theta_0 + coeff * tv
ParamTree apply_task_vector(const ParamTree & theta_0, const TaskVector & tv, double coeff = 1.0);

// Squared L2 norm of the deltas of every tensor with `tag` in block `layer`.
double l2_module_distance(const ParamTree & theta_i, const ParamTree & theta_0, ModuleTag tag, std::size_t layer);
double l2_module_distance(const TaskVector & tv, ModuleTag tag, std::size_t layer);

// Linear interpolation between order statistics, q in (0, 1).
std::vector<double> quantiles(std::vector<double> values, std::span<const double> qs);
// Quantiles of |delta| over the tagged tensors of one block.
std::vector<double> magnitude_quantiles(const TaskVector & tv, std::size_t layer, std::span<const double> qs,
                                        ModuleTag tag = ModuleTag::MLP);

// round-half-up of (1 - rho) * total
std::size_t kept_count(std::size_t total, double rho);

// Keeps the largest-magnitude (1 - rho) fraction of a group of tensors. Ties keep the
// lower flat index first, flattening tensors in name order.
std::map<std::string, SparseTensor> prune_tensors(const std::map<std::string, Tensor> & group, double rho,
                                                  PruneGrouping grouping = PruneGrouping::Module);
SparseTaskVector prune_task_vector(const TaskVector & tv, std::size_t layer, double rho,
                                   PruneGrouping grouping = PruneGrouping::Module, ModuleTag tag = ModuleTag::MLP);

// dest + coeff * sparse, touching only stored positions.
Tensor sparse_axpy(const Tensor & dest, double coeff, const SparseTensor & sv);

} // namespace wemoe
