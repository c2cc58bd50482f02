#pragma once

#include "wemoe/taskvec.hpp"
#include "wemoe/vit.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace wemoe {

using ParamFilter = std::function<bool(const std::string &)>;

ParamFilter all_params();
ParamFilter params_tagged(std::vector<ModuleTag> tags);
ParamFilter params_not_tagged(std::vector<ModuleTag> tags);

// Elementwise mean of identically structured trees.
ParamTree merge_weight_average(std::span<const ParamTree> models);
// theta_0 + lambda * sum_i tau_i on tensors accepted by `filter`; other tensors copied from theta_0.
ParamTree merge_task_arithmetic(const ParamTree & theta_0, std::span<const TaskVector> task_vectors, double lambda,
                                const ParamFilter & filter = all_params());

// Affine(-ReLU-affine) map from token states to raw per-task merging weights.
//   depth 0: b0
//   depth 1: h W0 + b0
//   depth 2: relu(h W0 + b0) W1 + b1
struct RouterParams {
    int depth = 2;
    Tensor w0, b0, w1, b1;

    std::size_t outputs() const;
    std::size_t input_dim() const;
    std::size_t parameter_count() const;
    // Present tensors by name (w0, b0, w1, b1).
    std::vector<std::pair<std::string, Tensor>> tensors() const;
    void set(const std::string & name, Tensor value);
};

struct RouterInit {
    double lambda = 0.3;
    // Gaussian std for weight matrices; variance 0.01 gives 0.1.
    double weight_std = 0.1;
    // Hidden width of depth-2 routers; 0 means the input width.
    std::size_t hidden = 0;
    // All weight matrices zero, so the router outputs its bias exactly.
    bool zero_weights = false;
};

RouterParams init_router(std::size_t n_tasks, std::size_t input_dim, int depth, const RouterInit & init,
                         std::uint64_t seed);
// Raw router outputs [N × n] for token states h [N × d].
Tensor router_forward(const RouterParams & router, const Tensor & h);
std::size_t router_parameter_count(std::size_t input_dim, std::size_t n_tasks, int depth, std::size_t hidden = 0);

struct RouterVars {
    int depth = 2;
    ad::Var w0, b0, w1, b1;
};

RouterVars bind_router(ad::Tape & tape, const RouterParams & router, bool requires_grad);
ad::Var router_forward(const RouterVars & router, ad::Var h);
// Per-sample merging weights: mean of router rows over the tokens of h.
ad::Var routing_weights(const RouterVars & router, ad::Var h);

enum class UpscaleStrategy { MlpOnly, AttAndMlpSeparately, EntireBlock };
enum class Submodule { Attention, Mlp, Block };
// Materialized: build merged weights, then run the sublayer.
// Decomposed: base product plus per-expert delta products weighted by lambda.
enum class ExecPath { Materialized, Decomposed };
// What a router reads: the residual stream entering the sublayer, or that stream
// layer-normalized without affine parameters.
enum class RouterInput { Residual, Normalized };

const char * strategy_name(UpscaleStrategy s);
UpscaleStrategy parse_strategy(const std::string & s);
const char * submodule_name(Submodule s);
Submodule parse_submodule(const std::string & s);
const char * router_input_name(RouterInput r);
RouterInput parse_router_input(const std::string & s);

// One up-scaled sublayer: pre-trained weights plus a dictionary of per-task deltas.
struct WEMoEModule {
    std::size_t layer = 0;
    Submodule kind = Submodule::Mlp;
    std::size_t router = 0;
    std::map<std::string, Tensor> base;
    // One entry per task; exactly one of the two is populated.
    std::vector<std::map<std::string, Tensor>> dense;
    std::vector<std::map<std::string, SparseTensor>> sparse;

    bool is_sparse() const { return !sparse.empty(); }
    std::size_t experts() const { return is_sparse() ? sparse.size() : dense.size(); }
    std::size_t dictionary_values() const;
    std::size_t base_values() const;
    // Throws unless every column matches base's names and shapes.
    void validate() const;
};

struct MergedModel {
    ViTConfig config;
    // Tensors outside every MoE module, merged by task arithmetic.
    ParamTree static_tree;
    std::vector<WEMoEModule> modules;
    std::vector<RouterParams> routers;
    UpscaleStrategy strategy = UpscaleStrategy::MlpOnly;
    bool shared_router = false;
    double lambda_init = 0.3;
    double rho = 0.0;
    int l_fc = 2;
    RouterInput router_input = RouterInput::Residual;
    std::uint64_t seed = 0;
    std::vector<TaskHead> heads;

    std::size_t tasks() const;
    const WEMoEModule * module_at(std::size_t layer, Submodule kind) const;
};

struct UpscaleConfig {
    UpscaleStrategy strategy = UpscaleStrategy::MlpOnly;
    double lambda = 0.3;
    int l_fc = 2;
    bool shared_router = false;
    double rho = 0.0;
    PruneGrouping grouping = PruneGrouping::Module;
    RouterInput router_input = RouterInput::Residual;
    RouterInit router;
    std::uint64_t seed = 0;
};

MergedModel upscale_to_wemoe(const ViTConfig & config, const ParamTree & theta_0,
                             std::span<const TaskVector> task_vectors, std::vector<TaskHead> heads,
                             const UpscaleConfig & cfg);

// Router leaves bound on one tape.
struct BoundRouters {
    std::vector<RouterVars> routers;
};

BoundRouters bind_routers(ad::Tape & tape, const MergedModel & model, bool requires_grad);

struct MoEOutput {
    ad::Var h;
    ad::Var lambda;
};

// MLP sublayer of an MLP module for one sample's tokens.
MoEOutput wemoe_mlp_forward(const ViTConfig & config, const WEMoEModule & module, const RouterVars & router,
                            ad::Var h_in, ad::Var ln_gamma, ad::Var ln_beta, ExecPath path = ExecPath::Materialized,
                            RouterInput input = RouterInput::Residual);

struct MergedForward {
    ad::Var features;            // [1 × d]
    std::vector<ad::Var> lambdas; // one [n] per module, in module order
};

// Encodes one image with per-sample routing.
MergedForward merged_encode(ad::Tape & tape, const MergedModel & model, const BoundRouters & routers,
                            const Tensor & image, ExecPath path = ExecPath::Materialized);
// Logits [C] of one image under `head`.
Tensor merged_logits(const MergedModel & model, const Tensor & image, const TaskHead & head,
                     ExecPath path = ExecPath::Materialized);
// Per-module routing weights of one image, [modules × n].
Tensor merged_routing(const MergedModel & model, const Tensor & image);

// Static model logits [C].
Tensor static_logits(const ViTConfig & config, const ParamTree & params, const Tensor & image, const TaskHead & head);

struct ParameterCount {
    std::size_t trainable = 0;
    std::size_t total = 0;
    double ratio() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0; }
};

struct ParameterCountRequest {
    ViTConfig arch;
    // Frozen parameters outside the encoder that the totals include.
    std::size_t frozen_extra = 0;
    std::size_t n_tasks = 8;
    int l_fc = 2;
    double rho = 0.0;
    bool shared_router = false;
    UpscaleStrategy strategy = UpscaleStrategy::MlpOnly;
    PruneGrouping grouping = PruneGrouping::Module;
    std::size_t router_hidden = 0;
    bool include_indices = false;

    // CLIP ViT-B/32 dimensions with the frozen classifier-side parameters the published totals include.
    static ParameterCountRequest vitb32(std::size_t n_tasks, int l_fc, double rho, bool shared_router);
};

std::size_t encoder_parameter_count(const ViTConfig & config);
ParameterCount count_parameters(const ParameterCountRequest & req);
// Counts a built model. Heads are excluded.
ParameterCount count_parameters(const MergedModel & model, bool include_indices = false);

} // namespace wemoe
