#pragma once

#include "wemoe/autodiff.hpp"
#include "wemoe/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wemoe {

enum class ModuleTag { Embedding, Attention, LayerNorm, MLP, Head };

const char * tag_name(ModuleTag tag);
ModuleTag parse_tag(const std::string & s);

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 1;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_blocks = 6;
    std::size_t mlp_hidden = 256;
    double ln_eps = 1e-5;

    static ViTConfig desk() { return {}; }
    // Dimensions of CLIP ViT-B/32's image tower, used only for parameter counting.
    static ViTConfig vitb32_dims();

    void validate() const;
    std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t tokens() const { return patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return d_model / n_heads; }
};

// Named parameter map. The module tag and block index of a tensor follow from its name:
//   embed.*                  Embedding
//   blocks.<l>.ln1.* / ln2.* LayerNorm
//   blocks.<l>.att.*         Attention
//   blocks.<l>.mlp.*         MLP
//   final_ln.*               LayerNorm
//   head.*                   Head
class ParamTree {
public:
    using Map = std::map<std::string, Tensor>;

    void set(const std::string & name, Tensor value);
    const Tensor & at(const std::string & name) const;
    bool contains(const std::string & name) const { return tensors_.count(name) != 0; }
    std::size_t size() const noexcept { return tensors_.size(); }
    bool empty() const noexcept { return tensors_.empty(); }
    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }
    std::vector<std::string> names() const;
    // Names with this tag, restricted to block `layer` when given.
    std::vector<std::string> select(ModuleTag tag, std::optional<std::size_t> layer = std::nullopt) const;
    std::size_t parameter_count() const;

    // Throws StructureError naming the first tensor that differs in presence or shape.
    void require_same_structure(const ParamTree & other) const;
    bool identical(const ParamTree & other) const;

    static ModuleTag tag_of(const std::string & name);
    // Block index for blocks.<l>.* names, nullopt otherwise.
    static std::optional<std::size_t> layer_of(const std::string & name);

private:
    Map tensors_;
};

std::string block_param(std::size_t layer, const std::string & local);

// Frozen per-task linear classifier on the class-token feature.
struct TaskHead {
    int task_id = 0;
    Tensor weight; // [d_model × C]
    Tensor bias;   // [C]
    bool frozen = true;

    std::size_t classes() const { return bias.size(); }
};

ParamTree init_vit(const ViTConfig & config, std::uint64_t seed);
TaskHead init_head(const ViTConfig & config, int task_id, std::size_t classes, std::uint64_t seed);

// Row-major [patches × patch_dim] matrix for an image of shape [H×W×ch].
Tensor extract_patches(const ViTConfig & config, const Tensor & image);

struct EmbeddingVars {
    ad::Var patch_w, patch_b, cls, pos;
};

struct LinearFn {
    std::function<ad::Var(ad::Var)> apply;
    ad::Var operator()(ad::Var x) const { return apply(x); }
};

LinearFn dense_linear(ad::Var w, ad::Var b);

struct AttentionWeights {
    ad::Var ln_gamma, ln_beta;
    LinearFn q, k, v, o;
};

struct MlpWeights {
    ad::Var ln_gamma, ln_beta;
    LinearFn fc0, fc1;
};

EmbeddingVars bind_embedding(ad::Tape & tape, const ParamTree & params);
AttentionWeights bind_attention(ad::Tape & tape, const ParamTree & params, std::size_t layer);
MlpWeights bind_mlp(ad::Tape & tape, const ParamTree & params, std::size_t layer);

// [B·tokens × d] token matrix for a batch of images.
ad::Var patch_embed(const ViTConfig & config, std::span<const Tensor> images, const EmbeddingVars & embed);
// h + Att(LN1(h)). Rows of h are grouped per sample in blocks of config.tokens().
ad::Var attention_block_forward(const ViTConfig & config, ad::Var h, const AttentionWeights & w);
// h + W1 gelu(W0 LN2(h) + b0) + b1
ad::Var mlp_forward(const ViTConfig & config, ad::Var h, const MlpWeights & w);

// Maps a block's input tokens to its output tokens.
using BlockFn = std::function<ad::Var(std::size_t layer, ad::Var h)>;

// Runs the encoder with caller-supplied blocks; returns [B × d] class-token features after the final LayerNorm.
ad::Var encode_with(const ViTConfig & config, std::span<const Tensor> images, const EmbeddingVars & embed,
                    const BlockFn & block, ad::Var final_gamma, ad::Var final_beta);
// Plain encoder over a parameter tree, weights recorded as constants unless `trainable`.
ad::Var encode(const ViTConfig & config, const ParamTree & params, std::span<const Tensor> images,
               ad::Tape & tape, std::map<std::string, ad::Var> * trainable = nullptr);

// Class-token representation [d_model] of one image.
Tensor vit_encode(const ViTConfig & config, const ParamTree & params, const Tensor & image);

ad::Var classify(ad::Var features, ad::Var head_w, ad::Var head_b);
// Logits [C] for one feature vector.
Tensor classify(const Tensor & feature, const TaskHead & head);

} // namespace wemoe
