#include "wemoe/vit.hpp"

#include <cmath>
#include <random>

namespace wemoe {

using ad::Var;

const char * tag_name(ModuleTag tag) {
    switch (tag) {
        case ModuleTag::Embedding: return "embedding";
        case ModuleTag::Attention: return "attention";
        case ModuleTag::LayerNorm: return "layernorm";
        case ModuleTag::MLP: return "mlp";
        case ModuleTag::Head: return "head";
    }
    return "?";
}

ModuleTag parse_tag(const std::string & s) {
    if (s == "embedding") return ModuleTag::Embedding;
    if (s == "attention" || s == "att") return ModuleTag::Attention;
    if (s == "layernorm" || s == "ln") return ModuleTag::LayerNorm;
    if (s == "mlp") return ModuleTag::MLP;
    if (s == "head") return ModuleTag::Head;
    throw DataError("unknown module tag '" + s + "'");
}

ViTConfig ViTConfig::vitb32_dims() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 32;
    c.channels = 3;
    c.d_model = 768;
    c.n_heads = 12;
    c.n_blocks = 12;
    c.mlp_hidden = 3072;
    return c;
}

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ContractError("image_size must be a positive multiple of patch_size");
    }
    if (n_heads == 0 || d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
    if (d_model < 2 || mlp_hidden == 0 || channels == 0) throw ContractError("invalid ViT widths");
}

void ParamTree::set(const std::string & name, Tensor value) {
    tag_of(name);
    tensors_.insert_or_assign(name, std::move(value));
}

const Tensor & ParamTree::at(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw StructureError(name, "parameter '" + name + "' not found");
    return it->second;
}

std::vector<std::string> ParamTree::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto & [k, v] : tensors_) out.push_back(k);
    return out;
}

std::vector<std::string> ParamTree::select(ModuleTag tag, std::optional<std::size_t> layer) const {
    std::vector<std::string> out;
    for (const auto & [k, v] : tensors_) {
        if (tag_of(k) != tag) continue;
        if (layer && layer_of(k) != layer) continue;
        out.push_back(k);
    }
    return out;
}

std::size_t ParamTree::parameter_count() const {
    std::size_t n = 0;
    for (const auto & [k, v] : tensors_) n += v.size();
    return n;
}

void ParamTree::require_same_structure(const ParamTree & other) const {
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    while (a != tensors_.end() || b != other.tensors_.end()) {
        if (a == tensors_.end()) throw StructureError(b->first, "tensor '" + b->first + "' missing from first tree");
        if (b == other.tensors_.end()) {
            throw StructureError(a->first, "tensor '" + a->first + "' missing from second tree");
        }
        if (a->first != b->first) {
            const auto & key = a->first < b->first ? a->first : b->first;
            throw StructureError(key, "tensor '" + key + "' present in only one tree");
        }
        if (a->second.shape() != b->second.shape()) {
            throw StructureError(a->first, "tensor '" + a->first + "' has shape " + shape_str(a->second.shape()) +
                                               " vs " + shape_str(b->second.shape()));
        }
        ++a;
        ++b;
    }
}

bool ParamTree::identical(const ParamTree & other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (const auto & [k, v] : tensors_) {
        auto it = other.tensors_.find(k);
        if (it == other.tensors_.end() || !v.identical(it->second)) return false;
    }
    return true;
}

ModuleTag ParamTree::tag_of(const std::string & name) {
    auto starts = [&](const char * p) { return name.rfind(p, 0) == 0; };
    if (starts("embed.")) return ModuleTag::Embedding;
    if (starts("final_ln.")) return ModuleTag::LayerNorm;
    if (starts("head.")) return ModuleTag::Head;
    if (starts("blocks.")) {
        const auto dot = name.find('.', 7);
        if (dot != std::string::npos) {
            const auto rest = name.substr(dot + 1);
            if (rest.rfind("att.", 0) == 0) return ModuleTag::Attention;
            if (rest.rfind("mlp.", 0) == 0) return ModuleTag::MLP;
            if (rest.rfind("ln1.", 0) == 0 || rest.rfind("ln2.", 0) == 0) return ModuleTag::LayerNorm;
        }
    }
    throw StructureError(name, "parameter name '" + name + "' has no module tag");
}

std::optional<std::size_t> ParamTree::layer_of(const std::string & name) {
    if (name.rfind("blocks.", 0) != 0) return std::nullopt;
    const auto dot = name.find('.', 7);
    return static_cast<std::size_t>(std::stoul(name.substr(7, dot - 7)));
}

std::string block_param(std::size_t layer, const std::string & local) {
    return "blocks." + std::to_string(layer) + "." + local;
}

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64 & rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> d(shape_numel(shape));
    for (auto & x : d) x = round_to_precision(nd(rng));
    return Tensor(std::move(shape), std::move(d));
}

} // namespace

ParamTree init_vit(const ViTConfig & c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    ParamTree p;
    const auto d = c.d_model, m = c.mlp_hidden;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    p.set("embed.patch_w", gaussian({c.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(c.patch_dim())), rng));
    p.set("embed.patch_b", Tensor::zeros({d}));
    p.set("embed.cls", gaussian({d}, 0.1, rng));
    p.set("embed.pos", gaussian({c.tokens(), d}, 0.1, rng));
    for (std::size_t l = 0; l < c.n_blocks; ++l) {
        p.set(block_param(l, "ln1.gamma"), Tensor::full({d}, 1.0));
        p.set(block_param(l, "ln1.beta"), Tensor::zeros({d}));
        for (const char * w : {"q", "k", "v", "o"}) {
            p.set(block_param(l, std::string("att.w") + w), gaussian({d, d}, sd, rng));
            p.set(block_param(l, std::string("att.b") + w), Tensor::zeros({d}));
        }
        p.set(block_param(l, "ln2.gamma"), Tensor::full({d}, 1.0));
        p.set(block_param(l, "ln2.beta"), Tensor::zeros({d}));
        p.set(block_param(l, "mlp.w0"), gaussian({d, m}, sd, rng));
        p.set(block_param(l, "mlp.b0"), Tensor::zeros({m}));
        p.set(block_param(l, "mlp.w1"), gaussian({m, d}, 1.0 / std::sqrt(static_cast<double>(m)), rng));
        p.set(block_param(l, "mlp.b1"), Tensor::zeros({d}));
    }
    p.set("final_ln.gamma", Tensor::full({d}, 1.0));
    p.set("final_ln.beta", Tensor::zeros({d}));
    return p;
}

TaskHead init_head(const ViTConfig & c, int task_id, std::size_t classes, std::uint64_t seed) {
    if (classes == 0) throw ContractError("a head needs at least one class");
    std::mt19937_64 rng(seed);
    TaskHead h;
    h.task_id = task_id;
    h.weight = gaussian({c.d_model, classes}, 1.0 / std::sqrt(static_cast<double>(c.d_model)), rng);
    h.bias = Tensor::zeros({classes});
    h.frozen = true;
    return h;
}

Tensor extract_patches(const ViTConfig & c, const Tensor & image) {
    const Shape expect{c.image_size, c.image_size, c.channels};
    if (image.shape() != expect) {
        throw ShapeError("patch_embed: image " + shape_str(image.shape()) + " but config expects " + shape_str(expect));
    }
    const std::size_t grid = c.image_size / c.patch_size, ps = c.patch_size, ch = c.channels;
    const auto px = image.data();
    std::vector<double> out(c.patches() * c.patch_dim());
    std::size_t o = 0;
    for (std::size_t pr = 0; pr < grid; ++pr)
        for (std::size_t pc = 0; pc < grid; ++pc)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x)
                    for (std::size_t k = 0; k < ch; ++k)
                        out[o++] = px[((pr * ps + y) * c.image_size + (pc * ps + x)) * ch + k];
    return Tensor({c.patches(), c.patch_dim()}, std::move(out));
}

LinearFn dense_linear(Var w, Var b) {
    return LinearFn{[w, b](Var x) { return ad::add_bias(ad::matmul(x, w), b); }};
}

EmbeddingVars bind_embedding(ad::Tape & tape, const ParamTree & p) {
    return {tape.constant(p.at("embed.patch_w")), tape.constant(p.at("embed.patch_b")),
            tape.constant(p.at("embed.cls")), tape.constant(p.at("embed.pos"))};
}

AttentionWeights bind_attention(ad::Tape & tape, const ParamTree & p, std::size_t l) {
    auto c = [&](const char * local) { return tape.constant(p.at(block_param(l, local))); };
    return {c("ln1.gamma"), c("ln1.beta"), dense_linear(c("att.wq"), c("att.bq")),
            dense_linear(c("att.wk"), c("att.bk")), dense_linear(c("att.wv"), c("att.bv")),
            dense_linear(c("att.wo"), c("att.bo"))};
}

MlpWeights bind_mlp(ad::Tape & tape, const ParamTree & p, std::size_t l) {
    auto c = [&](const char * local) { return tape.constant(p.at(block_param(l, local))); };
    return {c("ln2.gamma"), c("ln2.beta"), dense_linear(c("mlp.w0"), c("mlp.b0")),
            dense_linear(c("mlp.w1"), c("mlp.b1"))};
}

Var patch_embed(const ViTConfig & c, std::span<const Tensor> images, const EmbeddingVars & e) {
    if (images.empty()) throw ContractError("patch_embed: no images");
    auto & tape = *e.patch_w.tape;
    const auto cls_row = ad::reshape(e.cls, {1, c.d_model});
    std::vector<Var> samples;
    samples.reserve(images.size());
    for (const auto & img : images) {
        auto patches = tape.constant(extract_patches(c, img));
        auto emb = ad::add_bias(ad::matmul(patches, e.patch_w), e.patch_b);
        std::vector<Var> rows{cls_row, emb};
        samples.push_back(ad::add(ad::concat_rows(rows), e.pos));
    }
    return samples.size() == 1 ? samples[0] : ad::concat_rows(samples);
}

Var attention_block_forward(const ViTConfig & c, Var h, const AttentionWeights & w) {
    const std::size_t n = c.tokens();
    const std::size_t rows = h.value().rows();
    if (rows % n != 0 || h.value().cols() != c.d_model) {
        throw ShapeError("attention: token matrix " + shape_str(h.shape()) + " does not match config");
    }
    const auto x = ad::layer_norm(h, w.ln_gamma, w.ln_beta, c.ln_eps);
    const auto q = w.q(x), k = w.k(x), v = w.v(x);
    const std::size_t dh = c.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> per_sample;
    for (std::size_t s = 0; s < rows / n; ++s) {
        const bool whole = rows == n;
        const auto qs = whole ? q : ad::slice_rows(q, s * n, (s + 1) * n);
        const auto ks = whole ? k : ad::slice_rows(k, s * n, (s + 1) * n);
        const auto vs = whole ? v : ad::slice_rows(v, s * n, (s + 1) * n);
        std::vector<Var> heads;
        for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
            const auto qh = ad::slice_cols(qs, hd * dh, (hd + 1) * dh);
            const auto kh = ad::slice_cols(ks, hd * dh, (hd + 1) * dh);
            const auto vh = ad::slice_cols(vs, hd * dh, (hd + 1) * dh);
            const auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
            heads.push_back(ad::matmul(ad::softmax_lastdim(scores), vh));
        }
        per_sample.push_back(heads.size() == 1 ? heads[0] : ad::concat_cols(heads));
    }
    const auto mixed = per_sample.size() == 1 ? per_sample[0] : ad::concat_rows(per_sample);
    return ad::add(h, w.o(mixed));
}

Var mlp_forward(const ViTConfig & c, Var h, const MlpWeights & w) {
    const auto x = ad::layer_norm(h, w.ln_gamma, w.ln_beta, c.ln_eps);
    return ad::add(h, w.fc1(ad::gelu(w.fc0(x))));
}

Var encode_with(const ViTConfig & c, std::span<const Tensor> images, const EmbeddingVars & embed, const BlockFn & block,
                Var final_gamma, Var final_beta) {
    auto h = patch_embed(c, images, embed);
    for (std::size_t l = 0; l < c.n_blocks; ++l) h = block(l, h);
    const std::size_t n = c.tokens();
    std::vector<Var> cls;
    for (std::size_t s = 0; s < images.size(); ++s) cls.push_back(ad::slice_rows(h, s * n, s * n + 1));
    const auto feats = cls.size() == 1 ? cls[0] : ad::concat_rows(cls);
    return ad::layer_norm(feats, final_gamma, final_beta, c.ln_eps);
}

Var encode(const ViTConfig & c, const ParamTree & p, std::span<const Tensor> images, ad::Tape & tape,
           std::map<std::string, Var> * trainable) {
    auto bind = [&](const std::string & name) {
        if (!trainable) return tape.constant(p.at(name));
        auto it = trainable->find(name);
        if (it != trainable->end()) return it->second;
        auto v = tape.leaf(p.at(name), true);
        trainable->emplace(name, v);
        return v;
    };
    EmbeddingVars e{bind("embed.patch_w"), bind("embed.patch_b"), bind("embed.cls"), bind("embed.pos")};
    BlockFn block = [&](std::size_t l, Var h) {
        auto b = [&](const char * local) { return bind(block_param(l, local)); };
        AttentionWeights att{b("ln1.gamma"), b("ln1.beta"), dense_linear(b("att.wq"), b("att.bq")),
                             dense_linear(b("att.wk"), b("att.bk")), dense_linear(b("att.wv"), b("att.bv")),
                             dense_linear(b("att.wo"), b("att.bo"))};
        h = attention_block_forward(c, h, att);
        MlpWeights mlp{b("ln2.gamma"), b("ln2.beta"), dense_linear(b("mlp.w0"), b("mlp.b0")),
                       dense_linear(b("mlp.w1"), b("mlp.b1"))};
        return mlp_forward(c, h, mlp);
    };
    return encode_with(c, images, e, block, bind("final_ln.gamma"), bind("final_ln.beta"));
}

Tensor vit_encode(const ViTConfig & c, const ParamTree & p, const Tensor & image) {
    ad::Tape tape;
    std::span<const Tensor> one(&image, 1);
    return encode(c, p, one, tape).value().reshaped({c.d_model});
}

Var classify(Var features, Var head_w, Var head_b) { return ad::add_bias(ad::matmul(features, head_w), head_b); }

Tensor classify(const Tensor & feature, const TaskHead & head) {
    if (feature.size() != head.weight.rows()) {
        throw ShapeError("classify: feature " + shape_str(feature.shape()) + " vs head " + shape_str(head.weight.shape()));
    }
    ad::Tape tape;
    auto f = tape.constant(feature.reshaped({1, feature.size()}));
    return classify(f, tape.constant(head.weight), tape.constant(head.bias)).value().reshaped({head.classes()});
}

} // namespace wemoe
