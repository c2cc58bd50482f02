#include "wemoe/cliio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace wemoe {

namespace fs = std::filesystem;
using Kind = CheckpointError::Kind;

namespace {

constexpr char kMagic[4] = {'W', 'E', 'M', 'C'};
constexpr std::size_t kMaxRank = 8;

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { le(v, 2); }
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    // `what` names the field for truncation messages
    void need(std::size_t n, const std::string & what) const {
        if (n > remaining()) throw CheckpointError(Kind::Truncated, "checkpoint truncated while reading " + what);
    }
    std::size_t remaining() const { return b_.size() - pos_; }
    std::uint64_t le(int n, const std::string & what) {
        need(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::uint8_t u8(const std::string & w) { return static_cast<std::uint8_t>(le(1, w)); }
    std::uint16_t u16(const std::string & w) { return static_cast<std::uint16_t>(le(2, w)); }
    std::uint32_t u32(const std::string & w) { return static_cast<std::uint32_t>(le(4, w)); }
    std::uint64_t u64(const std::string & w) { return le(8, w); }
    double f32(const std::string & w) { return std::bit_cast<float>(u32(w)); }
    double f64(const std::string & w) { return std::bit_cast<double>(u64(w)); }
    std::string str(std::size_t n, const std::string & w) {
        need(n, w);
        std::string s(reinterpret_cast<const char *>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

bool fits_f32(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) {
        return std::isnan(x) || static_cast<double>(static_cast<float>(x)) == x;
    });
}

void put_header(Writer & w, const std::string & name, DType dt, const Shape & shape) {
    if (name.empty() || name.size() > 0xFFFF) throw ContractError("checkpoint tensor name length out of range");
    if (shape.size() > kMaxRank) throw ContractError("checkpoint tensor '" + name + "' has rank above 8");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(dt));
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
        if (d > std::numeric_limits<std::uint32_t>::max())
            throw ContractError("checkpoint tensor '" + name + "' dimension too large");
        w.u32(static_cast<std::uint32_t>(d));
    }
}

void put_values(Writer & w, std::span<const double> v, bool single) {
    for (double x : v) single ? w.f32(x) : w.f64(x);
}

std::string fmt_real(double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::uint8_t> slurp(const fs::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Kind::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t parse_index(const std::string & s, const std::string & name) {
    std::size_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw CheckpointError(Kind::Format, "bad index '" + s + "' in tensor name " + name);
    return v;
}

std::vector<std::string> split_path(const std::string & name) { return split_list(name, '/'); }

const std::string & meta(const Manifest & m, const std::string & key) {
    auto it = m.find(key);
    if (it == m.end()) throw CheckpointError(Kind::Manifest, "checkpoint manifest lacks key '" + key + "'");
    return it->second;
}

double meta_real(const Manifest & m, const std::string & key) {
    const auto & s = meta(m, key);
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw CheckpointError(Kind::Manifest, "manifest key " + key + " is not a number: " + s);
    return v;
}

std::size_t meta_size(const Manifest & m, const std::string & key) {
    const auto & s = meta(m, key);
    std::uint64_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw CheckpointError(Kind::Manifest, "manifest key " + key + " is not an integer: " + s);
    return static_cast<std::size_t>(v);
}

template <class F>
auto manifest_guard(const std::string & key, F && f) {
    try {
        return f();
    } catch (const ContractError & e) {
        throw CheckpointError(Kind::Manifest, "manifest key " + key + ": " + e.what());
    }
}

} // namespace

const std::string & Checkpoint::meta(const std::string & key) const { return wemoe::meta(manifest, key); }

void put_arch(Manifest & m, const ViTConfig & c) {
    m["config.image_size"] = std::to_string(c.image_size);
    m["config.patch_size"] = std::to_string(c.patch_size);
    m["config.channels"] = std::to_string(c.channels);
    m["config.d_model"] = std::to_string(c.d_model);
    m["config.n_heads"] = std::to_string(c.n_heads);
    m["config.n_blocks"] = std::to_string(c.n_blocks);
    m["config.mlp_hidden"] = std::to_string(c.mlp_hidden);
    m["config.ln_eps"] = fmt_real(c.ln_eps);
}

ViTConfig get_arch(const Manifest & m) {
    ViTConfig v;
    v.image_size = meta_size(m, "config.image_size");
    v.patch_size = meta_size(m, "config.patch_size");
    v.channels = meta_size(m, "config.channels");
    v.d_model = meta_size(m, "config.d_model");
    v.n_heads = meta_size(m, "config.n_heads");
    v.n_blocks = meta_size(m, "config.n_blocks");
    v.mlp_hidden = meta_size(m, "config.mlp_hidden");
    v.ln_eps = meta_real(m, "config.ln_eps");
    manifest_guard("config", [&] {
        v.validate();
        return 0;
    });
    return v;
}

void put_task_spec(Manifest & m, const std::string & prefix, const SyntheticTaskSpec & s) {
    m[prefix + "family"] = family_name(s.family);
    m[prefix + "classes"] = std::to_string(s.classes);
    m[prefix + "train_size"] = std::to_string(s.train_size);
    m[prefix + "test_size"] = std::to_string(s.test_size);
    m[prefix + "noise"] = fmt_real(s.noise);
    m[prefix + "seed"] = std::to_string(s.seed);
    m[prefix + "image_size"] = std::to_string(s.image_size);
}

SyntheticTaskSpec get_task_spec(const Manifest & m, const std::string & prefix) {
    SyntheticTaskSpec s;
    s.family = manifest_guard(prefix + "family", [&] {
        try {
            return parse_family(meta(m, prefix + "family"));
        } catch (const DataError & e) {
            throw ContractError(e.what());
        }
    });
    s.classes = meta_size(m, prefix + "classes");
    s.train_size = meta_size(m, prefix + "train_size");
    s.test_size = meta_size(m, prefix + "test_size");
    s.noise = meta_real(m, prefix + "noise");
    s.seed = meta_size(m, prefix + "seed");
    s.image_size = meta_size(m, prefix + "image_size");
    manifest_guard(prefix + "*", [&] {
        s.validate();
        return 0;
    });
    return s;
}

std::string format_real(double x) { return fmt_real(x); }

std::string format_manifest(const Manifest & m) {
    std::string out;
    for (const auto & [k, v] : m) {
        if (k.empty() || k.find_first_of("=\n") != std::string::npos)
            throw ContractError("manifest key '" + k + "' is empty or contains '=' or a newline");
        if (v.find('\n') != std::string::npos) throw ContractError("manifest value for '" + k + "' contains a newline");
        out += k + '=' + v + '\n';
    }
    return out;
}

Manifest parse_manifest(std::string_view text) {
    Manifest m;
    std::size_t line = 0;
    while (!text.empty()) {
        ++line;
        const auto nl = text.find('\n');
        if (nl == std::string_view::npos)
            throw CheckpointError(Kind::Manifest, "manifest line " + std::to_string(line) + " not terminated");
        const auto row = text.substr(0, nl);
        text.remove_prefix(nl + 1);
        const auto eq = row.find('=');
        if (eq == std::string_view::npos || eq == 0)
            throw CheckpointError(Kind::Manifest, "manifest line " + std::to_string(line) + " is not key=value");
        if (!m.emplace(std::string(row.substr(0, eq)), std::string(row.substr(eq + 1))).second)
            throw CheckpointError(Kind::Manifest, "duplicate manifest key '" + std::string(row.substr(0, eq)) + "'");
    }
    return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint & ckpt) {
    for (const auto & [name, s] : ckpt.sparse)
        if (ckpt.dense.count(name)) throw ContractError("checkpoint tensor '" + name + "' is both dense and sparse");
    if (ckpt.size() > std::numeric_limits<std::uint32_t>::max()) throw ContractError("too many checkpoint tensors");

    Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(ckpt.size()));

    // merge the two maps in name order
    auto d = ckpt.dense.begin();
    auto s = ckpt.sparse.begin();
    while (d != ckpt.dense.end() || s != ckpt.sparse.end()) {
        if (s == ckpt.sparse.end() || (d != ckpt.dense.end() && d->first < s->first)) {
            const bool single = fits_f32(d->second.data());
            put_header(w, d->first, single ? DType::F32 : DType::F64, d->second.shape());
            put_values(w, d->second.data(), single);
            ++d;
        } else {
            const auto & sp = s->second;
            sp.validate();
            const bool single = fits_f32(sp.values);
            put_header(w, s->first, single ? DType::SparseF32 : DType::SparseF64, sp.dense_shape);
            w.u64(sp.nnz());
            for (auto i : sp.indices) w.u32(i);
            put_values(w, sp.values, single);
            ++s;
        }
    }

    const auto text = format_manifest(ckpt.manifest);
    if (text.size() > std::numeric_limits<std::uint32_t>::max()) throw ContractError("manifest too large");
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text);
    w.u32(static_cast<std::uint32_t>(text.size()));
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (r.remaining() < 4 || r.str(4, "magic") != std::string_view(kMagic, 4))
        throw CheckpointError(Kind::Magic, "not a checkpoint (bad magic)");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(Kind::Version, "unsupported checkpoint version " + std::to_string(version));
    const auto count = r.u32("tensor count");

    Checkpoint c;
    std::string prev;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = r.u16("tensor name length");
        if (len == 0) throw CheckpointError(Kind::Format, "empty tensor name at entry " + std::to_string(k));
        auto name = r.str(len, "tensor name at entry " + std::to_string(k));
        if (k > 0 && !(prev < name))
            throw CheckpointError(Kind::Format, "tensor names not strictly ascending at '" + name + "'");
        const auto tag = "tensor '" + name + "'";
        const auto code = r.u8(tag);
        if (code > 3) throw CheckpointError(Kind::DType, "unknown dtype " + std::to_string(code) + " for " + tag);
        const auto dt = static_cast<DType>(code);
        const auto rank = r.u8(tag);
        if (rank > kMaxRank) throw CheckpointError(Kind::Format, tag + " has rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            const auto dim = r.u32(tag);
            if (dim == 0) throw CheckpointError(Kind::Format, tag + " has a zero dimension");
            shape.push_back(dim);
            numel *= dim;
            if (numel > (std::uint64_t{1} << 40)) throw CheckpointError(Kind::Format, tag + " is implausibly large");
        }
        const bool single = dt == DType::F32 || dt == DType::SparseF32;
        const std::size_t vbytes = single ? 4 : 8;
        auto read_values = [&](std::size_t n) {
            r.need(n * vbytes, tag);
            std::vector<double> v(n);
            for (auto & x : v) x = single ? r.f32(tag) : r.f64(tag);
            return v;
        };
        if (dt == DType::F32 || dt == DType::F64) {
            c.dense.emplace(name, Tensor(shape, read_values(numel)));
        } else {
            const auto nnz = r.u64(tag);
            if (nnz > numel) throw CheckpointError(Kind::Format, tag + " has more stored values than elements");
            r.need(nnz * (4 + vbytes), tag);
            SparseTensor sp;
            sp.dense_shape = shape;
            sp.indices.resize(nnz);
            for (auto & i : sp.indices) i = r.u32(tag);
            sp.values = read_values(nnz);
            try {
                sp.validate();
            } catch (const ContractError & e) {
                throw CheckpointError(Kind::Format, tag + ": " + e.what());
            }
            c.sparse.emplace(name, std::move(sp));
        }
        prev = std::move(name);
    }

    const auto len = r.u32("manifest length");
    auto text = r.str(len, "manifest");
    const auto trailer = r.u32("manifest trailer");
    if (trailer != len) throw CheckpointError(Kind::Format, "manifest trailer length mismatch");
    if (r.remaining() != 0) throw CheckpointError(Kind::Format, "trailing bytes after manifest");
    c.manifest = parse_manifest(text);
    return c;
}

void write_bytes_atomic(const fs::path & path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError(Kind::Io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError(Kind::Io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw CheckpointError(Kind::Io, "cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_text_atomic(const fs::path & path, const std::string & text) {
    write_bytes_atomic(path, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

std::size_t write_checkpoint_file(const Checkpoint & ckpt, const fs::path & path) {
    const auto bytes = encode_checkpoint(ckpt);
    write_bytes_atomic(path, bytes);
    return bytes.size();
}

Checkpoint read_checkpoint_file(const fs::path & path) { return decode_checkpoint(slurp(path)); }

Manifest read_manifest(const fs::path & path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw CheckpointError(Kind::Io, "cannot open " + path.string());
    const auto size = static_cast<std::uint64_t>(in.tellg());
    char head[4] = {};
    in.seekg(0);
    if (size < 16 || !in.read(head, 4) || std::string_view(head, 4) != std::string_view(kMagic, 4))
        throw CheckpointError(Kind::Magic, path.string() + " is not a checkpoint");
    std::uint8_t tail[4];
    in.seekg(static_cast<std::streamoff>(size - 4));
    in.read(reinterpret_cast<char *>(tail), 4);
    const std::uint64_t len = Reader(tail).u32("manifest trailer");
    if (len + 8 + 12 > size) throw CheckpointError(Kind::Truncated, "manifest of " + path.string() + " truncated");
    std::string text(len, '\0');
    in.seekg(static_cast<std::streamoff>(size - 4 - len));
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw CheckpointError(Kind::Io, "read failed for " + path.string());
    return parse_manifest(text);
}

Checkpoint tree_checkpoint(const ParamTree & tree, Manifest manifest) {
    Checkpoint c;
    for (const auto & [name, t] : tree) c.dense.emplace(name, t);
    c.manifest = std::move(manifest);
    return c;
}

ParamTree checkpoint_tree(const Checkpoint & ckpt, const std::string & prefix) {
    ParamTree t;
    for (const auto & [name, v] : ckpt.dense)
        if (name.compare(0, prefix.size(), prefix) == 0 && name.find('/', prefix.size()) == std::string::npos)
            t.set(name.substr(prefix.size()), v);
    if (t.empty()) throw CheckpointError(Kind::Format, "checkpoint holds no parameters under '" + prefix + "'");
    return t;
}

Checkpoint expert_checkpoint(const ParamTree & params, const TaskHead & head, Manifest manifest) {
    auto c = tree_checkpoint(params, std::move(manifest));
    c.dense.emplace("task_head/weight", head.weight);
    c.dense.emplace("task_head/bias", head.bias);
    c.manifest["head.task_id"] = std::to_string(head.task_id);
    return c;
}

TaskHead checkpoint_head(const Checkpoint & ckpt) {
    auto w = ckpt.dense.find("task_head/weight");
    auto b = ckpt.dense.find("task_head/bias");
    if (w == ckpt.dense.end() || b == ckpt.dense.end())
        throw CheckpointError(Kind::Format, "checkpoint holds no task head");
    TaskHead h;
    h.task_id = static_cast<int>(meta_size(ckpt.manifest, "head.task_id"));
    h.weight = w->second;
    h.bias = b->second;
    if (h.weight.rank() != 2 || h.weight.cols() != h.bias.size())
        throw CheckpointError(Kind::Format, "task head weight " + shape_str(h.weight.shape()) + " does not match bias " +
                                                shape_str(h.bias.shape()));
    return h;
}

Checkpoint merged_checkpoint(const MergedModel & model, Manifest extra) {
    Checkpoint c;
    c.manifest = std::move(extra);
    auto & m = c.manifest;
    m["kind"] = "merged";
    put_arch(m, model.config);
    m["strategy"] = strategy_name(model.strategy);
    m["shared_router"] = model.shared_router ? "1" : "0";
    m["lambda_init"] = fmt_real(model.lambda_init);
    m["rho"] = fmt_real(model.rho);
    m["l_fc"] = std::to_string(model.l_fc);
    m["router_input"] = router_input_name(model.router_input);
    m["seeds"] = std::to_string(model.seed);
    m["tasks"] = std::to_string(model.tasks());
    m["modules"] = std::to_string(model.modules.size());
    m["routers"] = std::to_string(model.routers.size());
    m["heads"] = std::to_string(model.heads.size());

    for (const auto & [name, t] : model.static_tree) c.dense.emplace("static/" + name, t);
    for (std::size_t i = 0; i < model.modules.size(); ++i) {
        const auto & mod = model.modules[i];
        const auto pre = "module/" + std::to_string(i) + "/";
        m[pre + "layer"] = std::to_string(mod.layer);
        m[pre + "kind"] = submodule_name(mod.kind);
        m[pre + "router"] = std::to_string(mod.router);
        m[pre + "sparse"] = mod.is_sparse() ? "1" : "0";
        m[pre + "experts"] = std::to_string(mod.experts());
        for (const auto & [name, t] : mod.base) c.dense.emplace(pre + "base/" + name, t);
        for (std::size_t e = 0; e < mod.dense.size(); ++e)
            for (const auto & [name, t] : mod.dense[e])
                c.dense.emplace(pre + "expert/" + std::to_string(e) + "/" + name, t);
        for (std::size_t e = 0; e < mod.sparse.size(); ++e)
            for (const auto & [name, t] : mod.sparse[e])
                c.sparse.emplace(pre + "expert/" + std::to_string(e) + "/" + name, t);
    }
    for (std::size_t r = 0; r < model.routers.size(); ++r) {
        const auto pre = "router/" + std::to_string(r) + "/";
        m[pre + "depth"] = std::to_string(model.routers[r].depth);
        for (const auto & [name, t] : model.routers[r].tensors()) c.dense.emplace(pre + name, t);
    }
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
        const auto pre = "head/" + std::to_string(h) + "/";
        m[pre + "task_id"] = std::to_string(model.heads[h].task_id);
        c.dense.emplace(pre + "weight", model.heads[h].weight);
        c.dense.emplace(pre + "bias", model.heads[h].bias);
    }
    return c;
}

MergedModel checkpoint_merged(const Checkpoint & ckpt) {
    if (ckpt.meta("kind") != "merged")
        throw CheckpointError(Kind::Manifest, "checkpoint kind is '" + ckpt.meta("kind") + "', not merged");
    MergedModel model;
    model.config = get_arch(ckpt.manifest);
    model.strategy = manifest_guard("strategy", [&] { return parse_strategy(ckpt.meta("strategy")); });
    model.shared_router = ckpt.meta("shared_router") == "1";
    model.lambda_init = meta_real(ckpt.manifest, "lambda_init");
    model.rho = meta_real(ckpt.manifest, "rho");
    model.l_fc = static_cast<int>(meta_size(ckpt.manifest, "l_fc"));
    model.router_input = manifest_guard("router_input", [&] { return parse_router_input(ckpt.meta("router_input")); });
    model.seed = meta_size(ckpt.manifest, "seeds");

    const auto n_modules = meta_size(ckpt.manifest, "modules");
    const auto n_routers = meta_size(ckpt.manifest, "routers");
    const auto n_heads = meta_size(ckpt.manifest, "heads");
    const auto n_tasks = meta_size(ckpt.manifest, "tasks");
    model.modules.resize(n_modules);
    model.routers.resize(n_routers);
    model.heads.resize(n_heads);
    for (std::size_t i = 0; i < n_modules; ++i) {
        auto & mod = model.modules[i];
        const auto pre = "module/" + std::to_string(i) + "/";
        mod.layer = meta_size(ckpt.manifest, pre + "layer");
        mod.kind = manifest_guard(pre + "kind", [&] { return parse_submodule(ckpt.meta(pre + "kind")); });
        mod.router = meta_size(ckpt.manifest, pre + "router");
        if (mod.router >= n_routers) throw CheckpointError(Kind::Manifest, pre + "router out of range");
        const auto experts = meta_size(ckpt.manifest, pre + "experts");
        if (experts != n_tasks) throw CheckpointError(Kind::Manifest, pre + "experts disagrees with task count");
        if (ckpt.meta(pre + "sparse") == "1")
            mod.sparse.resize(experts);
        else
            mod.dense.resize(experts);
    }
    for (std::size_t r = 0; r < n_routers; ++r)
        model.routers[r].depth = static_cast<int>(meta_size(ckpt.manifest, "router/" + std::to_string(r) + "/depth"));
    for (std::size_t h = 0; h < n_heads; ++h)
        model.heads[h].task_id = static_cast<int>(meta_size(ckpt.manifest, "head/" + std::to_string(h) + "/task_id"));

    auto index = [&](const std::vector<std::string> & parts, std::size_t k, std::size_t bound, const std::string & name) {
        const auto i = parse_index(parts[k], name);
        if (i >= bound) throw CheckpointError(Kind::Format, "index out of range in tensor name " + name);
        return i;
    };
    for (const auto & [name, t] : ckpt.dense) {
        const auto parts = split_path(name);
        if (parts[0] == "static" && parts.size() == 2) {
            model.static_tree.set(parts[1], t);
        } else if (parts[0] == "module" && parts.size() == 4 && parts[2] == "base") {
            model.modules[index(parts, 1, n_modules, name)].base.emplace(parts[3], t);
        } else if (parts[0] == "module" && parts.size() == 5 && parts[2] == "expert") {
            auto & mod = model.modules[index(parts, 1, n_modules, name)];
            if (mod.is_sparse()) throw CheckpointError(Kind::Format, "dense expert tensor in sparse module: " + name);
            mod.dense[index(parts, 3, mod.dense.size(), name)].emplace(parts[4], t);
        } else if (parts[0] == "router" && parts.size() == 3) {
            manifest_guard(name, [&] {
                model.routers[index(parts, 1, n_routers, name)].set(parts[2], t);
                return 0;
            });
        } else if (parts[0] == "head" && parts.size() == 3 && (parts[2] == "weight" || parts[2] == "bias")) {
            auto & h = model.heads[index(parts, 1, n_heads, name)];
            (parts[2] == "weight" ? h.weight : h.bias) = t;
        } else {
            throw CheckpointError(Kind::Format, "unexpected tensor in merged checkpoint: " + name);
        }
    }
    for (const auto & [name, t] : ckpt.sparse) {
        const auto parts = split_path(name);
        if (parts[0] != "module" || parts.size() != 5 || parts[2] != "expert")
            throw CheckpointError(Kind::Format, "unexpected sparse tensor in merged checkpoint: " + name);
        auto & mod = model.modules[index(parts, 1, n_modules, name)];
        if (!mod.is_sparse()) throw CheckpointError(Kind::Format, "sparse expert tensor in dense module: " + name);
        mod.sparse[index(parts, 3, mod.sparse.size(), name)].emplace(parts[4], t);
    }
    for (std::size_t i = 0; i < n_modules; ++i) {
        try {
            model.modules[i].validate();
        } catch (const Error & e) {
            throw CheckpointError(Kind::Format, "module " + std::to_string(i) + ": " + e.what());
        }
    }
    for (const auto & h : model.heads)
        if (h.weight.rank() != 2 || h.weight.cols() != h.bias.size())
            throw CheckpointError(Kind::Format, "head for task " + std::to_string(h.task_id) + " is incomplete");
    return model;
}

std::size_t write_checkpoint(const ParamTree & tree, const fs::path & path, Manifest manifest) {
    return write_checkpoint_file(tree_checkpoint(tree, std::move(manifest)), path);
}

std::size_t write_checkpoint(const MergedModel & model, const fs::path & path, Manifest extra) {
    return write_checkpoint_file(merged_checkpoint(model, std::move(extra)), path);
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_hash(const fs::path & path) { return fnv1a_hex(slurp(path)); }

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string & origin) {
    KeyValueConfig cfg;
    std::size_t line = 0;
    while (!text.empty() || line == 0) {
        ++line;
        const auto nl = text.find('\n');
        auto row = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (auto hash = row.find('#'); hash != std::string_view::npos) row = row.substr(0, hash);
        const auto body = trim(row);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        const auto where = origin + ":" + std::to_string(line);
        if (eq == std::string::npos) throw DataError(where + ": expected key=value, got '" + body + "'");
        auto key = trim(std::string_view(body).substr(0, eq));
        if (key.empty()) throw DataError(where + ": empty key");
        if (cfg.values.count(key)) throw DataError(where + ": duplicate key '" + key + "'");
        cfg.values.emplace(std::move(key), trim(std::string_view(body).substr(eq + 1)));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const fs::path & path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

std::optional<std::string> KeyValueConfig::find(const std::string & key) const {
    auto it = values.find(key);
    if (it == values.end()) return std::nullopt;
    return it->second;
}

std::optional<std::string> Settings::lookup(const std::string & key) const {
    if (auto it = flags_.find(key); it != flags_.end()) return it->second;
    return file_.find(key);
}

std::string Settings::str(const std::string & key, const std::string & fallback) const {
    return lookup(key).value_or(fallback);
}

double Settings::real(const std::string & key, double fallback) const {
    auto s = lookup(key);
    if (!s) return fallback;
    double v = 0.0;
    auto r = std::from_chars(s->data(), s->data() + s->size(), v);
    if (r.ec != std::errc() || r.ptr != s->data() + s->size() || !std::isfinite(v))
        throw DataError("setting " + key + ": '" + *s + "' is not a finite number");
    return v;
}

long long Settings::integer(const std::string & key, long long fallback) const {
    auto s = lookup(key);
    if (!s) return fallback;
    long long v = 0;
    auto r = std::from_chars(s->data(), s->data() + s->size(), v);
    if (r.ec != std::errc() || r.ptr != s->data() + s->size())
        throw DataError("setting " + key + ": '" + *s + "' is not an integer");
    return v;
}

std::size_t Settings::size(const std::string & key, std::size_t fallback) const {
    const auto v = integer(key, static_cast<long long>(fallback));
    if (v < 0) throw DataError("setting " + key + " must not be negative");
    return static_cast<std::size_t>(v);
}

bool Settings::flag(const std::string & key, bool fallback) const {
    auto s = lookup(key);
    if (!s) return fallback;
    if (*s == "1" || *s == "true" || *s == "yes" || *s == "on") return true;
    if (*s == "0" || *s == "false" || *s == "no" || *s == "off") return false;
    throw DataError("setting " + key + ": '" + *s + "' is not a boolean");
}

std::vector<std::string> Settings::list(const std::string & key, const std::vector<std::string> & fallback) const {
    auto s = lookup(key);
    return s ? split_list(*s) : fallback;
}

std::vector<std::string> split_list(const std::string & s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto p = s.find(sep, start);
        auto item = trim(std::string_view(s).substr(start, p == std::string::npos ? std::string::npos : p - start));
        if (!item.empty()) out.push_back(std::move(item));
        if (p == std::string::npos) break;
        start = p + 1;
    }
    return out;
}

} // namespace wemoe
