#pragma once

#include "wemoe/bench.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wemoe {

class CheckpointError : public DataError {
public:
    enum class Kind { Io, Magic, Version, Truncated, DType, Format, Manifest };
    CheckpointError(Kind kind, const std::string & what) : DataError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk element codes. 3 extends the format with double-precision sparse payloads.
enum class DType : std::uint8_t { F32 = 0, F64 = 1, SparseF32 = 2, SparseF64 = 3 };

using Manifest = std::map<std::string, std::string>;

struct Checkpoint {
    std::map<std::string, Tensor> dense;
    std::map<std::string, SparseTensor> sparse;
    Manifest manifest;

    std::size_t size() const { return dense.size() + sparse.size(); }
    const std::string & meta(const std::string & key) const;
};

// Layout, all little-endian:
//   "WEMC" u32 version u32 count
//   per tensor (names ascending): u16 len, name, u8 dtype, u8 rank, u32 dims[rank], payload
//     dense payload: values; sparse payload: u64 nnz, u32 indices[nnz], values[nnz]
//   u32 len, manifest text ("key=value\n" lines, keys ascending), u32 len again
// Values that survive a round trip through float are stored as 32-bit.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint & ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Atomic (temp file + rename). Returns the byte count.
std::size_t write_checkpoint_file(const Checkpoint & ckpt, const std::filesystem::path & path);
Checkpoint read_checkpoint_file(const std::filesystem::path & path);
// Reads only the trailing manifest.
Manifest read_manifest(const std::filesystem::path & path);

std::string format_manifest(const Manifest & m);
Manifest parse_manifest(std::string_view text);

void put_arch(Manifest & m, const ViTConfig & config);
ViTConfig get_arch(const Manifest & m);
// Keys <prefix>family, <prefix>classes, ... enough to regenerate the task's data.
void put_task_spec(Manifest & m, const std::string & prefix, const SyntheticTaskSpec & spec);
SyntheticTaskSpec get_task_spec(const Manifest & m, const std::string & prefix);
// Shortest text that parses back to the same double.
std::string format_real(double x);

Checkpoint tree_checkpoint(const ParamTree & tree, Manifest manifest = {});
ParamTree checkpoint_tree(const Checkpoint & ckpt, const std::string & prefix = "");

// Parameters plus task head under "task_head/".
Checkpoint expert_checkpoint(const ParamTree & params, const TaskHead & head, Manifest manifest = {});
TaskHead checkpoint_head(const Checkpoint & ckpt);

Checkpoint merged_checkpoint(const MergedModel & model, Manifest extra = {});
MergedModel checkpoint_merged(const Checkpoint & ckpt);

std::size_t write_checkpoint(const ParamTree & tree, const std::filesystem::path & path, Manifest manifest = {});
std::size_t write_checkpoint(const MergedModel & model, const std::filesystem::path & path, Manifest extra = {});

// 64-bit FNV-1a, lowercase hex.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);
std::string file_hash(const std::filesystem::path & path);
void write_text_atomic(const std::filesystem::path & path, const std::string & text);

// key=value lines, '#' starts a comment, surrounding whitespace trimmed.
struct KeyValueConfig {
    std::map<std::string, std::string> values;

    static KeyValueConfig parse(std::string_view text, const std::string & origin = "<config>");
    static KeyValueConfig load(const std::filesystem::path & path);
    std::optional<std::string> find(const std::string & key) const;
};

// Setting lookup with precedence: command-line flag, then config file, then default.
class Settings {
public:
    Settings() = default;
    explicit Settings(KeyValueConfig file) : file_(std::move(file)) {}

    void set_flag(const std::string & key, std::string value) { flags_[key] = std::move(value); }
    bool has_flag(const std::string & key) const { return flags_.count(key) != 0; }

    std::string str(const std::string & key, const std::string & fallback) const;
    double real(const std::string & key, double fallback) const;
    long long integer(const std::string & key, long long fallback) const;
    std::size_t size(const std::string & key, std::size_t fallback) const;
    bool flag(const std::string & key, bool fallback) const;
    std::vector<std::string> list(const std::string & key, const std::vector<std::string> & fallback = {}) const;

private:
    std::optional<std::string> lookup(const std::string & key) const;
    std::map<std::string, std::string> flags_;
    KeyValueConfig file_;
};

std::vector<std::string> split_list(const std::string & s, char sep = ',');

} // namespace wemoe
