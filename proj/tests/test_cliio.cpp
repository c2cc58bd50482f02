#include "doctest.h"

#include "pipeline.hpp"
#include "wemoe/cliio.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <unistd.h>

using namespace wemoe;
namespace fs = std::filesystem;
using Kind = CheckpointError::Kind;

namespace {

ViTConfig tiny() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_blocks = 2;
    c.mlp_hidden = 16;
    return c;
}

ParamTree perturbed(const ParamTree & p, std::uint64_t seed, double sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, sd);
    ParamTree out;
    for (const auto & [n, t] : p) {
        auto d = t.to_vector();
        for (auto & x : d) x += nd(rng);
        out.set(n, Tensor(t.shape(), std::move(d)));
    }
    return out;
}

Tensor random_image(const ViTConfig & c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> d(c.image_size * c.image_size * c.channels);
    for (auto & x : d) x = u(rng);
    return Tensor({c.image_size, c.image_size, c.channels}, std::move(d));
}

MergedModel small_model(const UpscaleConfig & u) {
    const auto cfg = tiny();
    const auto theta = init_vit(cfg, 3);
    std::vector<TaskVector> tvs;
    std::vector<TaskHead> heads;
    for (int t = 0; t < 3; ++t) {
        tvs.push_back(compute_task_vector(perturbed(theta, 10 + t, 0.05), theta, t));
        heads.push_back(init_head(cfg, t, 3, 20 + t));
    }
    return upscale_to_wemoe(cfg, theta, tvs, heads, u);
}

fs::path scratch(const std::string & name) {
    auto d = fs::temp_directory_path() / ("wemoe_cliio_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d / name;
}

std::vector<std::uint8_t> bytes_of(std::initializer_list<int> v) {
    std::vector<std::uint8_t> out;
    for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

Kind decode_kind(const std::vector<std::uint8_t> & b) {
    try {
        decode_checkpoint(b);
    } catch (const CheckpointError & e) {
        return e.kind();
    }
    FAIL("decode succeeded");
    return Kind::Io;
}

std::string decode_message(const std::vector<std::uint8_t> & b) {
    try {
        decode_checkpoint(b);
    } catch (const CheckpointError & e) {
        return e.what();
    }
    return "";
}

bool same(const Checkpoint & a, const Checkpoint & b) {
    if (a.manifest != b.manifest || a.dense.size() != b.dense.size() || a.sparse.size() != b.sparse.size()) return false;
    for (const auto & [n, t] : a.dense)
        if (!b.dense.count(n) || !t.identical(b.dense.at(n))) return false;
    for (const auto & [n, s] : a.sparse) {
        if (!b.sparse.count(n)) return false;
        const auto & o = b.sparse.at(n);
        if (s.dense_shape != o.dense_shape || s.indices != o.indices) return false;
        for (std::size_t i = 0; i < s.nnz(); ++i)
            if (std::bit_cast<std::uint64_t>(s.values[i]) != std::bit_cast<std::uint64_t>(o.values[i])) return false;
    }
    return true;
}

Checkpoint sample_checkpoint() {
    Checkpoint c;
    c.dense.emplace("b.weight", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    c.dense.emplace("a.exact", Tensor({3}, {0.1, -2.5e-300, 1.0 / 3.0}));
    SparseTensor s;
    s.dense_shape = {4, 5};
    s.indices = {0, 7, 19};
    s.values = {0.5, -1.25, 3.0};
    c.sparse.emplace("c.sparse", s);
    c.manifest = {{"rho", "0.9"}, {"strategy", "mlp-only"}, {"note", "a = b"}};
    return c;
}

} // namespace

TEST_CASE("empty checkpoint has a fixed byte layout") {
    const auto b = encode_checkpoint({});
    CHECK(b == bytes_of({'W', 'E', 'M', 'C', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}));
    const auto c = decode_checkpoint(b);
    CHECK(c.size() == 0);
    CHECK(c.manifest.empty());
}

TEST_CASE("single tensor byte layout") {
    Checkpoint c;
    c.dense.emplace("w", Tensor({2}, {1.0, -2.0}));
    c.manifest["k"] = "v";
    // 1.0f = 0x3f800000, -2.0f = 0xc0000000
    CHECK(encode_checkpoint(c) == bytes_of({'W', 'E', 'M', 'C', 1, 0, 0, 0, 1, 0, 0, 0,  // header
                                            1, 0, 'w', 0, 1, 2, 0, 0, 0,                 // name, f32, rank 1, dim 2
                                            0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0,             // values
                                            4, 0, 0, 0, 'k', '=', 'v', '\n', 4, 0, 0, 0}));

    Checkpoint d;
    d.dense.emplace("x", Tensor({1}, {0.1}));
    const auto b = encode_checkpoint(d);
    CHECK(b[16] == 1); // not representable in float: f64
    CHECK(b.size() == 12 + 2 + 1 + 2 + 4 + 8 + 8);
}

TEST_CASE("sparse record layout") {
    Checkpoint c;
    SparseTensor s;
    s.dense_shape = {3};
    s.indices = {2};
    s.values = {0.5};
    c.sparse.emplace("s", s);
    CHECK(encode_checkpoint(c) == bytes_of({'W', 'E', 'M', 'C', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 's', 2, 1, 3, 0, 0, 0,
                                            1, 0, 0, 0, 0, 0, 0, 0,  // nnz
                                            2, 0, 0, 0,              // index
                                            0, 0, 0, 0x3f,           // 0.5f
                                            0, 0, 0, 0, 0, 0, 0, 0}));
    s.values = {0.1};
    c.sparse["s"] = s;
    CHECK(encode_checkpoint(c)[15] == static_cast<std::uint8_t>(DType::SparseF64));
}

TEST_CASE("round trip is value and manifest identical") {
    const auto c = sample_checkpoint();
    const auto b = encode_checkpoint(c);
    const auto d = decode_checkpoint(b);
    CHECK(same(c, d));
    CHECK(encode_checkpoint(d) == b);

    SUBCASE("names come out sorted regardless of kind") {
        CHECK(b[12] == 7); // "a.exact" first
    }
    SUBCASE("special values") {
        Checkpoint e;
        e.dense.emplace("v", Tensor({5}, {0.0, -0.0, INFINITY, -INFINITY, 1e-45}));
        const auto r = decode_checkpoint(encode_checkpoint(e));
        CHECK(r.dense.at("v").identical(e.dense.at("v")));
        CHECK(std::signbit(r.dense.at("v")[1]));
    }
    SUBCASE("rank 0 and rank 3") {
        Checkpoint e;
        e.dense.emplace("s", Tensor::scalar(2.5));
        e.dense.emplace("t", Tensor({2, 1, 2}, {1, 2, 3, 4}));
        CHECK(same(e, decode_checkpoint(encode_checkpoint(e))));
    }
}

TEST_CASE("tree files: round trip, hash stability, atomic write") {
    const auto theta = perturbed(init_vit(tiny(), 5), 6, 0.01);
    const auto p1 = scratch("tree1.wemc"), p2 = scratch("tree2.wemc");
    const auto n = write_checkpoint(theta, p1, {{"kind", "base"}});
    CHECK(n == fs::file_size(p1));
    write_checkpoint(theta, p2, {{"kind", "base"}});
    CHECK(file_hash(p1) == file_hash(p2));
    CHECK_FALSE(fs::exists(p1.string() + ".tmp"));

    const auto back = read_checkpoint_file(p1);
    CHECK(checkpoint_tree(back).identical(theta));
    CHECK(read_manifest(p1) == Manifest{{"kind", "base"}});

    // rewriting leaves the bytes untouched
    const auto h = file_hash(p1);
    write_checkpoint(checkpoint_tree(back), p1, back.manifest);
    CHECK(file_hash(p1) == h);

    SUBCASE("f64 values survive") {
        PrecisionScope f64(Precision::F64);
        const auto t = perturbed(theta, 7, 1e-3);
        write_checkpoint(t, p2);
        CHECK(checkpoint_tree(read_checkpoint_file(p2)).identical(t));
    }
    SUBCASE("I/O failures name the path") {
        const fs::path bad = "/proc/definitely/not/here.wemc";
        try {
            write_checkpoint(theta, bad);
            FAIL("no error");
        } catch (const CheckpointError & e) {
            CHECK(e.kind() == Kind::Io);
        } catch (const fs::filesystem_error &) {
        }
        try {
            read_checkpoint_file(scratch("missing.wemc"));
            FAIL("no error");
        } catch (const CheckpointError & e) {
            CHECK(e.kind() == Kind::Io);
            CHECK(std::string(e.what()).find("missing.wemc") != std::string::npos);
        }
    }
}

TEST_CASE("merged model round trip") {
    PrecisionScope f64(Precision::F64);
    UpscaleConfig dense;
    dense.seed = 4;
    UpscaleConfig sparse = dense;
    sparse.rho = 0.9;
    sparse.shared_router = true;
    UpscaleConfig block = dense;
    block.strategy = UpscaleStrategy::AttAndMlpSeparately;
    block.l_fc = 1;

    for (const auto * u : {&dense, &sparse, &block}) {
        auto m = small_model(*u);
        // move routers off init so the test sees real values
        auto rt = router_tensors(m);
        for (auto & t : rt) {
            auto v = t.to_vector();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.01 * std::sin(static_cast<double>(i + 1));
            t = Tensor(t.shape(), std::move(v));
        }
        set_router_tensors(m, rt);

        const auto path = scratch("merged.wemc");
        write_checkpoint(m, path, {{"extra", "1"}});
        const auto ck = read_checkpoint_file(path);
        CHECK(ck.meta("extra") == "1");
        CHECK(ck.meta("strategy") == strategy_name(u->strategy));
        const auto r = checkpoint_merged(ck);
        CHECK(r.modules.size() == m.modules.size());
        CHECK(r.routers.size() == m.routers.size());
        CHECK(r.shared_router == m.shared_router);
        CHECK(r.rho == m.rho);
        CHECK(r.l_fc == m.l_fc);
        CHECK(r.lambda_init == m.lambda_init);
        CHECK(r.seed == m.seed);
        CHECK(r.router_input == m.router_input);
        CHECK(r.static_tree.identical(m.static_tree));
        for (std::size_t i = 0; i < m.modules.size(); ++i) {
            CHECK(r.modules[i].layer == m.modules[i].layer);
            CHECK(r.modules[i].kind == m.modules[i].kind);
            CHECK(r.modules[i].is_sparse() == m.modules[i].is_sparse());
            CHECK(r.modules[i].dictionary_values() == m.modules[i].dictionary_values());
        }
        for (int k = 0; k < 3; ++k) {
            const auto img = random_image(tiny(), 50 + k);
            CHECK(merged_logits(r, img, r.heads[k]).identical(merged_logits(m, img, m.heads[k])));
            CHECK(merged_routing(r, img).identical(merged_routing(m, img)));
        }
        // and the re-encoded bytes match
        CHECK(encode_checkpoint(merged_checkpoint(r, {{"extra", "1"}})) == encode_checkpoint(ck));
    }
}

TEST_CASE("manifest carries the merge settings") {
    UpscaleConfig u;
    u.rho = 0.9;
    u.shared_router = true;
    u.l_fc = 1;
    u.lambda = 0.25;
    u.seed = 77;
    const auto c = merged_checkpoint(small_model(u));
    CHECK(c.meta("strategy") == "mlp-only");
    CHECK(c.meta("rho") == "0.9");
    CHECK(c.meta("l_fc") == "1");
    CHECK(c.meta("shared_router") == "1");
    CHECK(c.meta("lambda_init") == "0.25");
    CHECK(c.meta("seeds") == "77");
    CHECK_THROWS_AS(c.meta("absent"), CheckpointError);
}

TEST_CASE("reader rejects malformed input with distinct kinds") {
    const auto good = encode_checkpoint(sample_checkpoint());

    auto b = good;
    b[0] = 'X';
    CHECK(decode_kind(b) == Kind::Magic);
    CHECK(decode_kind({}) == Kind::Magic);

    b = good;
    b[4] = 2;
    CHECK(decode_kind(b) == Kind::Version);
    CHECK(decode_message(b).find("version 2") != std::string::npos);

    b = good;
    b[12 + 2 + 7] = 9; // dtype of the first tensor
    CHECK(decode_kind(b) == Kind::DType);

    SUBCASE("truncation at every length") {
        for (std::size_t n = 4; n < good.size(); ++n) {
            std::vector<std::uint8_t> t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
            const auto k = decode_kind(t);
            CHECK((k == Kind::Truncated || k == Kind::Format));
        }
        // cut inside the second tensor's payload: header 12, "a.exact" record 15 + 3 f64, "b.weight" header 24
        std::vector<std::uint8_t> t(good.begin(), good.begin() + 12 + 15 + 24 + 24 + 5);
        CHECK(decode_kind(t) == Kind::Truncated);
        CHECK(decode_message(t).find("b.weight") != std::string::npos);
    }
    SUBCASE("trailing garbage and trailer mismatch") {
        auto t = good;
        t.push_back(0);
        CHECK(decode_kind(t) == Kind::Format);
        t = good;
        t.back() ^= 1;
        CHECK(decode_kind(t) == Kind::Format);
    }
    SUBCASE("unsorted or duplicate names") {
        Checkpoint c;
        c.dense.emplace("a", Tensor::scalar(1));
        c.dense.emplace("b", Tensor::scalar(2));
        auto t = encode_checkpoint(c);
        t[14] = 'b'; // first name becomes "b"
        CHECK(decode_kind(t) == Kind::Format);
    }
    SUBCASE("sparse indices out of range") {
        Checkpoint c;
        SparseTensor s;
        s.dense_shape = {3};
        s.indices = {1};
        s.values = {1.0};
        c.sparse.emplace("s", s);
        auto t = encode_checkpoint(c);
        t[29] = 3;
        CHECK(decode_kind(t) == Kind::Format);
    }
    SUBCASE("manifest without newline") {
        auto t = encode_checkpoint({});
        t.resize(12);
        for (int x : {1, 0, 0, 0, int('k'), 1, 0, 0, 0}) t.push_back(static_cast<std::uint8_t>(x));
        CHECK(decode_kind(t) == Kind::Manifest);
    }
}

TEST_CASE("fuzzed checkpoints never crash the reader") {
    const auto good = encode_checkpoint(sample_checkpoint());
    std::mt19937_64 rng(2024);
    std::size_t rejected = 0, accepted = 0;
    for (int iter = 0; iter < 20000; ++iter) {
        auto b = good;
        const int edits = 1 + static_cast<int>(rng() % 4);
        for (int e = 0; e < edits; ++e) {
            const auto pos = rng() % b.size();
            switch (rng() % 4) {
                case 0: b[pos] = static_cast<std::uint8_t>(rng()); break;
                case 1: b[pos] ^= static_cast<std::uint8_t>(1u << (rng() % 8)); break;
                case 2: b.resize(pos); break;
                default: // blow up a 32-bit field
                    for (std::size_t k = pos; k < std::min(pos + 4, b.size()); ++k) b[k] = 0xFF;
            }
            if (b.empty()) break;
        }
        try {
            decode_checkpoint(b);
            ++accepted;
        } catch (const CheckpointError &) {
            ++rejected;
        }
    }
    CHECK(rejected > 10000);
    MESSAGE("fuzz: " << rejected << " rejected, " << accepted << " accepted");
}

TEST_CASE("manifest is readable without parsing tensors") {
    auto c = sample_checkpoint();
    const auto p = scratch("manifest.wemc");
    write_checkpoint_file(c, p);
    CHECK(read_manifest(p) == c.manifest);
    CHECK(parse_manifest(format_manifest(c.manifest)) == c.manifest);
    CHECK_THROWS_AS(format_manifest({{"a=b", "c"}}), ContractError);
    CHECK_THROWS_AS(format_manifest({{"a", "line\nbreak"}}), ContractError);
}

TEST_CASE("key=value config") {
    const auto cfg = KeyValueConfig::parse("# header\n  lr = 0.5  # trailing\n\nname=a b\nempty =\n");
    CHECK(cfg.values.size() == 3);
    CHECK(cfg.find("lr") == "0.5");
    CHECK(cfg.find("name") == "a b");
    CHECK(cfg.find("empty") == "");
    CHECK_FALSE(cfg.find("missing"));

    try {
        KeyValueConfig::parse("a = 1\nnonsense\n", "x.cfg");
        FAIL("no error");
    } catch (const DataError & e) {
        CHECK(std::string(e.what()).find("x.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(KeyValueConfig::parse("a = 1\na = 2\n"), DataError);
    CHECK_THROWS_AS(KeyValueConfig::parse("= 2\n"), DataError);
    CHECK_THROWS_AS(KeyValueConfig::load(scratch("absent.cfg")), DataError);
}

TEST_CASE("settings precedence: flag > file > default") {
    for (bool in_file : {false, true}) {
        for (bool on_cli : {false, true}) {
            Settings s(in_file ? KeyValueConfig::parse("lr = 0.2\n") : KeyValueConfig{});
            if (on_cli) s.set_flag("lr", "0.3");
            const double want = on_cli ? 0.3 : in_file ? 0.2 : 0.1;
            CAPTURE(in_file);
            CAPTURE(on_cli);
            CHECK(s.real("lr", 0.1) == want);
        }
    }
    Settings s(KeyValueConfig::parse("n = 4\nflag = yes\nlist = a, b,,c\nbad = x\n"));
    CHECK(s.size("n", 1) == 4);
    CHECK(s.flag("flag", false));
    CHECK(s.list("list") == std::vector<std::string>{"a", "b", "c"});
    CHECK_THROWS_AS(s.real("bad", 0), DataError);
    CHECK_THROWS_AS(s.integer("bad", 0), DataError);
    CHECK_THROWS_AS(s.flag("bad", false), DataError);
    s.set_flag("n", "-1");
    CHECK_THROWS_AS(s.size("n", 0), DataError);
}

namespace {

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(const std::vector<std::string> & args) {
    std::ostringstream out, err;
    const int code = smoke::run(args, out, err);
    return {code, out.str(), err.str()};
}

const char * kTiny = "image_size = 8\npatch_size = 4\nd_model = 8\nheads = 2\nblocks = 2\nmlp_hidden = 16\n"
                     "tasks = stripe-orientation, corner-quadrant, ring-radius\ntrain_size = 32\ntest_size = 16\n"
                     "pretrain_size = 64\npretrain_epochs = 1\nfinetune_epochs = 1\nsteps = 3\nbatch = 4\n";

} // namespace

TEST_CASE("cli exit codes") {
    CliRun r = cli({});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
    CHECK(cli({"--help"}).code == kExitOk);
    CHECK(cli({"merge", "--no-such-flag"}).code == kExitUsage);

    const auto dir = scratch("cli_missing");
    r = cli({"--out", dir.string(), "finetune"});
    CHECK(r.code == kExitData);
    CHECK(r.err.find("theta0.wemc") != std::string::npos);
    CHECK(cli({"--config", scratch("nope.cfg").string(), "pretrain"}).code == kExitData);
    CHECK(cli({"--precision", "f16", "pretrain"}).code == kExitData);
}

TEST_CASE("cli stages on a tiny config") {
    const auto dir = scratch("cli_tiny");
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto cfg = (dir / "tiny.cfg").string();
    write_text_atomic(cfg, kTiny);
    const auto out = (dir / "out").string();
    auto run = [&](std::vector<std::string> args) {
        args.insert(args.begin(), {"--config", cfg, "--out", out});
        auto r = cli(args);
        INFO(r.err);
        REQUIRE(r.code == kExitOk);
        return r;
    };
    run({"pretrain"});
    run({"finetune"});
    CHECK(fs::exists(dir / "out/expert_2.wemc"));

    SUBCASE("E-WEMoE-90% from merge flags") {
        run({"merge", "--strategy", "mlp-only", "--rho", "0.9", "--shared-router"});
        const auto ck = read_checkpoint_file(dir / "out/merged.wemc");
        CHECK(ck.meta("rho") == "0.9");
        CHECK(ck.meta("shared_router") == "1");
        CHECK(ck.meta("strategy") == "mlp-only");
        const auto m = checkpoint_merged(ck);
        CHECK(m.routers.size() == 1);
        REQUIRE(m.modules.size() == 2);
        for (const auto & mod : m.modules) {
            CHECK(mod.is_sparse());
            CHECK(mod.kind == Submodule::Mlp);
            // 10% of each expert's MLP deltas survive
            CHECK(mod.dictionary_values() == 3 * kept_count(mod.base_values(), 0.9));
        }
    }
    SUBCASE("merge flags are validated") {
        CHECK(cli({"--config", cfg, "--out", out, "merge", "--rho", "1.5"}).code == kExitUsage);
        CHECK(cli({"--config", cfg, "--out", out, "merge", "--strategy", "everything"}).code != kExitOk);
        CHECK(cli({"--config", cfg, "--out", out, "merge", "--lambda", "abc"}).code == kExitData);
    }
    SUBCASE("tta precedence: flag > config > default") {
        run({"merge"});
        run({"tta"});
        CHECK(read_manifest(dir / "out/adapted.wemc").at("tta.steps") == "3");
        run({"tta", "--steps", "2"});
        CHECK(read_manifest(dir / "out/adapted.wemc").at("tta.steps") == "2");
        write_text_atomic(dir / "bare.cfg", "");
        // the built-in default when neither is given
        auto st = cli({"--config", (dir / "bare.cfg").string(), "--out", out, "tta", "--batch", "2"});
        REQUIRE(st.code == kExitOk);
        CHECK(read_manifest(dir / "out/adapted.wemc").at("tta.steps") == "200");
    }
    SUBCASE("numerical failure exits 3") {
        run({"merge"});
        CHECK(cli({"--config", cfg, "--out", out, "tta", "--lr", "1e308", "--steps", "5"}).code == kExitNumerical);
    }
    SUBCASE("reruns are byte-identical") {
        run({"merge", "--lfc", "1"});
        const auto before = file_hash(dir / "out/merged.wemc");
        const auto expert = file_hash(dir / "out/expert_1.wemc");
        run({"finetune", "--task", "1"});
        run({"merge", "--lfc", "1"});
        CHECK(file_hash(dir / "out/merged.wemc") == before);
        CHECK(file_hash(dir / "out/expert_1.wemc") == expert);
    }
    SUBCASE("analysis and landscape outputs") {
        run({"merge"});
        run({"tta"});
        run({"analyze", "--firstchoice"});
        CHECK(fs::exists(dir / "out/firstchoice.csv"));
        CHECK_FALSE(fs::exists(dir / "out/drift.csv"));
        run({"analyze", "--drift", "--magnitudes", "--routing"});
        std::ifstream in(dir / "out/drift.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "layer,module,mean_sq_l2");
        run({"landscape", "--step", "1"});
        std::ifstream ls(dir / "out/landscape.csv");
        std::string line;
        std::size_t rows = 0;
        while (std::getline(ls, line)) ++rows;
        CHECK(rows == 1 + 9);
        CHECK(cli({"--config", cfg, "--out", out, "landscape", "--pair", "0,0"}).code == kExitData);
    }
}

TEST_CASE("full pipeline smoke test with pinned hashes") {
    const auto dir = scratch("smoke");
    fs::remove_all(dir);
    const auto r = smoke::run_pipeline(dir);
    INFO(r.log);
    REQUIRE(r.exit_code == 0);
    for (const char * f : {"drift.csv", "firstchoice.csv", "landscape.csv", "routing.csv", "magnitudes.csv",
                           "report_standard.csv", "report_generalization.csv", "report_robustness.csv",
                           "tta_trace.csv"})
        CHECK(r.hashes.count(f) == 1);
    CHECK(r.hashes.size() == smoke::pinned().size());
    for (const auto & [name, h] : smoke::pinned()) {
        CAPTURE(name);
        CHECK(r.hashes.count(name) == 1);
        if (r.hashes.count(name)) CHECK(r.hashes.at(name) == h);
    }
}
