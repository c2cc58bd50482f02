#pragma once

// End-to-end CLI pipeline shared by the cliio tests and the acceptance runner.

#include "cli.hpp"
#include "wemoe/cliio.hpp"

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace smoke {

namespace fs = std::filesystem;

// Standard benchmark architecture and task families; data and schedules cut down to seconds.
inline const char * config_text() {
    return "# smoke pipeline\n"
           "classes = 4\n"
           "train_size = 128\n"
           "test_size = 32\n"
           "pretrain_size = 256\n"
           "pretrain_epochs = 2\n"
           "finetune_epochs = 4\n"
           "finetune_lr = 0.05\n"
           "steps = 20   # tta\n"
           "batch = 8\n";
}

inline const std::vector<std::vector<std::string>> & stages() {
    static const std::vector<std::vector<std::string>> s = {
        {"pretrain"},
        {"finetune"},
        {"taskvec", "--rho", "0.9"},
        {"merge"},
        {"merge", "--strategy", "mlp-only", "--rho", "0.9", "--shared-router", "--name", "e-wemoe-90.wemc"},
        {"tta"},
        {"eval", "--protocol", "standard"},
        {"eval", "--protocol", "generalization", "--seen", "0,1"},
        {"eval", "--protocol", "robustness", "--corruptions", "gaussian-noise@3,pixelate@2"},
        {"eval", "--model", "OUT/adapted.wemc"},
        {"analyze"},
        {"landscape", "--step", "0.5"},
    };
    return s;
}

struct Result {
    int exit_code = 0;
    std::string failed_stage;
    std::string log;
    std::map<std::string, std::string> hashes; // file name -> FNV-1a
};

inline int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    std::vector<const char *> argv{"wemoe"};
    for (const auto & a : args) argv.push_back(a.c_str());
    return wemoe::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

inline Result run_pipeline(const fs::path & dir) {
    fs::create_directories(dir);
    const auto cfg = dir / "smoke.cfg";
    wemoe::write_text_atomic(cfg, config_text());
    const auto out_dir = (dir / "out").string();
    Result r;
    std::ostringstream log;
    for (auto args : stages()) {
        for (auto & a : args)
            if (a.rfind("OUT/", 0) == 0) a = out_dir + a.substr(3);
        args.insert(args.begin(), {"--config", cfg.string(), "--out", out_dir});
        r.exit_code = run(args, log, log);
        if (r.exit_code != 0) {
            r.failed_stage = args[4];
            break;
        }
    }
    r.log = log.str();
    if (fs::exists(out_dir))
        for (const auto & e : fs::directory_iterator(out_dir))
            r.hashes[e.path().filename().string()] = wemoe::file_hash(e.path());
    return r;
}

// Every artifact the pipeline writes, pinned. Any change to numerics or formats shows up here.
inline const std::map<std::string, std::string> & pinned() {
    static const std::map<std::string, std::string> h = {
        {"adapted.wemc", "7fff90fe00c8bb6d"},
        {"drift.csv", "57d9d423ab7b58af"},
        {"e-wemoe-90.wemc", "a0dab5d382bc7d94"},
        {"eval_adapted.csv", "203f6abeb95f32d0"},
        {"expert_0.wemc", "ec12a703066c57fd"},
        {"expert_1.wemc", "443b1f936704b457"},
        {"expert_2.wemc", "ca5137527a90ee00"},
        {"expert_3.wemc", "000566d9988f9a4a"},
        {"firstchoice.csv", "c9abca77df312907"},
        {"landscape.csv", "70e4b7843e970137"},
        {"magnitudes.csv", "56c3a298b67a168a"},
        {"merged.wemc", "f6c162751a4519cf"},
        {"report_generalization.csv", "ddc8122e26a71fa6"},
        {"report_generalization.md", "b5ec9a8bd6cd0566"},
        {"report_robustness.csv", "d4408d65be97fffe"},
        {"report_robustness.md", "d5b635e6ca01638d"},
        {"report_standard.csv", "93a1665e5128af4f"},
        {"report_standard.md", "0195475ec10ed9cc"},
        {"routing.csv", "824053a8d39599f3"},
        {"taskvec_0.wemc", "db112caaf2e07257"},
        {"taskvec_1.wemc", "7790fd980b52ad5f"},
        {"taskvec_2.wemc", "fba0fca01ed5d070"},
        {"taskvec_3.wemc", "4ba27be7e1138bde"},
        {"theta0.wemc", "f57893d64fe43e4a"},
        {"tta_trace.csv", "73d975261bf04845"},
    };
    return h;
}

} // namespace smoke
