#pragma once

#include "wemoe/merging.hpp"
#include "wemoe/tta.hpp"

#include <array>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace wemoe {

enum class TaskFamily {
    StripeOrientation,
    BlobCount,
    CheckerFrequency,
    GlyphTemplate,
    RingRadius,
    CornerQuadrant,
    GradientDirection,
    NoiseTexture,
};

const char * family_name(TaskFamily f);
TaskFamily parse_family(const std::string & s);
std::size_t family_max_classes(TaskFamily f);
const std::vector<TaskFamily> & all_families();

struct SyntheticTaskSpec {
    TaskFamily family = TaskFamily::StripeOrientation;
    std::size_t classes = 4;
    std::size_t train_size = 512;
    std::size_t test_size = 128;
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::size_t image_size = 32;

    void validate() const;
    std::string name() const { return family_name(family); }
};

struct LabeledImages {
    std::vector<Tensor> images; // [S × S × 1], values in [0,1]
    std::vector<int> labels;
    // Extra per-image attributes, each trained with its own head during pre-training.
    std::vector<std::vector<int>> aux_labels;
    std::size_t size() const { return images.size(); }
};

struct TaskDataset {
    SyntheticTaskSpec spec;
    LabeledImages train, test;
};

struct Sample {
    Tensor image;
    int label = 0;
    // Generating parameter behind the label (the stripe angle in radians, the ring radius, ...).
    double latent = 0.0;
};

// Pure function of (spec, index). Labels cycle through the classes, so every C consecutive
// indices hold each class once. Train uses indices [0, train_size), test the next test_size.
Sample generate_sample(const SyntheticTaskSpec & spec, std::size_t index);
TaskDataset generate_task_dataset(const SyntheticTaskSpec & spec);

// Mixed "generic shapes" pre-training scenes: one to three rectangles, discs, bars or crosses. The label is the
// type of the main shape; aux labels are the object count, the main shape's quadrant, size bin and orientation bin.
LabeledImages generate_generic_shapes(std::size_t image_size, std::size_t count, std::uint64_t seed);

enum class CorruptionKind { GaussianNoise, ImpulseNoise, Contrast, Pixelate };

const char * corruption_name(CorruptionKind k);
CorruptionKind parse_corruption(const std::string & s);

// Severity 1..5 to the kind's parameter (sigma, flip fraction, contrast factor, block size).
struct CorruptionTable {
    std::array<double, 5> gaussian_sigma{0.04, 0.06, 0.08, 0.09, 0.10};
    std::array<double, 5> impulse_p{0.01, 0.02, 0.03, 0.05, 0.07};
    std::array<double, 5> contrast_c{0.75, 0.5, 0.4, 0.3, 0.15};
    std::array<double, 5> pixelate_k{2, 3, 4, 5, 6};

    double parameter(CorruptionKind kind, int severity) const;
};

struct Corruption {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    int severity = 1;
    std::uint64_t seed = 0;

    std::string name() const;
};

// Applies the transform with an explicit parameter; the image's index seeds its randomness.
Tensor corrupt_image(const Tensor & image, CorruptionKind kind, double parameter, std::uint64_t seed, std::size_t index);
LabeledImages apply_corruption(const LabeledImages & data, const Corruption & c, const CorruptionTable & table = {});

enum class Optimizer { Adam, SgdMomentum };

struct TrainConfig {
    Optimizer optimizer = Optimizer::Adam;
    double momentum = 0.9;
    std::size_t epochs = 3;
    // Head-only epochs on the frozen encoder before full fine-tuning.
    std::size_t head_epochs = 1;
    std::size_t batch = 32;
    double lr = 1e-3;
    double head_lr = 1e-2;
    std::uint64_t seed = 0;
};

struct Expert {
    ParamTree params;
    TaskHead head;
    double train_accuracy = 0.0;
};

// Trains the encoder from init_vit(config, seed) with one fresh head per label set; heads are discarded.
ParamTree pretrain(const ViTConfig & config, const LabeledImages & data, const TrainConfig & cfg);
// Linear probe on the frozen encoder, then joint cross-entropy training of encoder and head.
Expert finetune(const ViTConfig & config, const ParamTree & theta_0, const LabeledImages & train, std::size_t classes,
                int task_id, const TrainConfig & cfg);

// Argmax predictions (lowest index wins ties).
std::vector<int> predict(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                         const std::vector<Tensor> & images, std::size_t batch = 64);
std::vector<int> predict(const MergedModel & model, const TaskHead & head, const std::vector<Tensor> & images);
double accuracy(const std::vector<int> & predicted, const std::vector<int> & labels);
double evaluate_accuracy(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                         const LabeledImages & data, std::size_t batch = 64);
double evaluate_accuracy(const MergedModel & model, const TaskHead & head, const LabeledImages & data);
// Mean cross-entropy of a static model on labeled data.
double evaluate_loss(const ViTConfig & config, const ParamTree & params, const TaskHead & head,
                     const LabeledImages & data, std::size_t batch = 64);

enum class AccessKind { Train, Test, TaskVector, Head };

// Per-task datasets and experts. Every read through the accessors is logged so protocols
// can prove which tasks they touched.
class TaskStore {
public:
    struct Access {
        std::size_t task;
        AccessKind kind;
    };

    std::size_t add(TaskDataset dataset);
    void set_expert(std::size_t task, Expert expert, TaskVector tv);
    std::size_t size() const { return datasets_.size(); }
    bool has_expert(std::size_t task) const;

    const SyntheticTaskSpec & spec(std::size_t task) const;
    const LabeledImages & train(std::size_t task) const;
    const LabeledImages & test(std::size_t task) const;
    const TaskVector & task_vector(std::size_t task) const;
    const Expert & expert(std::size_t task) const;
    const TaskHead & head(std::size_t task) const;

    const std::vector<Access> & log() const { return log_; }
    void clear_log() const { log_.clear(); }
    bool accessed(std::size_t task, AccessKind kind) const;

private:
    void record(std::size_t task, AccessKind kind) const;
    std::vector<TaskDataset> datasets_;
    std::vector<std::optional<Expert>> experts_;
    std::vector<std::optional<TaskVector>> tvs_;
    mutable std::vector<Access> log_;
};

struct BenchConfig {
    ViTConfig arch;
    std::vector<TaskFamily> families;
    std::size_t classes = 4;
    std::size_t train_size = 512;
    std::size_t test_size = 128;
    double noise = 0.05;
    std::size_t pretrain_size = 4096;
    TrainConfig pretrain_cfg; // its seed is fixed: one base model serves every benchmark seed
    TrainConfig finetune_cfg;
    double ta_lambda = 0.3;
    UpscaleConfig wemoe;     // dense, per-layer routers
    UpscaleConfig ewemoe;    // sparse, shared router
    TTAConfig tta;
    std::uint64_t seed = 0;

    // Small ViT and the first four families; sized for minutes on one core.
    static BenchConfig standard(std::uint64_t seed);
};

struct Workbench {
    BenchConfig config;
    ParamTree theta_0;
    TaskStore store;
};

ParamTree pretrain_base(const BenchConfig & config);
// Data spec and fine-tuning settings of one benchmark task, as prepare_workbench derives them.
SyntheticTaskSpec task_spec(const BenchConfig & config, std::size_t task);
TrainConfig finetune_config(const BenchConfig & config, std::size_t task);
// Generates all task data, pre-trains the base (unless given) and fine-tunes one expert per task.
Workbench prepare_workbench(const BenchConfig & config, const ParamTree * theta_0 = nullptr);

enum class Method { Pretrained, Individual, WeightAverage, TaskArithmetic, WEMoE, EWEMoE };

const char * method_name(Method m);
Method parse_method(const std::string & s);

enum class Protocol { Standard, Generalization, Robustness };

const char * protocol_name(Protocol p);
Protocol parse_protocol(const std::string & s);

struct ProtocolOptions {
    // Generalization: tasks merged; all others are unseen.
    std::vector<std::size_t> seen;
    // Robustness: corrupted test conditions.
    std::vector<Corruption> corruptions;
    CorruptionTable table;
    // Robustness: adapt routers on the clean rather than the corrupted test data.
    bool tta_on_clean = false;
};

struct ReportRow {
    std::string method;
    std::string condition = "clean";
    std::vector<double> accuracy; // per evaluated task
    double average() const;
};

struct BenchReport {
    Protocol protocol = Protocol::Standard;
    std::vector<std::string> tasks;
    std::vector<ReportRow> rows;
    // Adapted dynamic models by method name (clean condition), for analysis.
    std::map<std::string, MergedModel> adapted;
    // TTA traces by method name.
    std::map<std::string, std::vector<TTAStep>> traces;

    const ReportRow & row(const std::string & method, const std::string & condition = "clean") const;
};

// Builds the merged model of a dynamic method over the given tasks, before adaptation.
MergedModel build_dynamic(const Workbench & wb, Method method, const std::vector<std::size_t> & tasks);
// Static merge of the given tasks' vectors.
ParamTree build_static(const Workbench & wb, Method method, const std::vector<std::size_t> & tasks);

BenchReport run_merge_benchmark(const Workbench & wb, const std::vector<Method> & methods, Protocol protocol,
                                const ProtocolOptions & options = {});

void write_markdown(std::ostream & os, const BenchReport & report);
void write_csv(std::ostream & os, const BenchReport & report);

} // namespace wemoe
