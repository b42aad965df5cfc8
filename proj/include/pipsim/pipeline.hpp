#pragma once

// Model variants, losses, training and evaluation loops, and span-frequency
// analysis.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/config.hpp"
#include "pipsim/dataset.hpp"
#include "pipsim/encoders.hpp"
#include "pipsim/simulator.hpp"
#include "pipsim/spanselect.hpp"

namespace pipsim::pipe {

// `simulator` trains the frame predictor alone on the PSNR objective.
enum class Variant { pip, pip_no_ss, baseline, simulator };

std::string_view to_string(Variant v);
// Throws ConfigError for unknown names.
Variant parse_variant(std::string_view name);

struct RunConfig {
    Variant variant = Variant::pip;
    std::size_t input_frames = 3;
    std::size_t horizon = 37;
    std::size_t spans = 3;
    double eps = 1e-8;
    double lr = 1e-3;
    std::size_t batch = 2;
    std::size_t epochs = 20;
    double tf_rate = 0.1;
    double alpha = 0.01;   // weight of the simulation loss
    double lambda = 0.1;   // weight of the conciseness penalty
    // Classification gradients reach the simulator. Off: the simulator only
    // sees the simulation loss.
    bool joint = true;
    // Simulator weights stay fixed; rollouts run in inference mode and are
    // cached per scene.
    bool freeze_simulator = false;
    // Optional checkpoint whose sim.* arrays initialize the simulator.
    std::string simulator_checkpoint;
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    // Use only the first k training samples (0 = all).
    std::size_t train_limit = 0;
    // Stop once a clean pass over the training split reaches this accuracy
    // (0 disables the check).
    double stop_train_accuracy = 0.0;
    std::size_t image_features = 64;
    std::size_t query_features = 16;
    std::size_t context_features = 32;

    // Throws ConfigError on out-of-range values.
    void validate() const;
};

// Applies known keys; unknown keys or malformed values throw ConfigError.
void apply(RunConfig& config, const cfg::KeyValues& values);
cfg::KeyValues to_key_values(const RunConfig& config);
// Defaults, then file (if any), then overrides.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

enum class Mode { train, infer };

struct Forward {
    ad::Var probability;
    ad::Var logit;
    std::optional<span::SpanResult> spans;
    // Generated frames (empty for baseline).
    std::vector<ad::Var> generated;
    // True when `generated` lies on a trainable simulator's gradient path.
    bool simulated = false;
};

struct LossParts {
    ad::Var total;
    ad::Var bce;
    ad::Var sim;      // invalid when the simulator is frozen or absent
    // Generalized JSD of the span weights; invalid without spans. The total
    // adds lambda * (ln S - penalty).
    ad::Var penalty;
};

class Model {
  public:
    // Builds the variant's components for frames of the given resolution.
    Model(const RunConfig& config, std::size_t height, std::size_t width);

    const RunConfig& config() const { return config_; }
    Variant variant() const { return config_.variant; }
    bool has_simulator() const { return config_.variant != Variant::baseline; }
    const sim::Simulator& simulator() const { return simulator_; }
    const enc::Encoders& encoders() const { return encoders_; }
    ad::ParameterStore& store() { return store_; }
    const ad::ParameterStore& store() const { return store_; }

    // Registers and initializes every parameter of the variant, then loads
    // the configured simulator checkpoint unless told otherwise.
    void init(std::uint64_t seed, bool load_simulator_checkpoint = true);
    // Parameters that receive optimizer updates.
    std::vector<ad::Parameter*> trainable();

    // Inference rollout of a sample's input frames, [N, C, H, W].
    ad::Tensor predict(const ad::Tensor& input_frames);

    // Train mode rolls out with teacher forcing (rng required) unless the
    // simulator is frozen. `rollout`, when given, is used as the generated
    // frames in place of running the simulator.
    Forward forward(ad::Tape& tape, const data::Sample& sample, Mode mode, Rng* rng = nullptr,
                    const ad::Tensor* rollout = nullptr);

    LossParts total_loss(const Forward& out, const data::Sample& sample) const;

  private:
    RunConfig config_;
    sim::Simulator simulator_;
    enc::Encoders encoders_;
    ad::ParameterStore store_;
};

// Metadata embedded in checkpoints: the resolved config plus frame size.
std::string checkpoint_metadata(const Model& model);
void save_model(const Model& model, const std::filesystem::path& path);
// Rebuilds the model described by the checkpoint metadata and loads its arrays.
Model load_model(const std::filesystem::path& path);

// Samples of one split, loaded once.
struct SplitData {
    data::Split split = data::Split::train;
    std::vector<data::Sample> samples;
    std::vector<std::string> ids;  // "<scene id>:<object>"
};

SplitData load_split(const data::Manifest& manifest, const std::filesystem::path& dir, data::Split split,
                     std::size_t limit = 0);

struct MetricRow {
    std::size_t epoch = 0;
    std::string split;
    double bce = 0.0;
    double psnr = 0.0;  // mean dB of generated frames, NaN when not applicable
    double jsd = 0.0;   // NaN without spans
    double accuracy = 0.0;
};

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

struct Prediction {
    std::string id;
    int task = 0;
    int label = 0;
    double probability = 0.0;
    int predicted = 0;
};

struct EvalResult {
    std::size_t samples = 0;
    double accuracy = 0.0;
    double bce = 0.0;
    double psnr = 0.0;
    double jsd = 0.0;
    std::map<int, double> task_accuracy;
    std::vector<Prediction> predictions;
};

// Per-scene inference rollouts keyed by scene index.
using RolloutCache = std::map<std::size_t, ad::Tensor>;

// Accuracy counts a prediction correct when [p >= 0.5] equals the label.
// Throws DomainError on an empty split. Side-effect free.
EvalResult evaluate(Model& model, const SplitData& split, RolloutCache* cache = nullptr);

// Index of the first maximum; ties keep the earlier epoch.
std::size_t best_epoch(const std::vector<double>& validation_accuracy);

struct TrainResult {
    std::vector<MetricRow> metrics;
    std::size_t best_epoch = 0;  // 1-based, 0 if no epoch finished
    double best_val_accuracy = 0.0;
    double final_train_accuracy = 0.0;
    std::size_t epochs_run = 0;
    bool diverged = false;
    std::string message;
};

using ProgressFn = std::function<void(const MetricRow&)>;

// Trains `model` in place. On return the model holds the best-validation
// parameters; `last` receives the final-epoch parameters when given. On a
// non-finite loss training stops and the last good parameters are restored.
TrainResult train(Model& model, const SplitData& train_split, const SplitData& val_split,
                  ad::ParameterStore* last = nullptr, const ProgressFn& progress = {});

struct SimulatorReport {
    double model_psnr = 0.0;
    double copy_last_psnr = 0.0;
    std::size_t scenes = 0;
};

// Mean PSNR of inference rollouts against the copy-last-input baseline over
// the distinct scenes of a split.
SimulatorReport simulator_report(Model& model, const SplitData& split);

// Span analysis on the pip variant. Throws DomainError for other variants.
struct SpanRecord {
    std::size_t sample = 0;  // index into the analysed split
    std::string sample_id;
    std::size_t span = 0;
    std::vector<double> r;
    std::vector<std::size_t> selected;
    double score = 0.0;
};

struct SpanAnalysis {
    std::size_t horizon = 0;
    std::vector<std::vector<std::size_t>> per_span;  // [S][N] counts
    std::vector<std::size_t> union_counts;           // [N]
    std::vector<SpanRecord> records;
};

SpanAnalysis span_frequency_histogram(Model& model, const SplitData& split, RolloutCache* cache = nullptr);
void write_span_csv(const SpanAnalysis& analysis, const std::filesystem::path& path);
void write_histogram_csv(const SpanAnalysis& analysis, const std::filesystem::path& path);

struct ProximityTest {
    std::size_t samples = 0;  // samples with at least one event
    double observed = 0.0;    // selected frames within the window of an event
    double null_mean = 0.0;
    double p_value = 1.0;
};

// Compares selected-frame mass near annotated interaction events against
// random contiguous placements of each span's selection with equal length.
ProximityTest event_proximity_test(const SpanAnalysis& analysis, const data::Manifest& manifest,
                                   const SplitData& split, int window = 3, std::size_t shuffles = 1000,
                                   std::uint64_t seed = 0);

}  // namespace pipsim::pipe
