#include "pipsim/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "pipsim/errors.hpp"

namespace pipsim::pipe {

using ad::Tensor;
using ad::Var;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Independent initialization streams so variants sharing a component also
// share its initial weights.
constexpr std::uint64_t kSimStream = 101;
constexpr std::uint64_t kEncStream = 102;
constexpr std::uint64_t kHeadStream = 103;
constexpr std::uint64_t kShuffleStream = 104;
constexpr std::uint64_t kTeacherStream = 105;

std::size_t baseline_feature_size(const enc::EncoderConfig& c) {
    return c.image_features + c.query_features + 2 * c.context_features;
}

sim::SimulatorConfig make_sim_config(std::size_t height, std::size_t width) {
    sim::SimulatorConfig c;
    c.height = height;
    c.width = width;
    return c;
}

enc::EncoderConfig make_enc_config(const RunConfig& rc) {
    enc::EncoderConfig c;
    c.image_features = rc.image_features;
    c.query_features = rc.query_features;
    c.context_features = rc.context_features;
    return c;
}

std::vector<Var> as_constants(ad::Tape& tape, const Tensor& frames) {
    std::vector<Var> out;
    out.reserve(frames.dim(0));
    for (std::size_t j = 0; j < frames.dim(0); ++j) {
        out.push_back(tape.constant(nn::take(frames, j)));
    }
    return out;
}

double frames_psnr(std::span<const Var> generated, const Tensor& truth) {
    double total = 0.0;
    for (std::size_t j = 0; j < generated.size(); ++j) {
        total += ad::psnr_value(generated[j].value(), nn::take(truth, j));
    }
    return total / static_cast<double>(generated.size());
}

using Snapshot = std::vector<Tensor>;

Snapshot snapshot(const ad::ParameterStore& store) {
    Snapshot s;
    for (const ad::Parameter* p : store.all()) {
        s.push_back(p->value);
    }
    return s;
}

void restore(ad::ParameterStore& store, const Snapshot& s) {
    auto params = store.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value = s[i];
    }
}

bool grads_finite(std::span<ad::Parameter* const> params) {
    for (const ad::Parameter* p : params) {
        for (double g : p->grad.data) {
            if (!std::isfinite(g)) {
                return false;
            }
        }
    }
    return true;
}

const Tensor& cached_rollout(Model& model, const data::Sample& sample, RolloutCache& cache) {
    auto it = cache.find(sample.scene);
    if (it == cache.end()) {
        it = cache.emplace(sample.scene, model.predict(sample.input_frames)).first;
    }
    return it->second;
}

std::string csv_number(double v) { return std::isfinite(v) ? cfg::from_double(v) : std::string(); }

}  // namespace

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::pip:
            return "pip";
        case Variant::pip_no_ss:
            return "pip_no_ss";
        case Variant::baseline:
            return "baseline";
        case Variant::simulator:
            return "simulator";
    }
    return "pip";
}

Variant parse_variant(std::string_view name) {
    for (Variant v : {Variant::pip, Variant::pip_no_ss, Variant::baseline, Variant::simulator}) {
        if (name == to_string(v)) {
            return v;
        }
    }
    throw ConfigError("unknown variant '" + std::string(name) + "' (expected pip, pip_no_ss, baseline or simulator)");
}

void RunConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid run config: " + what); };
    if (input_frames == 0 || horizon == 0) {
        fail("input_frames and horizon must be positive");
    }
    if (spans == 0) {
        fail("spans must be at least 1");
    }
    if (!(eps >= 0.0)) {
        fail("eps must be non-negative");
    }
    if (!(lr > 0.0)) {
        fail("lr must be positive");
    }
    if (batch == 0 || epochs == 0) {
        fail("batch and epochs must be positive");
    }
    if (!(tf_rate >= 0.0 && tf_rate <= 1.0)) {
        fail("tf_rate must lie in [0, 1]");
    }
    if (!(alpha >= 0.0) || !(lambda >= 0.0)) {
        fail("alpha and lambda must be non-negative");
    }
    if (!(stop_train_accuracy >= 0.0 && stop_train_accuracy <= 1.0)) {
        fail("stop_train_accuracy must lie in [0, 1]");
    }
    if (image_features == 0 || query_features == 0 || context_features == 0) {
        fail("feature sizes must be positive");
    }
    if (seeds.empty()) {
        fail("seeds must list at least one seed");
    }
}

void apply(RunConfig& c, const cfg::KeyValues& values) {
    for (const auto& [k, v] : values) {
        if (k == "variant") {
            c.variant = parse_variant(v);
        } else if (k == "input_frames") {
            c.input_frames = cfg::to_u64(k, v);
        } else if (k == "horizon") {
            c.horizon = cfg::to_u64(k, v);
        } else if (k == "spans") {
            c.spans = cfg::to_u64(k, v);
        } else if (k == "eps") {
            c.eps = cfg::to_double(k, v);
        } else if (k == "lr") {
            c.lr = cfg::to_double(k, v);
        } else if (k == "batch") {
            c.batch = cfg::to_u64(k, v);
        } else if (k == "epochs") {
            c.epochs = cfg::to_u64(k, v);
        } else if (k == "tf_rate") {
            c.tf_rate = cfg::to_double(k, v);
        } else if (k == "alpha") {
            c.alpha = cfg::to_double(k, v);
        } else if (k == "lambda") {
            c.lambda = cfg::to_double(k, v);
        } else if (k == "joint") {
            c.joint = cfg::to_bool(k, v);
        } else if (k == "freeze_simulator") {
            c.freeze_simulator = cfg::to_bool(k, v);
        } else if (k == "simulator_checkpoint") {
            c.simulator_checkpoint = v;
        } else if (k == "seed") {
            c.seed = cfg::to_u64(k, v);
        } else if (k == "seeds") {
            c.seeds = cfg::to_u64_list(k, v);
        } else if (k == "train_limit") {
            c.train_limit = cfg::to_u64(k, v);
        } else if (k == "stop_train_accuracy") {
            c.stop_train_accuracy = cfg::to_double(k, v);
        } else if (k == "image_features") {
            c.image_features = cfg::to_u64(k, v);
        } else if (k == "query_features") {
            c.query_features = cfg::to_u64(k, v);
        } else if (k == "context_features") {
            c.context_features = cfg::to_u64(k, v);
        } else {
            throw ConfigError("unknown config key '" + k + "'");
        }
    }
}

cfg::KeyValues to_key_values(const RunConfig& c) {
    std::string seeds;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) {
        seeds += (i ? "," : "") + std::to_string(c.seeds[i]);
    }
    return {
        {"variant", std::string(to_string(c.variant))},
        {"input_frames", std::to_string(c.input_frames)},
        {"horizon", std::to_string(c.horizon)},
        {"spans", std::to_string(c.spans)},
        {"eps", cfg::from_double(c.eps)},
        {"lr", cfg::from_double(c.lr)},
        {"batch", std::to_string(c.batch)},
        {"epochs", std::to_string(c.epochs)},
        {"tf_rate", cfg::from_double(c.tf_rate)},
        {"alpha", cfg::from_double(c.alpha)},
        {"lambda", cfg::from_double(c.lambda)},
        {"joint", c.joint ? "true" : "false"},
        {"freeze_simulator", c.freeze_simulator ? "true" : "false"},
        {"simulator_checkpoint", c.simulator_checkpoint},
        {"seed", std::to_string(c.seed)},
        {"seeds", seeds},
        {"train_limit", std::to_string(c.train_limit)},
        {"stop_train_accuracy", cfg::from_double(c.stop_train_accuracy)},
        {"image_features", std::to_string(c.image_features)},
        {"query_features", std::to_string(c.query_features)},
        {"context_features", std::to_string(c.context_features)},
    };
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
    RunConfig c;
    cfg::KeyValues values;
    if (file) {
        values = cfg::read_file(*file);
    }
    values = cfg::merge(values, cfg::parse_overrides(overrides));
    pipe::apply(c, values);
    c.validate();
    return c;
}

// ---- model ----------------------------------------------------------------

Model::Model(const RunConfig& config, std::size_t height, std::size_t width)
    : config_(config), simulator_(make_sim_config(height, width)), encoders_(make_enc_config(config)) {
    config_.validate();
}

void Model::init(std::uint64_t seed, bool load_simulator_checkpoint) {
    if (store_.count() != 0) {
        throw ConfigError("model parameters are already initialized");
    }
    if (has_simulator()) {
        Rng rng(derive_seed(seed, kSimStream));
        sim::init_simulator(store_, simulator_.config(), rng);
        if (load_simulator_checkpoint && !config_.simulator_checkpoint.empty()) {
            nn::load_checkpoint(store_, io::read_checkpoint(config_.simulator_checkpoint), {"sim."});
        }
    }
    if (config_.variant == Variant::simulator) {
        return;
    }
    Rng enc_rng(derive_seed(seed, kEncStream));
    enc::init_encoders(store_, encoders_.config(), enc_rng, "enc.", config_.variant != Variant::baseline);
    Rng head_rng(derive_seed(seed, kHeadStream));
    switch (config_.variant) {
        case Variant::pip:
            span::init_span_head(store_, encoders_.config().feature_size(), {config_.spans, config_.eps}, head_rng);
            break;
        case Variant::pip_no_ss:
            nn::add_linear(store_, "head", 1, encoders_.config().feature_size(), head_rng);
            break;
        case Variant::baseline:
            nn::add_linear(store_, "head", 1, baseline_feature_size(encoders_.config()), head_rng);
            break;
        case Variant::simulator:
            break;
    }
}

std::vector<ad::Parameter*> Model::trainable() {
    std::vector<ad::Parameter*> out;
    for (ad::Parameter* p : store_.all()) {
        if (config_.freeze_simulator && config_.variant != Variant::simulator && p->name.starts_with("sim.")) {
            continue;
        }
        out.push_back(p);
    }
    return out;
}

Tensor Model::predict(const Tensor& input_frames) {
    if (!has_simulator()) {
        throw DomainError("the baseline variant has no simulator");
    }
    return simulator_.predict(store_, input_frames, config_.horizon);
}

Forward Model::forward(ad::Tape& tape, const data::Sample& sample, Mode mode, Rng* rng, const Tensor* rollout) {
    const bool training = mode == Mode::train;
    if (sample.input_frames.rank() != 4 || sample.input_frames.dim(0) != config_.input_frames) {
        throw ConfigError("sample has " + ad::shape_str(sample.input_frames.shape) + " input frames, config expects " +
                          std::to_string(config_.input_frames));
    }
    nn::Binder sim_params(tape, store_, training && !config_.freeze_simulator);
    nn::Binder params(tape, store_, training);
    Forward out;

    std::vector<Var> feature_frames;
    if (has_simulator()) {
        if (rollout != nullptr) {
            if (rollout->rank() != 4 || rollout->dim(0) != config_.horizon) {
                throw ShapeError("cached rollout " + ad::shape_str(rollout->shape) + " does not match horizon " +
                                 std::to_string(config_.horizon));
            }
            out.generated = as_constants(tape, *rollout);
        } else if (!training || config_.freeze_simulator) {
            out.generated = as_constants(tape, predict(sample.input_frames));
        } else {
            if (sample.target_frames.rank() != 4 || sample.target_frames.dim(0) < config_.horizon) {
                throw ConfigError("training needs " + std::to_string(config_.horizon) + " ground-truth frames");
            }
            if (config_.tf_rate > 0.0 && rng == nullptr) {
                throw ConfigError("teacher forcing needs a random stream");
            }
            out.generated = simulator_.rollout(sim_params, sample.input_frames, config_.horizon,
                                               &sample.target_frames, config_.tf_rate, rng);
            out.simulated = true;
        }
        for (const Var& g : out.generated) {
            feature_frames.push_back(config_.joint || !out.simulated ? g : ad::stop_gradient(g));
        }
    }

    switch (config_.variant) {
        case Variant::simulator:
            return out;
        case Variant::pip: {
            auto fs = enc::assemble_features(params, encoders_, feature_frames, sample.input_frames,
                                             sample.input_masks, sample.query);
            out.spans = span::span_forward(params, fs.rows, {config_.spans, config_.eps});
            out.logit = out.spans->logit;
            out.probability = out.spans->probability;
            return out;
        }
        case Variant::pip_no_ss: {
            auto fs = enc::assemble_features(params, encoders_, feature_frames, sample.input_frames,
                                             sample.input_masks, sample.query);
            Var avg = tape.constant(Tensor({1, fs.length}, 1.0 / static_cast<double>(fs.length)));
            Var pooled = ad::reshape(ad::matmul(avg, fs.rows), {fs.size});
            out.logit = ad::linear(pooled, params("head.w"), params("head.b"));
            out.probability = ad::sigmoid(out.logit);
            return out;
        }
        case Variant::baseline: {
            const std::size_t m = sample.input_frames.dim(0);
            Var image;
            for (std::size_t k = 0; k < m; ++k) {
                Var f = encoders_.frame(params, tape.constant(nn::take(sample.input_frames, k)));
                image = image.valid() ? ad::add(image, f) : f;
            }
            image = ad::scale(image, 1.0 / static_cast<double>(m));
            Var feats = ad::concat(
                {image, encoders_.query(params, sample.query),
                 encoders_.context(params, enc::Context::inputs, tape.constant(enc::to_clip(sample.input_frames))),
                 encoders_.context(params, enc::Context::masks, tape.constant(enc::to_clip(sample.input_masks)))});
            out.logit = ad::linear(feats, params("head.w"), params("head.b"));
            out.probability = ad::sigmoid(out.logit);
            return out;
        }
    }
    return out;
}

LossParts Model::total_loss(const Forward& out, const data::Sample& sample) const {
    LossParts parts;
    const bool needs_truth = out.simulated;
    if (needs_truth && (sample.target_frames.rank() != 4 || sample.target_frames.dim(0) < out.generated.size())) {
        throw ConfigError("loss needs ground-truth frames for every generated frame");
    }
    if (config_.variant == Variant::simulator) {
        if (!out.simulated) {
            throw ConfigError("simulator loss needs a training-mode rollout");
        }
        parts.sim = sim::sim_loss(out.generated, sample.target_frames);
        parts.total = parts.sim;
        return parts;
    }
    parts.bce = ad::bce_loss(out.probability, static_cast<double>(sample.label));
    parts.total = parts.bce;
    if (out.simulated) {
        Tensor truth = sample.target_frames;
        if (truth.dim(0) > out.generated.size()) {
            truth.shape[0] = out.generated.size();
            truth.data.resize(ad::numel(truth.shape));
        }
        parts.sim = sim::sim_loss(out.generated, truth);
        parts.total = ad::add(parts.total, ad::scale(parts.sim, config_.alpha));
    }
    if (out.spans) {
        // The JSD measures how distinct the spans are. The loss charges its
        // shortfall from ln S so that overlapping spans cost more.
        parts.penalty = out.spans->penalty;
        const double ceiling = std::log(static_cast<double>(out.spans->spans.size()));
        parts.total = ad::add(parts.total,
                              ad::scale(ad::add_scalar(ad::scale(parts.penalty, -1.0), ceiling), config_.lambda));
    }
    return parts;
}

// ---- checkpoints ----------------------------------------------------------

std::string checkpoint_metadata(const Model& model) {
    cfg::KeyValues kv = to_key_values(model.config());
    kv["height"] = std::to_string(model.simulator().config().height);
    kv["width"] = std::to_string(model.simulator().config().width);
    return cfg::format(kv);
}

void save_model(const Model& model, const std::filesystem::path& path) {
    io::write_checkpoint(path, nn::to_checkpoint(model.store(), checkpoint_metadata(model)));
}

Model load_model(const std::filesystem::path& path) {
    const io::Checkpoint ck = io::read_checkpoint(path);
    cfg::KeyValues kv;
    try {
        kv = cfg::parse(ck.metadata);
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": malformed checkpoint metadata: " + e.what());
    }
    if (!kv.contains("height") || !kv.contains("width")) {
        throw FormatError(path.string() + ": checkpoint metadata lacks the frame size");
    }
    const std::size_t h = cfg::to_u64("height", kv["height"]);
    const std::size_t w = cfg::to_u64("width", kv["width"]);
    kv.erase("height");
    kv.erase("width");
    RunConfig rc;
    pipe::apply(rc, kv);
    Model model(rc, h, w);
    // The stored arrays supersede any simulator initialization file.
    model.init(rc.seed, false);
    nn::load_checkpoint(model.store(), ck);
    if (model.store().count() != ck.arrays.size()) {
        throw FormatError(path.string() + ": checkpoint holds " + std::to_string(ck.arrays.size()) +
                          " arrays, variant expects " + std::to_string(model.store().count()));
    }
    return model;
}

// ---- data -----------------------------------------------------------------

SplitData load_split(const data::Manifest& manifest, const std::filesystem::path& dir, data::Split split,
                     std::size_t limit) {
    SplitData out;
    out.split = split;
    const auto refs = data::sample_refs(manifest, split);
    std::optional<std::size_t> loaded_scene;
    data::SceneData scene;
    for (const data::SampleRef& ref : refs) {
        if (limit != 0 && out.samples.size() >= limit) {
            break;
        }
        if (loaded_scene != ref.scene) {
            scene = data::load_scene(manifest, dir, ref.scene);
            loaded_scene = ref.scene;
        }
        out.samples.push_back(data::make_sample(manifest, ref.scene, scene, ref.object));
        out.ids.push_back(manifest.scenes[ref.scene].id + ":" + std::to_string(ref.object));
    }
    return out;
}

// ---- metrics --------------------------------------------------------------

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "epoch,split,bce,psnr,jsd,accuracy\n";
    for (const MetricRow& r : rows) {
        out << r.epoch << ',' << r.split << ',' << csv_number(r.bce) << ',' << csv_number(r.psnr) << ','
            << csv_number(r.jsd) << ',' << csv_number(r.accuracy) << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::string line;
    std::getline(in, line);
    if (line != "epoch,split,bce,psnr,jsd,accuracy") {
        throw FormatError(path.string() + ": unexpected metrics header '" + line + "'");
    }
    auto num = [&](const std::string& s) { return s.empty() ? kNaN : cfg::to_double("metrics", s); };
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        while (cells.size() < 6) {
            cells.emplace_back();
        }
        MetricRow r;
        r.epoch = cfg::to_u64("epoch", cells[0]);
        r.split = cells[1];
        r.bce = num(cells[2]);
        r.psnr = num(cells[3]);
        r.jsd = num(cells[4]);
        r.accuracy = num(cells[5]);
        rows.push_back(r);
    }
    return rows;
}

// ---- evaluation -----------------------------------------------------------

EvalResult evaluate(Model& model, const SplitData& split, RolloutCache* cache) {
    if (model.variant() == Variant::simulator) {
        throw DomainError("the simulator variant has no classifier");
    }
    if (split.samples.empty()) {
        throw DomainError("cannot evaluate an empty split");
    }
    RolloutCache local;
    RolloutCache& rollouts = cache != nullptr ? *cache : local;
    EvalResult res;
    std::map<int, std::pair<std::size_t, std::size_t>> per_task;
    double psnr_total = 0.0;
    std::size_t psnr_count = 0;
    double jsd_total = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
        const data::Sample& s = split.samples[i];
        ad::Tape tape;
        const Tensor* roll = model.has_simulator() ? &cached_rollout(model, s, rollouts) : nullptr;
        Forward out = model.forward(tape, s, Mode::infer, nullptr, roll);
        const double p = out.probability.item();
        Prediction pred;
        pred.id = i < split.ids.size() ? split.ids[i] : std::to_string(i);
        pred.task = s.query.task;
        pred.label = s.label;
        pred.probability = p;
        pred.predicted = p >= 0.5 ? 1 : 0;
        res.predictions.push_back(pred);
        const bool ok = pred.predicted == s.label;
        correct += ok ? 1 : 0;
        auto& [hit, total] = per_task[s.query.task];
        hit += ok ? 1 : 0;
        ++total;
        res.bce += ad::bce_loss(out.probability, static_cast<double>(s.label)).item();
        if (!out.generated.empty() && s.target_frames.rank() == 4) {
            psnr_total += frames_psnr(out.generated, s.target_frames);
            ++psnr_count;
        }
        if (out.spans) {
            jsd_total += out.spans->penalty.item();
        }
    }
    const double n = static_cast<double>(split.samples.size());
    res.samples = split.samples.size();
    res.accuracy = static_cast<double>(correct) / n;
    res.bce /= n;
    res.psnr = psnr_count ? psnr_total / static_cast<double>(psnr_count) : kNaN;
    res.jsd = model.variant() == Variant::pip ? jsd_total / n : kNaN;
    for (const auto& [task, counts] : per_task) {
        res.task_accuracy[task] = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    }
    return res;
}

std::size_t best_epoch(const std::vector<double>& validation_accuracy) {
    if (validation_accuracy.empty()) {
        throw DomainError("best_epoch: no epochs");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < validation_accuracy.size(); ++i) {
        if (validation_accuracy[i] > validation_accuracy[best]) {
            best = i;
        }
    }
    return best;
}

SimulatorReport simulator_report(Model& model, const SplitData& split) {
    if (!model.has_simulator()) {
        throw DomainError("the baseline variant has no simulator");
    }
    SimulatorReport rep;
    std::set<std::size_t> seen;
    for (const data::Sample& s : split.samples) {
        if (!seen.insert(s.scene).second) {
            continue;
        }
        rep.model_psnr += sim::mean_psnr(model.predict(s.input_frames), s.target_frames);
        rep.copy_last_psnr += sim::copy_last_psnr(s.input_frames, s.target_frames);
    }
    rep.scenes = seen.size();
    if (rep.scenes == 0) {
        throw DomainError("simulator_report: empty split");
    }
    rep.model_psnr /= static_cast<double>(rep.scenes);
    rep.copy_last_psnr /= static_cast<double>(rep.scenes);
    return rep;
}

// ---- training -------------------------------------------------------------

TrainResult train(Model& model, const SplitData& train_split, const SplitData& val_split, ad::ParameterStore* last,
                  const ProgressFn& progress) {
    const RunConfig& cfg = model.config();
    if (train_split.samples.empty() || val_split.samples.empty()) {
        throw DomainError("training needs non-empty train and validation splits");
    }
    const bool sim_only = model.variant() == Variant::simulator;
    const bool frozen = cfg.freeze_simulator && model.has_simulator() && !sim_only;

    // Units of work: one per sample, or one per scene for the simulator alone.
    std::vector<std::size_t> units;
    {
        std::set<std::size_t> scenes;
        for (std::size_t i = 0; i < train_split.samples.size(); ++i) {
            if (!sim_only || scenes.insert(train_split.samples[i].scene).second) {
                units.push_back(i);
            }
        }
    }

    auto params = model.trainable();
    ad::AdamState adam = ad::make_adam(params, cfg.lr);
    RolloutCache cache;
    TrainResult res;
    Snapshot good = snapshot(model.store());
    Snapshot best = good;
    double best_score = -std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = units;
        Rng shuffle(derive_seed(derive_seed(cfg.seed, kShuffleStream), epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle.below(i)]);
        }

        double bce_sum = 0.0;
        double psnr_sum = 0.0;
        double jsd_sum = 0.0;
        std::size_t psnr_n = 0;
        std::size_t correct = 0;
        try {
            for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
                const std::size_t stop = std::min(order.size(), start + cfg.batch);
                const double weight = 1.0 / static_cast<double>(stop - start);
                model.store().zero_grad();
                for (std::size_t k = start; k < stop; ++k) {
                    const std::size_t idx = order[k];
                    const data::Sample& s = train_split.samples[idx];
                    Rng tf(derive_seed(derive_seed(derive_seed(cfg.seed, kTeacherStream), epoch), idx));
                    ad::Tape tape;
                    const Tensor* roll = frozen ? &cached_rollout(model, s, cache) : nullptr;
                    Forward out = model.forward(tape, s, Mode::train, &tf, roll);
                    LossParts parts = model.total_loss(out, s);
                    if (!std::isfinite(parts.total.item())) {
                        throw NumericError("non-finite training loss");
                    }
                    tape.backward(ad::scale(parts.total, weight));
                    if (!sim_only) {
                        bce_sum += parts.bce.item();
                        correct += (out.probability.item() >= 0.5 ? 1 : 0) == s.label ? 1 : 0;
                    }
                    if (!out.generated.empty()) {
                        psnr_sum += frames_psnr(out.generated, s.target_frames);
                        ++psnr_n;
                    }
                    if (parts.penalty.valid()) {
                        jsd_sum += parts.penalty.item();
                    }
                }
                if (!grads_finite(params)) {
                    throw NumericError("non-finite gradient");
                }
                ad::adam_step(params, adam);
            }
        } catch (const NumericError& e) {
            restore(model.store(), good);
            res.diverged = true;
            res.message = "training diverged in epoch " + std::to_string(epoch) + ": " + e.what() +
                          "; restored the parameters of epoch " + std::to_string(epoch - 1);
            break;
        }

        const double n = static_cast<double>(order.size());
        MetricRow tr;
        tr.epoch = epoch;
        tr.split = "train";
        tr.bce = sim_only ? kNaN : bce_sum / n;
        tr.psnr = psnr_n ? psnr_sum / static_cast<double>(psnr_n) : kNaN;
        tr.jsd = model.variant() == Variant::pip ? jsd_sum / n : kNaN;
        tr.accuracy = sim_only ? kNaN : static_cast<double>(correct) / n;

        MetricRow va;
        va.epoch = epoch;
        va.split = "val";
        double score = 0.0;
        if (sim_only) {
            const SimulatorReport rep = simulator_report(model, val_split);
            va.bce = kNaN;
            va.psnr = rep.model_psnr;
            va.jsd = kNaN;
            va.accuracy = kNaN;
            score = rep.model_psnr;
        } else {
            const EvalResult ev = evaluate(model, val_split, frozen ? &cache : nullptr);
            va.bce = ev.bce;
            va.psnr = ev.psnr;
            va.jsd = ev.jsd;
            va.accuracy = ev.accuracy;
            score = ev.accuracy;
        }
        res.metrics.push_back(tr);
        res.metrics.push_back(va);
        if (progress) {
            progress(tr);
            progress(va);
        }
        res.epochs_run = epoch;
        good = snapshot(model.store());
        if (score > best_score) {
            best_score = score;
            best = good;
            res.best_epoch = epoch;
        }
        if (!sim_only && cfg.stop_train_accuracy > 0.0) {
            res.final_train_accuracy = evaluate(model, train_split, frozen ? &cache : nullptr).accuracy;
            if (res.final_train_accuracy >= cfg.stop_train_accuracy) {
                break;
            }
        } else {
            res.final_train_accuracy = tr.accuracy;
        }
    }

    if (last != nullptr) {
        for (const ad::Parameter* p : model.store().all()) {
            if (last->contains(p->name)) {
                last->get(p->name).value = p->value;
            } else {
                last->add(p->name, p->value);
            }
        }
    }
    if (res.best_epoch > 0) {
        restore(model.store(), best);
        res.best_val_accuracy = sim_only ? kNaN : best_score;
    }
    return res;
}

// ---- span analysis --------------------------------------------------------

SpanAnalysis span_frequency_histogram(Model& model, const SplitData& split, RolloutCache* cache) {
    if (model.variant() != Variant::pip) {
        throw DomainError("span analysis needs a pip model, got " + std::string(to_string(model.variant())));
    }
    const std::size_t n = model.config().horizon;
    const std::size_t s_count = model.config().spans;
    const std::vector<double> profile = span::threshold_profile(n);
    RolloutCache local;
    RolloutCache& rollouts = cache != nullptr ? *cache : local;
    SpanAnalysis out;
    out.horizon = n;
    out.per_span.assign(s_count, std::vector<std::size_t>(n, 0));
    out.union_counts.assign(n, 0);
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
        const data::Sample& s = split.samples[i];
        ad::Tape tape;
        Forward f = model.forward(tape, s, Mode::infer, nullptr, &cached_rollout(model, s, rollouts));
        std::vector<bool> any(n, false);
        for (std::size_t k = 0; k < s_count; ++k) {
            const span::SpanTrace& tr = f.spans->spans[k];
            SpanRecord rec;
            rec.sample = i;
            rec.sample_id = i < split.ids.size() ? split.ids[i] : std::to_string(i);
            rec.span = k;
            rec.r = tr.weights.r.value().data;
            rec.selected = span::select_salient_frames(rec.r, profile);
            rec.score = tr.score.item();
            for (std::size_t t : rec.selected) {
                ++out.per_span[k][t];
                any[t] = true;
            }
            out.records.push_back(std::move(rec));
        }
        for (std::size_t t = 0; t < n; ++t) {
            out.union_counts[t] += any[t] ? 1 : 0;
        }
    }
    return out;
}

void write_span_csv(const SpanAnalysis& analysis, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "sample_id,span_idx,frame_idx,r_value,selected\n";
    for (const SpanRecord& rec : analysis.records) {
        std::vector<bool> sel(rec.r.size(), false);
        for (std::size_t t : rec.selected) {
            sel[t] = true;
        }
        for (std::size_t t = 0; t < rec.r.size(); ++t) {
            out << rec.sample_id << ',' << rec.span << ',' << t << ',' << cfg::from_double(rec.r[t]) << ','
                << (sel[t] ? 1 : 0) << '\n';
        }
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

void write_histogram_csv(const SpanAnalysis& analysis, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "frame_idx,union";
    for (std::size_t k = 0; k < analysis.per_span.size(); ++k) {
        out << ",span" << k;
    }
    out << '\n';
    for (std::size_t t = 0; t < analysis.horizon; ++t) {
        out << t << ',' << analysis.union_counts[t];
        for (const auto& counts : analysis.per_span) {
            out << ',' << counts[t];
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

ProximityTest event_proximity_test(const SpanAnalysis& analysis, const data::Manifest& manifest,
                                   const SplitData& split, int window, std::size_t shuffles, std::uint64_t seed) {
    const std::size_t n = analysis.horizon;
    // Per sample: window membership of every frame, or empty when it has no events.
    std::vector<std::vector<bool>> near(split.samples.size());
    for (std::size_t i = 0; i < split.samples.size(); ++i) {
        const data::Sample& s = split.samples[i];
        const auto events = data::event_generated_indices(manifest, manifest.scenes.at(s.scene), s.object);
        if (events.empty()) {
            continue;
        }
        near[i].assign(n, false);
        for (int e : events) {
            for (int t = std::max(0, e - window); t <= std::min(static_cast<int>(n) - 1, e + window); ++t) {
                near[i][static_cast<std::size_t>(t)] = true;
            }
        }
    }
    ProximityTest res;
    std::set<std::size_t> counted;
    for (const SpanRecord& rec : analysis.records) {
        if (rec.sample >= near.size() || near[rec.sample].empty()) {
            continue;
        }
        counted.insert(rec.sample);
        for (std::size_t t : rec.selected) {
            res.observed += near[rec.sample][t] ? 1.0 : 0.0;
        }
    }
    res.samples = counted.size();
    Rng rng(seed);
    std::size_t at_least = 0;
    double null_total = 0.0;
    for (std::size_t k = 0; k < shuffles; ++k) {
        double mass = 0.0;
        for (const SpanRecord& rec : analysis.records) {
            if (rec.sample >= near.size() || near[rec.sample].empty() || rec.selected.empty()) {
                continue;
            }
            const std::size_t len = rec.selected.size();
            const std::size_t start = rng.below(n - len + 1);
            for (std::size_t t = start; t < start + len; ++t) {
                mass += near[rec.sample][t] ? 1.0 : 0.0;
            }
        }
        null_total += mass;
        at_least += mass >= res.observed ? 1 : 0;
    }
    res.null_mean = shuffles ? null_total / static_cast<double>(shuffles) : 0.0;
    res.p_value = static_cast<double>(at_least + 1) / static_cast<double>(shuffles + 1);
    return res;
}

}  // namespace pipsim::pipe
