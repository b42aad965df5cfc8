#include "pipsim/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "pipsim/blob.hpp"
#include "pipsim/config.hpp"
#include "pipsim/dataset.hpp"
#include "pipsim/errors.hpp"
#include "pipsim/nn.hpp"

namespace pipsim::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
  public:
    using Error::Error;
};

constexpr const char* kSnapshot = "config.cfg";

std::string num(double v) { return std::isfinite(v) ? cfg::from_double(v) : std::string(); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

bool same_path(const fs::path& a, const fs::path& b) {
    std::error_code ec;
    return fs::exists(a) && fs::exists(b) && fs::equivalent(a, b, ec);
}

// Creates `out`, or clears it under --force when it holds an earlier run. A
// directory that does not look like a pipsim output is never cleared.
void prepare_out_dir(const fs::path& out, bool force, const std::vector<fs::path>& inputs) {
    for (const fs::path& in : inputs) {
        if (same_path(out, in)) {
            throw UsageError("output directory " + out.string() + " coincides with an input");
        }
    }
    if (fs::exists(out) && !fs::is_directory(out)) {
        throw UsageError(out.string() + " exists and is not a directory");
    }
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) {
            throw UsageError("output directory " + out.string() + " is not empty; pass --force to overwrite");
        }
        if (!fs::exists(out / kSnapshot) && !fs::exists(out / "manifest.json")) {
            throw UsageError("refusing to clear " + out.string() + ": it does not hold a previous pipsim run");
        }
        for (const auto& entry : fs::directory_iterator(out)) {
            fs::remove_all(entry.path());
        }
    }
    fs::create_directories(out);
}

cfg::KeyValues layered(const std::string& config_file, const std::vector<std::string>& overrides) {
    cfg::KeyValues kv;
    if (!config_file.empty()) {
        kv = cfg::read_file(config_file);
    }
    return cfg::merge(kv, cfg::parse_overrides(overrides));
}

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool force = false;
};

// Checkpoint commands take their configuration from the checkpoint and so
// accept neither a config file nor overrides.
void add_common(CLI::App* cmd, Common& c, bool configurable = true) {
    if (configurable) {
        cmd->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
        cmd->add_option("overrides", c.overrides, "key=value overrides, applied after the config file");
    }
    cmd->add_option("--out", c.out, "output directory")->required();
    cmd->add_flag("--force", c.force, "overwrite an existing output directory");
}

// ---- gen ------------------------------------------------------------------

struct GenArgs {
    Common common;
    std::optional<std::string> task;
    std::optional<int> n;
    std::optional<std::uint64_t> seed;
    bool unseen = false;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
    cfg::KeyValues kv{{"task", "contact"}, {"n", "300"}, {"seed", "0"}, {"unseen", "false"}};
    kv = cfg::merge(kv, layered(a.common.config, a.common.overrides));
    if (a.task) {
        kv["task"] = *a.task;
    }
    if (a.n) {
        kv["n"] = std::to_string(*a.n);
    }
    if (a.seed) {
        kv["seed"] = std::to_string(*a.seed);
    }
    if (a.unseen) {
        kv["unseen"] = "true";
    }
    for (const auto& [k, v] : kv) {
        if (k != "task" && k != "n" && k != "seed" && k != "unseen") {
            throw ConfigError("unknown gen key '" + k + "'");
        }
    }
    data::GenerateOptions opt;
    opt.task = kv["task"];
    if (opt.task != "combined") {
        try {
            world::parse_task(opt.task);
        } catch (const DomainError& e) {
            throw ConfigError(e.what());
        }
    }
    opt.n_scenes = static_cast<int>(cfg::to_u64("n", kv["n"]));
    opt.seed = cfg::to_u64("seed", kv["seed"]);
    opt.unseen = cfg::to_bool("unseen", kv["unseen"]);

    const fs::path dir(a.common.out);
    prepare_out_dir(dir, a.common.force, {});
    std::vector<std::string> warnings;
    const data::Manifest m = data::generate_dataset(opt, dir, &warnings);
    write_text(dir / kSnapshot, cfg::format(kv));
    for (const auto& w : warnings) {
        out << "warning: " << w << '\n';
    }
    out << "scenes=" << m.scenes.size() << " task=" << m.task << (m.unseen ? " unseen" : "") << '\n';
    for (data::Split sp : {data::Split::train, data::Split::val, data::Split::test, data::Split::excluded}) {
        std::size_t scenes = 0;
        std::size_t pos = 0;
        std::size_t neg = 0;
        for (const auto& s : m.scenes) {
            if (s.split != sp) {
                continue;
            }
            ++scenes;
            for (int y : s.labels) {
                (y == 1 ? pos : neg) += 1;
            }
        }
        if (scenes > 0 || sp != data::Split::excluded) {
            out << data::to_string(sp) << ": scenes=" << scenes << " samples=" << pos + neg << " positive=" << pos
                << " negative=" << neg << '\n';
        }
    }
    return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string data;
    std::optional<std::string> variant;
    std::optional<std::uint64_t> seed;
};

void check_compatible(const pipe::RunConfig& rc, const data::Manifest& m) {
    if (static_cast<int>(rc.input_frames) != m.input_frames || static_cast<int>(rc.horizon) != m.horizon) {
        throw ConfigError("config expects " + std::to_string(rc.input_frames) + " input and " +
                          std::to_string(rc.horizon) + " generated frames, dataset has " +
                          std::to_string(m.input_frames) + " and " + std::to_string(m.horizon));
    }
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    std::vector<std::string> overrides = a.common.overrides;
    if (a.variant) {
        overrides.push_back("variant=" + *a.variant);
    }
    if (a.seed) {
        overrides.push_back("seed=" + std::to_string(*a.seed));
    }
    std::optional<fs::path> file;
    if (!a.common.config.empty()) {
        file = a.common.config;
    }
    const pipe::RunConfig rc = pipe::resolve_config(file, overrides);
    const fs::path data_dir(a.data);
    const data::Manifest m = data::read_manifest(data_dir);
    check_compatible(rc, m);

    const fs::path dir(a.common.out);
    prepare_out_dir(dir, a.common.force, {data_dir});
    write_text(dir / kSnapshot, cfg::format(pipe::to_key_values(rc)));

    const pipe::SplitData tr = pipe::load_split(m, data_dir, data::Split::train, rc.train_limit);
    const pipe::SplitData va = pipe::load_split(m, data_dir, data::Split::val);
    pipe::Model model(rc, static_cast<std::size_t>(m.height), static_cast<std::size_t>(m.width));
    model.init(rc.seed);
    out << "variant=" << pipe::to_string(rc.variant) << " seed=" << rc.seed << " train=" << tr.samples.size()
        << " val=" << va.samples.size() << " parameters=" << model.store().count() << std::endl;

    ad::ParameterStore last;
    const auto progress = [&](const pipe::MetricRow& r) {
        out << "epoch " << r.epoch << ' ' << r.split << " bce=" << num(r.bce) << " psnr=" << num(r.psnr)
            << " jsd=" << num(r.jsd) << " accuracy=" << num(r.accuracy) << std::endl;
    };
    const pipe::TrainResult res = pipe::train(model, tr, va, &last, progress);

    pipe::write_metrics_csv(res.metrics, dir / "metrics.csv");
    pipe::save_model(model, dir / "best.ckpt");
    io::write_checkpoint(dir / "final.ckpt",
                         nn::to_checkpoint(last.count() > 0 ? last : model.store(), pipe::checkpoint_metadata(model)));
    out << "best_epoch=" << res.best_epoch << " best_val_accuracy=" << num(res.best_val_accuracy)
        << " epochs_run=" << res.epochs_run << '\n';
    if (res.diverged) {
        err << "training diverged: " << res.message << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}

// ---- checkpoint commands --------------------------------------------------

struct CheckpointArgs {
    Common common;
    std::string checkpoint;
    std::string data;
    std::string split = "test";
};

struct Loaded {
    pipe::Model model;
    data::Manifest manifest;
    pipe::SplitData split;
};

Loaded load_for(const CheckpointArgs& a, const std::function<void(const pipe::Model&)>& check = {}) {
    pipe::Model model = pipe::load_model(a.checkpoint);
    if (check) {
        check(model);
    }
    const fs::path data_dir(a.data);
    data::Manifest m = data::read_manifest(data_dir);
    check_compatible(model.config(), m);
    if (model.simulator().config().height != static_cast<std::size_t>(m.height) ||
        model.simulator().config().width != static_cast<std::size_t>(m.width)) {
        throw UsageError("checkpoint frame size does not match the dataset");
    }
    prepare_out_dir(a.common.out, a.common.force, {data_dir, fs::path(a.checkpoint).parent_path()});
    cfg::KeyValues snap = cfg::parse(pipe::checkpoint_metadata(model));
    snap["cli.checkpoint"] = a.checkpoint;
    snap["cli.data"] = a.data;
    snap["cli.split"] = a.split;
    write_text(fs::path(a.common.out) / kSnapshot, cfg::format(snap));
    pipe::SplitData split = pipe::load_split(m, data_dir, data::parse_split(a.split));
    if (split.samples.empty()) {
        throw DomainError("split '" + a.split + "' holds no samples");
    }
    return {std::move(model), std::move(m), std::move(split)};
}

int cmd_eval(const CheckpointArgs& a, std::ostream& out) {
    Loaded l = load_for(a);
    const fs::path dir(a.common.out);
    if (l.model.variant() == pipe::Variant::simulator) {
        const auto rep = pipe::simulator_report(l.model, l.split);
        const std::string model_psnr = num(rep.model_psnr);
        const std::string copy_psnr = num(rep.copy_last_psnr);
        write_text(dir / "eval.csv", "split,scenes,model_psnr,copy_last_psnr\n" + a.split + "," +
                                         std::to_string(rep.scenes) + "," + model_psnr + "," + copy_psnr + "\n");
        out << "split=" << a.split << " scenes=" << rep.scenes << " model_psnr=" << model_psnr
            << " copy_last_psnr=" << copy_psnr << '\n';
        return kExitOk;
    }
    pipe::RolloutCache cache;
    const pipe::EvalResult ev = pipe::evaluate(l.model, l.split, &cache);
    const std::string acc = num(ev.accuracy);
    write_text(dir / "eval.csv", "split,samples,accuracy,bce,psnr,jsd\n" + a.split + "," +
                                     std::to_string(ev.samples) + "," + acc + "," + num(ev.bce) + "," +
                                     num(ev.psnr) + "," + num(ev.jsd) + "\n");
    std::ostringstream preds;
    preds << "sample_id,task,label,probability,predicted\n";
    for (const auto& p : ev.predictions) {
        preds << p.id << ',' << world::to_string(static_cast<world::Task>(p.task)) << ',' << p.label << ','
              << num(p.probability) << ',' << p.predicted << '\n';
    }
    write_text(dir / "predictions.csv", preds.str());
    out << "split=" << a.split << " samples=" << ev.samples << " accuracy=" << acc << '\n';
    for (const auto& [task, task_acc] : ev.task_accuracy) {
        out << "  " << world::to_string(static_cast<world::Task>(task)) << " accuracy=" << num(task_acc) << '\n';
    }
    return kExitOk;
}

struct SpansArgs {
    CheckpointArgs base;
    int window = 3;
    std::size_t shuffles = 1000;
    std::uint64_t seed = 0;
};

void require_spans(const pipe::Model& model) {
    if (model.variant() != pipe::Variant::pip) {
        throw UsageError("checkpoint variant '" + std::string(pipe::to_string(model.variant())) +
                         "' has no span selection; span analysis needs a pip checkpoint");
    }
}

int cmd_spans(const SpansArgs& a, std::ostream& out) {
    Loaded l = load_for(a.base, require_spans);
    const fs::path dir(a.base.common.out);
    pipe::RolloutCache cache;
    const pipe::SpanAnalysis an = pipe::span_frequency_histogram(l.model, l.split, &cache);
    pipe::write_span_csv(an, dir / "spans.csv");
    pipe::write_histogram_csv(an, dir / "histogram.csv");
    const pipe::ProximityTest pt =
        pipe::event_proximity_test(an, l.manifest, l.split, a.window, a.shuffles, a.seed);
    write_text(dir / "proximity.csv", "window,shuffles,samples,observed,null_mean,p_value\n" +
                                          std::to_string(a.window) + "," + std::to_string(a.shuffles) + "," +
                                          std::to_string(pt.samples) + "," + num(pt.observed) + "," +
                                          num(pt.null_mean) + "," + num(pt.p_value) + "\n");
    std::size_t selected = 0;
    for (std::size_t c : an.union_counts) {
        selected += c;
    }
    out << "split=" << a.base.split << " samples=" << l.split.samples.size() << " selected_frames=" << selected
        << '\n';
    out << "event proximity: observed=" << num(pt.observed) << " null_mean=" << num(pt.null_mean)
        << " p=" << num(pt.p_value) << " (" << pt.samples << " samples with events)\n";
    return kExitOk;
}

struct ReportArgs {
    CheckpointArgs base;
    std::string metrics;
    std::size_t strips = 3;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
    Loaded l = load_for(a.base);
    const fs::path dir(a.base.common.out);
    if (l.model.variant() == pipe::Variant::pip) {
        pipe::RolloutCache cache;
        const pipe::SpanAnalysis an = pipe::span_frequency_histogram(l.model, l.split, &cache);
        write_text(dir / "histogram.svg",
                   histogram_svg(an.union_counts, "Salient frame frequency (" + a.base.split + " split)"));
        out << "wrote histogram.svg (" << an.horizon << " bars)\n";
    } else {
        out << "no span histogram for variant " << pipe::to_string(l.model.variant()) << '\n';
    }

    fs::path metrics = a.metrics.empty() ? fs::path(a.base.checkpoint).parent_path() / "metrics.csv" : fs::path(a.metrics);
    if (fs::exists(metrics)) {
        write_text(dir / "curves.svg", curves_svg(pipe::read_metrics_csv(metrics)));
        out << "wrote curves.svg from " << metrics.string() << '\n';
    } else if (!a.metrics.empty()) {
        throw IoError("metrics file " + metrics.string() + " not found");
    }

    std::set<std::size_t> scenes;
    std::size_t written = 0;
    for (std::size_t i = 0; i < l.split.samples.size() && written < a.strips; ++i) {
        const data::Sample& s = l.split.samples[i];
        if (!scenes.insert(s.scene).second) {
            continue;
        }
        std::vector<const ad::Tensor*> rows;
        ad::Tensor generated;
        if (l.model.has_simulator()) {
            generated = l.model.predict(s.input_frames);
            rows.push_back(&generated);
        }
        rows.push_back(&s.target_frames);
        const fs::path path = dir / ("strip_" + l.manifest.scenes[s.scene].id + ".ppm");
        write_strip_ppm(rows, path);
        ++written;
    }
    out << "wrote " << written << " frame strips\n";
    return kExitOk;
}

// ---- svg helpers ----------------------------------------------------------

std::string fmt(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v;
    return s.str();
}

std::string polyline(const std::vector<std::pair<double, double>>& pts, double x0, double y0, double w, double h,
                     double xmin, double xmax, double ymin, double ymax, const std::string& colour) {
    std::string s = "<polyline fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
        const double px = x0 + (xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5) * w;
        const double py = y0 + h - (ymax > ymin ? (y - ymin) / (ymax - ymin) : 0.5) * h;
        s += fmt(px) + "," + fmt(py) + " ";
    }
    return s + "\"/>\n";
}

}  // namespace

std::string histogram_svg(const std::vector<std::size_t>& counts, const std::string& title) {
    const double width = 640;
    const double height = 320;
    const double left = 40;
    const double top = 30;
    const double plot_w = width - left - 10;
    const double plot_h = height - top - 40;
    const std::size_t peak = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    s << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
    s << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
    const double slot = counts.empty() ? 0.0 : plot_w / static_cast<double>(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const double h = peak > 0 ? plot_h * static_cast<double>(counts[i]) / static_cast<double>(peak) : 0.0;
        s << "<rect class=\"bar\" x=\"" << fmt(left + slot * static_cast<double>(i) + 1) << "\" y=\""
          << fmt(top + plot_h - h) << "\" width=\"" << fmt(std::max(slot - 2, 1.0)) << "\" height=\"" << fmt(h)
          << "\" fill=\"steelblue\"><title>frame " << i << ": " << counts[i] << "</title></rect>\n";
        if (i % 6 == 0) {
            s << "<text x=\"" << fmt(left + slot * static_cast<double>(i)) << "\" y=\"" << top + plot_h + 14
              << "\" font-size=\"10\">" << i << "</text>\n";
        }
    }
    s << "<text x=\"" << left + plot_w / 2 - 60 << "\" y=\"" << height - 6
      << "\" font-size=\"11\">generated frame index</text>\n";
    s << "<text x=\"4\" y=\"" << top + 10 << "\" font-size=\"10\">" << peak << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::string curves_svg(const std::vector<pipe::MetricRow>& rows) {
    const double width = 640;
    const double panel_h = 180;
    const double left = 50;
    const double plot_w = width - left - 20;
    std::vector<std::pair<double, double>> train_bce;
    std::vector<std::pair<double, double>> val_bce;
    std::vector<std::pair<double, double>> val_score;
    bool psnr_score = false;
    for (const auto& r : rows) {
        const double e = static_cast<double>(r.epoch);
        if (std::isfinite(r.bce) && r.split == "train") {
            train_bce.emplace_back(e, r.bce);
        }
        if (std::isfinite(r.bce) && r.split == "val") {
            val_bce.emplace_back(e, r.bce);
        }
        if (r.split == "val") {
            if (std::isfinite(r.accuracy)) {
                val_score.emplace_back(e, r.accuracy);
            } else if (std::isfinite(r.psnr)) {
                val_score.emplace_back(e, r.psnr);
                psnr_score = true;
            }
        }
    }
    // The simulator variant logs PSNR only; plot its train PSNR in the top panel.
    if (train_bce.empty()) {
        for (const auto& r : rows) {
            if (r.split == "train" && std::isfinite(r.psnr)) {
                train_bce.emplace_back(static_cast<double>(r.epoch), r.psnr);
            }
        }
    }
    auto range = [](std::initializer_list<const std::vector<std::pair<double, double>>*> series, bool x) {
        double lo = INFINITY;
        double hi = -INFINITY;
        for (const auto* s : series) {
            for (const auto& p : *s) {
                lo = std::min(lo, x ? p.first : p.second);
                hi = std::max(hi, x ? p.first : p.second);
            }
        }
        if (!std::isfinite(lo)) {
            lo = 0;
            hi = 1;
        }
        return std::make_pair(lo, hi);
    };
    const auto [xmin, xmax] = range({&train_bce, &val_bce, &val_score}, true);
    const auto [lmin, lmax] = range({&train_bce, &val_bce}, false);
    const auto [smin, smax] = range({&val_score}, false);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << 2 * panel_h + 60
      << "\">\n";
    const bool sim_only = val_bce.empty() && psnr_score;
    s << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">"
      << (sim_only ? "train PSNR (dB, black)" : "BCE: train (black), val (red)") << "</text>\n";
    s << polyline(train_bce, left, 30, plot_w, panel_h - 20, xmin, xmax, lmin, lmax, "black");
    s << polyline(val_bce, left, 30, plot_w, panel_h - 20, xmin, xmax, lmin, lmax, "red");
    s << "<text x=\"4\" y=\"40\" font-size=\"10\">" << fmt(lmax) << "</text>\n";
    s << "<text x=\"4\" y=\"" << panel_h + 10 << "\" font-size=\"10\">" << fmt(lmin) << "</text>\n";
    const double y2 = panel_h + 50;
    s << "<text x=\"" << left << "\" y=\"" << y2 - 10 << "\" font-size=\"13\">"
      << (psnr_score ? "validation PSNR (dB)" : "validation accuracy") << "</text>\n";
    s << polyline(val_score, left, y2, plot_w, panel_h - 20, xmin, xmax, smin, smax, "blue");
    s << "<text x=\"4\" y=\"" << y2 + 10 << "\" font-size=\"10\">" << fmt(smax) << "</text>\n";
    s << "<text x=\"4\" y=\"" << y2 + panel_h - 20 << "\" font-size=\"10\">" << fmt(smin) << "</text>\n";
    s << "<text x=\"" << left + plot_w / 2 - 20 << "\" y=\"" << 2 * panel_h + 55
      << "\" font-size=\"11\">epoch</text>\n";
    s << "</svg>\n";
    return s.str();
}

void write_strip_ppm(const std::vector<const ad::Tensor*>& rows, const fs::path& path) {
    if (rows.empty()) {
        throw DomainError("write_strip_ppm: no rows");
    }
    const ad::Tensor& first = *rows.front();
    if (first.rank() != 4 || first.dim(1) != 3) {
        throw ShapeError("write_strip_ppm: rows must be [N, 3, H, W], got " + ad::shape_str(first.shape));
    }
    const std::size_t n = first.dim(0);
    const std::size_t h = first.dim(2);
    const std::size_t w = first.dim(3);
    for (const ad::Tensor* r : rows) {
        if (r->shape != first.shape) {
            throw ShapeError("write_strip_ppm: row shapes differ");
        }
    }
    const std::size_t gap = 1;
    const std::size_t width = n * (w + gap) - gap;
    const std::size_t height = rows.size() * (h + gap) - gap;
    std::vector<unsigned char> px(width * height * 3, 128);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const ad::Tensor& t = *rows[r];
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        const double v = std::clamp(t[((k * 3 + c) * h + y) * w + x], 0.0, 1.0);
                        const std::size_t row = r * (h + gap) + y;
                        const std::size_t col = k * (w + gap) + x;
                        px[(row * width + col) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
                    }
                }
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Physical interaction prediction via mental simulation with span selection", "pipsim"};
    app.require_subcommand(1);
    const auto splits = CLI::IsMember({"train", "val", "test"});

    GenArgs gen;
    CLI::App* g = app.add_subcommand("gen", "generate a microworld dataset");
    add_common(g, gen.common);
    g->add_option("--task", gen.task, "stability, contact, containment or combined")
        ->check(CLI::IsMember({"stability", "contact", "containment", "combined"}));
    g->add_option("--n", gen.n, "number of scenes")->check(CLI::PositiveNumber);
    g->add_option("--seed", gen.seed, "generation seed");
    g->add_flag("--unseen", gen.unseen, "draw objects from the held-out shape vocabulary");

    TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "train a model variant");
    add_common(t, tr.common);
    t->add_option("--data", tr.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    t->add_option("--variant", tr.variant, "pip, pip_no_ss, baseline or simulator")
        ->check(CLI::IsMember({"pip", "pip_no_ss", "baseline", "simulator"}));
    t->add_option("--seed", tr.seed, "training seed");

    auto add_checkpoint = [&](CLI::App* cmd, CheckpointArgs& c) {
        add_common(cmd, c.common, false);
        cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
        cmd->add_option("--data", c.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
        cmd->add_option("--split", c.split, "train, val or test")->check(splits);
    };
    CheckpointArgs ev;
    CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_checkpoint(e, ev);

    SpansArgs sp;
    CLI::App* s = app.add_subcommand("spans", "span selection analysis of a pip checkpoint");
    add_checkpoint(s, sp.base);
    s->add_option("--window", sp.window, "event proximity window in generated frames")->check(CLI::NonNegativeNumber);
    s->add_option("--shuffles", sp.shuffles, "random placements for the permutation test")
        ->check(CLI::PositiveNumber);
    s->add_option("--seed", sp.seed, "permutation test seed");

    ReportArgs rp;
    CLI::App* r = app.add_subcommand("report", "render plots and frame strips");
    add_checkpoint(r, rp.base);
    r->add_option("--metrics", rp.metrics, "metrics.csv for loss curves (default: next to the checkpoint)");
    r->add_option("--strips", rp.strips, "number of example frame strips");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        err << "usage error: " << ex.what() << '\n';
        CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kExitUsage;
    }

    try {
        if (g->parsed()) {
            return cmd_gen(gen, out);
        }
        if (t->parsed()) {
            return cmd_train(tr, out, err);
        }
        if (e->parsed()) {
            return cmd_eval(ev, out);
        }
        if (s->parsed()) {
            return cmd_spans(sp, out);
        }
        return cmd_report(rp, out);
    } catch (const UsageError& ex) {
        err << "usage error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& ex) {
        err << "usage error: " << ex.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace pipsim::cli
