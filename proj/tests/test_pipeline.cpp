#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "doctest.h"
#include "pipsim/errors.hpp"
#include "pipsim/pipeline.hpp"

using namespace pipsim;
using ad::Tensor;
using ad::Var;
namespace fs = std::filesystem;

namespace {

// A 10-scene contact dataset shared by every case in this binary.
struct Dataset {
    fs::path dir;
    data::Manifest manifest;
    pipe::SplitData train;
    pipe::SplitData val;
    pipe::SplitData test;

    Dataset() {
        dir = fs::temp_directory_path() / ("pipsim_pipeline_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        data::GenerateOptions opt;
        opt.task = "contact";
        opt.n_scenes = 10;
        opt.seed = 5;
        manifest = data::generate_dataset(opt, dir);
        train = pipe::load_split(manifest, dir, data::Split::train);
        val = pipe::load_split(manifest, dir, data::Split::val);
        test = pipe::load_split(manifest, dir, data::Split::test);
    }
    ~Dataset() { fs::remove_all(dir); }
};

Dataset& dataset() {
    static Dataset d;
    return d;
}

pipe::Model make_model(pipe::Variant v, std::uint64_t seed = 1, pipe::RunConfig rc = {}) {
    rc.variant = v;
    rc.seed = seed;
    pipe::Model m(rc, 32, 32);
    m.init(seed);
    return m;
}

std::vector<std::string> names(const ad::ParameterStore& store) {
    std::vector<std::string> out;
    for (const ad::Parameter* p : store.all()) {
        out.push_back(p->name);
    }
    return out;
}

bool any_prefix(const ad::ParameterStore& store, const std::string& prefix) {
    for (const auto& n : names(store)) {
        if (n.starts_with(prefix)) {
            return true;
        }
    }
    return false;
}

pipe::SplitData first_n(const pipe::SplitData& s, std::size_t n) {
    pipe::SplitData out;
    out.split = s.split;
    for (std::size_t i = 0; i < std::min(n, s.samples.size()); ++i) {
        out.samples.push_back(s.samples[i]);
        out.ids.push_back(s.ids[i]);
    }
    return out;
}

}  // namespace

TEST_CASE("config layering: overrides beat file, file beats defaults") {
    const fs::path file = fs::temp_directory_path() / ("pipsim_cfg_" + std::to_string(::getpid()) + ".cfg");
    {
        std::ofstream out(file);
        out << "# training setup\n  lr = 0.005  # inline comment\nepochs=7\n\nvariant=pip_no_ss\n";
    }
    auto rc = pipe::resolve_config(file, {"epochs=3", "joint=false"});
    CHECK(rc.lr == doctest::Approx(0.005));
    CHECK(rc.epochs == 3);
    CHECK(!rc.joint);
    CHECK(rc.variant == pipe::Variant::pip_no_ss);
    CHECK(rc.batch == 2);
    CHECK(rc.tf_rate == doctest::Approx(0.1));
    CHECK(rc.spans == 3);
    CHECK_THROWS_AS(pipe::resolve_config(file, {"nonsense=1"}), ConfigError);
    CHECK_THROWS_AS(pipe::resolve_config(file, {"lr=fast"}), ConfigError);
    CHECK_THROWS_AS(pipe::resolve_config(file, {"tf_rate=2"}), ConfigError);
    CHECK_THROWS_AS(pipe::resolve_config(file, {"novalue"}), ConfigError);
    CHECK_THROWS_AS(cfg::parse("a=1\nbroken line\n"), ConfigError);
    CHECK_THROWS_AS(pipe::resolve_config(file.string() + ".missing", {}), IoError);
    fs::remove(file);

    pipe::RunConfig round;
    pipe::apply(round, pipe::to_key_values(rc));
    CHECK(pipe::to_key_values(round) == pipe::to_key_values(rc));
}

TEST_CASE("variant parameter layouts") {
    auto pip = make_model(pipe::Variant::pip);
    auto noss = make_model(pipe::Variant::pip_no_ss);
    auto base = make_model(pipe::Variant::baseline);
    auto simv = make_model(pipe::Variant::simulator);
    CHECK(any_prefix(pip.store(), "span."));
    CHECK(any_prefix(pip.store(), "sim."));
    CHECK(!any_prefix(noss.store(), "span."));
    CHECK(any_prefix(noss.store(), "head."));
    CHECK(any_prefix(noss.store(), "enc.ctx2"));
    CHECK(!any_prefix(base.store(), "sim."));
    CHECK(!any_prefix(base.store(), "enc.ctx2"));
    CHECK(!any_prefix(simv.store(), "enc."));
    CHECK(pipe::parse_variant("pip_no_ss") == pipe::Variant::pip_no_ss);
    CHECK_THROWS_AS(pipe::parse_variant("phydnet"), ConfigError);
}

TEST_CASE("forward contracts of each variant") {
    Dataset& d = dataset();
    const data::Sample& s = d.train.samples.front();
    auto pip = make_model(pipe::Variant::pip, 3);
    auto noss = make_model(pipe::Variant::pip_no_ss, 3);

    ad::Tape tape;
    auto out = pip.forward(tape, s, pipe::Mode::infer);
    CHECK(out.probability.item() > 0.0);
    CHECK(out.probability.item() < 1.0);
    REQUIRE(out.spans);
    CHECK(out.spans->spans.size() == 3);
    CHECK(out.generated.size() == 37);

    // Shared simulator component: same seed, same rollout.
    CHECK(pip.predict(s.input_frames).data == noss.predict(s.input_frames).data);

    // Baseline never looks at future frames.
    auto base = make_model(pipe::Variant::baseline, 3);
    data::Sample mutated = s;
    for (double& v : mutated.target_frames.data) {
        v = 1.0 - v;
    }
    ad::Tape t1;
    ad::Tape t2;
    CHECK(base.forward(t1, s, pipe::Mode::train).probability.item() ==
          base.forward(t2, mutated, pipe::Mode::train).probability.item());

    // Training without ground truth is rejected.
    data::Sample blind = s;
    blind.target_frames = Tensor();
    ad::Tape t3;
    Rng rng(1);
    CHECK_THROWS_AS(pip.forward(t3, blind, pipe::Mode::train, &rng), ConfigError);
}

TEST_CASE("loss composition") {
    Dataset& d = dataset();
    const data::Sample& s = d.train.samples.front();
    pipe::RunConfig rc;
    rc.alpha = 0.0;
    rc.lambda = 0.0;
    auto m = make_model(pipe::Variant::pip, 2, rc);
    {
        ad::Tape tape;
        Rng rng(4);
        auto out = m.forward(tape, s, pipe::Mode::train, &rng);
        auto parts = m.total_loss(out, s);
        CHECK(parts.total.item() == doctest::Approx(parts.bce.item()).epsilon(1e-12));
    }
    {
        // Identical spans pay lambda * ln S; the penalty shrinks as they separate.
        pipe::RunConfig rl;
        rl.alpha = 0.0;
        rl.lambda = 0.5;
        auto ml = make_model(pipe::Variant::pip, 2, rl);
        ad::Tape tape;
        Rng rng(4);
        auto out = ml.forward(tape, s, pipe::Mode::train, &rng);
        auto parts = ml.total_loss(out, s);
        const double jsd = parts.penalty.item();
        CHECK(jsd >= 0.0);
        CHECK(parts.total.item() ==
              doctest::Approx(parts.bce.item() + 0.5 * (std::log(3.0) - jsd)).epsilon(1e-12));
    }
    // Perfect frames and a confident correct answer leave only -100 alpha.
    auto full = make_model(pipe::Variant::pip, 2);
    ad::Tape tape;
    pipe::Forward f;
    for (std::size_t j = 0; j < 37; ++j) {
        f.generated.push_back(tape.constant(nn::take(s.target_frames, j)));
    }
    f.simulated = true;
    f.probability = tape.constant(Tensor::scalar(s.label == 1 ? 1.0 - 1e-12 : 1e-12));
    auto parts = full.total_loss(f, s);
    CHECK(parts.total.item() == doctest::Approx(-100.0 * 0.01).epsilon(1e-5));
}

TEST_CASE("without joint training the simulator sees only the simulation loss") {
    Dataset& d = dataset();
    const data::Sample& s = d.train.samples.front();
    pipe::RunConfig rc;
    rc.joint = false;
    rc.tf_rate = 0.5;
    auto m = make_model(pipe::Variant::pip, 6, rc);

    auto sim_grads = [&](bool full) {
        m.store().zero_grad();
        ad::Tape tape;
        Rng rng(9);
        auto out = m.forward(tape, s, pipe::Mode::train, &rng);
        auto parts = m.total_loss(out, s);
        tape.backward(full ? parts.total : ad::scale(parts.sim, rc.alpha));
        std::vector<double> g;
        for (const ad::Parameter* p : m.store().all()) {
            if (p->name.starts_with("sim.")) {
                g.insert(g.end(), p->grad.data.begin(), p->grad.data.end());
            }
        }
        return g;
    };
    const auto a = sim_grads(true);
    const auto b = sim_grads(false);
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    CHECK(worst < 1e-12);

    // With joint training the classification path adds to the simulator gradient.
    rc.joint = true;
    auto j = make_model(pipe::Variant::pip, 6, rc);
    m = std::move(j);
    const auto c = sim_grads(true);
    double diff = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        diff = std::max(diff, std::abs(c[i] - b[i]));
    }
    CHECK(diff > 0.0);
}

TEST_CASE("best checkpoint rule and evaluation arithmetic") {
    CHECK(pipe::best_epoch({0.5, 0.8, 0.7}) == 1);
    CHECK(pipe::best_epoch({0.6, 0.6}) == 0);
    CHECK_THROWS_AS(pipe::best_epoch({}), DomainError);

    Dataset& d = dataset();
    auto base = make_model(pipe::Variant::baseline);
    for (double& w : base.store().get("head.w").value.data) {
        w = 0.0;
    }
    base.store().get("head.b").value[0] = std::log(0.6 / 0.4);
    pipe::SplitData one = first_n(d.test, 1);
    one.samples[0].label = 1;
    auto ev = pipe::evaluate(base, one);
    CHECK(ev.predictions[0].probability == doctest::Approx(0.6));
    CHECK(ev.accuracy == 1.0);
    one.samples[0].label = 0;
    CHECK(pipe::evaluate(base, one).accuracy == 0.0);
    CHECK_THROWS_AS(pipe::evaluate(base, pipe::SplitData{}), DomainError);

    // Evaluation leaves parameters untouched and repeats exactly.
    const auto before = base.store().get("enc.frame0.w").value.data;
    auto e1 = pipe::evaluate(base, d.val);
    auto e2 = pipe::evaluate(base, d.val);
    CHECK(e1.accuracy == e2.accuracy);
    CHECK(e1.bce == e2.bce);
    CHECK(base.store().get("enc.frame0.w").value.data == before);
}

TEST_CASE("training is reproducible and keeps the best validation checkpoint") {
    Dataset& d = dataset();
    pipe::RunConfig rc;
    rc.epochs = 2;
    rc.freeze_simulator = true;
    auto run = [&](ad::ParameterStore* last) {
        auto m = make_model(pipe::Variant::pip, 11, rc);
        auto res = pipe::train(m, first_n(d.train, 4), d.val, last);
        return std::make_pair(std::move(m), res);
    };
    ad::ParameterStore last;
    auto [m1, r1] = run(&last);
    auto [m2, r2] = run(nullptr);
    REQUIRE(r1.metrics.size() == 4);
    CHECK(r1.epochs_run == 2);
    CHECK(!r1.diverged);
    for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
        CHECK(r1.metrics[i].bce == r2.metrics[i].bce);
        CHECK(r1.metrics[i].accuracy == r2.metrics[i].accuracy);
        CHECK(r1.metrics[i].jsd == r2.metrics[i].jsd);
    }
    CHECK(r1.metrics[1].split == "val");
    for (const ad::Parameter* p : m1.store().all()) {
        CHECK(p->value.data == m2.store().get(p->name).value.data);
    }
    // Frozen simulator parameters never move.
    auto fresh = make_model(pipe::Variant::pip, 11, rc);
    CHECK(m1.store().get("sim.enc0.w").value.data == fresh.store().get("sim.enc0.w").value.data);
    CHECK(last.count() == m1.store().count());
    // The returned model matches the best epoch's validation accuracy.
    CHECK(pipe::evaluate(m1, d.val).accuracy == r1.best_val_accuracy);
}

TEST_CASE("joint training step updates the simulator") {
    Dataset& d = dataset();
    pipe::RunConfig rc;
    rc.epochs = 1;
    rc.batch = 2;
    auto m = make_model(pipe::Variant::pip_no_ss, 12, rc);
    const auto before = m.store().get("sim.dec5.w").value.data;
    auto res = pipe::train(m, first_n(d.train, 2), first_n(d.val, 1));
    CHECK(res.epochs_run == 1);
    CHECK(m.store().get("sim.dec5.w").value.data != before);
    CHECK(std::isfinite(res.metrics[0].psnr));
}

TEST_CASE("divergence stops training and restores the last good parameters") {
    Dataset& d = dataset();
    pipe::RunConfig rc;
    rc.epochs = 3;
    auto m = make_model(pipe::Variant::baseline, 4, rc);
    for (double& w : m.store().get("head.w").value.data) {
        w = 1e308;
    }
    const auto before = m.store().get("enc.frame0.w").value.data;
    auto res = pipe::train(m, first_n(d.train, 2), d.val);
    CHECK(res.diverged);
    CHECK(res.epochs_run == 0);
    CHECK(!res.message.empty());
    CHECK(m.store().get("enc.frame0.w").value.data == before);
}

TEST_CASE("simulator variant trains on scenes and reports against copy-last") {
    Dataset& d = dataset();
    pipe::RunConfig rc;
    rc.epochs = 1;
    auto m = make_model(pipe::Variant::simulator, 2, rc);
    auto res = pipe::train(m, first_n(d.train, 2), first_n(d.val, 1));
    CHECK(res.epochs_run == 1);
    CHECK(std::isnan(res.metrics[0].accuracy));
    CHECK(std::isfinite(res.metrics[1].psnr));
    auto rep = pipe::simulator_report(m, d.test);
    CHECK(rep.scenes >= 1);
    CHECK(std::isfinite(rep.model_psnr));
    CHECK(rep.copy_last_psnr > 0.0);
    CHECK_THROWS_AS(pipe::evaluate(m, d.test), DomainError);
}

TEST_CASE("checkpoints round-trip the model and its config") {
    Dataset& d = dataset();
    const fs::path path = d.dir / "model.ckpt";
    pipe::RunConfig rc;
    rc.lambda = 0.25;
    auto m = make_model(pipe::Variant::pip, 8, rc);
    pipe::save_model(m, path);
    auto loaded = pipe::load_model(path);
    CHECK(loaded.variant() == pipe::Variant::pip);
    CHECK(loaded.config().lambda == doctest::Approx(0.25));
    CHECK(pipe::evaluate(loaded, d.test).predictions[0].probability ==
          pipe::evaluate(m, d.test).predictions[0].probability);

    auto noss = make_model(pipe::Variant::pip_no_ss);
    pipe::save_model(noss, path);
    const auto ck = io::read_checkpoint(path);
    for (const auto& a : ck.arrays) {
        CHECK(!a.name.starts_with("span."));
    }
}

TEST_CASE("metrics csv schema") {
    Dataset& d = dataset();
    const fs::path path = d.dir / "metrics.csv";
    std::vector<pipe::MetricRow> rows{{1, "train", 0.69, 21.5, 0.1, 0.5},
                                      {1, "val", 0.7, std::nan(""), std::nan(""), 0.25}};
    pipe::write_metrics_csv(rows, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,split,bce,psnr,jsd,accuracy");
    auto back = pipe::read_metrics_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].psnr == 21.5);
    CHECK(std::isnan(back[1].psnr));
    CHECK(back[1].accuracy == 0.25);
}

TEST_CASE("span histogram contracts") {
    Dataset& d = dataset();
    auto noss = make_model(pipe::Variant::pip_no_ss);
    CHECK_THROWS_AS(pipe::span_frequency_histogram(noss, d.test), DomainError);

    // Zero start/end weights give uniform attention and an empty histogram.
    auto pip = make_model(pipe::Variant::pip);
    for (ad::Parameter* p : pip.store().all()) {
        if (p->name.starts_with("span.p") || p->name.starts_with("span.q")) {
            for (double& w : p->value.data) {
                w = 0.0;
            }
        }
    }
    auto hist = pipe::span_frequency_histogram(pip, d.test);
    CHECK(hist.horizon == 37);
    CHECK(hist.records.size() == 3 * d.test.samples.size());
    for (std::size_t c : hist.union_counts) {
        CHECK(c == 0);
    }
    const fs::path csv = d.dir / "spans.csv";
    pipe::write_span_csv(hist, csv);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "sample_id,span_idx,frame_idx,r_value,selected");
}

TEST_CASE("event proximity test counts selected mass near events") {
    Dataset& d = dataset();
    // Synthetic analysis: every span of every sample selects exactly the frames
    // around its own events, which random placements rarely match.
    pipe::SpanAnalysis a;
    a.horizon = 37;
    std::size_t with_events = 0;
    for (std::size_t i = 0; i < d.train.samples.size(); ++i) {
        const auto& s = d.train.samples[i];
        const auto ev = data::event_generated_indices(d.manifest, d.manifest.scenes[s.scene], s.object);
        pipe::SpanRecord rec;
        rec.sample = i;
        if (!ev.empty()) {
            ++with_events;
            rec.selected = {static_cast<std::size_t>(ev.front())};
        }
        a.records.push_back(rec);
    }
    auto res = pipe::event_proximity_test(a, d.manifest, d.train, 3, 1000, 1);
    CHECK(res.samples == with_events);
    CHECK(res.observed == static_cast<double>(with_events));
    if (with_events > 0) {
        CHECK(res.null_mean < res.observed);
        CHECK(res.p_value < 0.05);
    }
}
