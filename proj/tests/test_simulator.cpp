#include <chrono>
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "pipsim/errors.hpp"
#include "pipsim/microworld.hpp"
#include "pipsim/simulator.hpp"

using namespace pipsim;
using ad::Tensor;
using ad::Var;

namespace {

// Frames raw 0, 2, 4, ... of an episode as [count, 3, H, W].
Tensor kept_frames(const world::Episode& ep, std::size_t first, std::size_t count) {
    const std::size_t n = 3 * static_cast<std::size_t>(ep.height * ep.width);
    Tensor t({count, 3, static_cast<std::size_t>(ep.height), static_cast<std::size_t>(ep.width)});
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t raw = 2 * (first + k);
        for (std::size_t i = 0; i < n; ++i) {
            t.data[k * n + i] = ep.frames[raw * n + i];
        }
    }
    return t;
}

struct Model {
    ad::ParameterStore store;
    sim::Simulator net{sim::SimulatorConfig{}};
    explicit Model(std::uint64_t seed) {
        Rng rng(seed);
        sim::init_simulator(store, net.config(), rng);
    }
};

}  // namespace

TEST_CASE("simulator layer shapes and parameter names") {
    Model m(1);
    CHECK(m.net.config().latent_height() == 8);
    CHECK(m.net.config().latent_width() == 8);
    CHECK(m.store.get("sim.lstm0.w").value.shape == ad::Shape{128, 64, 3, 3});
    CHECK(m.store.get("sim.dec5.w").value.shape == ad::Shape{16, 4, 3, 3});
    CHECK(m.store.get("sim.dec5.b").value[3] == doctest::Approx(4.0));
    CHECK(m.store.get("sim.dec5.b").value[0] == doctest::Approx(-3.0));
    CHECK(m.store.get("sim.lstm1.b").value[40] == doctest::Approx(1.0));
    CHECK(m.store.get("sim.lstm1.b").value[0] == doctest::Approx(0.0));

    ad::Tape tape;
    nn::Binder params(tape, m.store);
    Var frame = tape.constant(Tensor({3, 32, 32}));
    Var z = m.net.encode(params, frame);
    CHECK(z.shape() == ad::Shape{32, 8, 8});
    Var out = m.net.decode(params, z);
    CHECK(out.shape() == ad::Shape{3, 32, 32});
    CHECK_THROWS_AS(m.net.encode(params, tape.constant(Tensor({3, 16, 16}))), ShapeError);
}

TEST_CASE("simulator config validation") {
    sim::SimulatorConfig c;
    c.height = 30;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    sim::SimulatorConfig d;
    d.encoder.clear();
    CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("rollout emits one frame per horizon step and checks teacher forcing inputs") {
    Model m(2);
    const world::Episode ep = world::generate_episode(world::Task::contact, 5);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor truth = kept_frames(ep, 3, 6);
    ad::Tape tape;
    nn::Binder params(tape, m.store);
    const auto frames = m.net.rollout(params, inputs, 6);
    REQUIRE(frames.size() == 6);
    for (const Var& f : frames) {
        CHECK(f.shape() == ad::Shape{3, 32, 32});
        for (double v : f.value().data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
    Rng rng(3);
    CHECK_THROWS_AS(m.net.rollout(params, inputs, 6, nullptr, 0.5, &rng), ConfigError);
    CHECK_THROWS_AS(m.net.rollout(params, inputs, 6, &truth, 1.5, &rng), ConfigError);
    CHECK_THROWS_AS(m.net.rollout(params, inputs, 7, &truth, 0.0, nullptr), ShapeError);
}

TEST_CASE("a saturated gate still mixes in the content branch") {
    Model m(4);
    m.store.get("sim.dec5.b").value[3] = 60.0;
    const world::Episode ep = world::generate_episode(world::Task::contact, 2);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor pred = m.net.predict(m.store, inputs, 1);
    const double g = m.net.config().skip_gate_max;
    double max_diff = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double prev = inputs.data[2 * pred.data.size() + i];
        max_diff = std::max(max_diff, std::abs(pred.data[i] - prev));
        // out = g * prev + (1 - g) * content with content in (0, 1).
        const double content = (pred.data[i] - g * prev) / (1.0 - g);
        CHECK(content > 0.0);
        CHECK(content < 1.0);
    }
    CHECK(g < 1.0);
    CHECK(max_diff > 0.0);
}

TEST_CASE("untrained gated decoder starts close to copying the conditioning frame") {
    Model m(4);
    const world::Episode ep = world::generate_episode(world::Task::stability, 9);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor pred = m.net.predict(m.store, inputs, 1);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(pred.data[i] - inputs.data[2 * pred.data.size() + i]));
    }
    // A gate near 0.97 * sigmoid(4) leaves under 6% of the blend to the content branch.
    CHECK(max_diff < 0.06);
    CHECK(max_diff > 0.0);
}

TEST_CASE("rollout with full teacher forcing and with none differ only after step zero") {
    Model m(5);
    const world::Episode ep = world::generate_episode(world::Task::contact, 11);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor truth = kept_frames(ep, 3, 4);
    ad::Tape tape;
    nn::Binder params(tape, m.store, false);
    Rng rng(1);
    const auto forced = m.net.rollout(params, inputs, 4, &truth, 1.0, &rng);
    const auto free = m.net.rollout(params, inputs, 4);
    CHECK(forced[0].value().data == free[0].value().data);
    CHECK(forced[1].value().data != free[1].value().data);
}

TEST_CASE("gradients reach every simulator parameter") {
    Model m(6);
    const world::Episode ep = world::generate_episode(world::Task::contact, 2);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor truth = kept_frames(ep, 3, 3);
    ad::Tape tape;
    nn::Binder params(tape, m.store);
    Rng rng(8);
    const auto frames = m.net.rollout(params, inputs, 3, &truth, 0.5, &rng);
    Var loss = sim::sim_loss(frames, truth);
    tape.backward(loss);
    for (const ad::Parameter* p : m.store.all()) {
        double norm = 0.0;
        for (double g : p->grad.data) {
            norm += g * g;
        }
        INFO(p->name);
        CHECK(norm > 0.0);
        CHECK(std::isfinite(norm));
    }
}

TEST_CASE("frozen binder leaves the store without gradients") {
    Model m(7);
    const world::Episode ep = world::generate_episode(world::Task::contact, 2);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor truth = kept_frames(ep, 3, 2);
    ad::Tape tape;
    nn::Binder params(tape, m.store, false);
    const auto frames = m.net.rollout(params, inputs, 2);
    tape.backward(sim::sim_loss(frames, truth));
    for (const ad::Parameter* p : m.store.all()) {
        double norm = 0.0;
        for (double g : p->grad.data) {
            norm += std::abs(g);
        }
        CHECK(norm == 0.0);
    }
}

TEST_CASE("sim loss matches the negated mean PSNR and respects the cap") {
    ad::Tape tape;
    Tensor gray({2, 3, 4, 4});
    Tensor zeros({2, 3, 4, 4});
    for (double& v : gray.data) {
        v = 0.5;
    }
    std::vector<Var> gen{tape.constant(nn::take(gray, 0)), tape.constant(nn::take(gray, 1))};
    // MSE 0.25 -> 10 log10(4) = 6.0206 dB.
    CHECK(sim::sim_loss(gen, zeros).value()[0] == doctest::Approx(-6.0205999).epsilon(1e-6));
    CHECK(sim::sim_loss(gen, gray).value()[0] == doctest::Approx(-100.0));
    CHECK(sim::mean_psnr(gray, zeros) == doctest::Approx(6.0205999).epsilon(1e-6));
    CHECK(sim::copy_last_psnr(gray, gray) == doctest::Approx(100.0));
    CHECK_THROWS_AS(sim::sim_loss(gen, Tensor({3, 3, 4, 4})), ShapeError);
}

TEST_CASE("rollout is deterministic for a fixed seed") {
    const world::Episode ep = world::generate_episode(world::Task::containment, 3);
    const Tensor inputs = kept_frames(ep, 0, 3);
    Model a(42);
    Model b(42);
    CHECK(a.net.predict(a.store, inputs, 4).data == b.net.predict(b.store, inputs, 4).data);
}

TEST_CASE("autoencoder path fits four frames above 25 dB") {
    Model m(10);
    const world::Episode ep = world::generate_episode(world::Task::contact, 21);
    const Tensor frames = kept_frames(ep, 0, 4);
    auto params = m.store.all();
    ad::AdamState adam = ad::make_adam(params, 1e-3);
    double psnr = 0.0;
    for (int it = 0; it < 500; ++it) {
        m.store.zero_grad();
        ad::Tape tape;
        nn::Binder bind(tape, m.store);
        std::vector<Var> outs;
        for (std::size_t k = 0; k < 4; ++k) {
            outs.push_back(m.net.decode(bind, m.net.encode(bind, tape.constant(nn::take(frames, k)))));
        }
        Var loss = sim::sim_loss(outs, frames);
        psnr = -loss.value()[0];
        tape.backward(loss);
        ad::adam_step(params, adam);
        if (psnr > 25.0) {
            break;
        }
    }
    MESSAGE("autoencoder PSNR " << psnr);
    CHECK(psnr > 25.0);
}

TEST_CASE("rollout training lowers the loss and reports timing") {
    Model m(12);
    const world::Episode ep = world::generate_episode(world::Task::contact, 33);
    const Tensor inputs = kept_frames(ep, 0, 3);
    const Tensor truth = kept_frames(ep, 3, 8);
    auto params = m.store.all();
    ad::AdamState adam = ad::make_adam(params, 1e-3);
    Rng rng(5);
    double first = 0.0;
    double last = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int it = 0; it < 30; ++it) {
        m.store.zero_grad();
        ad::Tape tape;
        nn::Binder bind(tape, m.store);
        const auto frames = m.net.rollout(bind, inputs, 8, &truth, 0.1, &rng);
        Var loss = sim::sim_loss(frames, truth);
        if (it == 0) {
            first = loss.value()[0];
        }
        last = loss.value()[0];
        tape.backward(loss);
        ad::adam_step(params, adam);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MESSAGE("8-step rollout fwd+bwd: " << secs / 30.0 << " s/iter, loss " << first << " -> " << last);
    CHECK(last < first);
}
