#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "pipsim/microworld.hpp"

using namespace pipsim;
using namespace pipsim::world;

namespace {

ObjectSpec circle(double r, Vec2 pos, Vec2 vel = {}) {
    ObjectSpec o;
    o.shape = ShapeKind::circle;
    o.color = kRed;
    o.half_extent = r;
    o.position = pos;
    o.velocity = vel;
    return o;
}

ObjectSpec square(double h, Vec2 pos, bool is_static = false) {
    ObjectSpec o;
    o.shape = ShapeKind::square;
    o.color = 2;
    o.half_extent = h;
    o.position = pos;
    o.is_static = is_static;
    return o;
}

ObjectSpec container(double h, double x) {
    ObjectSpec o;
    o.shape = ShapeKind::container;
    o.color = kGray;
    o.half_extent = h;
    o.position = {x, 0.0};
    o.is_static = true;
    return o;
}

// The ball-versus-square setup with a closed-form first contact frame.
Trajectory head_on_contact(WorldConfig& config) {
    config.friction = 0.0;
    return simulate({circle(0.1, {0.0, 0.1}, {5.0, 0.0}), square(0.25, {2.0, 0.25}, true)}, TaskRoles{0, -1}, config);
}

}  // namespace

TEST_CASE("free fall follows the semi-implicit Euler closed form") {
    WorldConfig config;
    WorldState s = make_state({circle(0.2, {2.0, 3.5})});
    for (int k = 1; k <= 30; ++k) {
        step_physics(s, config);
        const double expected = 3.5 - config.gravity * config.dt * config.dt * k * (k + 1) / 2.0;
        CHECK(s.bodies[0].position.y == doctest::Approx(expected).epsilon(1e-12));
        CHECK(s.bodies[0].position.x == 2.0);
    }
}

TEST_CASE("resting circle without restitution stays put") {
    WorldConfig config;
    config.restitution = 0.0;
    WorldState s = make_state({circle(0.3, {1.0, 0.3})});
    for (int k = 0; k < 200; ++k) {
        step_physics(s, config);
        CHECK(std::abs(s.bodies[0].position.y - 0.3) < 1e-12);
        CHECK(s.bodies[0].position.x == 1.0);
    }
}

TEST_CASE("elastic head-on collision exchanges velocities") {
    WorldConfig config;
    config.gravity = 0.0;
    config.restitution = 1.0;
    config.friction = 0.0;
    WorldState s = make_state({circle(0.2, {1.5, 2.0}, {2.0, 0.0}), circle(0.2, {2.5, 2.0}, {-2.0, 0.0})});
    for (int k = 0; k < 30; ++k) {
        step_physics(s, config);
    }
    CHECK(std::abs(s.bodies[0].velocity.x + 2.0) < 1e-9);
    CHECK(std::abs(s.bodies[1].velocity.x - 2.0) < 1e-9);
    CHECK(std::abs(s.bodies[0].velocity.y) < 1e-12);
}

TEST_CASE("tunneling is reported as a configuration error") {
    WorldConfig config;
    config.dt = 0.2;
    WorldState s = make_state({circle(0.1, {1.0, 2.0}, {5.0, 0.0})});
    CHECK_THROWS_AS(step_physics(s, config), ConfigError);
}

TEST_CASE("config validation") {
    WorldConfig bad;
    bad.dt = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = WorldConfig{};
    bad.raw_frames = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = WorldConfig{};
    bad.restitution = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(make_state({circle(0.0, {1.0, 1.0})}), ConfigError);
}

TEST_CASE("names round-trip and reject unknown values") {
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        CHECK(parse_task(to_string(t)) == t);
    }
    for (int s = 0; s < kShapeCount; ++s) {
        CHECK(parse_shape(to_string(static_cast<ShapeKind>(s))) == static_cast<ShapeKind>(s));
    }
    CHECK_THROWS_AS(parse_task("juggling"), DomainError);
    CHECK_THROWS_AS(parse_shape("hexagon"), DomainError);
    CHECK_THROWS_AS(color_rgb(7), DomainError);
}

TEST_CASE("ball reaches the static square at raw frame 17") {
    WorldConfig config;
    const Trajectory traj = head_on_contact(config);
    CHECK(label_outcome(traj, Task::contact, 1) == 1);
    const auto events = detect_events(traj);
    const auto it = std::find_if(events.begin(), events.end(),
                                 [](const EventAnnotation& e) { return e.kind == EventKind::object_object_contact; });
    REQUIRE(it != events.end());
    CHECK(it->frame == 17);
    CHECK(it->objects == std::vector<int>{0, 1});
    // The ball spawns on the ground, so it never produces a ground-contact event.
    CHECK(std::none_of(events.begin(), events.end(),
                       [](const EventAnnotation& e) { return e.kind == EventKind::first_ground_contact; }));
}

TEST_CASE("labels on hand-built trajectories") {
    WorldConfig config;
    SUBCASE("resting square is stable with no object contacts") {
        const Trajectory traj = simulate({square(0.3, {2.0, 0.3})}, {}, config);
        CHECK(label_outcome(traj, Task::stability, 0) == 1);
        for (const auto& e : detect_events(traj)) {
            CHECK(e.kind != EventKind::object_object_contact);
        }
    }
    SUBCASE("object pushed off the arena is unstable") {
        ObjectSpec o = circle(0.2, {3.5, 0.2}, {3.0, 0.0});
        const Trajectory traj = simulate({o}, {}, config);
        CHECK(label_outcome(traj, Task::stability, 0) == 0);
    }
    SUBCASE("ball moving away never touches the target") {
        const Trajectory traj =
            simulate({circle(0.2, {1.0, 0.2}, {-2.0, 0.0}), square(0.3, {3.0, 0.3})}, TaskRoles{0, -1}, config);
        CHECK(label_outcome(traj, Task::contact, 1) == 0);
        for (const auto& e : detect_events(traj)) {
            CHECK(e.kind != EventKind::object_object_contact);
        }
    }
    SUBCASE("object dropped into a container is contained") {
        const Trajectory traj = simulate({container(0.7, 2.0), square(0.25, {2.0, 2.0})}, TaskRoles{-1, 0}, config);
        CHECK(label_outcome(traj, Task::containment, 1) == 1);
    }
    SUBCASE("object wider than the opening is not contained") {
        const Trajectory traj = simulate({container(0.5, 2.0), square(0.6, {2.0, 2.5})}, TaskRoles{-1, 0}, config);
        CHECK(label_outcome(traj, Task::containment, 1) == 0);
    }
    SUBCASE("unknown object ids are rejected") {
        const Trajectory traj = simulate({square(0.3, {2.0, 0.3})}, {}, config);
        CHECK_THROWS_AS(label_outcome(traj, Task::stability, 3), DomainError);
        CHECK_THROWS_AS(label_outcome(traj, Task::contact, 0), DomainError);
    }
}

TEST_CASE("stack of two: ground contact of the lower box precedes the stacking contact") {
    WorldConfig config;
    const Trajectory traj = simulate({square(0.3, {2.0, 0.8}), square(0.3, {2.05, 2.0})}, {}, config);
    const auto events = detect_events(traj);
    int ground0 = -1;
    int pair = -1;
    for (const auto& e : events) {
        if (e.kind == EventKind::first_ground_contact && e.objects == std::vector<int>{0}) {
            ground0 = e.frame;
        }
        if (e.kind == EventKind::object_object_contact) {
            pair = e.frame;
        }
    }
    REQUIRE(ground0 > 0);
    REQUIRE(pair > 0);
    // Free-fall times from the spawn gaps decide the order.
    const double t_ground = std::sqrt(2.0 * 0.5 / config.gravity);
    CHECK(ground0 == doctest::Approx(t_ground / config.dt).epsilon(0.1));
    CHECK(ground0 < pair);
    CHECK(label_outcome(traj, Task::stability, 1) == 1);
}

TEST_CASE("generated episodes are deterministic") {
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        const Episode a = generate_episode(t, 1234);
        const Episode b = generate_episode(t, 1234);
        CHECK(a.frames == b.frames);
        CHECK(a.masks == b.masks);
        CHECK(a.labels == b.labels);
        CHECK(a.events == b.events);
        const Episode c = generate_episode(t, 1235);
        CHECK(a.frames != c.frames);
    }
}

TEST_CASE("generated episodes satisfy the world invariants") {
    WorldConfig config;
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        for (std::uint64_t seed = 0; seed < 12; ++seed) {
            CAPTURE(seed);
            const Episode ep = generate_episode(t, seed, config, seed % 3 == 0);
            const auto& traj = ep.trajectory;
            const std::size_t plane = static_cast<std::size_t>(ep.height * ep.width);
            REQUIRE(ep.frames.size() == static_cast<std::size_t>(ep.raw_frames) * 3 * plane);
            REQUIRE(ep.masks.size() == ep.objects.size());

            // Labels re-derive from the trajectory.
            REQUIRE(ep.labels.size() == ep.queryable.size());
            for (std::size_t q = 0; q < ep.queryable.size(); ++q) {
                CHECK(ep.labels[q] == label_outcome(traj, t, ep.queryable[q]));
            }

            // Annotations stay in range and leave the first six frames quiet.
            for (const auto& e : ep.events) {
                CHECK(e.frame >= 0);
                CHECK(e.frame < ep.raw_frames);
                if (is_interaction(e.kind)) {
                    CHECK(e.frame >= kQuietPrefix);
                }
            }

            // Contact label agrees with the ball/target contact annotations.
            if (t == Task::contact) {
                for (std::size_t q = 0; q < ep.queryable.size(); ++q) {
                    const int obj = ep.queryable[q];
                    const bool annotated = std::any_of(ep.events.begin(), ep.events.end(), [&](const auto& e) {
                        return e.kind == EventKind::object_object_contact &&
                               std::find(e.objects.begin(), e.objects.end(), ep.roles.ball) != e.objects.end() &&
                               std::find(e.objects.begin(), e.objects.end(), obj) != e.objects.end();
                    });
                    CHECK(annotated == (ep.labels[q] == 1));
                }
            }

            // Unseen episodes draw from the unseen shape pool only.
            for (std::size_t i = 0; i < ep.objects.size(); ++i) {
                if (static_cast<int>(i) == ep.roles.ball || static_cast<int>(i) == ep.roles.container) {
                    continue;
                }
                const bool novel = ep.objects[i].shape == ShapeKind::wide_square ||
                                   ep.objects[i].shape == ShapeKind::tall_triangle;
                CHECK(novel == ep.unseen);
            }

            // Masks are binary and disjoint; frames stay in [0, 1].
            for (int k = 0; k < ep.raw_frames; k += 7) {
                for (std::size_t p = 0; p < plane; ++p) {
                    float total = 0.0f;
                    for (const auto& m : ep.masks) {
                        const float v = m[static_cast<std::size_t>(k) * plane + p];
                        CHECK((v == 0.0f || v == 1.0f));
                        total += v;
                    }
                    CHECK(total <= 1.0f);
                }
            }
            CHECK(std::all_of(ep.frames.begin(), ep.frames.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));

            // Static objects never move.
            for (std::size_t i = 0; i < ep.objects.size(); ++i) {
                if (ep.objects[i].is_static) {
                    CHECK(traj.frames.back()[i].position.x == ep.objects[i].position.x);
                    CHECK(traj.frames.back()[i].position.y == ep.objects[i].position.y);
                }
            }
        }
    }
}

TEST_CASE("mechanical energy never increases") {
    WorldConfig config;
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            const Episode ep = generate_episode(t, seed, config);
            WorldState s = make_state(ep.objects);
            double prev = mechanical_energy(s, config);
            for (int k = 1; k < config.raw_frames; ++k) {
                step_physics(s, config);
                const double e = mechanical_energy(s, config);
                CHECK(e <= prev + 1e-6);
                prev = e;
            }
        }
    }
}

TEST_CASE("each task produces both outcomes") {
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        int pos = 0;
        int neg = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            for (int l : generate_episode(t, seed).labels) {
                (l ? pos : neg)++;
            }
        }
        CAPTURE(to_string(t));
        CHECK(pos > 0);
        CHECK(neg > 0);
    }
}

TEST_CASE("frame and trajectory dumps") {
    const Episode ep = generate_episode(Task::contact, 7);
    const auto dir = std::filesystem::temp_directory_path() / "pipsim_world_test";
    std::filesystem::create_directories(dir);
    write_ppm(ep, 10, dir / "f.ppm");
    CHECK(std::filesystem::file_size(dir / "f.ppm") == std::string("P6\n32 32\n255\n").size() + 32 * 32 * 3);
    CHECK_THROWS_AS(write_ppm(ep, ep.raw_frames, dir / "g.ppm"), DomainError);
    write_trajectory_csv(ep.trajectory, dir / "t.csv");
    std::ifstream in(dir / "t.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,object_id,x,y,vx,vy");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) {
        ++rows;
    }
    CHECK(rows == ep.objects.size() * static_cast<std::size_t>(ep.raw_frames));
    CHECK_THROWS_AS(write_ppm(ep, 0, dir / "missing" / "x.ppm"), IoError);
    std::filesystem::remove_all(dir);
}
