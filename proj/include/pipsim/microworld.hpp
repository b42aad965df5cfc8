#pragma once

// Deterministic 2D rigid-body episodes for the stability, contact and
// containment task families, rendered at desk resolution.
//
// World units: y points up, the ground is the line y = 0, the visible arena is
// [0, arena_width] x [0, arena_height]. Bodies translate but never rotate;
// triangles collide as their bounding boxes.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pipsim/errors.hpp"

namespace pipsim::world {

enum class Task { stability = 0, contact = 1, containment = 2 };

enum class ShapeKind { circle = 0, square = 1, triangle = 2, container = 3, wide_square = 4, tall_triangle = 5 };

inline constexpr int kTaskCount = 3;
inline constexpr int kShapeCount = 6;
inline constexpr int kColorCount = 7;
inline constexpr int kRed = 0;
inline constexpr int kGray = 6;

std::string_view to_string(Task task);
std::string_view to_string(ShapeKind shape);
// Throws DomainError for unknown names.
Task parse_task(std::string_view name);
ShapeKind parse_shape(std::string_view name);
std::array<double, 3> color_rgb(int color);

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

struct WorldConfig {
    double gravity = 9.81;
    double dt = 1.0 / 50.0;
    int raw_frames = 150;
    int width = 32;
    int height = 32;
    double arena_width = 4.0;
    double arena_height = 4.0;
    double restitution = 0.3;
    double friction = 0.5;
    // Circles roll: their contacts use friction * rolling_factor.
    double rolling_factor = 0.1;

    // Throws ConfigError on dt <= 0, raw_frames < 6, non-positive resolution,
    // restitution outside [0, 1] or negative friction.
    void validate() const;
};

struct ObjectSpec {
    ShapeKind shape = ShapeKind::square;
    int color = 1;
    double half_extent = 0.3;
    Vec2 position;
    Vec2 velocity;
    bool is_static = false;
};

// Which objects play the ball and container roles, -1 when absent.
struct TaskRoles {
    int ball = -1;
    int container = -1;
};

struct BodyState {
    Vec2 position;
    Vec2 velocity;
};

struct WorldState {
    std::vector<ObjectSpec> objects;
    std::vector<BodyState> bodies;
};

WorldState make_state(const std::vector<ObjectSpec>& objects);

// Semi-implicit Euler followed by impulse contact resolution and positional
// projection. Throws ConfigError when any body moves further than its
// smallest half-extent in one step.
void step_physics(WorldState& state, const WorldConfig& config);

// Kinetic plus gravitational potential energy of the dynamic bodies.
double mechanical_energy(const WorldState& state, const WorldConfig& config);

// Surface distance between two objects (negative when overlapping) and
// between an object and the ground.
double surface_distance(const ObjectSpec& a, const Vec2& pa, const ObjectSpec& b, const Vec2& pb);
double ground_distance(const ObjectSpec& a, const Vec2& pa);

struct Trajectory {
    std::vector<ObjectSpec> objects;
    TaskRoles roles;
    double arena_width = 4.0;
    // frames[k][i]: state of object i after k steps; frames[0] is the spawn.
    std::vector<std::vector<BodyState>> frames;

    std::size_t frame_count() const { return frames.size(); }
};

Trajectory simulate(const std::vector<ObjectSpec>& objects, const TaskRoles& roles, const WorldConfig& config);

enum class EventKind { first_ground_contact = 0, object_object_contact = 1, containment_entry = 2, settle = 3 };

std::string_view to_string(EventKind kind);
EventKind parse_event_kind(std::string_view name);

struct EventAnnotation {
    EventKind kind = EventKind::settle;
    int frame = 0;
    std::vector<int> objects;

    bool operator==(const EventAnnotation&) const = default;
};

// Events mark evaluation-only ground truth; no model input path reads them.
std::vector<EventAnnotation> detect_events(const Trajectory& trajectory);

// Whether the event marks a physical interaction (everything except settling).
bool is_interaction(EventKind kind);

inline constexpr double kContactTolerance = 1e-6;
inline constexpr double kSettleDisplacement = 0.02;
inline constexpr int kSettleWindow = 25;
inline constexpr double kRestSpeed = 0.05;
inline constexpr int kQuietPrefix = 6;

// Stability: the object's centroid stays within 0.02 units over the last 25
// frames and never leaves the arena. Contact: the ball touches the object in
// some frame. Containment: the final centroid lies inside the container's
// interior below the rim. Throws DomainError for an unknown object id.
int label_outcome(const Trajectory& trajectory, Task task, int object);

struct Episode {
    Task task = Task::stability;
    std::uint64_t seed = 0;
    bool unseen = false;
    std::vector<ObjectSpec> objects;
    TaskRoles roles;
    // Objects that receive a query and a label, in ascending id order.
    std::vector<int> queryable;
    std::vector<int> labels;
    std::vector<EventAnnotation> events;
    Trajectory trajectory;
    int raw_frames = 0;
    int height = 0;
    int width = 0;
    // [raw_frames, 3, height, width] in [0, 1].
    std::vector<float> frames;
    // Per object: [raw_frames, height, width] binary masks.
    std::vector<std::vector<float>> masks;

    int label_of(int object) const;
};

// Deterministic in (task, seed, unseen, config). Throws GenerationError when
// no valid spawn is found in 100 samples.
Episode generate_episode(Task task, std::uint64_t seed, const WorldConfig& config = {}, bool unseen = false);

// Renders every trajectory frame; fills frames and masks of the episode.
void render_episode(Episode& episode, const WorldConfig& config);

void write_ppm(const Episode& episode, int raw_frame, const std::filesystem::path& path);
void write_trajectory_csv(const Trajectory& trajectory, const std::filesystem::path& path);

}  // namespace pipsim::world
