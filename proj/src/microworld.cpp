#include "pipsim/microworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "pipsim/rng.hpp"

namespace pipsim::world {

namespace {

constexpr double kWall = 0.1;           // container wall and floor thickness
constexpr double kRimFactor = 1.1;      // container rim height / half-width
constexpr double kBounceSpeed = 0.5;    // slower approaches do not bounce
constexpr int kVelocityIterations = 16;
constexpr int kPositionIterations = 60;
// Near pairs join the projection pass: a support lifted off the ground can
// push into a body that was clear when contacts were gathered.
constexpr double kProjectionMargin = 0.02;

struct Collider {
    bool circle = false;
    Vec2 offset;
    double radius = 0.0;
    Vec2 half;
};

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
double norm(Vec2 a) { return std::sqrt(dot(a, a)); }

Vec2 box_half(const ObjectSpec& o) {
    const double h = o.half_extent;
    switch (o.shape) {
        case ShapeKind::wide_square:
            return {1.5 * h, 0.75 * h};
        case ShapeKind::tall_triangle:
            return {0.75 * h, 1.5 * h};
        default:
            return {h, h};
    }
}

double rim_height(const ObjectSpec& c) { return kRimFactor * c.half_extent; }

std::vector<Collider> colliders(const ObjectSpec& o) {
    if (o.shape == ShapeKind::circle) {
        return {Collider{true, {}, o.half_extent, {}}};
    }
    if (o.shape == ShapeKind::container) {
        const double h = o.half_extent;
        const double rim = rim_height(o);
        return {
            Collider{false, {0.0, kWall / 2}, 0.0, {h, kWall / 2}},
            Collider{false, {-h + kWall / 2, rim / 2}, 0.0, {kWall / 2, rim / 2}},
            Collider{false, {h - kWall / 2, rim / 2}, 0.0, {kWall / 2, rim / 2}},
        };
    }
    return {Collider{false, {}, 0.0, box_half(o)}};
}

double bottom_extent(const ObjectSpec& o) {
    return o.shape == ShapeKind::circle ? o.half_extent : box_half(o).y;
}

double smallest_half(const ObjectSpec& o) {
    if (o.shape == ShapeKind::circle) {
        return o.half_extent;
    }
    const Vec2 h = box_half(o);
    return std::min(h.x, h.y);
}

double mass(const ObjectSpec& o) {
    if (o.shape == ShapeKind::circle) {
        return std::numbers::pi * o.half_extent * o.half_extent;
    }
    const Vec2 h = box_half(o);
    return 4.0 * h.x * h.y;
}

struct PairGeometry {
    double distance = 0.0;
    Vec2 normal{0.0, 1.0};  // from the first collider towards the second
};

PairGeometry circle_circle(Vec2 ca, double ra, Vec2 cb, double rb) {
    const Vec2 d = cb - ca;
    const double len = norm(d);
    PairGeometry g;
    g.distance = len - ra - rb;
    g.normal = len > 1e-12 ? (1.0 / len) * d : Vec2{1.0, 0.0};
    return g;
}

// Circle first, box second.
PairGeometry circle_box(Vec2 c, double r, Vec2 bc, Vec2 bh) {
    const Vec2 lo = bc - bh;
    const Vec2 hi = bc + bh;
    const Vec2 q{std::clamp(c.x, lo.x, hi.x), std::clamp(c.y, lo.y, hi.y)};
    PairGeometry g;
    const Vec2 v = c - q;
    const double len = norm(v);
    if (len > 1e-12) {
        g.distance = len - r;
        g.normal = (-1.0 / len) * v;
        return g;
    }
    // Centre inside the box: leave through the nearest face.
    const double faces[4] = {c.x - lo.x, hi.x - c.x, c.y - lo.y, hi.y - c.y};
    const Vec2 outward[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    const auto k = static_cast<std::size_t>(std::min_element(faces, faces + 4) - faces);
    g.distance = -(faces[k] + r);
    g.normal = -1.0 * outward[k];
    return g;
}

PairGeometry box_box(Vec2 ca, Vec2 ha, Vec2 cb, Vec2 hb) {
    const Vec2 d = cb - ca;
    const double ox = std::abs(d.x) - (ha.x + hb.x);
    const double oy = std::abs(d.y) - (ha.y + hb.y);
    const double sx = d.x >= 0.0 ? 1.0 : -1.0;
    const double sy = d.y >= 0.0 ? 1.0 : -1.0;
    PairGeometry g;
    if (ox < 0.0 && oy < 0.0) {
        if (ox > oy) {
            g.distance = ox;
            g.normal = {sx, 0.0};
        } else {
            g.distance = oy;
            g.normal = {0.0, sy};
        }
        return g;
    }
    if (ox > 0.0 && oy > 0.0) {
        g.distance = std::sqrt(ox * ox + oy * oy);
        g.normal = (1.0 / g.distance) * Vec2{sx * ox, sy * oy};
    } else if (ox >= oy) {
        g.distance = ox;
        g.normal = {sx, 0.0};
    } else {
        g.distance = oy;
        g.normal = {0.0, sy};
    }
    return g;
}

PairGeometry collide(const Collider& a, Vec2 pa, const Collider& b, Vec2 pb) {
    const Vec2 ca = pa + a.offset;
    const Vec2 cb = pb + b.offset;
    if (a.circle && b.circle) {
        return circle_circle(ca, a.radius, cb, b.radius);
    }
    if (a.circle) {
        return circle_box(ca, a.radius, cb, b.half);
    }
    if (b.circle) {
        PairGeometry g = circle_box(cb, b.radius, ca, a.half);
        g.normal = -1.0 * g.normal;
        return g;
    }
    return box_box(ca, a.half, cb, b.half);
}

// One collider pair in contact. b == -1 is the ground.
struct Contact {
    int a = 0;
    int b = -1;
    std::size_t ca = 0;
    std::size_t cb = 0;
    Vec2 normal;
    double target_vn = 0.0;
    double jn = 0.0;
    double jt = 0.0;
    double mu = 0.0;
    bool touching = false;
};

Contact make_contact(int a, int b, std::size_t ca, std::size_t cb) {
    Contact c;
    c.a = a;
    c.b = b;
    c.ca = ca;
    c.cb = cb;
    return c;
}

struct Solver {
    WorldState& state;
    const WorldConfig& config;
    std::vector<std::vector<Collider>> shapes;
    std::vector<double> inv_mass;

    Solver(WorldState& s, const WorldConfig& c) : state(s), config(c) {
        for (const ObjectSpec& o : state.objects) {
            shapes.push_back(colliders(o));
            inv_mass.push_back(o.is_static ? 0.0 : 1.0 / mass(o));
        }
    }

    double inv(int i) const { return i < 0 ? 0.0 : inv_mass[static_cast<std::size_t>(i)]; }

    Vec2 velocity(int i) const {
        return i < 0 ? Vec2{} : state.bodies[static_cast<std::size_t>(i)].velocity;
    }

    void push_velocity(int i, Vec2 dv) {
        if (i >= 0 && inv(i) > 0.0) {
            auto& v = state.bodies[static_cast<std::size_t>(i)].velocity;
            v = v + dv;
        }
    }

    PairGeometry geometry(const Contact& c) const {
        const auto ia = static_cast<std::size_t>(c.a);
        const Collider& a = shapes[ia][c.ca];
        const Vec2 pa = state.bodies[ia].position;
        if (c.b < 0) {
            const double bottom = a.circle ? a.radius : a.half.y;
            return PairGeometry{pa.y + a.offset.y - bottom, {0.0, -1.0}};
        }
        const auto ib = static_cast<std::size_t>(c.b);
        return collide(a, pa, shapes[ib][c.cb], state.bodies[ib].position);
    }

    double pair_friction(const Contact& c) const {
        const bool rolling = state.objects[static_cast<std::size_t>(c.a)].shape == ShapeKind::circle ||
                             (c.b >= 0 && state.objects[static_cast<std::size_t>(c.b)].shape == ShapeKind::circle);
        return config.friction * (rolling ? config.rolling_factor : 1.0);
    }

    std::vector<Contact> find_contacts() const {
        std::vector<Contact> out;
        const int n = static_cast<int>(state.objects.size());
        auto consider = [&](Contact c) {
            const PairGeometry g = geometry(c);
            if (g.distance <= kProjectionMargin) {
                c.touching = g.distance <= 1e-9;
                c.normal = g.normal;
                c.mu = pair_friction(c);
                out.push_back(c);
            }
        };
        for (int i = 0; i < n; ++i) {
            const auto ii = static_cast<std::size_t>(i);
            if (state.objects[ii].is_static) {
                continue;
            }
            for (std::size_t ci = 0; ci < shapes[ii].size(); ++ci) {
                consider(make_contact(i, -1, ci, 0));
            }
            for (int j = 0; j < n; ++j) {
                const auto jj = static_cast<std::size_t>(j);
                if (j == i || (j < i && !state.objects[jj].is_static)) {
                    continue;
                }
                for (std::size_t ci = 0; ci < shapes[ii].size(); ++ci) {
                    for (std::size_t cj = 0; cj < shapes[jj].size(); ++cj) {
                        consider(make_contact(i, j, ci, cj));
                    }
                }
            }
        }
        return out;
    }

    void solve_velocities(std::vector<Contact>& contacts) {
        for (Contact& c : contacts) {
            const double vn = dot(velocity(c.b) - velocity(c.a), c.normal);
            c.target_vn = vn < -kBounceSpeed ? -config.restitution * vn : 0.0;
        }
        for (int it = 0; it < kVelocityIterations; ++it) {
            for (Contact& c : contacts) {
                const double k = inv(c.a) + inv(c.b);
                if (k <= 0.0 || !c.touching) {
                    continue;
                }
                const Vec2 n = c.normal;
                const double vn = dot(velocity(c.b) - velocity(c.a), n);
                const double jn_new = std::max(c.jn + (c.target_vn - vn) / k, 0.0);
                const double dj = jn_new - c.jn;
                c.jn = jn_new;
                push_velocity(c.a, (-dj * inv(c.a)) * n);
                push_velocity(c.b, (dj * inv(c.b)) * n);

                const Vec2 t{-n.y, n.x};
                const double vt = dot(velocity(c.b) - velocity(c.a), t);
                const double limit = c.mu * c.jn;
                const double jt_new = std::clamp(c.jt - vt / k, -limit, limit);
                const double djt = jt_new - c.jt;
                c.jt = jt_new;
                push_velocity(c.a, (-djt * inv(c.a)) * t);
                push_velocity(c.b, (djt * inv(c.b)) * t);
            }
        }
    }

    // Bottom-up sweep; in near-vertical pair contacts the lower body acts as
    // immovable so stacks resolve without pushing supports into the ground.
    void project_positions(std::vector<Contact> contacts) {
        auto height = [&](const Contact& c) {
            if (c.b < 0) {
                return -std::numeric_limits<double>::infinity();
            }
            return std::min(state.bodies[static_cast<std::size_t>(c.a)].position.y,
                            state.bodies[static_cast<std::size_t>(c.b)].position.y);
        };
        std::stable_sort(contacts.begin(), contacts.end(),
                         [&](const Contact& l, const Contact& r) { return height(l) < height(r); });
        for (int it = 0; it < kPositionIterations; ++it) {
            bool moved = false;
            for (const Contact& c : contacts) {
                const PairGeometry g = geometry(c);
                if (g.distance >= 0.0) {
                    continue;
                }
                double wa = inv(c.a);
                double wb = inv(c.b);
                if (c.b >= 0 && wa > 0.0 && wb > 0.0 && std::abs(g.normal.y) > 0.7) {
                    (g.normal.y > 0.0 ? wa : wb) = 0.0;
                }
                const double k = wa + wb;
                if (k <= 0.0) {
                    continue;
                }
                const double corr = -g.distance / k;
                auto& pa = state.bodies[static_cast<std::size_t>(c.a)].position;
                pa = pa - (corr * wa) * g.normal;
                if (c.b >= 0) {
                    auto& pb = state.bodies[static_cast<std::size_t>(c.b)].position;
                    pb = pb + (corr * wb) * g.normal;
                }
                moved = true;
            }
            if (!moved) {
                break;
            }
        }
    }
};

double kinetic_energy(const WorldState& s) {
    double e = 0.0;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        if (!s.objects[i].is_static) {
            e += 0.5 * mass(s.objects[i]) * dot(s.bodies[i].velocity, s.bodies[i].velocity);
        }
    }
    return e;
}

bool inside_container(const ObjectSpec& container, Vec2 cpos, Vec2 p) {
    const double h = container.half_extent;
    return p.x > cpos.x - h + kWall && p.x < cpos.x + h - kWall && p.y > cpos.y + kWall &&
           p.y < cpos.y + rim_height(container);
}

bool covers(const ObjectSpec& o, Vec2 pos, Vec2 p) {
    const Vec2 d = p - pos;
    switch (o.shape) {
        case ShapeKind::circle:
            return dot(d, d) <= o.half_extent * o.half_extent;
        case ShapeKind::square:
        case ShapeKind::wide_square: {
            const Vec2 h = box_half(o);
            return std::abs(d.x) <= h.x && std::abs(d.y) <= h.y;
        }
        case ShapeKind::triangle:
        case ShapeKind::tall_triangle: {
            const Vec2 h = box_half(o);
            if (std::abs(d.y) > h.y) {
                return false;
            }
            // Apex at the top centre, base along the bottom edge.
            const double frac = (d.y + h.y) / (2.0 * h.y);
            return std::abs(d.x) <= h.x * (1.0 - frac);
        }
        case ShapeKind::container:
            for (const Collider& c : colliders(o)) {
                const Vec2 q = d - c.offset;
                if (std::abs(q.x) <= c.half.x && std::abs(q.y) <= c.half.y) {
                    return true;
                }
            }
            return false;
    }
    return false;
}

}  // namespace

// ---- names ---------------------------------------------------------------

std::string_view to_string(Task task) {
    switch (task) {
        case Task::stability:
            return "stability";
        case Task::contact:
            return "contact";
        case Task::containment:
            return "containment";
    }
    return "?";
}

Task parse_task(std::string_view name) {
    for (Task t : {Task::stability, Task::contact, Task::containment}) {
        if (to_string(t) == name) {
            return t;
        }
    }
    throw DomainError("invalid task '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind shape) {
    switch (shape) {
        case ShapeKind::circle:
            return "circle";
        case ShapeKind::square:
            return "square";
        case ShapeKind::triangle:
            return "triangle";
        case ShapeKind::container:
            return "container";
        case ShapeKind::wide_square:
            return "wide_square";
        case ShapeKind::tall_triangle:
            return "tall_triangle";
    }
    return "?";
}

ShapeKind parse_shape(std::string_view name) {
    for (int s = 0; s < kShapeCount; ++s) {
        if (to_string(static_cast<ShapeKind>(s)) == name) {
            return static_cast<ShapeKind>(s);
        }
    }
    throw DomainError("invalid shape '" + std::string(name) + "'");
}

std::string_view to_string(EventKind kind) {
    switch (kind) {
        case EventKind::first_ground_contact:
            return "first_ground_contact";
        case EventKind::object_object_contact:
            return "object_object_contact";
        case EventKind::containment_entry:
            return "containment_entry";
        case EventKind::settle:
            return "settle";
    }
    return "?";
}

EventKind parse_event_kind(std::string_view name) {
    for (int k = 0; k < 4; ++k) {
        if (to_string(static_cast<EventKind>(k)) == name) {
            return static_cast<EventKind>(k);
        }
    }
    throw DomainError("invalid event kind '" + std::string(name) + "'");
}

bool is_interaction(EventKind kind) { return kind != EventKind::settle; }

std::array<double, 3> color_rgb(int color) {
    static constexpr std::array<std::array<double, 3>, kColorCount> kPalette{{
        {1.0, 0.15, 0.15},
        {0.2, 0.85, 0.2},
        {0.2, 0.35, 1.0},
        {0.95, 0.9, 0.2},
        {0.2, 0.9, 0.9},
        {0.9, 0.3, 0.9},
        {0.6, 0.6, 0.6},
    }};
    if (color < 0 || color >= kColorCount) {
        throw DomainError("invalid color id " + std::to_string(color));
    }
    return kPalette[static_cast<std::size_t>(color)];
}

void WorldConfig::validate() const {
    if (!(dt > 0.0)) {
        throw ConfigError("dt must be positive");
    }
    if (raw_frames < kQuietPrefix) {
        throw ConfigError("raw frame count must be at least 6");
    }
    if (width <= 0 || height <= 0 || arena_width <= 0.0 || arena_height <= 0.0) {
        throw ConfigError("resolution and arena extents must be positive");
    }
    if (restitution < 0.0 || restitution > 1.0) {
        throw ConfigError("restitution must lie in [0, 1]");
    }
    if (friction < 0.0 || rolling_factor < 0.0) {
        throw ConfigError("friction must be non-negative");
    }
}

// ---- physics -------------------------------------------------------------

WorldState make_state(const std::vector<ObjectSpec>& objects) {
    WorldState s;
    s.objects = objects;
    for (const ObjectSpec& o : objects) {
        if (!(o.half_extent > 0.0)) {
            throw ConfigError("object half-extent must be positive");
        }
        s.bodies.push_back(BodyState{o.position, o.is_static ? Vec2{} : o.velocity});
    }
    return s;
}

double mechanical_energy(const WorldState& state, const WorldConfig& config) {
    double e = kinetic_energy(state);
    for (std::size_t i = 0; i < state.objects.size(); ++i) {
        if (!state.objects[i].is_static) {
            e += mass(state.objects[i]) * config.gravity * state.bodies[i].position.y;
        }
    }
    return e;
}

void step_physics(WorldState& state, const WorldConfig& config) {
    const double e_before = mechanical_energy(state, config);
    const std::size_t n = state.objects.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (state.objects[i].is_static) {
            continue;
        }
        BodyState& b = state.bodies[i];
        b.velocity.y -= config.gravity * config.dt;
        const Vec2 step = config.dt * b.velocity;
        const double limit = smallest_half(state.objects[i]);
        if (std::max(std::abs(step.x), std::abs(step.y)) > limit + 1e-12) {
            std::ostringstream os;
            os << "tunneling: object " << i << " moves " << norm(step) << " per step, more than its half-extent "
               << limit << "; use a smaller dt";
            throw ConfigError(os.str());
        }
        b.position = b.position + step;
    }

    Solver solver(state, config);
    std::vector<Contact> contacts = solver.find_contacts();
    solver.solve_velocities(contacts);
    std::vector<Vec2> unprojected(n);
    for (std::size_t i = 0; i < n; ++i) {
        unprojected[i] = state.bodies[i].position;
    }
    solver.project_positions(contacts);

    // Positional projection can lift bodies; bleed any energy gain from the
    // kinetic part so the step never adds energy.
    const double excess = mechanical_energy(state, config) - e_before;
    if (excess > 0.0) {
        const double ke = kinetic_energy(state);
        const double factor = ke > excess ? std::sqrt((ke - excess) / ke) : 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            state.bodies[i].velocity = factor * state.bodies[i].velocity;
        }
        if (factor == 0.0) {
            // Still above budget at rest: undo just enough of the lift.
            double lift = 0.0;
            double base = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (!state.objects[i].is_static) {
                    const double w = mass(state.objects[i]) * config.gravity;
                    lift += w * (state.bodies[i].position.y - unprojected[i].y);
                    base += w * unprojected[i].y;
                }
            }
            if (lift > 0.0 && base + lift > e_before) {
                const double keep = std::clamp((e_before - base) / lift, 0.0, 1.0);
                for (std::size_t i = 0; i < n; ++i) {
                    Vec2& p = state.bodies[i].position;
                    p = unprojected[i] + keep * (p - unprojected[i]);
                }
            }
        }
    }
}

double surface_distance(const ObjectSpec& a, const Vec2& pa, const ObjectSpec& b, const Vec2& pb) {
    double best = std::numeric_limits<double>::infinity();
    for (const Collider& ca : colliders(a)) {
        for (const Collider& cb : colliders(b)) {
            best = std::min(best, collide(ca, pa, cb, pb).distance);
        }
    }
    return best;
}

double ground_distance(const ObjectSpec& a, const Vec2& pa) {
    if (a.shape == ShapeKind::container) {
        return pa.y;
    }
    return pa.y - bottom_extent(a);
}

Trajectory simulate(const std::vector<ObjectSpec>& objects, const TaskRoles& roles, const WorldConfig& config) {
    config.validate();
    WorldState state = make_state(objects);
    Trajectory traj;
    traj.objects = objects;
    traj.roles = roles;
    traj.arena_width = config.arena_width;
    traj.frames.reserve(static_cast<std::size_t>(config.raw_frames));
    traj.frames.push_back(state.bodies);
    for (int k = 1; k < config.raw_frames; ++k) {
        step_physics(state, config);
        traj.frames.push_back(state.bodies);
    }
    return traj;
}

// ---- events and labels ---------------------------------------------------

std::vector<EventAnnotation> detect_events(const Trajectory& trajectory) {
    std::vector<EventAnnotation> events;
    const auto& objs = trajectory.objects;
    const int n = static_cast<int>(objs.size());
    const int frames = static_cast<int>(trajectory.frames.size());
    auto pos = [&](int k, int i) {
        return trajectory.frames[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)].position;
    };
    auto obj = [&](int i) -> const ObjectSpec& { return objs[static_cast<std::size_t>(i)]; };

    for (int i = 0; i < n; ++i) {
        if (obj(i).is_static) {
            continue;
        }
        bool prev = ground_distance(obj(i), pos(0, i)) <= kContactTolerance;
        for (int k = 1; k < frames && !prev; ++k) {
            if (ground_distance(obj(i), pos(k, i)) <= kContactTolerance) {
                events.push_back({EventKind::first_ground_contact, k, {i}});
                break;
            }
        }
    }

    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (obj(i).is_static && obj(j).is_static) {
                continue;
            }
            for (int k = 0; k < frames; ++k) {
                if (surface_distance(obj(i), pos(k, i), obj(j), pos(k, j)) <= kContactTolerance) {
                    events.push_back({EventKind::object_object_contact, k, {i, j}});
                    break;
                }
            }
        }
    }

    const int c = trajectory.roles.container;
    if (c >= 0) {
        for (int i = 0; i < n; ++i) {
            if (i == c || obj(i).is_static) {
                continue;
            }
            for (int k = 0; k < frames; ++k) {
                if (inside_container(obj(c), pos(k, c), pos(k, i))) {
                    events.push_back({EventKind::containment_entry, k, {i, c}});
                    break;
                }
            }
        }
    }

    for (int i = 0; i < n; ++i) {
        if (obj(i).is_static) {
            continue;
        }
        int settle = -1;
        for (int k = frames - 1; k >= 0; --k) {
            const Vec2 v = trajectory.frames[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)].velocity;
            if (norm(v) >= kRestSpeed) {
                break;
            }
            settle = k;
        }
        if (settle >= 0) {
            events.push_back({EventKind::settle, settle, {i}});
        }
    }

    std::stable_sort(events.begin(), events.end(),
                     [](const EventAnnotation& a, const EventAnnotation& b) { return a.frame < b.frame; });
    return events;
}

int label_outcome(const Trajectory& trajectory, Task task, int object) {
    const int n = static_cast<int>(trajectory.objects.size());
    if (object < 0 || object >= n) {
        throw DomainError("label_outcome: unknown object id " + std::to_string(object));
    }
    if (trajectory.frames.empty()) {
        throw DomainError("label_outcome: empty trajectory");
    }
    const auto oi = static_cast<std::size_t>(object);
    const ObjectSpec& o = trajectory.objects[oi];
    const int frames = static_cast<int>(trajectory.frames.size());
    auto pos = [&](int k, std::size_t i) { return trajectory.frames[static_cast<std::size_t>(k)][i].position; };

    switch (task) {
        case Task::stability: {
            for (int k = 0; k < frames; ++k) {
                const Vec2 p = pos(k, oi);
                if (p.x < 0.0 || p.x > trajectory.arena_width) {
                    return 0;
                }
            }
            const int start = std::max(0, frames - kSettleWindow);
            const Vec2 anchor = pos(start, oi);
            for (int k = start; k < frames; ++k) {
                if (norm(pos(k, oi) - anchor) >= kSettleDisplacement) {
                    return 0;
                }
            }
            return 1;
        }
        case Task::contact: {
            const int ball = trajectory.roles.ball;
            if (ball < 0 || ball == object) {
                throw DomainError("label_outcome: contact label needs a ball distinct from object " +
                                  std::to_string(object));
            }
            const auto bi = static_cast<std::size_t>(ball);
            for (int k = 0; k < frames; ++k) {
                if (surface_distance(trajectory.objects[bi], pos(k, bi), o, pos(k, oi)) <= kContactTolerance) {
                    return 1;
                }
            }
            return 0;
        }
        case Task::containment: {
            const int c = trajectory.roles.container;
            if (c < 0 || c == object) {
                throw DomainError("label_outcome: containment label needs a container distinct from object " +
                                  std::to_string(object));
            }
            const auto ci = static_cast<std::size_t>(c);
            return inside_container(trajectory.objects[ci], pos(frames - 1, ci), pos(frames - 1, oi)) ? 1 : 0;
        }
    }
    return 0;
}

int Episode::label_of(int object) const {
    for (std::size_t k = 0; k < queryable.size(); ++k) {
        if (queryable[k] == object) {
            return labels[k];
        }
    }
    throw DomainError("object " + std::to_string(object) + " has no label");
}

// ---- generation ----------------------------------------------------------

namespace {

ShapeKind pick_shape(Rng& rng, bool unseen) {
    static constexpr ShapeKind kSeen[] = {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
    static constexpr ShapeKind kUnseen[] = {ShapeKind::wide_square, ShapeKind::tall_triangle};
    return unseen ? kUnseen[rng.below(2)] : kSeen[rng.below(3)];
}

int pick_color(Rng& rng) { return 1 + static_cast<int>(rng.below(5)); }

ObjectSpec make_object(ShapeKind shape, int color, double half, Vec2 pos) {
    ObjectSpec o;
    o.shape = shape;
    o.color = color;
    o.half_extent = half;
    o.position = pos;
    return o;
}

double top_extent(const ObjectSpec& o) {
    return o.shape == ShapeKind::circle ? o.half_extent : box_half(o).y;
}

double half_width(const ObjectSpec& o) {
    return o.shape == ShapeKind::circle ? o.half_extent : box_half(o).x;
}

struct Scene {
    std::vector<ObjectSpec> objects;
    TaskRoles roles;
    std::vector<int> queryable;
};

Scene stability_scene(Rng& rng, bool unseen) {
    Scene s;
    const int count = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < count; ++i) {
        const ShapeKind shape = pick_shape(rng, unseen);
        ObjectSpec o = make_object(shape, pick_color(rng), rng.uniform(0.25, 0.45), {});
        if (i == 0) {
            o.position = {rng.uniform(1.2, 2.8), bottom_extent(o)};
        } else {
            const ObjectSpec& below = s.objects.back();
            const double reach = 0.9 * (half_width(below) + half_width(o));
            o.position.x = below.position.x + rng.uniform(-1.0, 1.0) * reach;
            o.position.y = below.position.y + top_extent(below) + bottom_extent(o) + rng.uniform(0.15, 0.6);
        }
        s.objects.push_back(o);
        s.queryable.push_back(i);
    }
    return s;
}

Scene contact_scene(Rng& rng, bool unseen) {
    Scene s;
    ObjectSpec ball = make_object(ShapeKind::circle, kRed, rng.uniform(0.22, 0.3), {});
    ball.position.x = rng.uniform(0.35, 0.7);
    if (rng.bernoulli(0.5)) {
        ball.position.y = ball.half_extent;
        ball.velocity = {rng.uniform(0.4, 2.6), 0.0};
    } else {
        ball.position.y = rng.uniform(0.9, 1.8);
        ball.velocity = {rng.uniform(0.4, 2.6), rng.uniform(-0.5, 2.0)};
    }
    s.objects.push_back(ball);
    s.roles.ball = 0;
    const int targets = 1 + static_cast<int>(rng.below(2));
    for (int i = 0; i < targets; ++i) {
        ObjectSpec o = make_object(pick_shape(rng, unseen), pick_color(rng), rng.uniform(0.22, 0.4), {});
        o.position = {rng.uniform(1.5, 3.7), bottom_extent(o)};
        s.objects.push_back(o);
        s.queryable.push_back(i + 1);
    }
    return s;
}

Scene containment_scene(Rng& rng, bool unseen) {
    Scene s;
    ObjectSpec cup = make_object(ShapeKind::container, kGray, rng.uniform(0.55, 0.8), {});
    cup.position = {rng.uniform(1.3, 2.7), 0.0};
    cup.is_static = true;
    s.objects.push_back(cup);
    s.roles.container = 0;
    const int drops = 1 + static_cast<int>(rng.below(2));
    for (int i = 0; i < drops; ++i) {
        ObjectSpec o = make_object(pick_shape(rng, unseen), pick_color(rng), rng.uniform(0.18, 0.4), {});
        o.position = {cup.position.x + rng.uniform(-0.6, 0.6), rng.uniform(1.6, 3.4)};
        o.velocity = {rng.uniform(-0.6, 0.6), 0.0};
        s.objects.push_back(o);
        s.queryable.push_back(i + 1);
    }
    return s;
}

bool spawn_is_clear(const Scene& s) {
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
            if (surface_distance(s.objects[i], s.objects[i].position, s.objects[j], s.objects[j].position) < 0.1) {
                return false;
            }
        }
    }
    return true;
}

bool quiet_prefix(const std::vector<EventAnnotation>& events) {
    return std::none_of(events.begin(), events.end(), [](const EventAnnotation& e) {
        return is_interaction(e.kind) && e.frame < kQuietPrefix;
    });
}

}  // namespace

Episode generate_episode(Task task, std::uint64_t seed, const WorldConfig& config, bool unseen) {
    config.validate();
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task) + 1));
    for (int attempt = 0; attempt < 100; ++attempt) {
        Scene scene;
        switch (task) {
            case Task::stability:
                scene = stability_scene(rng, unseen);
                break;
            case Task::contact:
                scene = contact_scene(rng, unseen);
                break;
            case Task::containment:
                scene = containment_scene(rng, unseen);
                break;
        }
        if (!spawn_is_clear(scene)) {
            continue;
        }
        Trajectory traj;
        try {
            traj = simulate(scene.objects, scene.roles, config);
        } catch (const ConfigError&) {
            continue;
        }
        std::vector<EventAnnotation> events = detect_events(traj);
        if (!quiet_prefix(events)) {
            continue;
        }
        Episode ep;
        ep.task = task;
        ep.seed = seed;
        ep.unseen = unseen;
        ep.objects = scene.objects;
        ep.roles = scene.roles;
        ep.queryable = scene.queryable;
        for (int q : ep.queryable) {
            ep.labels.push_back(label_outcome(traj, task, q));
        }
        ep.events = std::move(events);
        ep.trajectory = std::move(traj);
        render_episode(ep, config);
        return ep;
    }
    throw GenerationError("generate_episode: no valid " + std::string(to_string(task)) +
                          " scene within 100 samples for seed " + std::to_string(seed));
}

// ---- rendering -----------------------------------------------------------

void render_episode(Episode& ep, const WorldConfig& config) {
    const int h = config.height;
    const int w = config.width;
    const int frames = static_cast<int>(ep.trajectory.frames.size());
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    ep.raw_frames = frames;
    ep.height = h;
    ep.width = w;
    ep.frames.assign(static_cast<std::size_t>(frames) * 3 * plane, 0.0f);
    ep.masks.assign(ep.objects.size(), std::vector<float>(static_cast<std::size_t>(frames) * plane, 0.0f));

    // Statics first, then dynamics in id order; later draws own the pixel.
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < ep.objects.size(); ++i) {
        if (ep.objects[i].is_static) {
            order.push_back(i);
        }
    }
    for (std::size_t i = 0; i < ep.objects.size(); ++i) {
        if (!ep.objects[i].is_static) {
            order.push_back(i);
        }
    }

    std::vector<int> owner(plane);
    for (int k = 0; k < frames; ++k) {
        std::fill(owner.begin(), owner.end(), -1);
        const auto& state = ep.trajectory.frames[static_cast<std::size_t>(k)];
        for (int py = 0; py < h; ++py) {
            const double y = config.arena_height * (static_cast<double>(h - py) - 0.5) / h;
            for (int px = 0; px < w; ++px) {
                const double x = config.arena_width * (static_cast<double>(px) + 0.5) / w;
                for (std::size_t i : order) {
                    if (covers(ep.objects[i], state[i].position, {x, y})) {
                        owner[static_cast<std::size_t>(py * w + px)] = static_cast<int>(i);
                    }
                }
            }
        }
        const std::size_t base = static_cast<std::size_t>(k) * 3 * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            if (owner[p] < 0) {
                continue;
            }
            const auto rgb = color_rgb(ep.objects[static_cast<std::size_t>(owner[p])].color);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                ep.frames[base + ch * plane + p] = static_cast<float>(rgb[ch]);
            }
            ep.masks[static_cast<std::size_t>(owner[p])][static_cast<std::size_t>(k) * plane + p] = 1.0f;
        }
    }
}

void write_ppm(const Episode& ep, int raw_frame, const std::filesystem::path& path) {
    if (raw_frame < 0 || raw_frame >= ep.raw_frames) {
        throw DomainError("write_ppm: frame " + std::to_string(raw_frame) + " out of range");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string());
    }
    out << "P6\n" << ep.width << ' ' << ep.height << "\n255\n";
    const std::size_t plane = static_cast<std::size_t>(ep.height) * static_cast<std::size_t>(ep.width);
    const std::size_t base = static_cast<std::size_t>(raw_frame) * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const float v = std::clamp(ep.frames[base + ch * plane + p], 0.0f, 1.0f);
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
        }
    }
}

void write_trajectory_csv(const Trajectory& trajectory, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open " + path.string());
    }
    out << "step,object_id,x,y,vx,vy\n";
    out.precision(17);
    for (std::size_t k = 0; k < trajectory.frames.size(); ++k) {
        for (std::size_t i = 0; i < trajectory.frames[k].size(); ++i) {
            const BodyState& b = trajectory.frames[k][i];
            out << k << ',' << i << ',' << b.position.x << ',' << b.position.y << ',' << b.velocity.x << ','
                << b.velocity.y << '\n';
        }
    }
}

}  // namespace pipsim::world
