#include "pipsim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pipsim/blob.hpp"
#include "pipsim/errors.hpp"
#include "pipsim/rng.hpp"

namespace pipsim::data {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<int> kept_raw_indices(int raw_frames) {
    if (raw_frames < kMinRawFrames || raw_frames % 2 != 0) {
        throw FormatError("raw frame count " + std::to_string(raw_frames) + " must be even and at least " +
                          std::to_string(kMinRawFrames));
    }
    std::vector<int> kept;
    for (int f = 0; f < raw_frames; f += kFrameStride) {
        kept.push_back(f);
    }
    return kept;
}

std::vector<float> subsample_frames(const std::vector<float>& frames, int raw_frames, std::size_t frame_size) {
    if (frames.size() != static_cast<std::size_t>(raw_frames) * frame_size) {
        throw ShapeError("subsample_frames: expected " + std::to_string(raw_frames) + " frames of " +
                         std::to_string(frame_size) + " values");
    }
    std::vector<float> out;
    const std::vector<int> kept = kept_raw_indices(raw_frames);
    out.reserve(kept.size() * frame_size);
    for (int f : kept) {
        const auto begin = frames.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(f) * frame_size);
        out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(frame_size));
    }
    return out;
}

std::optional<int> generated_index(int raw_frame, int input_frames, int horizon) {
    if (raw_frame < 0) {
        return std::nullopt;
    }
    const int g = raw_frame / kFrameStride - input_frames;
    if (g < 0 || g >= horizon) {
        return std::nullopt;
    }
    return g;
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train:
            return "train";
        case Split::val:
            return "val";
        case Split::test:
            return "test";
        case Split::excluded:
            return "excluded";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    for (Split s : {Split::train, Split::val, Split::test, Split::excluded}) {
        if (to_string(s) == name) {
            return s;
        }
    }
    throw DomainError("invalid split '" + std::string(name) + "' (expected train, val or test)");
}

std::size_t Manifest::count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(scenes.begin(), scenes.end(), [&](const SceneRecord& s) { return s.split == split; }));
}

// ---- manifest JSON -------------------------------------------------------

namespace {

json to_json(const SceneRecord& s) {
    json events = json::array();
    for (const auto& e : s.events) {
        events.push_back({{"kind", world::to_string(e.kind)}, {"frame", e.frame}, {"objects", e.objects}});
    }
    json queries = json::array();
    for (const auto& q : s.queries) {
        queries.push_back({{"task", q.task}, {"color", q.color}, {"shape", q.shape}});
    }
    return {
        {"id", s.id},
        {"task", world::to_string(s.task)},
        {"seed", s.seed},
        {"unseen", s.unseen},
        {"object_count", s.object_count},
        {"objects", s.objects},
        {"labels", s.labels},
        {"queries", queries},
        {"events", events},
        {"frames", {{"path", s.frames_path}, {"checksum", s.frames_checksum}}},
        {"masks", {{"path", s.masks_path}, {"checksum", s.masks_checksum}}},
        {"split", to_string(s.split)},
    };
}

SceneRecord scene_from_json(const json& j) {
    SceneRecord s;
    s.id = j.at("id").get<std::string>();
    s.task = world::parse_task(j.at("task").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.unseen = j.at("unseen").get<bool>();
    s.object_count = j.at("object_count").get<int>();
    s.objects = j.at("objects").get<std::vector<int>>();
    s.labels = j.at("labels").get<std::vector<int>>();
    for (const auto& q : j.at("queries")) {
        s.queries.push_back({q.at("task").get<int>(), q.at("color").get<int>(), q.at("shape").get<int>()});
    }
    for (const auto& e : j.at("events")) {
        s.events.push_back({world::parse_event_kind(e.at("kind").get<std::string>()), e.at("frame").get<int>(),
                            e.at("objects").get<std::vector<int>>()});
    }
    s.frames_path = j.at("frames").at("path").get<std::string>();
    s.frames_checksum = j.at("frames").at("checksum").get<std::string>();
    s.masks_path = j.at("masks").at("path").get<std::string>();
    s.masks_checksum = j.at("masks").at("checksum").get<std::string>();
    s.split = parse_split(j.at("split").get<std::string>());
    if (s.objects.size() != s.labels.size() || s.objects.size() != s.queries.size()) {
        throw FormatError("scene " + s.id + ": objects, labels and queries differ in length");
    }
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
}

}  // namespace

void write_manifest(const Manifest& m, const fs::path& dir) {
    json scenes = json::array();
    for (const auto& s : m.scenes) {
        scenes.push_back(to_json(s));
    }
    const json j = {
        {"format_version", m.version}, {"task", m.task},
        {"unseen", m.unseen},          {"seed", m.seed},
        {"raw_frames", m.raw_frames},  {"kept_frames", m.kept_frames},
        {"height", m.height},          {"width", m.width},
        {"input_frames", m.input_frames}, {"horizon", m.horizon},
        {"scenes", scenes},
    };
    write_text(dir / "manifest.json", j.dump(1) + "\n");
}

Manifest read_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    try {
        const json j = json::parse(in);
        Manifest m;
        m.version = j.at("format_version").get<int>();
        if (m.version != kManifestVersion) {
            throw FormatError(path.string() + ": unsupported manifest version " + std::to_string(m.version));
        }
        m.task = j.at("task").get<std::string>();
        m.unseen = j.at("unseen").get<bool>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.raw_frames = j.at("raw_frames").get<int>();
        m.kept_frames = j.at("kept_frames").get<int>();
        m.height = j.at("height").get<int>();
        m.width = j.at("width").get<int>();
        m.input_frames = j.at("input_frames").get<int>();
        m.horizon = j.at("horizon").get<int>();
        for (const auto& s : j.at("scenes")) {
            m.scenes.push_back(scene_from_json(s));
        }
        return m;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed manifest (" + e.what() + ")");
    } catch (const DomainError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- splits --------------------------------------------------------------

std::vector<std::string> split_dataset(Manifest& manifest, std::uint64_t seed) {
    if (manifest.scenes.size() < 5) {
        throw DomainError("split_dataset: need at least 5 scenes, have " + std::to_string(manifest.scenes.size()));
    }
    std::vector<std::string> warnings;
    std::map<int, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < manifest.scenes.size(); ++i) {
        manifest.scenes[i].split = Split::train;
        by_task[static_cast<int>(manifest.scenes[i].task)].push_back(i);
    }
    for (auto& [task, idx] : by_task) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(task) + 101));
        rng.shuffle(std::span(idx));
    }

    if (manifest.task == "combined") {
        if (by_task.size() != world::kTaskCount) {
            throw FormatError("combined dataset must contain all three tasks");
        }
        std::size_t m = manifest.scenes.size();
        for (const auto& [task, idx] : by_task) {
            m = std::min(m, idx.size());
        }
        const std::size_t surplus = manifest.scenes.size() - world::kTaskCount * m;
        if (surplus > 2) {
            throw FormatError("combined dataset task counts differ by " + std::to_string(surplus) +
                              " scenes; at most 2 can be dropped");
        }
        for (auto& [task, idx] : by_task) {
            while (idx.size() > m) {
                SceneRecord& s = manifest.scenes[idx.back()];
                s.split = Split::excluded;
                warnings.push_back("dropped scene " + s.id + " (" + std::string(world::to_string(s.task)) +
                                   ") to keep equal task counts");
                idx.pop_back();
            }
        }
    }

    for (auto& [task, idx] : by_task) {
        const auto n = static_cast<double>(idx.size());
        const auto n_test = static_cast<std::size_t>(std::llround(0.2 * n));
        const auto n_val = static_cast<std::size_t>(std::llround(0.2 * n));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            Split s = Split::train;
            if (k < n_test) {
                s = Split::test;
            } else if (k < n_test + n_val) {
                s = Split::val;
            }
            manifest.scenes[idx[k]].split = s;
        }
    }
    return warnings;
}

// ---- writing -------------------------------------------------------------

Manifest write_dataset(const std::vector<world::Episode>& episodes, const fs::path& dir, const std::string& task_name,
                       std::uint64_t split_seed, std::vector<std::string>* warnings) {
    if (episodes.empty()) {
        throw DomainError("write_dataset: no episodes");
    }
    std::error_code ec;
    fs::create_directories(dir / "frames", ec);
    fs::create_directories(dir / "masks", ec);
    if (ec) {
        throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    }

    const world::Episode& first = episodes.front();
    Manifest m;
    m.task = task_name;
    m.unseen = first.unseen;
    m.seed = split_seed;
    m.raw_frames = first.raw_frames;
    m.kept_frames = static_cast<int>(kept_raw_indices(first.raw_frames).size());
    m.height = first.height;
    m.width = first.width;
    if (m.kept_frames < m.input_frames + m.horizon) {
        throw FormatError("episodes keep " + std::to_string(m.kept_frames) + " frames, fewer than inputs plus horizon");
    }

    const std::size_t plane = static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width);
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const world::Episode& ep = episodes[e];
        if (ep.raw_frames != m.raw_frames || ep.height != m.height || ep.width != m.width) {
            throw ShapeError("write_dataset: episode " + std::to_string(e) + " has a different frame geometry");
        }
        char id[32];
        std::snprintf(id, sizeof id, "scene_%05zu", e);
        SceneRecord s;
        s.id = id;
        s.task = ep.task;
        s.seed = ep.seed;
        s.unseen = ep.unseen;
        s.object_count = static_cast<int>(ep.objects.size());
        s.objects = ep.queryable;
        s.labels = ep.labels;
        for (int obj : ep.queryable) {
            const auto& o = ep.objects[static_cast<std::size_t>(obj)];
            s.queries.push_back({static_cast<int>(ep.task), o.color, static_cast<int>(o.shape)});
        }
        s.events = ep.events;

        const std::vector<float> frames = subsample_frames(ep.frames, ep.raw_frames, 3 * plane);
        std::vector<float> masks;
        masks.reserve(ep.objects.size() * static_cast<std::size_t>(m.kept_frames) * plane);
        for (const auto& mask : ep.masks) {
            const std::vector<float> kept = subsample_frames(mask, ep.raw_frames, plane);
            masks.insert(masks.end(), kept.begin(), kept.end());
        }
        s.frames_path = "frames/" + s.id + ".blob";
        s.masks_path = "masks/" + s.id + ".blob";
        s.frames_checksum = io::write_blob(dir / s.frames_path, {m.kept_frames, 3, m.height, m.width}, frames);
        s.masks_checksum =
            io::write_blob(dir / s.masks_path, {s.object_count, m.kept_frames, m.height, m.width}, masks);
        m.scenes.push_back(std::move(s));
    }

    std::vector<std::string> notes = split_dataset(m, split_seed);
    if (warnings != nullptr) {
        warnings->insert(warnings->end(), notes.begin(), notes.end());
    }
    write_manifest(m, dir);
    write_text(dir / "distribution.json", distribution_report(m));
    return m;
}

// ---- reading -------------------------------------------------------------

SceneData load_scene(const Manifest& m, const fs::path& dir, std::size_t scene) {
    if (scene >= m.scenes.size()) {
        throw DomainError("scene index " + std::to_string(scene) + " out of range");
    }
    const SceneRecord& s = m.scenes[scene];
    io::Blob frames = io::read_blob(dir / s.frames_path, s.frames_checksum);
    io::Blob masks = io::read_blob(dir / s.masks_path, s.masks_checksum);
    const std::vector<std::int64_t> want_frames{m.kept_frames, 3, m.height, m.width};
    const std::vector<std::int64_t> want_masks{s.object_count, m.kept_frames, m.height, m.width};
    if (frames.shape != want_frames || masks.shape != want_masks) {
        throw CorruptionError("scene " + s.id + ": blob shapes disagree with the manifest");
    }
    SceneData d;
    d.kept = m.kept_frames;
    d.height = m.height;
    d.width = m.width;
    d.objects = s.object_count;
    d.frames = std::move(frames.data);
    d.masks = std::move(masks.data);
    return d;
}

Sample make_sample(const Manifest& m, std::size_t scene, const SceneData& data, int object) {
    const SceneRecord& s = m.scenes.at(scene);
    const auto it = std::find(s.objects.begin(), s.objects.end(), object);
    if (it == s.objects.end()) {
        throw DomainError("scene " + s.id + " has no queryable object " + std::to_string(object));
    }
    const auto q = static_cast<std::size_t>(it - s.objects.begin());
    const std::size_t hw = static_cast<std::size_t>(data.height) * static_cast<std::size_t>(data.width);
    const std::size_t frame = 3 * hw;
    const auto mm = static_cast<std::size_t>(m.input_frames);
    const auto nn = static_cast<std::size_t>(m.horizon);
    const auto h = static_cast<std::size_t>(data.height);
    const auto w = static_cast<std::size_t>(data.width);

    Sample out;
    out.scene = scene;
    out.object = object;
    out.query = s.queries[q];
    out.label = s.labels[q];
    out.input_frames = ad::Tensor({mm, 3, h, w});
    out.input_masks = ad::Tensor({mm, 1, h, w});
    out.target_frames = ad::Tensor({nn, 3, h, w});
    std::copy(data.frames.begin(), data.frames.begin() + static_cast<std::ptrdiff_t>(mm * frame),
              out.input_frames.data.begin());
    std::copy(data.frames.begin() + static_cast<std::ptrdiff_t>(mm * frame),
              data.frames.begin() + static_cast<std::ptrdiff_t>((mm + nn) * frame), out.target_frames.data.begin());
    const std::size_t mask_base = static_cast<std::size_t>(object) * static_cast<std::size_t>(data.kept) * hw;
    std::copy(data.masks.begin() + static_cast<std::ptrdiff_t>(mask_base),
              data.masks.begin() + static_cast<std::ptrdiff_t>(mask_base + mm * hw), out.input_masks.data.begin());
    return out;
}

Sample load_sample(const Manifest& m, const fs::path& dir, std::size_t scene, int object) {
    return make_sample(m, scene, load_scene(m, dir, scene), object);
}

std::vector<SampleRef> sample_refs(const Manifest& m, Split split) {
    std::vector<SampleRef> refs;
    for (std::size_t i = 0; i < m.scenes.size(); ++i) {
        if (m.scenes[i].split != split) {
            continue;
        }
        for (int obj : m.scenes[i].objects) {
            refs.push_back({i, obj});
        }
    }
    return refs;
}

std::vector<int> event_generated_indices(const Manifest& m, const SceneRecord& s, int object) {
    std::set<int> out;
    for (const auto& e : s.events) {
        if (!world::is_interaction(e.kind)) {
            continue;
        }
        if (object >= 0 && std::find(e.objects.begin(), e.objects.end(), object) == e.objects.end()) {
            continue;
        }
        if (const auto g = generated_index(e.frame, m.input_frames, m.horizon)) {
            out.insert(*g);
        }
    }
    return {out.begin(), out.end()};
}

// ---- generation ----------------------------------------------------------

namespace {

std::vector<world::Episode> generate_task(world::Task task, int n, std::uint64_t seed,
                                          const GenerateOptions& opt) {
    std::vector<world::Episode> episodes;
    const bool balance = opt.balance && task != world::Task::stability;
    const std::uint64_t base = derive_seed(seed, static_cast<std::uint64_t>(task) + 11);
    long pos = 0;
    long neg = 0;
    const long max_attempts = 10L * n;
    long attempt = 0;
    while (static_cast<int>(episodes.size()) < n) {
        if (attempt >= max_attempts) {
            std::ostringstream os;
            os << "could not balance " << world::to_string(task) << " labels within " << max_attempts
               << " attempts: accepted " << episodes.size() << " scenes, positive ratio "
               << (pos + neg > 0 ? static_cast<double>(pos) / static_cast<double>(pos + neg) : 0.0);
            throw GenerationError(os.str());
        }
        const std::uint64_t episode_seed = derive_seed(base, static_cast<std::uint64_t>(attempt++));
        world::Episode ep = world::generate_episode(task, episode_seed, opt.world, opt.unseen);
        long p = 0;
        for (int l : ep.labels) {
            p += l;
        }
        const long q = static_cast<long>(ep.labels.size()) - p;
        if (balance) {
            const long before = std::abs(pos - neg);
            const long after = std::abs(pos + p - neg - q);
            if (after > std::max(before, 1L)) {
                continue;
            }
        }
        pos += p;
        neg += q;
        episodes.push_back(std::move(ep));
    }
    if (balance) {
        const double ratio = static_cast<double>(pos) / static_cast<double>(pos + neg);
        // Small sets cannot always hit the band exactly; one sample of slack.
        if (std::abs(ratio - 0.5) > 0.05 && std::abs(pos - neg) > 1) {
            throw GenerationError("balanced " + std::string(world::to_string(task)) + " set ended at positive ratio " +
                                  std::to_string(ratio));
        }
    }
    return episodes;
}

}  // namespace

Manifest generate_dataset(const GenerateOptions& opt, const fs::path& dir, std::vector<std::string>* warnings) {
    if (opt.n_scenes < 1) {
        throw DomainError("scene count must be at least 1");
    }
    std::vector<world::Episode> episodes;
    if (opt.task == "combined") {
        const int per = opt.n_scenes / world::kTaskCount;
        const int extra = opt.n_scenes % world::kTaskCount;
        for (int t = 0; t < world::kTaskCount; ++t) {
            auto part = generate_task(static_cast<world::Task>(t), per + (t < extra ? 1 : 0), opt.seed, opt);
            std::move(part.begin(), part.end(), std::back_inserter(episodes));
        }
    } else {
        episodes = generate_task(world::parse_task(opt.task), opt.n_scenes, opt.seed, opt);
    }
    return write_dataset(episodes, dir, opt.task, opt.seed, warnings);
}

std::string distribution_report(const Manifest& m) {
    json report = {{"task", m.task}, {"unseen", m.unseen}, {"scenes", m.scenes.size()}};
    json splits = json::object();
    for (Split sp : {Split::train, Split::val, Split::test, Split::excluded}) {
        json entry = {{"scenes", 0}, {"samples", 0}, {"positive", 0}};
        std::map<std::string, std::array<int, 2>> by_task;
        std::map<std::string, std::array<int, 2>> by_shape;
        std::map<std::string, std::array<int, 2>> by_color;
        for (const auto& s : m.scenes) {
            if (s.split != sp) {
                continue;
            }
            entry["scenes"] = entry["scenes"].get<int>() + 1;
            for (std::size_t q = 0; q < s.objects.size(); ++q) {
                const int y = s.labels[q];
                entry["samples"] = entry["samples"].get<int>() + 1;
                entry["positive"] = entry["positive"].get<int>() + y;
                by_task[std::string(world::to_string(s.task))][static_cast<std::size_t>(y)]++;
                by_shape[std::string(world::to_string(static_cast<world::ShapeKind>(s.queries[q].shape)))]
                        [static_cast<std::size_t>(y)]++;
                by_color[std::to_string(s.queries[q].color)][static_cast<std::size_t>(y)]++;
            }
        }
        auto counts = [](const std::map<std::string, std::array<int, 2>>& src) {
            json out = json::object();
            for (const auto& [k, v] : src) {
                out[k] = {{"negative", v[0]}, {"positive", v[1]}};
            }
            return out;
        };
        entry["by_task"] = counts(by_task);
        entry["by_shape"] = counts(by_shape);
        entry["by_color"] = counts(by_color);
        splits[std::string(to_string(sp))] = entry;
    }
    report["splits"] = splits;
    return report.dump(2) + "\n";
}

}  // namespace pipsim::data
