#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iterator>

#include "pipsim/blob.hpp"
#include "pipsim/dataset.hpp"
#include "pipsim/errors.hpp"

using namespace pipsim;
using namespace pipsim::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("pipsim_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Manifest synthetic_manifest(const std::vector<int>& per_task, const std::string& task) {
    Manifest m;
    m.task = task;
    int id = 0;
    for (int t = 0; t < static_cast<int>(per_task.size()); ++t) {
        for (int k = 0; k < per_task[static_cast<std::size_t>(t)]; ++k) {
            SceneRecord s;
            s.id = "s" + std::to_string(id++);
            s.task = static_cast<world::Task>(t);
            m.scenes.push_back(s);
        }
    }
    return m;
}

std::size_t count_task(const Manifest& m, Split sp, world::Task t) {
    std::size_t n = 0;
    for (const auto& s : m.scenes) {
        n += (s.split == sp && s.task == t) ? 1 : 0;
    }
    return n;
}

}  // namespace

TEST_CASE("every-other-frame protocol") {
    const auto kept = kept_raw_indices(150);
    REQUIRE(kept.size() == 75);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        CHECK(kept[k] == static_cast<int>(2 * k));
    }
    CHECK(kept_raw_indices(80).size() == 40);
    CHECK_THROWS_AS(kept_raw_indices(78), FormatError);
    CHECK_THROWS_AS(kept_raw_indices(81), FormatError);

    // Raw frame 17 is kept frame 8, i.e. the sixth generated frame.
    CHECK(generated_index(17) == 5);
    CHECK_FALSE(generated_index(5).has_value());
    CHECK(generated_index(6) == 0);
    CHECK(generated_index(2 * (kInputFrames + kHorizon) - 1) == kHorizon - 1);
    CHECK_FALSE(generated_index(2 * (kInputFrames + kHorizon)).has_value());

    std::vector<float> raw(150 * 2);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<float>(i);
    }
    const auto sub = subsample_frames(raw, 150, 2);
    REQUIRE(sub.size() == 150);
    CHECK(sub[2] == 4.0f);
    CHECK_THROWS_AS(subsample_frames(raw, 149, 2), ShapeError);
}

TEST_CASE("split names") {
    CHECK(parse_split("val") == Split::val);
    CHECK_THROWS_AS(parse_split("holdout"), DomainError);
}

TEST_CASE("splits are stratified, deterministic partitions") {
    SUBCASE("1000 scenes") {
        Manifest m = synthetic_manifest({0, 1000, 0}, "contact");
        CHECK(split_dataset(m, 3).empty());
        CHECK(m.count(Split::train) == 600);
        CHECK(m.count(Split::val) == 200);
        CHECK(m.count(Split::test) == 200);
        Manifest again = synthetic_manifest({0, 1000, 0}, "contact");
        split_dataset(again, 3);
        bool same = true;
        for (std::size_t i = 0; i < m.scenes.size(); ++i) {
            same = same && m.scenes[i].split == again.scenes[i].split;
        }
        CHECK(same);
        Manifest other = synthetic_manifest({0, 1000, 0}, "contact");
        split_dataset(other, 4);
        bool differs = false;
        for (std::size_t i = 0; i < m.scenes.size(); ++i) {
            differs = differs || m.scenes[i].split != other.scenes[i].split;
        }
        CHECK(differs);
    }
    SUBCASE("desk scale 300") {
        Manifest m = synthetic_manifest({0, 300, 0}, "contact");
        split_dataset(m, 0);
        CHECK(m.count(Split::train) == 180);
        CHECK(m.count(Split::val) == 60);
        CHECK(m.count(Split::test) == 60);
    }
    SUBCASE("combined task holds equal thirds in every split") {
        Manifest m = synthetic_manifest({100, 100, 100}, "combined");
        CHECK(split_dataset(m, 1).empty());
        for (Split sp : {Split::train, Split::val, Split::test}) {
            const std::size_t a = count_task(m, sp, world::Task::stability);
            CHECK(a == count_task(m, sp, world::Task::contact));
            CHECK(a == count_task(m, sp, world::Task::containment));
        }
        CHECK(m.count(Split::train) == 180);
    }
    SUBCASE("combined surplus of up to two scenes is dropped with a warning") {
        Manifest m = synthetic_manifest({101, 101, 100}, "combined");
        const auto warnings = split_dataset(m, 1);
        CHECK(warnings.size() == 2);
        CHECK(m.count(Split::excluded) == 2);
        for (Split sp : {Split::train, Split::val, Split::test}) {
            CHECK(count_task(m, sp, world::Task::stability) == count_task(m, sp, world::Task::containment));
        }
        Manifest bad = synthetic_manifest({103, 100, 100}, "combined");
        CHECK_THROWS_AS(split_dataset(bad, 1), FormatError);
    }
    SUBCASE("too few scenes") {
        Manifest m = synthetic_manifest({0, 4, 0}, "contact");
        CHECK_THROWS_AS(split_dataset(m, 0), DomainError);
    }
}

TEST_CASE("write then load reproduces the rendered episode exactly") {
    TempDir dir("dataset_roundtrip");
    std::vector<world::Episode> episodes;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        episodes.push_back(world::generate_episode(world::Task::stability, seed));
    }
    const Manifest m = write_dataset(episodes, dir.path, "stability", 9);
    CHECK(fs::exists(dir.path / "manifest.json"));
    CHECK(fs::exists(dir.path / "distribution.json"));

    const Manifest back = read_manifest(dir.path);
    REQUIRE(back.scenes.size() == m.scenes.size());
    CHECK(back.scenes[0].events == m.scenes[0].events);
    CHECK(back.kept_frames == 75);

    const std::size_t plane = 32 * 32;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const world::Episode& ep = episodes[e];
        const SceneData data = load_scene(back, dir.path, e);
        for (int obj : ep.queryable) {
            const Sample s = make_sample(back, e, data, obj);
            CHECK(s.label == ep.label_of(obj));
            CHECK(s.query.shape == static_cast<int>(ep.objects[static_cast<std::size_t>(obj)].shape));
            // Input k is raw frame 2k; target j is raw frame 2(j + 3).
            for (std::size_t k = 0; k < 3; ++k) {
                for (std::size_t p = 0; p < 3 * plane; p += 97) {
                    CHECK(s.input_frames.data[k * 3 * plane + p] == ep.frames[2 * k * 3 * plane + p]);
                }
                for (std::size_t p = 0; p < plane; p += 31) {
                    CHECK(s.input_masks.data[k * plane + p] ==
                          ep.masks[static_cast<std::size_t>(obj)][2 * k * plane + p]);
                }
            }
            for (std::size_t j = 0; j < kHorizon; j += 6) {
                for (std::size_t p = 0; p < 3 * plane; p += 101) {
                    CHECK(s.target_frames.data[j * 3 * plane + p] == ep.frames[2 * (j + 3) * 3 * plane + p]);
                }
            }
        }
    }
}

TEST_CASE("samples of one scene share frames and differ in masks") {
    TempDir dir("dataset_samples");
    std::vector<world::Episode> episodes;
    std::uint64_t seed = 0;
    while (episodes.size() < 5) {
        world::Episode ep = world::generate_episode(world::Task::stability, seed++);
        if (ep.queryable.size() == 3) {
            episodes.push_back(std::move(ep));
        }
    }
    const Manifest m = write_dataset(episodes, dir.path, "stability", 0);
    const SceneData data = load_scene(m, dir.path, 0);
    const Sample a = make_sample(m, 0, data, 0);
    const Sample b = make_sample(m, 0, data, 1);
    const Sample c = make_sample(m, 0, data, 2);
    CHECK(a.input_frames.data == b.input_frames.data);
    CHECK(a.target_frames.data == c.target_frames.data);
    CHECK(a.input_masks.data != b.input_masks.data);
    CHECK(b.input_masks.data != c.input_masks.data);
    CHECK_THROWS_AS(make_sample(m, 0, data, 7), DomainError);

    std::size_t total = 0;
    for (Split sp : {Split::train, Split::val, Split::test}) {
        total += sample_refs(m, sp).size();
    }
    CHECK(total == 15);
}

TEST_CASE("corrupted and missing blobs are reported") {
    TempDir dir("dataset_corrupt");
    std::vector<world::Episode> episodes;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        episodes.push_back(world::generate_episode(world::Task::contact, seed));
    }
    const Manifest m = write_dataset(episodes, dir.path, "contact", 0);

    const fs::path frames = dir.path / m.scenes[0].frames_path;
    fs::resize_file(frames, fs::file_size(frames) - 10);
    CHECK_THROWS_AS(load_scene(m, dir.path, 0), CorruptionError);

    const fs::path masks = dir.path / m.scenes[1].masks_path;
    {
        std::fstream f(masks, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        f.put('\x7f');
    }
    CHECK_THROWS_AS(load_scene(m, dir.path, 1), CorruptionError);

    fs::remove(dir.path / m.scenes[2].frames_path);
    CHECK_THROWS_AS(load_scene(m, dir.path, 2), IoError);

    {
        std::ofstream bad(dir.path / m.scenes[3].frames_path, std::ios::binary | std::ios::trunc);
        bad << "JUNKJUNKJUNK";
    }
    CHECK_THROWS_AS(load_scene(m, dir.path, 3), FormatError);

    CHECK_NOTHROW(load_scene(m, dir.path, 4));

    {
        std::ofstream bad(dir.path / "manifest.json", std::ios::trunc);
        bad << "{\"format_version\": 1, \"task\": ";
    }
    CHECK_THROWS_AS(read_manifest(dir.path), FormatError);
    CHECK_THROWS_AS(read_manifest(dir.path / "nowhere"), IoError);
}

TEST_CASE("balanced generation") {
    TempDir dir("dataset_balance");
    GenerateOptions opt;
    opt.task = "contact";
    opt.n_scenes = 100;
    opt.seed = 5;
    const Manifest m = generate_dataset(opt, dir.path / "a");
    REQUIRE(m.scenes.size() == 100);
    double pos = 0.0;
    double total = 0.0;
    for (const auto& s : m.scenes) {
        for (int l : s.labels) {
            pos += l;
            total += 1.0;
        }
    }
    CHECK(pos / total >= 0.45);
    CHECK(pos / total <= 0.55);

    generate_dataset(opt, dir.path / "b");
    CHECK(slurp(dir.path / "a" / "manifest.json") == slurp(dir.path / "b" / "manifest.json"));
    CHECK(slurp(dir.path / "a" / m.scenes[3].frames_path) == slurp(dir.path / "b" / m.scenes[3].frames_path));

    opt.unseen = true;
    opt.n_scenes = 20;
    const Manifest unseen = generate_dataset(opt, dir.path / "c");
    CHECK(unseen.scenes.size() == 20);
    CHECK(unseen.unseen);
    for (const auto& s : unseen.scenes) {
        for (const auto& q : s.queries) {
            CHECK((q.shape == static_cast<int>(world::ShapeKind::wide_square) ||
                   q.shape == static_cast<int>(world::ShapeKind::tall_triangle)));
        }
    }
}

TEST_CASE("combined generation yields equal task counts") {
    TempDir dir("dataset_combined");
    GenerateOptions opt;
    opt.task = "combined";
    opt.n_scenes = 9;
    const Manifest m = generate_dataset(opt, dir.path);
    std::array<int, 3> per{};
    for (const auto& s : m.scenes) {
        per[static_cast<std::size_t>(s.task)]++;
    }
    CHECK(per == std::array<int, 3>{3, 3, 3});
    CHECK(m.count(Split::excluded) == 0);
}

TEST_CASE("event indices map into the generated horizon") {
    Manifest m;
    SceneRecord s;
    s.events = {{world::EventKind::object_object_contact, 17, {0, 1}},
                {world::EventKind::first_ground_contact, 40, {2}},
                {world::EventKind::settle, 60, {1}},
                {world::EventKind::containment_entry, 2, {1, 0}}};
    CHECK(event_generated_indices(m, s) == std::vector<int>{5, 17});
    CHECK(event_generated_indices(m, s, 1) == std::vector<int>{5});
}

TEST_CASE("checkpoint files round-trip and detect damage") {
    TempDir dir("checkpoint");
    io::Checkpoint ck;
    ck.metadata = "lr=0.001\nseed=3\n";
    ck.arrays.push_back({"enc.w", {2, 3}, {1, 2, 3, 4, 5, 6.5}});
    ck.arrays.push_back({"head.b", {1}, {-0.25}});
    const fs::path p = dir.path / "model.ckpt";
    io::write_checkpoint(p, ck);
    const io::Checkpoint back = io::read_checkpoint(p);
    CHECK(back.metadata == ck.metadata);
    REQUIRE(back.arrays.size() == 2);
    CHECK(back.find("enc.w")->data == ck.arrays[0].data);
    CHECK(back.find("head.b")->shape == std::vector<std::int64_t>{1});
    CHECK(back.find("missing") == nullptr);

    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        f.put('\x01');
    }
    CHECK_THROWS_AS(io::read_checkpoint(p), CorruptionError);
    CHECK_THROWS_AS(io::read_checkpoint(dir.path / "none.ckpt"), IoError);
    ck.arrays[0].shape = {4};
    CHECK_THROWS_AS(io::write_checkpoint(p, ck), ShapeError);
}
