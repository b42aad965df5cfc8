#pragma once

// On-disk datasets of rendered episodes and the frame protocol that turns a
// scene into per-object samples.
//
// Directory layout:
//   manifest.json          scene records, splits, checksums
//   distribution.json      label/shape/color counts per split
//   frames/<scene>.blob    [kept, 3, H, W] subsampled RGB frames
//   masks/<scene>.blob     [objects, kept, H, W] per-object binary masks
// Blob headers are described in pipsim/blob.hpp.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/microworld.hpp"

namespace pipsim::data {

inline constexpr int kInputFrames = 3;
inline constexpr int kHorizon = 37;
inline constexpr int kFrameStride = 2;
inline constexpr int kMinRawFrames = 80;
inline constexpr int kManifestVersion = 1;

// Raw indices kept by the every-other-frame protocol: 0, 2, ..., raw-2.
// Throws FormatError unless raw_frames is even and >= 80.
std::vector<int> kept_raw_indices(int raw_frames);

// frames: raw_frames consecutive blocks of frame_size values.
std::vector<float> subsample_frames(const std::vector<float>& frames, int raw_frames, std::size_t frame_size);

// Position of a raw frame inside the generated horizon (0-based), or nullopt
// when it falls in the input frames or past the horizon.
std::optional<int> generated_index(int raw_frame, int input_frames = kInputFrames, int horizon = kHorizon);

enum class Split { train, val, test, excluded };

std::string_view to_string(Split split);
// Throws DomainError for names other than train/val/test/excluded.
Split parse_split(std::string_view name);

struct Query {
    int task = 0;
    int color = 0;
    int shape = 0;

    bool operator==(const Query&) const = default;
};

struct SceneRecord {
    std::string id;
    world::Task task = world::Task::contact;
    std::uint64_t seed = 0;
    bool unseen = false;
    int object_count = 0;
    std::vector<int> objects;  // queryable object ids
    std::vector<int> labels;
    std::vector<Query> queries;
    std::vector<world::EventAnnotation> events;  // raw frame indices
    std::string frames_path;
    std::string frames_checksum;
    std::string masks_path;
    std::string masks_checksum;
    Split split = Split::train;
};

struct Manifest {
    int version = kManifestVersion;
    std::string task;  // a task name or "combined"
    bool unseen = false;
    std::uint64_t seed = 0;
    int raw_frames = 150;
    int kept_frames = 75;
    int height = 32;
    int width = 32;
    int input_frames = kInputFrames;
    int horizon = kHorizon;
    std::vector<SceneRecord> scenes;

    std::size_t count(Split split) const;
};

void write_manifest(const Manifest& manifest, const std::filesystem::path& dir);
// Missing manifest -> IoError; malformed JSON or fields -> FormatError.
Manifest read_manifest(const std::filesystem::path& dir);

// Writes blobs for every episode, assigns splits with split_seed and writes
// the manifest plus distribution report. Warnings from splitting are appended
// to *warnings when given.
Manifest write_dataset(const std::vector<world::Episode>& episodes, const std::filesystem::path& dir,
                       const std::string& task_name, std::uint64_t split_seed,
                       std::vector<std::string>* warnings = nullptr);

// Stratified 60/20/20 assignment per task, deterministic in seed. For a
// combined dataset with unequal task counts up to two surplus scenes are
// marked excluded and reported in the returned warnings; a larger surplus
// throws FormatError. Throws DomainError for fewer than 5 scenes.
std::vector<std::string> split_dataset(Manifest& manifest, std::uint64_t seed);

// Loaded blobs of one scene.
struct SceneData {
    int kept = 0;
    int height = 0;
    int width = 0;
    int objects = 0;
    std::vector<float> frames;  // [kept, 3, H, W]
    std::vector<float> masks;   // [objects, kept, H, W]
};

SceneData load_scene(const Manifest& manifest, const std::filesystem::path& dir, std::size_t scene);

struct Sample {
    std::size_t scene = 0;
    int object = 0;
    Query query;
    ad::Tensor input_frames;   // [M, 3, H, W]
    ad::Tensor input_masks;    // [M, 1, H, W]
    ad::Tensor target_frames;  // [N, 3, H, W]
    int label = 0;
};

Sample make_sample(const Manifest& manifest, std::size_t scene, const SceneData& data, int object);
Sample load_sample(const Manifest& manifest, const std::filesystem::path& dir, std::size_t scene, int object);

struct SampleRef {
    std::size_t scene = 0;
    int object = 0;
};

// One entry per (scene, queryable object) in the split, in manifest order.
std::vector<SampleRef> sample_refs(const Manifest& manifest, Split split);

// Generated-horizon indices of a scene's interaction events, optionally
// restricted to events involving the given object. Evaluation only.
std::vector<int> event_generated_indices(const Manifest& manifest, const SceneRecord& scene, int object = -1);

struct GenerateOptions {
    std::string task = "contact";  // stability, contact, containment or combined
    int n_scenes = 300;
    std::uint64_t seed = 0;
    world::WorldConfig world;
    bool unseen = false;
    bool balance = true;
};

// Generates, balances (contact and containment only) and writes a dataset.
// Throws GenerationError when balance is not reached within 10 * n attempts.
Manifest generate_dataset(const GenerateOptions& options, const std::filesystem::path& dir,
                          std::vector<std::string>* warnings = nullptr);

// JSON text of per-split label, shape and color counts.
std::string distribution_report(const Manifest& manifest);

}  // namespace pipsim::data
