#include "pipsim/blob.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pipsim/errors.hpp"

namespace pipsim::io {

namespace {

constexpr char kBlobMagic[4] = {'P', 'I', 'P', 'B'};
constexpr char kCheckpointMagic[4] = {'P', 'I', 'P', 'C'};

class Writer {
  public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(raw, raw + sizeof(T));
        }
        bytes.insert(bytes.end(), raw, raw + sizeof(T));
    }

    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }

    std::vector<unsigned char> bytes;
};

class Reader {
  public:
    Reader(std::span<const unsigned char> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(raw, raw + sizeof(T));
        }
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, raw, sizeof(T));
        return value;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw CorruptionError(origin_ + ": truncated (needs " + std::to_string(pos_ + n) + " bytes, has " +
                                  std::to_string(bytes_.size()) + ")");
        }
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

  private:
    std::span<const unsigned char> bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

std::uint64_t element_count(const std::vector<std::int64_t>& shape, const std::string& origin) {
    std::uint64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) {
            throw FormatError(origin + ": negative dimension");
        }
        n *= static_cast<std::uint64_t>(d);
    }
    return n;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << value;
    return os.str();
}

std::string write_blob(const std::filesystem::path& path, const std::vector<std::int64_t>& shape,
                       std::span<const float> data) {
    if (element_count(shape, path.string()) != data.size()) {
        throw ShapeError("write_blob: shape does not match " + std::to_string(data.size()) + " values");
    }
    Writer w;
    w.put_bytes(kBlobMagic, 4);
    w.put(kFormatVersion);
    w.put(static_cast<std::uint32_t>(DType::f32));
    w.put(static_cast<std::uint32_t>(shape.size()));
    for (std::int64_t d : shape) {
        w.put(static_cast<std::uint64_t>(d));
    }
    w.bytes.reserve(w.bytes.size() + 4 * data.size());
    for (float v : data) {
        w.put(v);
    }
    spill(path, w.bytes);
    return hex64(fnv1a64(w.bytes));
}

Blob read_blob(const std::filesystem::path& path, const std::string& expected_checksum) {
    const std::vector<unsigned char> bytes = slurp(path);
    const std::string origin = path.string();
    Reader r(bytes, origin);
    if (r.get_string(4) != std::string(kBlobMagic, 4)) {
        throw FormatError(origin + ": not a tensor blob (bad magic)");
    }
    if (const auto v = r.get<std::uint32_t>(); v != kFormatVersion) {
        throw FormatError(origin + ": unsupported blob version " + std::to_string(v));
    }
    if (r.get<std::uint32_t>() != static_cast<std::uint32_t>(DType::f32)) {
        throw FormatError(origin + ": expected float32 payload");
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank > 16) {
        throw CorruptionError(origin + ": implausible rank " + std::to_string(rank));
    }
    Blob blob;
    for (std::uint32_t i = 0; i < rank; ++i) {
        blob.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    }
    const std::uint64_t n = element_count(blob.shape, origin);
    if (r.remaining() != 4 * n) {
        throw CorruptionError(origin + ": payload holds " + std::to_string(r.remaining()) + " bytes, header declares " +
                              std::to_string(4 * n));
    }
    if (!expected_checksum.empty()) {
        const std::string actual = hex64(fnv1a64(bytes));
        if (actual != expected_checksum) {
            throw CorruptionError(origin + ": checksum mismatch (expected " + expected_checksum + ", found " + actual +
                                  ")");
        }
    }
    blob.data.resize(n);
    for (auto& v : blob.data) {
        v = r.get<float>();
    }
    return blob;
}

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) {
            return &a;
        }
    }
    return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    Writer w;
    w.put_bytes(kCheckpointMagic, 4);
    w.put(kFormatVersion);
    w.put(static_cast<std::uint32_t>(checkpoint.metadata.size()));
    w.put_bytes(checkpoint.metadata.data(), checkpoint.metadata.size());
    w.put(static_cast<std::uint32_t>(checkpoint.arrays.size()));
    for (const auto& a : checkpoint.arrays) {
        if (element_count(a.shape, a.name) != a.data.size()) {
            throw ShapeError("write_checkpoint: shape of '" + a.name + "' does not match its data");
        }
        w.put(static_cast<std::uint32_t>(a.name.size()));
        w.put_bytes(a.name.data(), a.name.size());
        w.put(static_cast<std::uint32_t>(a.shape.size()));
        for (std::int64_t d : a.shape) {
            w.put(static_cast<std::uint64_t>(d));
        }
    }
    for (const auto& a : checkpoint.arrays) {
        for (double v : a.data) {
            w.put(v);
        }
    }
    w.put(fnv1a64(w.bytes));
    spill(path, w.bytes);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const std::vector<unsigned char> bytes = slurp(path);
    const std::string origin = path.string();
    Reader r(bytes, origin);
    if (r.get_string(4) != std::string(kCheckpointMagic, 4)) {
        throw FormatError(origin + ": not a checkpoint (bad magic)");
    }
    if (const auto v = r.get<std::uint32_t>(); v != kFormatVersion) {
        throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(v));
    }
    if (bytes.size() < 8) {
        throw CorruptionError(origin + ": truncated");
    }
    {
        const std::span<const unsigned char> all(bytes);
        Reader tail(all.subspan(bytes.size() - 8), origin);
        const auto stored = tail.get<std::uint64_t>();
        if (stored != fnv1a64(all.first(bytes.size() - 8))) {
            throw CorruptionError(origin + ": checkpoint checksum mismatch");
        }
    }
    Checkpoint ck;
    ck.metadata = r.get_string(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    ck.arrays.resize(count);
    for (auto& a : ck.arrays) {
        a.name = r.get_string(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < rank; ++i) {
            a.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
        }
    }
    for (auto& a : ck.arrays) {
        a.data.resize(element_count(a.shape, a.name));
        for (auto& v : a.data) {
            v = r.get<double>();
        }
    }
    if (r.remaining() != 8) {
        throw CorruptionError(origin + ": trailing bytes after checkpoint payload");
    }
    return ck;
}

}  // namespace pipsim::io
