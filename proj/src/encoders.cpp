#include "pipsim/encoders.hpp"

#include "pipsim/errors.hpp"

namespace pipsim::enc {

using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr std::size_t kFrameWidths[3] = {16, 32, 32};
constexpr std::size_t kFrameStrides[3] = {2, 2, 1};
constexpr std::size_t kContextWidths[2] = {8, 16};

std::size_t context_channels(const EncoderConfig& c, Context s) { return s == Context::masks ? 1 : c.channels; }

std::string stream_name(const std::string& prefix, Context s) {
    return prefix + "ctx" + std::to_string(static_cast<int>(s));
}

}  // namespace

void init_encoders(ad::ParameterStore& store, const EncoderConfig& c, Rng& rng, const std::string& prefix,
                   bool generated_stream) {
    std::size_t cin = c.channels;
    for (std::size_t i = 0; i < 3; ++i) {
        nn::add_conv2d(store, prefix + "frame" + std::to_string(i), kFrameWidths[i], cin, 3, rng);
        cin = kFrameWidths[i];
    }
    nn::add_linear(store, prefix + "frame_out", c.image_features, cin, rng);
    for (Context s : {Context::inputs, Context::masks, Context::generated}) {
        if (s == Context::generated && !generated_stream) {
            continue;
        }
        const std::string name = stream_name(prefix, s);
        nn::add_conv3d(store, name + ".c0", kContextWidths[0], context_channels(c, s), 3, 4, rng);
        nn::add_conv3d(store, name + ".c1", kContextWidths[1], kContextWidths[0], 3, 4, rng);
        nn::add_linear(store, name + ".out", c.context_features, kContextWidths[1], rng);
    }
    const std::size_t e = c.embedding_width;
    store.add(prefix + "query.task", nn::uniform_tensor({c.task_vocab, e}, 1.0, rng));
    store.add(prefix + "query.color", nn::uniform_tensor({c.color_vocab, e}, 1.0, rng));
    store.add(prefix + "query.shape", nn::uniform_tensor({c.shape_vocab, e}, 1.0, rng));
    nn::add_linear(store, prefix + "query.out", c.query_features, 3 * e, rng);
}

Var stack_clip(std::span<const Var> frames) {
    if (frames.empty()) {
        throw ShapeError("stack_clip: no frames");
    }
    const Shape& s = frames.front().shape();
    if (s.size() != 3) {
        throw ShapeError("stack_clip: frames must be [C, H, W], got " + ad::shape_str(s));
    }
    const std::size_t c = s[0];
    std::vector<Var> parts;
    parts.reserve(c * frames.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (const Var& f : frames) {
            if (f.shape() != s) {
                throw ShapeError("stack_clip: frame shapes differ");
            }
            parts.push_back(c == 1 ? f : ad::slice(f, ch, ch + 1));
        }
    }
    return ad::reshape(ad::concat(parts), {c, frames.size(), s[1], s[2]});
}

Tensor to_clip(const Tensor& frames) {
    if (frames.rank() != 4) {
        throw ShapeError("to_clip: expected [T, C, H, W], got " + ad::shape_str(frames.shape));
    }
    const std::size_t t = frames.dim(0);
    const std::size_t c = frames.dim(1);
    const std::size_t plane = frames.dim(2) * frames.dim(3);
    Tensor out({c, t, frames.dim(2), frames.dim(3)});
    for (std::size_t k = 0; k < t; ++k) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            std::copy_n(frames.data.begin() + static_cast<std::ptrdiff_t>((k * c + ch) * plane), plane,
                        out.data.begin() + static_cast<std::ptrdiff_t>((ch * t + k) * plane));
        }
    }
    return out;
}

Encoders::Encoders(EncoderConfig config, std::string prefix) : config_(config), prefix_(std::move(prefix)) {}

Var Encoders::frame(nn::Binder& params, Var image) const {
    if (image.shape().size() != 3 || image.shape()[0] != config_.channels) {
        throw ShapeError("frame encoder: expected [" + std::to_string(config_.channels) + ", H, W], got " +
                         ad::shape_str(image.shape()));
    }
    Var x = image;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string name = prefix_ + "frame" + std::to_string(i);
        x = ad::leaky_relu(ad::conv2d(x, params(name + ".w"), params(name + ".b"), {kFrameStrides[i], 1}));
    }
    return ad::linear(ad::global_avg_pool(x), params(prefix_ + "frame_out.w"), params(prefix_ + "frame_out.b"));
}

Var Encoders::context(nn::Binder& params, Context stream, Var clip) const {
    const std::size_t want = context_channels(config_, stream);
    if (clip.shape().size() != 4 || clip.shape()[0] != want) {
        throw ShapeError("context encoder: expected [" + std::to_string(want) + ", T, H, W], got " +
                         ad::shape_str(clip.shape()));
    }
    const std::string name = stream_name(prefix_, stream);
    Var x = ad::leaky_relu(ad::conv3d(clip, params(name + ".c0.w"), params(name + ".c0.b"), {1, 2, 2, 1, 1, 1}));
    x = ad::leaky_relu(ad::conv3d(x, params(name + ".c1.w"), params(name + ".c1.b"), {2, 2, 2, 1, 1, 1}));
    return ad::linear(ad::global_avg_pool(x), params(name + ".out.w"), params(name + ".out.b"));
}

Var Encoders::query(nn::Binder& params, const data::Query& q) const {
    auto check = [](int id, std::size_t vocab, const char* what) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw DomainError(std::string("query ") + what + " id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
        }
        return static_cast<std::size_t>(id);
    };
    const std::size_t task = check(q.task, config_.task_vocab, "task");
    const std::size_t color = check(q.color, config_.color_vocab, "color");
    const std::size_t shape = check(q.shape, config_.shape_vocab, "shape");
    Var e = ad::concat({ad::embedding(params(prefix_ + "query.task"), task),
                        ad::embedding(params(prefix_ + "query.color"), color),
                        ad::embedding(params(prefix_ + "query.shape"), shape)});
    return ad::linear(e, params(prefix_ + "query.out.w"), params(prefix_ + "query.out.b"));
}

FeatureSequence assemble_features(nn::Binder& params, const Encoders& encoders, std::span<const Var> generated,
                                  const Tensor& input_frames, const Tensor& input_masks, const data::Query& query) {
    if (generated.empty()) {
        throw ShapeError("assemble_features: no generated frames");
    }
    ad::Tape& tape = params.tape();
    const Var f_l = encoders.query(params, query);
    const Var f_d = ad::concat(
        {encoders.context(params, Context::inputs, tape.constant(to_clip(input_frames))),
         encoders.context(params, Context::masks, tape.constant(to_clip(input_masks))),
         encoders.context(params, Context::generated, stack_clip(generated))});
    std::vector<Var> columns;
    columns.reserve(generated.size());
    for (const Var& g : generated) {
        columns.push_back(ad::concat({encoders.frame(params, g), f_l, f_d}));
    }
    FeatureSequence fs;
    fs.length = generated.size();
    fs.size = encoders.config().feature_size();
    fs.rows = ad::reshape(ad::concat(columns), {fs.length, fs.size});
    return fs;
}

}  // namespace pipsim::enc
