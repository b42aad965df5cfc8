#include "pipsim/simulator.hpp"

#include <algorithm>
#include <cmath>

#include "pipsim/errors.hpp"

namespace pipsim::sim {

using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

std::string layer(const std::string& prefix, const char* kind, std::size_t i) {
    return prefix + kind + std::to_string(i);
}

std::size_t conv_out(std::size_t in, const ConvSpec& s) { return (in + 2 * s.padding - s.kernel) / s.stride + 1; }

}  // namespace

void SimulatorConfig::validate() const {
    if (encoder.empty() || decoder.empty() || lstm_layers == 0 || hidden == 0 || channels == 0 || height == 0 ||
        width == 0) {
        throw ConfigError("simulator layer stacks and sizes must be non-empty");
    }
    std::size_t h = height;
    std::size_t w = width;
    for (const ConvSpec& s : encoder) {
        if (s.out == 0 || s.stride == 0 || h + 2 * s.padding < s.kernel || w + 2 * s.padding < s.kernel) {
            throw ConfigError("encoder layer does not fit the frame resolution");
        }
        h = conv_out(h, s);
        w = conv_out(w, s);
    }
    for (std::size_t i = 0; i + 1 < decoder.size(); ++i) {
        if (decoder[i].out == 0) {
            throw ConfigError("decoder layer widths must be positive");
        }
    }
    for (const ConvSpec& s : decoder) {
        h = (h - 1) * s.stride + s.kernel - 2 * s.padding;
        w = (w - 1) * s.stride + s.kernel - 2 * s.padding;
    }
    if (h != height || w != width) {
        throw ConfigError("decoder does not restore the frame resolution (" + std::to_string(h) + "x" +
                          std::to_string(w) + ")");
    }
}

std::size_t SimulatorConfig::latent_height() const {
    std::size_t h = height;
    for (const ConvSpec& s : encoder) {
        h = conv_out(h, s);
    }
    return h;
}

std::size_t SimulatorConfig::latent_width() const {
    std::size_t w = width;
    for (const ConvSpec& s : encoder) {
        w = conv_out(w, s);
    }
    return w;
}

void init_simulator(ad::ParameterStore& store, const SimulatorConfig& cfg, Rng& rng, const std::string& prefix) {
    cfg.validate();
    std::size_t cin = cfg.channels;
    for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
        nn::add_conv2d(store, layer(prefix, "enc", i), cfg.encoder[i].out, cin, cfg.encoder[i].kernel, rng);
        cin = cfg.encoder[i].out;
    }
    for (std::size_t l = 0; l < cfg.lstm_layers; ++l) {
        const std::size_t in = (l == 0 ? cfg.latent_channels() : cfg.hidden) + cfg.hidden;
        const std::string name = layer(prefix, "lstm", l);
        nn::add_conv2d(store, name, 4 * cfg.hidden, in, cfg.lstm_kernel, rng, 0.5);
        // Gate order: input, forget, output, candidate.
        Tensor& b = store.get(name + ".b").value;
        for (std::size_t k = cfg.hidden; k < 2 * cfg.hidden; ++k) {
            b[k] = cfg.forget_bias;
        }
    }
    cin = cfg.hidden;
    for (std::size_t i = 0; i < cfg.decoder.size(); ++i) {
        const bool last = i + 1 == cfg.decoder.size();
        const std::size_t out = last ? cfg.channels + (cfg.frame_skip ? 1 : 0) : cfg.decoder[i].out;
        const std::string name = layer(prefix, "dec", i);
        nn::add_conv_transpose2d(store, name, cin, out, cfg.decoder[i].kernel, cfg.decoder[i].stride, rng,
                                 last ? 0.1 : 1.0);
        if (last) {
            Tensor& b = store.get(name + ".b").value;
            for (std::size_t c = 0; c < cfg.channels; ++c) {
                b[c] = cfg.content_bias;
            }
            if (cfg.frame_skip) {
                b[cfg.channels] = cfg.skip_gate_bias;
            }
        }
        cin = out;
    }
}

Simulator::Simulator(SimulatorConfig config, std::string prefix) : config_(std::move(config)), prefix_(std::move(prefix)) {
    config_.validate();
}

Var Simulator::encode(nn::Binder& params, Var frame) const {
    const Shape want{config_.channels, config_.height, config_.width};
    if (frame.shape() != want) {
        throw ShapeError("encode: frame " + ad::shape_str(frame.shape()) + " does not match configured " +
                         ad::shape_str(want));
    }
    Var x = frame;
    for (std::size_t i = 0; i < config_.encoder.size(); ++i) {
        const std::string name = layer(prefix_, "enc", i);
        const ConvSpec& s = config_.encoder[i];
        x = ad::conv2d(x, params(name + ".w"), params(name + ".b"), {s.stride, s.padding});
        if (i + 1 < config_.encoder.size()) {
            x = ad::leaky_relu(x);
        }
    }
    return x;
}

Var Simulator::decode(nn::Binder& params, Var latent, Var previous) const {
    Var x = latent;
    std::size_t h = latent.shape().at(1);
    std::size_t w = latent.shape().at(2);
    for (std::size_t i = 0; i < config_.decoder.size(); ++i) {
        const std::string name = layer(prefix_, "dec", i);
        const ConvSpec& s = config_.decoder[i];
        h = (h - 1) * s.stride + s.kernel - 2 * s.padding;
        w = (w - 1) * s.stride + s.kernel - 2 * s.padding;
        x = ad::conv_transpose2d(x, params(name + ".w"), params(name + ".b"), {s.stride, s.padding}, h, w);
        if (i + 1 < config_.decoder.size()) {
            x = ad::leaky_relu(x);
        }
    }
    const std::size_t c = config_.channels;
    if (!config_.frame_skip) {
        return ad::sigmoid(x);
    }
    Var content = ad::sigmoid(ad::slice(x, 0, c));
    if (!previous.valid()) {
        return content;
    }
    if (previous.shape() != content.shape()) {
        throw ShapeError("decode: previous frame " + ad::shape_str(previous.shape()) + " does not match output " +
                         ad::shape_str(content.shape()));
    }
    // One gate plane shared across channels.
    Var gate = ad::scale(ad::sigmoid(ad::slice(x, c, c + 1)), config_.skip_gate_max);
    std::vector<Var> planes(c, gate);
    Var g = ad::concat(planes);
    return ad::add(ad::mul(g, previous), ad::sub(content, ad::mul(g, content)));
}

Simulator::State Simulator::initial_state(ad::Tape& tape) const {
    State s;
    const Shape shape{config_.hidden, config_.latent_height(), config_.latent_width()};
    for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
        s.h.push_back(tape.constant(Tensor(shape)));
        s.c.push_back(tape.constant(Tensor(shape)));
    }
    return s;
}

Var Simulator::step(nn::Binder& params, State& state, Var latent) const {
    const std::size_t hd = config_.hidden;
    const std::size_t pad = config_.lstm_kernel / 2;
    Var x = latent;
    for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
        const std::string name = layer(prefix_, "lstm", l);
        Var gates = ad::conv2d(ad::concat({x, state.h[l]}), params(name + ".w"), params(name + ".b"), {1, pad});
        Var i = ad::sigmoid(ad::slice(gates, 0, hd));
        Var f = ad::sigmoid(ad::slice(gates, hd, 2 * hd));
        Var o = ad::sigmoid(ad::slice(gates, 2 * hd, 3 * hd));
        Var g = ad::tanh(ad::slice(gates, 3 * hd, 4 * hd));
        state.c[l] = ad::add(ad::mul(f, state.c[l]), ad::mul(i, g));
        state.h[l] = ad::mul(o, ad::tanh(state.c[l]));
        x = state.h[l];
    }
    return x;
}

std::vector<Var> Simulator::rollout(nn::Binder& params, const Tensor& inputs, std::size_t horizon,
                                    const Tensor* truth, double tf_rate, Rng* rng) const {
    if (tf_rate < 0.0 || tf_rate > 1.0) {
        throw ConfigError("teacher-forcing rate must lie in [0, 1]");
    }
    if (tf_rate > 0.0 && (truth == nullptr || rng == nullptr)) {
        throw ConfigError("teacher forcing needs ground-truth frames and a random stream");
    }
    if (inputs.rank() != 4 || inputs.dim(0) == 0) {
        throw ShapeError("rollout: inputs must be [M, C, H, W] with M >= 1, got " + ad::shape_str(inputs.shape));
    }
    if (truth != nullptr && (truth->rank() != 4 || truth->dim(0) < horizon)) {
        throw ShapeError("rollout: ground truth " + ad::shape_str(truth->shape) + " shorter than horizon " +
                         std::to_string(horizon));
    }
    ad::Tape& tape = params.tape();
    State state = initial_state(tape);
    Var top;
    Var last;
    for (std::size_t t = 0; t < inputs.dim(0); ++t) {
        last = tape.constant(nn::take(inputs, t));
        top = step(params, state, encode(params, last));
    }
    std::vector<Var> out;
    out.reserve(horizon);
    for (std::size_t j = 0; j < horizon; ++j) {
        if (j > 0) {
            const bool force = tf_rate > 0.0 && rng->bernoulli(tf_rate);
            last = force ? tape.constant(nn::take(*truth, j - 1)) : out.back();
            top = step(params, state, encode(params, last));
        }
        out.push_back(decode(params, top, last));
    }
    return out;
}

Tensor Simulator::predict(ad::ParameterStore& store, const Tensor& inputs, std::size_t horizon) const {
    ad::Tape tape;
    nn::Binder params(tape, store, false);
    const std::vector<Var> frames = rollout(params, inputs, horizon);
    Shape shape{horizon, config_.channels, config_.height, config_.width};
    Tensor out(shape);
    const std::size_t n = config_.channels * config_.height * config_.width;
    for (std::size_t j = 0; j < horizon; ++j) {
        std::copy(frames[j].value().data.begin(), frames[j].value().data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(j * n));
    }
    return out;
}

Var sim_loss(std::span<const Var> generated, const Tensor& truth) {
    if (generated.empty()) {
        throw ShapeError("sim_loss: no generated frames");
    }
    if (truth.rank() != 4 || truth.dim(0) != generated.size()) {
        throw ShapeError("sim_loss: " + std::to_string(generated.size()) + " generated frames against truth " +
                         ad::shape_str(truth.shape));
    }
    ad::Tape& tape = *generated.front().tape();
    std::vector<Var> terms;
    terms.reserve(generated.size());
    for (std::size_t j = 0; j < generated.size(); ++j) {
        terms.push_back(ad::psnr_loss(generated[j], tape.constant(nn::take(truth, j))));
    }
    return ad::mean(ad::concat(terms));
}

double mean_psnr(const Tensor& predicted, const Tensor& truth) {
    if (predicted.shape != truth.shape || predicted.rank() != 4) {
        throw ShapeError("mean_psnr: " + ad::shape_str(predicted.shape) + " vs " + ad::shape_str(truth.shape));
    }
    double total = 0.0;
    for (std::size_t j = 0; j < truth.dim(0); ++j) {
        total += ad::psnr_value(nn::take(predicted, j), nn::take(truth, j));
    }
    return total / static_cast<double>(truth.dim(0));
}

double copy_last_psnr(const Tensor& inputs, const Tensor& truth) {
    const Tensor last = nn::take(inputs, inputs.dim(0) - 1);
    double total = 0.0;
    for (std::size_t j = 0; j < truth.dim(0); ++j) {
        total += ad::psnr_value(last, nn::take(truth, j));
    }
    return total / static_cast<double>(truth.dim(0));
}

}  // namespace pipsim::sim
