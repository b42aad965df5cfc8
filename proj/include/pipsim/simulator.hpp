#pragma once

// Frame-prediction network: strided conv encoder, stacked ConvLSTM cells and a
// transposed-conv decoder, rolled out over the prediction horizon.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/nn.hpp"
#include "pipsim/rng.hpp"

namespace pipsim::sim {

struct ConvSpec {
    std::size_t out = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
};

struct SimulatorConfig {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    // Six encoder convolutions down to the latent grid (32 x 8 x 8 at 32 x 32).
    std::vector<ConvSpec> encoder{{16, 3, 1, 1}, {16, 4, 2, 1}, {32, 3, 1, 1},
                                  {32, 4, 2, 1}, {32, 3, 1, 1}, {32, 3, 1, 1}};
    // Six transposed convolutions back to frame resolution. The last entry's
    // width is ignored: the final layer emits the frame channels plus one gate.
    std::vector<ConvSpec> decoder{{32, 3, 1, 1}, {32, 3, 1, 1}, {32, 4, 2, 1},
                                  {16, 3, 1, 1}, {16, 4, 2, 1}, {0, 3, 1, 1}};
    std::size_t lstm_layers = 3;
    std::size_t hidden = 32;
    std::size_t lstm_kernel = 3;
    double forget_bias = 1.0;
    // Blend each prediction with the frame it was conditioned on through a
    // learned per-pixel gate.
    bool frame_skip = true;
    double skip_gate_bias = 4.0;
    // Upper bound on the gate. Below 1 the prediction can never be an exact
    // copy, which the log-MSE loss would otherwise reward without limit.
    double skip_gate_max = 0.97;
    // Initial content logit. Frames are mostly black background, and starting
    // near it keeps early updates from driving the sigmoid into saturation.
    double content_bias = -3.0;

    // Throws ConfigError for empty stacks or non-positive sizes.
    void validate() const;
    std::size_t latent_channels() const { return encoder.back().out; }
    std::size_t latent_height() const;
    std::size_t latent_width() const;
};

// Registers every simulator parameter under `prefix` (default "sim.").
void init_simulator(ad::ParameterStore& store, const SimulatorConfig& config, Rng& rng,
                    const std::string& prefix = "sim.");

class Simulator {
  public:
    explicit Simulator(SimulatorConfig config, std::string prefix = "sim.");

    const SimulatorConfig& config() const { return config_; }
    const std::string& prefix() const { return prefix_; }

    // [C, H, W] -> latent [hidden, h, w]. Throws ShapeError on resolution mismatch.
    ad::Var encode(nn::Binder& params, ad::Var frame) const;
    // Latent -> frame in [0, 1]. With a valid `previous` frame the output is
    // gate * previous + (1 - gate) * content.
    ad::Var decode(nn::Binder& params, ad::Var latent, ad::Var previous = {}) const;

    struct State {
        std::vector<ad::Var> h;
        std::vector<ad::Var> c;
    };
    State initial_state(ad::Tape& tape) const;
    // Advances every ConvLSTM cell by one step; returns the top hidden state.
    ad::Var step(nn::Binder& params, State& state, ad::Var latent) const;

    // Consumes the M input frames, then emits `horizon` frames. When `truth`
    // is given, each step after the first conditions on the true previous
    // frame with probability tf_rate (one coin per step from rng); otherwise on
    // its own output. tf_rate > 0 without truth or rng throws ConfigError.
    std::vector<ad::Var> rollout(nn::Binder& params, const ad::Tensor& inputs, std::size_t horizon,
                                 const ad::Tensor* truth = nullptr, double tf_rate = 0.0, Rng* rng = nullptr) const;

    // Inference-mode rollout without gradients; returns [horizon, C, H, W].
    ad::Tensor predict(ad::ParameterStore& store, const ad::Tensor& inputs, std::size_t horizon) const;

  private:
    SimulatorConfig config_;
    std::string prefix_;
};

// Mean over frames of the negated PSNR of each generated frame against the
// matching frame of truth [N, C, H, W].
ad::Var sim_loss(std::span<const ad::Var> generated, const ad::Tensor& truth);

// Mean per-frame PSNR of predictions [N, C, H, W] against truth.
double mean_psnr(const ad::Tensor& predicted, const ad::Tensor& truth);

// Mean per-frame PSNR of repeating the last input frame over the horizon.
double copy_last_psnr(const ad::Tensor& inputs, const ad::Tensor& truth);

}  // namespace pipsim::sim
