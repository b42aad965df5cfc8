#pragma once

// Per-frame, context and query encoders whose outputs form the feature
// sequence consumed by the span head.

#include <span>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/dataset.hpp"
#include "pipsim/nn.hpp"
#include "pipsim/rng.hpp"

namespace pipsim::enc {

struct EncoderConfig {
    std::size_t channels = 3;
    std::size_t image_features = 64;    // i
    std::size_t query_features = 16;    // l
    std::size_t context_features = 32;  // d, per context stream
    std::size_t embedding_width = 4;
    std::size_t task_vocab = 3;
    std::size_t color_vocab = 7;
    std::size_t shape_vocab = 6;

    std::size_t feature_size() const { return image_features + query_features + 3 * context_features; }
};

// The three context streams, in concatenation order.
enum class Context { inputs = 0, masks = 1, generated = 2 };

// Registers frame (enc.frame*), context (enc.ctx{0,1,2}*) and query
// (enc.query*) parameters. Without `generated_stream` the context stream over
// generated frames (enc.ctx2) is omitted.
void init_encoders(ad::ParameterStore& store, const EncoderConfig& config, Rng& rng,
                   const std::string& prefix = "enc.", bool generated_stream = true);

// Stacks per-frame [C, H, W] Vars into one [C, T, H, W] clip.
ad::Var stack_clip(std::span<const ad::Var> frames);
// [T, C, H, W] tensor -> [C, T, H, W] tensor.
ad::Tensor to_clip(const ad::Tensor& frames);

class Encoders {
  public:
    explicit Encoders(EncoderConfig config, std::string prefix = "enc.");

    const EncoderConfig& config() const { return config_; }

    // [C, H, W] -> [i].
    ad::Var frame(nn::Binder& params, ad::Var image) const;
    // Clip [C, T, H, W] -> [d] with the stream's own weights. Masks use C = 1.
    ad::Var context(nn::Binder& params, Context stream, ad::Var clip) const;
    // Query ids -> [l]. Throws DomainError for ids outside the vocabularies.
    ad::Var query(nn::Binder& params, const data::Query& q) const;

  private:
    EncoderConfig config_;
    std::string prefix_;
};

// Column t of F is [f_i,t; f_l; f_d]. Stored row-major as `rows` [T, D], so
// row t of `rows` is column t of F.
struct FeatureSequence {
    ad::Var rows;
    std::size_t length = 0;
    std::size_t size = 0;
};

// generated: N frames [C, H, W]; input_frames [M, C, H, W]; input_masks
// [M, 1, H, W].
FeatureSequence assemble_features(nn::Binder& params, const Encoders& encoders,
                                  std::span<const ad::Var> generated, const ad::Tensor& input_frames,
                                  const ad::Tensor& input_masks, const data::Query& query);

}  // namespace pipsim::enc
