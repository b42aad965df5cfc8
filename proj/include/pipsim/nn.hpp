#pragma once

// Layer parameter helpers shared by the simulator, encoders and heads.

#include <string>
#include <unordered_map>

#include "pipsim/autodiff.hpp"
#include "pipsim/blob.hpp"
#include "pipsim/rng.hpp"

namespace pipsim::nn {

ad::Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng);

// He-uniform for leaky-ReLU(0.2) layers; bound scaled by `gain`.
double he_bound(std::size_t fan_in, double gain = 1.0);

// name.w [cout, cin, k, k], name.b [cout].
void add_conv2d(ad::ParameterStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                Rng& rng, double gain = 1.0);
// name.w [cin, cout, k, k] (transposed layout), name.b [cout].
void add_conv_transpose2d(ad::ParameterStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                          std::size_t k, std::size_t stride, Rng& rng, double gain = 1.0);
// name.w [cout, cin, kt, k, k], name.b [cout].
void add_conv3d(ad::ParameterStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t kt,
                std::size_t k, Rng& rng, double gain = 1.0);
// name.w [out, in], name.b [out].
void add_linear(ad::ParameterStore& store, const std::string& name, std::size_t out, std::size_t in, Rng& rng,
                double gain = 1.0);

// Puts parameters on a tape once per forward pass. A frozen binder hands out
// constants, so nothing upstream of it receives gradients.
class Binder {
  public:
    Binder(ad::Tape& tape, ad::ParameterStore& store, bool trainable = true)
        : tape_(&tape), store_(&store), trainable_(trainable) {}

    ad::Var operator()(const std::string& name);
    ad::Tape& tape() const { return *tape_; }
    ad::ParameterStore& store() const { return *store_; }
    bool trainable() const { return trainable_; }

  private:
    ad::Tape* tape_;
    ad::ParameterStore* store_;
    bool trainable_;
    std::unordered_map<std::string, ad::Var> cache_;
};

// Parameters whose name starts with prefix, in registration order.
std::vector<ad::Parameter*> with_prefix(ad::ParameterStore& store, std::string_view prefix);

io::Checkpoint to_checkpoint(const ad::ParameterStore& store, std::string metadata);

// Copies stored arrays into matching parameters. Every parameter of the store
// whose name starts with one of `prefixes` must be present with the same
// shape, otherwise FormatError. An empty prefix list means all parameters.
void load_checkpoint(ad::ParameterStore& store, const io::Checkpoint& checkpoint,
                     const std::vector<std::string>& prefixes = {});

// Leading-axis slice of a plain tensor: item k of a [K, ...] tensor.
ad::Tensor take(const ad::Tensor& t, std::size_t k);

}  // namespace pipsim::nn
