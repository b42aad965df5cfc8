#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tape records every operation applied to its Vars in execution order;
// Tape::backward walks the records in exact reverse order and accumulates
// adjoints. Trainable parameters live outside the tape (ParameterStore) and
// receive their gradients when a backward pass reaches the leaf that wraps
// them. One tape is one single-threaded unit of work.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pipsim/errors.hpp"

namespace pipsim::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    bool empty() const { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double item() const;
    bool all_finite() const;
};

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad();
};

// Owns parameters at stable addresses, in registration order. Registration
// order is the checkpoint order and the optimizer order.
class ParameterStore {
  public:
    Parameter& add(std::string name, Tensor init);
    Parameter& get(std::string_view name);
    const Parameter& get(std::string_view name) const;
    const Parameter* find(std::string_view name) const;
    bool contains(std::string_view name) const { return find(name) != nullptr; }

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::size_t count() const { return params_.size(); }
    std::size_t total_size() const;

    void zero_grad();

  private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
  public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t size() const { return value().size(); }
    double item() const { return value().item(); }
    // Adjoint after backward; empty tensor if the node received none.
    const Tensor& grad() const;

    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

  private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
  public:
    // Receives the tape and the id of the node whose adjoint is being propagated.
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Non-differentiable input.
    Var constant(Tensor value);
    // Differentiable input whose gradient stays on the tape (read via Var::grad).
    Var variable(Tensor value);
    // Differentiable input bound to a parameter; backward adds into param.grad.
    Var leaf(Parameter& param);

    // Records an op output. `inputs` decide whether the node needs a gradient;
    // `fn` runs during backward only when it does. Throws NumericError if
    // `value` holds a NaN or Inf.
    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn);

    // Populates adjoints of every node reachable from `loss` (numel 1).
    // Parameter gradients accumulate across calls; the caller resets them.
    void backward(Var loss);

    const Tensor& value(Var v) const { return node(v).value; }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(Var v) const { return node(v).needs_grad; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    // Adjoint buffer of a node, allocated as zeros on first access.
    Tensor& grad(std::size_t id);
    Tensor& grad(Var v) { return grad(v.id()); }
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    enum class Kind { constant, variable, parameter, op };
    struct Node {
        Kind kind = Kind::constant;
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Parameter* param = nullptr;
        BackwardFn backward;
    };

    const Node& node(Var v) const;
    Var push(Node n);

    std::deque<Node> nodes_;
};

// ---- dense ops ---------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

// Binary elementwise ops require equal shapes, except that either side may be
// a single-element tensor (scalar-tensor broadcast).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var sigmoid(Var a);
Var tanh(Var a);
Var leaky_relu(Var a, double slope = 0.2);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);

// Sequence ops over the flattened tensor.
Var softmax(Var v);
Var cumsum(Var v);
Var reverse(Var v);

// Concatenation and slicing along the leading axis.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
Var slice(Var a, std::size_t begin, std::size_t end);

// Copies the value onto the tape as a constant; gradients stop here.
Var stop_gradient(Var a);

// y = W x + b for x of shape [in] (or [in,1]); W is [out, in], b is [out].
Var linear(Var x, Var weight, Var bias);
// Row `index` of a [rows, cols] table, as a [cols] vector.
Var embedding(Var table, std::size_t index);
// Mean over every axis except the leading (channel) axis.
Var global_avg_pool(Var x);

// ---- convolution -------------------------------------------------------

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct Conv3dOptions {
    std::size_t stride_t = 1, stride_h = 1, stride_w = 1;
    std::size_t pad_t = 0, pad_h = 0, pad_w = 0;
};

// Cross-correlation. input [C_in, H, W], weight [C_out, C_in, kH, kW],
// bias [C_out] or an invalid Var for none.
Var conv2d(Var input, Var weight, Var bias, Conv2dOptions opt = {});

// Adjoint of conv2d with respect to its input. input [C_in, H, W], weight
// [C_in, C_out, kH, kW] (the conv2d weight read with its two leading axes
// swapped). Output extent defaults to (H-1)*stride - 2*pad + k; pass
// out_h/out_w to pick another extent that conv2d maps back onto H, W.
Var conv_transpose2d(Var input, Var weight, Var bias, Conv2dOptions opt = {}, std::size_t out_h = 0,
                     std::size_t out_w = 0);

// input [C_in, T, H, W], weight [C_out, C_in, kT, kH, kW].
Var conv3d(Var input, Var weight, Var bias, Conv3dOptions opt = {});

// ---- losses and divergences --------------------------------------------

inline constexpr double kBceClamp = 1e-7;
inline constexpr double kPsnrCap = 100.0;
inline constexpr double kPsnrMinMse = 1e-10;

// Binary cross-entropy of a probability against a {0,1} label. The
// probability is clamped to [1e-7, 1-1e-7]; inside the clamp region the
// gradient is zero.
Var bce_loss(Var p, double label);

// 10 log10(max_val^2 / MSE). Returns the 100 dB cap with zero gradient when
// MSE < 1e-10.
Var psnr(Var a, Var b, double max_val = 1.0);
Var psnr_loss(Var a, Var b, double max_val = 1.0);
double psnr_value(const Tensor& a, const Tensor& b, double max_val = 1.0);

// H(mean_i P_i) - mean_i H(P_i) in nats, uniform weights, 0 ln 0 = 0.
Var generalized_jsd(std::span<const Var> distributions);
Var generalized_jsd(std::initializer_list<Var> distributions);

// ---- optimizer -----------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 1e-3;
};

AdamState make_adam(std::span<Parameter* const> params, double lr = 1e-3);

// One bias-corrected Adam update from the gradients stored on the params.
// Throws NumericError naming the first parameter whose gradient is not finite.
void adam_step(std::span<Parameter* const> params, AdamState& state);

}  // namespace pipsim::ad
