#include "pipsim/autodiff.hpp"

#include "ad_internal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pipsim::ad {

using detail::add_into;

// ---- Tensor -------------------------------------------------------------

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
        throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(data.size()) +
                         " values");
    }
}

Tensor Tensor::vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
}

double Tensor::item() const {
    if (data.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape));
    }
    return data[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

void Parameter::zero_grad() {
    if (grad.shape != value.shape) {
        grad = Tensor(value.shape);
    } else {
        std::fill(grad.data.begin(), grad.data.end(), 0.0);
    }
}

// ---- ParameterStore -----------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor init) {
    if (find(name) != nullptr) {
        throw ConfigError("duplicate parameter name '" + name + "'");
    }
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->grad = Tensor(init.shape);
    p->value = std::move(init);
    params_.push_back(std::move(p));
    return *params_.back();
}

const Parameter* ParameterStore::find(std::string_view name) const {
    for (const auto& p : params_) {
        if (p->name == name) {
            return p.get();
        }
    }
    return nullptr;
}

Parameter& ParameterStore::get(std::string_view name) {
    return const_cast<Parameter&>(std::as_const(*this).get(name));
}

const Parameter& ParameterStore::get(std::string_view name) const {
    const Parameter* p = find(name);
    if (p == nullptr) {
        throw ConfigError("unknown parameter '" + std::string(name) + "'");
    }
    return *p;
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) {
        out.push_back(p.get());
    }
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
        out.push_back(p.get());
    }
    return out;
}

std::size_t ParameterStore::total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        n += p->value.size();
    }
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) {
        p->zero_grad();
    }
}

// ---- Var / Tape ---------------------------------------------------------

const Tensor& Var::value() const {
    if (tape_ == nullptr) {
        throw Error("value() on an unbound Var");
    }
    return tape_->value(id_);
}

const Tensor& Var::grad() const {
    static const Tensor kEmpty;
    if (tape_ == nullptr || !tape_->has_grad(id_)) {
        return kEmpty;
    }
    return tape_->grad(id_);
}

const Tape::Node& Tape::node(Var v) const {
    if (v.tape() != this) {
        throw Error("Var does not belong to this tape");
    }
    return nodes_[v.id()];
}

Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.kind = Kind::constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::variable(Tensor value) {
    Node n;
    n.kind = Kind::variable;
    n.value = std::move(value);
    n.needs_grad = true;
    return push(std::move(n));
}

Var Tape::leaf(Parameter& param) {
    Node n;
    n.kind = Kind::parameter;
    n.value = param.value;
    n.needs_grad = true;
    n.param = &param;
    return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite value in output " + shape_str(value.shape));
    }
    Node n;
    n.kind = Kind::op;
    n.value = std::move(value);
    for (const Var& in : inputs) {
        if (in.valid() && in.tape() == this && nodes_[in.id()].needs_grad) {
            n.needs_grad = true;
            break;
        }
    }
    if (n.needs_grad) {
        n.backward = std::move(fn);
    }
    return push(std::move(n));
}

Tensor& Tape::grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) {
        n.grad = Tensor(n.value.shape);
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape() != this) {
        throw Error("backward: loss does not belong to this tape");
    }
    if (nodes_[loss.id()].value.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(nodes_[loss.id()].value.shape));
    }
    for (Node& n : nodes_) {
        if (n.kind == Kind::op || n.kind == Kind::parameter) {
            n.grad = Tensor();
        }
    }
    grad(loss.id())[0] += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.kind == Kind::op && n.backward && !n.grad.empty()) {
            n.backward(*this, id);
        }
    }
    for (Node& n : nodes_) {
        if (n.kind == Kind::parameter && !n.grad.empty()) {
            if (n.param->grad.shape != n.param->value.shape) {
                n.param->grad = Tensor(n.param->value.shape);
            }
            add_into(n.param->grad, n.grad);
        }
    }
}

}  // namespace pipsim::ad
