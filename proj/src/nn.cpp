#include "pipsim/nn.hpp"

#include <algorithm>
#include <cmath>

#include "pipsim/errors.hpp"

namespace pipsim::nn {

using ad::Shape;
using ad::Tensor;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) {
        v = rng.uniform(-bound, bound);
    }
    return t;
}

double he_bound(std::size_t fan_in, double gain) {
    constexpr double slope = 0.2;
    return gain * std::sqrt(6.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
}

void add_conv2d(ad::ParameterStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                Rng& rng, double gain) {
    store.add(name + ".w", uniform_tensor({cout, cin, k, k}, he_bound(cin * k * k, gain), rng));
    store.add(name + ".b", Tensor({cout}));
}

void add_conv_transpose2d(ad::ParameterStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                          std::size_t k, std::size_t stride, Rng& rng, double gain) {
    // Each output pixel sees about cin * (k / stride)^2 inputs.
    const std::size_t taps = std::max<std::size_t>(1, (k / stride) * (k / stride));
    store.add(name + ".w", uniform_tensor({cin, cout, k, k}, he_bound(cin * taps, gain), rng));
    store.add(name + ".b", Tensor({cout}));
}

void add_conv3d(ad::ParameterStore& store, const std::string& name, std::size_t cout, std::size_t cin, std::size_t kt,
                std::size_t k, Rng& rng, double gain) {
    store.add(name + ".w", uniform_tensor({cout, cin, kt, k, k}, he_bound(cin * kt * k * k, gain), rng));
    store.add(name + ".b", Tensor({cout}));
}

void add_linear(ad::ParameterStore& store, const std::string& name, std::size_t out, std::size_t in, Rng& rng,
                double gain) {
    store.add(name + ".w", uniform_tensor({out, in}, he_bound(in, gain), rng));
    store.add(name + ".b", Tensor({out}));
}

ad::Var Binder::operator()(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) {
        return it->second;
    }
    ad::Parameter& p = store_->get(name);
    ad::Var v = trainable_ ? tape_->leaf(p) : tape_->constant(p.value);
    cache_.emplace(name, v);
    return v;
}

std::vector<ad::Parameter*> with_prefix(ad::ParameterStore& store, std::string_view prefix) {
    std::vector<ad::Parameter*> out;
    for (ad::Parameter* p : store.all()) {
        if (p->name.starts_with(prefix)) {
            out.push_back(p);
        }
    }
    return out;
}

io::Checkpoint to_checkpoint(const ad::ParameterStore& store, std::string metadata) {
    io::Checkpoint ck;
    ck.metadata = std::move(metadata);
    for (const ad::Parameter* p : store.all()) {
        io::NamedArray a;
        a.name = p->name;
        for (std::size_t d : p->value.shape) {
            a.shape.push_back(static_cast<std::int64_t>(d));
        }
        a.data = p->value.data;
        ck.arrays.push_back(std::move(a));
    }
    return ck;
}

void load_checkpoint(ad::ParameterStore& store, const io::Checkpoint& checkpoint,
                     const std::vector<std::string>& prefixes) {
    for (ad::Parameter* p : store.all()) {
        const bool wanted = prefixes.empty() || std::any_of(prefixes.begin(), prefixes.end(), [&](const auto& pre) {
                                return p->name.starts_with(pre);
                            });
        if (!wanted) {
            continue;
        }
        const io::NamedArray* a = checkpoint.find(p->name);
        if (a == nullptr) {
            throw FormatError("checkpoint lacks parameter '" + p->name + "'");
        }
        Shape shape;
        for (std::int64_t d : a->shape) {
            shape.push_back(static_cast<std::size_t>(d));
        }
        if (shape != p->value.shape) {
            throw FormatError("checkpoint parameter '" + p->name + "' has shape " + ad::shape_str(shape) +
                              ", model expects " + ad::shape_str(p->value.shape));
        }
        p->value.data = a->data;
    }
}

Tensor take(const Tensor& t, std::size_t k) {
    if (t.rank() < 2 || k >= t.dim(0)) {
        throw ShapeError("take: index " + std::to_string(k) + " outside " + ad::shape_str(t.shape));
    }
    Shape inner(t.shape.begin() + 1, t.shape.end());
    const std::size_t n = ad::numel(inner);
    Tensor out(inner);
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(k * n),
              t.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * n), out.data.begin());
    return out;
}

}  // namespace pipsim::nn
