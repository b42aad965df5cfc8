#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ad_internal.hpp"
#include "pipsim/autodiff.hpp"

namespace pipsim::ad {

using namespace detail;

namespace {

enum class Broadcast { none, left_scalar, right_scalar };

Broadcast check_binary(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) {
        return Broadcast::none;
    }
    if (a.size() == 1) {
        return Broadcast::left_scalar;
    }
    if (b.size() == 1) {
        return Broadcast::right_scalar;
    }
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Elementwise binary driver. `f` is the value; `dfa`/`dfb` are the partials
// evaluated from (a, b, out) at one element.
template <typename F, typename DA, typename DB>
Var binary(std::string_view op, Var a, Var b, F f, DA dfa, DB dfb) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Broadcast bc = check_binary(op, av, bv);
    Tensor out(bc == Broadcast::left_scalar ? bv.shape : av.shape);
    const std::size_t sa = bc == Broadcast::left_scalar ? 0 : 1;
    const std::size_t sb = bc == Broadcast::right_scalar ? 0 : 1;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(av[i * sa], bv[i * sb]);
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return t.record(op, std::move(out), {a, b}, [ia, ib, sa, sb, dfa, dfb](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        const Tensor& ov = tp.value(o);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i * sa] += g[i] * dfa(av[i * sa], bv[i * sb], ov[i]);
            }
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i * sb] += g[i] * dfb(av[i * sa], bv[i * sb], ov[i]);
            }
        }
    });
}

// Elementwise unary driver; `df` maps (x, y) to dy/dx.
template <typename F, typename DF>
Var unary(std::string_view op, Var a, F f, DF df) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(av[i]);
    }
    const std::size_t ia = a.id();
    return t.record(op, std::move(out), {a}, [ia, df](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(o);
        Tensor& gx = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * df(x[i], y[i]);
        }
    });
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape));
    }
}

void require_nonempty(std::string_view op, const Tensor& t) {
    if (t.empty()) {
        throw ShapeError(std::string(op) + ": empty input");
    }
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape));
    }
    const auto m = static_cast<Eigen::Index>(av.dim(0));
    const auto k = static_cast<Eigen::Index>(av.dim(1));
    const auto n = static_cast<Eigen::Index>(bv.dim(1));
    Tensor out(Shape{av.dim(0), bv.dim(1)});
    {
        const Aligned al(av);
        const Aligned bl(bv);
        MapMat(out.data.data(), m, n).noalias() = ConstMapMat(al.get(), m, k) * ConstMapMat(bl.get(), k, n);
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return t.record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Tape& tp, std::size_t o) {
        const Aligned gl(tp.grad(o));
        ConstMapMat g(gl.get(), m, n);
        if (tp.needs_grad(ia)) {
            const Aligned bl(tp.value(ib));
            MapMat(tp.grad(ia).data.data(), m, k).noalias() += g * ConstMapMat(bl.get(), k, n).transpose();
        }
        if (tp.needs_grad(ib)) {
            const Aligned al(tp.value(ia));
            MapMat(tp.grad(ib).data.data(), k, n).noalias() += ConstMapMat(al.get(), m, k).transpose() * g;
        }
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_rank("transpose", av, 2);
    const auto r = static_cast<Eigen::Index>(av.dim(0));
    const auto c = static_cast<Eigen::Index>(av.dim(1));
    Tensor out(Shape{av.dim(1), av.dim(0)});
    MapMat(out.data.data(), c, r) = ConstMapMat(av.data.data(), r, c).transpose();
    const std::size_t ia = a.id();
    return t.record("transpose", std::move(out), {a}, [ia, r, c](Tape& tp, std::size_t o) {
        MapMat(tp.grad(ia).data.data(), r, c) += ConstMapMat(tp.grad(o).data.data(), c, r).transpose();
    });
}

Var reshape(Var a, Shape shape) {
    Tape& t = tape_of(a);
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), a.value().data);
    const std::size_t ia = a.id();
    return t.record("reshape", std::move(out), {a},
                    [ia](Tape& tp, std::size_t o) { add_into(tp.grad(ia), tp.grad(o)); });
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
    for (double d : b.value().data) {
        if (std::abs(d) < 1e-300) {
            throw NumericError("div: denominator magnitude below 1e-300");
        }
    }
    return binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double x, double y, double) { return -x / (y * y); });
}

Var scale(Var a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
    return unary(
        "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var sigmoid(Var a) {
    return unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
    return unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var leaky_relu(Var a, double slope) {
    return unary(
        "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var square(Var a) {
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double x : a.value().data) {
        s += x;
    }
    const std::size_t ia = a.id();
    return t.record("sum", Tensor::scalar(s), {a}, [ia](Tape& tp, std::size_t o) {
        const double g = tp.grad(o)[0];
        for (double& x : tp.grad(ia).data) {
            x += g;
        }
    });
}

Var mean(Var a) {
    require_nonempty("mean", a.value());
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var dot(Var a, Var b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += av[i] * bv[i];
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return t.record("dot", Tensor::scalar(s), {a, b}, [ia, ib](Tape& tp, std::size_t o) {
        const double g = tp.grad(o)[0];
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad(ia);
            const Tensor& bv = tp.value(ib);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += g * bv[i];
            }
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad(ib);
            const Tensor& av = tp.value(ia);
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] += g * av[i];
            }
        }
    });
}

// ---- sequence ops ---------------------------------------------------------

Var softmax(Var v) {
    Tape& t = tape_of(v);
    const Tensor& x = v.value();
    require_nonempty("softmax", x);
    const double mx = *std::max_element(x.data.begin(), x.data.end());
    Tensor out(x.shape);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (double& y : out.data) {
        y /= z;
    }
    const std::size_t iv = v.id();
    return t.record("softmax", std::move(out), {v}, [iv](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        const Tensor& y = tp.value(o);
        double gy = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            gy += g[i] * y[i];
        }
        Tensor& gx = tp.grad(iv);
        for (std::size_t i = 0; i < y.size(); ++i) {
            gx[i] += y[i] * (g[i] - gy);
        }
    });
}

Var cumsum(Var v) {
    Tape& t = tape_of(v);
    const Tensor& x = v.value();
    Tensor out(x.shape);
    double run = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        run += x[i];
        out[i] = run;
    }
    const std::size_t iv = v.id();
    return t.record("cumsum", std::move(out), {v}, [iv](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(iv);
        double run = 0.0;
        for (std::size_t i = g.size(); i-- > 0;) {
            run += g[i];
            gx[i] += run;
        }
    });
}

Var reverse(Var v) {
    Tape& t = tape_of(v);
    const Tensor& x = v.value();
    Tensor out(x.shape, std::vector<double>(x.data.rbegin(), x.data.rend()));
    const std::size_t iv = v.id();
    return t.record("reverse", std::move(out), {v}, [iv](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(iv);
        const std::size_t n = g.size();
        for (std::size_t i = 0; i < n; ++i) {
            gx[i] += g[n - 1 - i];
        }
    });
}

// ---- structural -----------------------------------------------------------

Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    Tape& t = tape_of(parts.front());
    const Shape& first = parts.front().shape();
    if (first.empty()) {
        throw ShapeError("concat: rank-0 input");
    }
    Shape out_shape = first;
    out_shape[0] = 0;
    std::vector<double> data;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        const Tensor& v = tape_of(p, parts.front()).value(p);
        if (v.rank() != first.size() || !std::equal(v.shape.begin() + 1, v.shape.end(), first.begin() + 1)) {
            throw ShapeError("concat: trailing shape mismatch " + shape_str(first) + " vs " + shape_str(v.shape));
        }
        out_shape[0] += v.dim(0);
        offsets.push_back(data.size());
        ids.push_back(p.id());
        data.insert(data.end(), v.data.begin(), v.data.end());
    }
    Tensor out(std::move(out_shape), std::move(data));
    return t.record("concat", std::move(out), parts, [ids, offsets](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.needs_grad(ids[k])) {
                continue;
            }
            Tensor& gp = tp.grad(ids[k]);
            for (std::size_t i = 0; i < gp.size(); ++i) {
                gp[i] += g[offsets[k] + i];
            }
        }
    });
}

Var slice(Var a, std::size_t begin, std::size_t end) {
    Tape& t = tape_of(a);
    const Tensor& v = a.value();
    if (v.rank() == 0 || begin >= end || end > v.dim(0)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                         shape_str(v.shape));
    }
    const std::size_t stride = v.size() / v.dim(0);
    Shape s = v.shape;
    s[0] = end - begin;
    Tensor out(std::move(s), std::vector<double>(v.data.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                 v.data.begin() + static_cast<std::ptrdiff_t>(end * stride)));
    const std::size_t ia = a.id();
    const std::size_t off = begin * stride;
    return t.record("slice", std::move(out), {a}, [ia, off](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        Tensor& ga = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[off + i] += g[i];
        }
    });
}

Var stop_gradient(Var a) { return tape_of(a).constant(a.value()); }

Var linear(Var x, Var weight, Var bias) {
    Tape& t = tape_of(x, weight);
    const Tensor& w = weight.value();
    require_rank("linear", w, 2);
    const std::size_t out_dim = w.dim(0);
    const std::size_t in_dim = w.dim(1);
    if (x.size() != in_dim) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape));
    }
    if (bias.valid() && bias.size() != out_dim) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape));
    }
    Tensor out(Shape{out_dim});
    const auto ro = static_cast<Eigen::Index>(out_dim);
    const auto ri = static_cast<Eigen::Index>(in_dim);
    {
        const Aligned wl(w);
        const Aligned xl(x.value());
        MapVec(out.data.data(), ro).noalias() = ConstMapMat(wl.get(), ro, ri) * ConstMapVec(xl.get(), ri);
    }
    if (bias.valid()) {
        tape_of(x, bias);
        add_into(out, bias.value());
    }
    const std::size_t ix = x.id();
    const std::size_t iw = weight.id();
    const bool has_bias = bias.valid();
    const std::size_t ib = has_bias ? bias.id() : 0;
    const std::initializer_list<Var> ins = {x, weight, has_bias ? bias : weight};
    return t.record("linear", std::move(out), ins, [ix, iw, ib, has_bias, ro, ri](Tape& tp, std::size_t o) {
        const Aligned gl(tp.grad(o));
        ConstMapVec g(gl.get(), ro);
        if (tp.needs_grad(ix)) {
            const Aligned wl(tp.value(iw));
            MapVec(tp.grad(ix).data.data(), ri).noalias() += ConstMapMat(wl.get(), ro, ri).transpose() * g;
        }
        if (tp.needs_grad(iw)) {
            const Aligned xl(tp.value(ix));
            MapMat(tp.grad(iw).data.data(), ro, ri).noalias() += g * ConstMapVec(xl.get(), ri).transpose();
        }
        if (has_bias && tp.needs_grad(ib)) {
            MapVec(tp.grad(ib).data.data(), ro) += g;
        }
    });
}

Var embedding(Var table, std::size_t index) {
    const Tensor& tv = table.value();
    require_rank("embedding", tv, 2);
    if (index >= tv.dim(0)) {
        throw DomainError("embedding: index " + std::to_string(index) + " outside vocabulary of " +
                          std::to_string(tv.dim(0)));
    }
    return reshape(slice(table, index, index + 1), Shape{tv.dim(1)});
}

Var global_avg_pool(Var x) {
    Tape& t = tape_of(x);
    const Tensor& v = x.value();
    if (v.rank() < 2) {
        throw ShapeError("global_avg_pool: expected [C, ...], got " + shape_str(v.shape));
    }
    const std::size_t c = v.dim(0);
    const std::size_t inner = v.size() / c;
    Tensor out(Shape{c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
            s += v[ch * inner + i];
        }
        out[ch] = s / static_cast<double>(inner);
    }
    const std::size_t ixd = x.id();
    return t.record("global_avg_pool", std::move(out), {x}, [ixd, c, inner](Tape& tp, std::size_t o) {
        const Tensor& g = tp.grad(o);
        Tensor& gx = tp.grad(ixd);
        const double inv = 1.0 / static_cast<double>(inner);
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < inner; ++i) {
                gx[ch * inner + i] += g[ch] * inv;
            }
        }
    });
}

}  // namespace pipsim::ad
