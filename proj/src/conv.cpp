#include <string>
#include <vector>

#include "ad_internal.hpp"
#include "pipsim/autodiff.hpp"

namespace pipsim::ad {

using namespace detail;

namespace {

// Cross-correlation geometry over a [cin, d, h, w] input. 2D convolutions use
// d = kd = 1.
struct Geometry {
    std::size_t cin = 0, d = 1, h = 0, w = 0;
    std::size_t kd = 1, kh = 0, kw = 0;
    std::size_t sd = 1, sh = 1, sw = 1;
    std::size_t pd = 0, ph = 0, pw = 0;
    std::size_t od = 1, oh = 0, ow = 0;

    std::size_t rows() const { return cin * kd * kh * kw; }
    std::size_t cols() const { return od * oh * ow; }
};

std::size_t out_extent(std::string_view op, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (stride == 0) {
        throw ShapeError(std::string(op) + ": stride must be positive");
    }
    if (in + 2 * pad < k) {
        throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                         std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

void finish(std::string_view op, Geometry& g) {
    g.od = out_extent(op, g.d, g.kd, g.sd, g.pd);
    g.oh = out_extent(op, g.h, g.kh, g.sh, g.ph);
    g.ow = out_extent(op, g.w, g.kw, g.sw, g.pw);
}

// cols[row, col] with row = (c, kt, ky, kx) and col = (ot, oy, ox).
void im2col(const double* x, const Geometry& g, double* cols) {
    const std::size_t n_cols = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t kt = 0; kt < g.kd; ++kt) {
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const std::size_t row = ((c * g.kd + kt) * g.kh + ky) * g.kw + kx;
                    double* dst = cols + row * n_cols;
                    for (std::size_t ot = 0; ot < g.od; ++ot) {
                        const auto it = static_cast<std::ptrdiff_t>(ot * g.sd + kt) - static_cast<std::ptrdiff_t>(g.pd);
                        for (std::size_t oy = 0; oy < g.oh; ++oy) {
                            const auto iy =
                                static_cast<std::ptrdiff_t>(oy * g.sh + ky) - static_cast<std::ptrdiff_t>(g.ph);
                            double* drow = dst + (ot * g.oh + oy) * g.ow;
                            const bool row_in = it >= 0 && it < static_cast<std::ptrdiff_t>(g.d) && iy >= 0 &&
                                                iy < static_cast<std::ptrdiff_t>(g.h);
                            if (!row_in) {
                                std::fill(drow, drow + g.ow, 0.0);
                                continue;
                            }
                            const double* src = x + ((c * g.d + static_cast<std::size_t>(it)) * g.h +
                                                     static_cast<std::size_t>(iy)) * g.w;
                            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                                const auto ix =
                                    static_cast<std::ptrdiff_t>(ox * g.sw + kx) - static_cast<std::ptrdiff_t>(g.pw);
                                drow[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
                                               ? src[static_cast<std::size_t>(ix)]
                                               : 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters-and-adds cols back onto x.
void col2im(const double* cols, const Geometry& g, double* x) {
    const std::size_t n_cols = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t kt = 0; kt < g.kd; ++kt) {
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
                for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    const std::size_t row = ((c * g.kd + kt) * g.kh + ky) * g.kw + kx;
                    const double* srcrow = cols + row * n_cols;
                    for (std::size_t ot = 0; ot < g.od; ++ot) {
                        const auto it = static_cast<std::ptrdiff_t>(ot * g.sd + kt) - static_cast<std::ptrdiff_t>(g.pd);
                        if (it < 0 || it >= static_cast<std::ptrdiff_t>(g.d)) {
                            continue;
                        }
                        for (std::size_t oy = 0; oy < g.oh; ++oy) {
                            const auto iy =
                                static_cast<std::ptrdiff_t>(oy * g.sh + ky) - static_cast<std::ptrdiff_t>(g.ph);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                                continue;
                            }
                            const double* s = srcrow + (ot * g.oh + oy) * g.ow;
                            double* dst = x + ((c * g.d + static_cast<std::size_t>(it)) * g.h +
                                               static_cast<std::size_t>(iy)) * g.w;
                            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                                const auto ix =
                                    static_cast<std::ptrdiff_t>(ox * g.sw + kx) - static_cast<std::ptrdiff_t>(g.pw);
                                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) {
                                    dst[static_cast<std::size_t>(ix)] += s[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void check_bias(std::string_view op, Var bias, std::size_t channels) {
    if (bias.valid() && bias.size() != channels) {
        throw ShapeError(std::string(op) + ": bias " + shape_str(bias.shape()) + " expected " +
                         std::to_string(channels) + " entries");
    }
}

// Shared forward/backward for conv2d and conv3d.
Var correlate(std::string_view op, Var input, Var weight, Var bias, const Geometry& g, std::size_t cout,
              Shape out_shape) {
    Tape& t = tape_of(input, weight);
    check_bias(op, bias, cout);
    const auto K = static_cast<Eigen::Index>(g.rows());
    const auto P = static_cast<Eigen::Index>(g.cols());
    const auto C = static_cast<Eigen::Index>(cout);
    AlignedBuffer cols(g.rows() * g.cols());
    im2col(input.value().data.data(), g, cols.data());
    Tensor out(std::move(out_shape));
    MapMat om(out.data.data(), C, P);
    {
        const Aligned wl(weight.value());
        om.noalias() = ConstMapMat(wl.get(), C, K) * ConstMapMat(cols.data(), K, P);
    }
    if (bias.valid()) {
        tape_of(input, bias);
        om.colwise() += ConstMapVec(bias.value().data.data(), C);
    }
    const std::size_t ii = input.id();
    const std::size_t iw = weight.id();
    const bool has_bias = bias.valid();
    const std::size_t ib = has_bias ? bias.id() : 0;
    const std::initializer_list<Var> ins = {input, weight, has_bias ? bias : weight};
    return t.record(op, std::move(out), ins, [g, ii, iw, ib, has_bias, K, P, C](Tape& tp, std::size_t o) {
        const Aligned gl(tp.grad(o));
        const Aligned wl(tp.value(iw));
        ConstMapMat gout(gl.get(), C, P);
        ConstMapMat wm(wl.get(), C, K);
        if (tp.needs_grad(iw)) {
            AlignedBuffer cols(g.rows() * g.cols());
            im2col(tp.value(ii).data.data(), g, cols.data());
            MapMat(tp.grad(iw).data.data(), C, K).noalias() += gout * ConstMapMat(cols.data(), K, P).transpose();
        }
        if (has_bias && tp.needs_grad(ib)) {
            Tensor& gb = tp.grad(ib);
            for (Eigen::Index c = 0; c < C; ++c) {
                double s = 0.0;
                for (Eigen::Index p = 0; p < P; ++p) {
                    s += gout(c, p);
                }
                gb[static_cast<std::size_t>(c)] += s;
            }
        }
        if (tp.needs_grad(ii)) {
            AlignedBuffer dcols(g.rows() * g.cols());
            MapMat(dcols.data(), K, P).noalias() = wm.transpose() * gout;
            col2im(dcols.data(), g, tp.grad(ii).data.data());
        }
    });
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, Conv2dOptions opt) {
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape) + " incompatible with weight " + shape_str(w.shape));
    }
    Geometry g;
    g.cin = x.dim(0);
    g.h = x.dim(1);
    g.w = x.dim(2);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.sh = g.sw = opt.stride;
    g.ph = g.pw = opt.padding;
    finish("conv2d", g);
    return correlate("conv2d", input, weight, bias, g, w.dim(0), Shape{w.dim(0), g.oh, g.ow});
}

Var conv3d(Var input, Var weight, Var bias, Conv3dOptions opt) {
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    if (x.rank() != 4 || w.rank() != 5 || w.dim(1) != x.dim(0)) {
        throw ShapeError("conv3d: input " + shape_str(x.shape) + " incompatible with weight " + shape_str(w.shape));
    }
    Geometry g;
    g.cin = x.dim(0);
    g.d = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.kd = w.dim(2);
    g.kh = w.dim(3);
    g.kw = w.dim(4);
    g.sd = opt.stride_t;
    g.sh = opt.stride_h;
    g.sw = opt.stride_w;
    g.pd = opt.pad_t;
    g.ph = opt.pad_h;
    g.pw = opt.pad_w;
    finish("conv3d", g);
    return correlate("conv3d", input, weight, bias, g, w.dim(0), Shape{w.dim(0), g.od, g.oh, g.ow});
}

Var conv_transpose2d(Var input, Var weight, Var bias, Conv2dOptions opt, std::size_t out_h, std::size_t out_w) {
    Tape& t = tape_of(input, weight);
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != x.dim(0)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(x.shape) + " incompatible with weight " +
                         shape_str(w.shape));
    }
    if (opt.stride == 0) {
        throw ShapeError("conv_transpose2d: stride must be positive");
    }
    const std::size_t cin_t = x.dim(0);
    const std::size_t cout_t = w.dim(1);
    const std::size_t k_h = w.dim(2);
    const std::size_t k_w = w.dim(3);
    auto default_extent = [&](std::size_t in, std::size_t k) -> std::size_t {
        const auto e = static_cast<long long>((in - 1) * opt.stride + k) - 2 * static_cast<long long>(opt.padding);
        if (e <= 0) {
            throw ShapeError("conv_transpose2d: non-positive output extent");
        }
        return static_cast<std::size_t>(e);
    };
    // The geometry is that of the forward convolution this op is adjoint to:
    // it maps [cout_t, out_h, out_w] onto [cin_t, H, W].
    Geometry g;
    g.cin = cout_t;
    g.h = out_h != 0 ? out_h : default_extent(x.dim(1), k_h);
    g.w = out_w != 0 ? out_w : default_extent(x.dim(2), k_w);
    g.kh = k_h;
    g.kw = k_w;
    g.sh = g.sw = opt.stride;
    g.ph = g.pw = opt.padding;
    finish("conv_transpose2d", g);
    if (g.oh != x.dim(1) || g.ow != x.dim(2)) {
        throw ShapeError("conv_transpose2d: requested output " + std::to_string(g.h) + "x" + std::to_string(g.w) +
                         " does not map back onto input " + shape_str(x.shape));
    }
    check_bias("conv_transpose2d", bias, cout_t);

    const auto K = static_cast<Eigen::Index>(g.rows());
    const auto P = static_cast<Eigen::Index>(g.cols());
    const auto C = static_cast<Eigen::Index>(cin_t);
    AlignedBuffer cols(g.rows() * g.cols());
    {
        const Aligned wl(w);
        const Aligned xl(x);
        MapMat(cols.data(), K, P).noalias() = ConstMapMat(wl.get(), C, K).transpose() * ConstMapMat(xl.get(), C, P);
    }
    Tensor out(Shape{cout_t, g.h, g.w});
    col2im(cols.data(), g, out.data.data());
    if (bias.valid()) {
        tape_of(input, bias);
        const std::size_t plane = g.h * g.w;
        for (std::size_t c = 0; c < cout_t; ++c) {
            const double b = bias.value()[c];
            for (std::size_t i = 0; i < plane; ++i) {
                out[c * plane + i] += b;
            }
        }
    }
    const std::size_t ii = input.id();
    const std::size_t iw = weight.id();
    const bool has_bias = bias.valid();
    const std::size_t ib = has_bias ? bias.id() : 0;
    const std::initializer_list<Var> ins = {input, weight, has_bias ? bias : weight};
    return t.record("conv_transpose2d", std::move(out), ins,
                    [g, ii, iw, ib, has_bias, K, P, C, cout_t](Tape& tp, std::size_t o) {
                        const Tensor& gout = tp.grad(o);
                        AlignedBuffer gcols(g.rows() * g.cols());
                        im2col(gout.data.data(), g, gcols.data());
                        ConstMapMat gc(gcols.data(), K, P);
                        if (tp.needs_grad(ii)) {
                            const Aligned wl(tp.value(iw));
                            MapMat(tp.grad(ii).data.data(), C, P).noalias() += ConstMapMat(wl.get(), C, K) * gc;
                        }
                        if (tp.needs_grad(iw)) {
                            const Aligned xl(tp.value(ii));
                            MapMat(tp.grad(iw).data.data(), C, K).noalias() +=
                                ConstMapMat(xl.get(), C, P) * gc.transpose();
                        }
                        if (has_bias && tp.needs_grad(ib)) {
                            Tensor& gb = tp.grad(ib);
                            const std::size_t plane = g.h * g.w;
                            for (std::size_t c = 0; c < cout_t; ++c) {
                                double s = 0.0;
                                for (std::size_t i = 0; i < plane; ++i) {
                                    s += gout[c * plane + i];
                                }
                                gb[c] += s;
                            }
                        }
                    });
}

}  // namespace pipsim::ad
