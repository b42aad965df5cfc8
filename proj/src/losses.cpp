#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ad_internal.hpp"
#include "pipsim/autodiff.hpp"

namespace pipsim::ad {

using namespace detail;

Var bce_loss(Var p, double label) {
    if (label != 0.0 && label != 1.0) {
        throw DomainError("bce_loss: label must be 0 or 1, got " + std::to_string(label));
    }
    Tape& t = tape_of(p);
    const double pv = p.item();
    const double pc = std::clamp(pv, kBceClamp, 1.0 - kBceClamp);
    const double loss = -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
    const std::size_t ip = p.id();
    const bool clamped = pv != pc;
    return t.record("bce_loss", Tensor::scalar(loss), {p}, [ip, pv, label, clamped](Tape& tp, std::size_t o) {
        if (clamped) {
            return;
        }
        tp.grad(ip)[0] += tp.grad(o)[0] * (pv - label) / (pv * (1.0 - pv));
    });
}

double psnr_value(const Tensor& a, const Tensor& b, double max_val) {
    if (a.shape != b.shape) {
        throw ShapeError("psnr: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    if (a.empty()) {
        throw ShapeError("psnr: empty frames");
    }
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse < kPsnrMinMse) {
        return kPsnrCap;
    }
    return 10.0 * std::log10(max_val * max_val / mse);
}

Var psnr(Var a, Var b, double max_val) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const double value = psnr_value(av, bv, max_val);
    double se = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        se += d * d;
    }
    const double n = static_cast<double>(av.size());
    const double mse = se / n;
    const bool capped = mse < kPsnrMinMse;
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return t.record("psnr", Tensor::scalar(value), {a, b}, [ia, ib, mse, n, capped](Tape& tp, std::size_t o) {
        if (capped) {
            return;
        }
        // d psnr / d mse = -10 / (mse ln 10); d mse / d a_i = 2 (a_i - b_i) / n.
        const double coef = tp.grad(o)[0] * (-10.0 / (mse * std::numbers::ln10)) * 2.0 / n;
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad(ia);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += coef * (av[i] - bv[i]);
            }
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad(ib);
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] -= coef * (av[i] - bv[i]);
            }
        }
    });
}

Var psnr_loss(Var a, Var b, double max_val) { return scale(psnr(a, b, max_val), -1.0); }

Var generalized_jsd(std::initializer_list<Var> distributions) {
    return generalized_jsd(std::span<const Var>(distributions.begin(), distributions.size()));
}

Var generalized_jsd(std::span<const Var> distributions) {
    const std::size_t s = distributions.size();
    if (s < 2) {
        throw DomainError("generalized_jsd: needs at least two distributions");
    }
    Tape& t = tape_of(distributions.front());
    const std::size_t n = distributions.front().size();
    std::vector<std::size_t> ids;
    for (const Var& d : distributions) {
        const Tensor& v = tape_of(d, distributions.front()).value(d);
        if (v.size() != n) {
            throw ShapeError("generalized_jsd: length mismatch " + shape_str(distributions.front().shape()) + " vs " +
                             shape_str(v.shape));
        }
        double total = 0.0;
        for (double x : v.data) {
            if (x < 0.0) {
                throw DomainError("generalized_jsd: negative probability");
            }
            total += x;
        }
        if (std::abs(total - 1.0) > 1e-6) {
            throw DomainError("generalized_jsd: distribution sums to " + std::to_string(total));
        }
        ids.push_back(d.id());
    }
    auto plogp = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };
    std::vector<double> mix(n, 0.0);
    double mean_entropy = 0.0;
    for (const Var& d : distributions) {
        const Tensor& v = d.value();
        for (std::size_t i = 0; i < n; ++i) {
            mix[i] += v[i] / static_cast<double>(s);
            mean_entropy -= plogp(v[i]) / static_cast<double>(s);
        }
    }
    double mix_entropy = 0.0;
    for (double m : mix) {
        mix_entropy -= plogp(m);
    }
    const double value = mix_entropy - mean_entropy;
    return t.record("generalized_jsd", Tensor::scalar(value), distributions,
                    [ids, mix = std::move(mix), s](Tape& tp, std::size_t o) {
                        const double g = tp.grad(o)[0];
                        const double inv = 1.0 / static_cast<double>(s);
                        for (std::size_t id : ids) {
                            if (!tp.needs_grad(id)) {
                                continue;
                            }
                            const Tensor& v = tp.value(id);
                            Tensor& gv = tp.grad(id);
                            for (std::size_t i = 0; i < v.size(); ++i) {
                                // d/dp [-m ln m] / S  +  d/dp [p ln p] / S; 0 ln 0 terms contribute nothing.
                                const double dmix = mix[i] > 0.0 ? -(std::log(mix[i]) + 1.0) : 0.0;
                                const double dself = v[i] > 0.0 ? std::log(v[i]) + 1.0 : 0.0;
                                gv[i] += g * inv * (dmix + dself);
                            }
                        }
                    });
}

}  // namespace pipsim::ad
