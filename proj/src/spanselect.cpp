#include "pipsim/spanselect.hpp"

#include <cmath>

#include "pipsim/errors.hpp"

namespace pipsim::span {

using ad::Tensor;
using ad::Var;

namespace {

void check_vector(Var v, const char* what) {
    if (v.shape().size() != 1 || v.shape()[0] == 0) {
        throw ShapeError(std::string(what) + " must be a non-empty vector, got " + ad::shape_str(v.shape()));
    }
}

Var column(Var w) { return ad::reshape(w, {ad::numel(w.shape()), 1}); }

}  // namespace

Distributions span_distributions(Var rows, Var w_p, Var w_q) {
    if (rows.shape().size() != 2 || rows.shape()[0] == 0) {
        throw ShapeError("span_distributions: features must be [T, D] with T >= 1, got " +
                         ad::shape_str(rows.shape()));
    }
    const std::size_t t = rows.shape()[0];
    const std::size_t d = rows.shape()[1];
    if (ad::numel(w_p.shape()) != d || ad::numel(w_q.shape()) != d) {
        throw ShapeError("span_distributions: weight size does not match feature size " + std::to_string(d));
    }
    Distributions out;
    out.start = ad::softmax(ad::reshape(ad::matmul(rows, column(w_p)), {t}));
    out.end = ad::softmax(ad::reshape(ad::matmul(rows, column(w_q)), {t}));
    return out;
}

Weights span_weights(Var start, Var end, double eps) {
    check_vector(start, "start distribution");
    check_vector(end, "end distribution");
    if (start.shape() != end.shape()) {
        throw ShapeError("span_weights: start and end lengths differ");
    }
    for (Var v : {start, end}) {
        for (double x : v.value().data) {
            if (x < 0.0) {
                throw DomainError("span_weights: probabilities must be non-negative");
            }
        }
    }
    Weights w;
    w.p = ad::cumsum(start);
    w.q = ad::reverse(ad::cumsum(ad::reverse(end)));
    w.r_tilde = ad::mul(w.p, w.q);
    w.r = ad::div(w.r_tilde, ad::add_scalar(ad::sum(w.r_tilde), eps));
    return w;
}

Var span_representation(Var rows, Var r) {
    check_vector(r, "span weights");
    if (rows.shape().size() != 2 || rows.shape()[0] != r.shape()[0]) {
        throw ShapeError("span_representation: weights of length " + std::to_string(r.shape()[0]) +
                         " against features " + ad::shape_str(rows.shape()));
    }
    const std::size_t t = rows.shape()[0];
    const std::size_t d = rows.shape()[1];
    return ad::reshape(ad::matmul(ad::reshape(r, {1, t}), rows), {d});
}

Classification classify(std::span<const Var> summaries, Var w_z) {
    if (summaries.empty()) {
        throw ShapeError("classify: at least one span is required");
    }
    Classification c;
    for (const Var& m : summaries) {
        c.z.push_back(ad::reshape(ad::dot(m, w_z), {1}));
    }
    c.logit = ad::sum(ad::concat(c.z));
    c.probability = ad::sigmoid(c.logit);
    return c;
}

Var conciseness_penalty(std::span<const Var> weights) {
    if (weights.empty()) {
        throw ShapeError("conciseness_penalty: no spans");
    }
    if (weights.size() == 1) {
        return weights.front().tape()->constant(Tensor({1}));
    }
    std::vector<Var> normalized;
    normalized.reserve(weights.size());
    for (const Var& r : weights) {
        normalized.push_back(ad::div(r, ad::sum(r)));
    }
    return ad::generalized_jsd(normalized);
}

std::vector<double> threshold_profile(std::size_t n) {
    if (n == 0) {
        throw DomainError("threshold_profile: length must be positive");
    }
    std::vector<double> p(n);
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        acc += 1.0 / static_cast<double>(n);
        p[t] = acc;
    }
    std::vector<double> r(n);
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        r[t] = p[t] * p[n - 1 - t];
        total += r[t];
    }
    for (double& v : r) {
        v /= total;
    }
    // Enforce exact symmetry against rounding in the prefix sums.
    for (std::size_t t = 0; t < n / 2; ++t) {
        const double avg = 0.5 * (r[t] + r[n - 1 - t]);
        r[t] = avg;
        r[n - 1 - t] = avg;
    }
    return r;
}

std::vector<std::size_t> select_salient_frames(std::span<const double> r, std::span<const double> profile) {
    if (r.size() != profile.size()) {
        throw ShapeError("select_salient_frames: " + std::to_string(r.size()) + " weights against a profile of " +
                         std::to_string(profile.size()));
    }
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < r.size(); ++t) {
        if (r[t] > profile[t]) {
            out.push_back(t);
        }
    }
    return out;
}

void init_span_head(ad::ParameterStore& store, std::size_t feature_size, const SpanConfig& config, Rng& rng,
                    const std::string& prefix) {
    if (config.spans == 0) {
        throw ConfigError("span count must be at least 1");
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(feature_size));
    for (std::size_t s = 0; s < config.spans; ++s) {
        store.add(prefix + "p" + std::to_string(s) + ".w", nn::uniform_tensor({feature_size}, bound, rng));
        store.add(prefix + "q" + std::to_string(s) + ".w", nn::uniform_tensor({feature_size}, bound, rng));
    }
    store.add(prefix + "z.w", nn::uniform_tensor({feature_size}, bound, rng));
}

SpanResult span_forward(nn::Binder& params, Var rows, const SpanConfig& config, const std::string& prefix) {
    if (config.spans == 0) {
        throw ConfigError("span count must be at least 1");
    }
    SpanResult res;
    std::vector<Var> summaries;
    std::vector<Var> weights;
    for (std::size_t s = 0; s < config.spans; ++s) {
        SpanTrace tr;
        tr.dist = span_distributions(rows, params(prefix + "p" + std::to_string(s) + ".w"),
                                     params(prefix + "q" + std::to_string(s) + ".w"));
        tr.weights = span_weights(tr.dist.start, tr.dist.end, config.eps);
        tr.summary = span_representation(rows, tr.weights.r);
        summaries.push_back(tr.summary);
        weights.push_back(tr.weights.r);
        res.spans.push_back(tr);
    }
    Classification c = classify(summaries, params(prefix + "z.w"));
    for (std::size_t s = 0; s < config.spans; ++s) {
        res.spans[s].score = c.z[s];
    }
    res.logit = c.logit;
    res.probability = c.probability;
    res.penalty = conciseness_penalty(weights);
    return res;
}

}  // namespace pipsim::span
