#pragma once

// Differentiable span selection over a feature sequence: start/end
// distributions, cumulative-sum span weights, span summaries and a shared
// scoring vector.

#include <span>
#include <string>
#include <vector>

#include "pipsim/autodiff.hpp"
#include "pipsim/nn.hpp"
#include "pipsim/rng.hpp"

namespace pipsim::span {

inline constexpr double kDefaultEps = 1e-8;

struct Distributions {
    ad::Var start;  // p~ [T]
    ad::Var end;    // q~ [T]
};

// p~ = softmax(F^T w_p), q~ = softmax(F^T w_q). `rows` is F stored as [T, D].
Distributions span_distributions(ad::Var rows, ad::Var w_p, ad::Var w_q);

struct Weights {
    ad::Var p;        // prefix sums of p~
    ad::Var q;        // suffix sums of q~
    ad::Var r_tilde;  // p * q
    ad::Var r;        // r~ / (sum r~ + eps)
};

// Throws DomainError when either input holds a negative entry, ShapeError on
// length mismatch.
Weights span_weights(ad::Var start, ad::Var end, double eps = kDefaultEps);

// m = sum_t r_t F[:, t] -> [D].
ad::Var span_representation(ad::Var rows, ad::Var r);

struct Classification {
    std::vector<ad::Var> z;  // one [1] score per span
    ad::Var logit;           // sum of z
    ad::Var probability;     // sigmoid(logit)
};

Classification classify(std::span<const ad::Var> summaries, ad::Var w_z);

// Generalized Jensen-Shannon divergence of the span weights, each renormalized
// to sum 1. A single span yields a constant 0.
ad::Var conciseness_penalty(std::span<const ad::Var> weights);

// Span weights induced by uniform start and end distributions, normalized
// without eps. Throws DomainError for n = 0.
std::vector<double> threshold_profile(std::size_t n);

// Indices t (0-based) with r_t strictly above profile_t. Throws ShapeError on
// length mismatch.
std::vector<std::size_t> select_salient_frames(std::span<const double> r, std::span<const double> profile);

struct SpanConfig {
    std::size_t spans = 3;
    double eps = kDefaultEps;
};

// Registers span.p{s}.w, span.q{s}.w [D] per span and the shared span.z.w [D].
void init_span_head(ad::ParameterStore& store, std::size_t feature_size, const SpanConfig& config, Rng& rng,
                    const std::string& prefix = "span.");

struct SpanTrace {
    Distributions dist;
    Weights weights;
    ad::Var summary;  // m
    ad::Var score;    // z
};

struct SpanResult {
    std::vector<SpanTrace> spans;
    ad::Var logit;
    ad::Var probability;
    ad::Var penalty;
};

// Runs every span over `rows` [T, D] with the head's parameters.
SpanResult span_forward(nn::Binder& params, ad::Var rows, const SpanConfig& config,
                        const std::string& prefix = "span.");

}  // namespace pipsim::span
