#include "rubato/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rubato::metrics {

namespace {

Distribution normalize_counts(std::vector<double> counts, int64_t samples,
                              const char* dim_name) {
    if (samples == 0) {
        throw EmptyDimension(std::string("no tokens present for dimension ") + dim_name);
    }
    for (double& c : counts) c /= double(samples);
    return Distribution{std::move(counts), samples};
}

void check_supports(const Distribution& p, const Distribution& q) {
    if (p.p.size() != q.p.size()) {
        throw SupportMismatch("distribution supports differ: " + std::to_string(p.p.size()) +
                              " vs " + std::to_string(q.p.size()));
    }
}

DimensionScore score_dimension(std::span<const tok::TokenSeq> candidates,
                               std::span<const tok::TokenSeq> references, Dimension dim) {
    Distribution c = token_distribution(candidates, dim);
    Distribution r = token_distribution(references, dim);
    return DimensionScore{js_divergence(c, r), intersection_area(c, r)};
}

} // namespace

Distribution token_distribution(std::span<const tok::TokenSeq> seqs, Dimension dim) {
    if (dim == Dimension::pedal) return pedal_joint_distribution(seqs);

    int slot;
    int support;
    const char* dim_name;
    switch (dim) {
    case Dimension::velocity: slot = 2; support = kVelocitySupport; dim_name = "velocity"; break;
    case Dimension::duration: slot = 3; support = kDurationSupport; dim_name = "duration"; break;
    default:                  slot = 1; support = kIoiSupport;      dim_name = "ioi";      break;
    }

    std::vector<double> counts(static_cast<size_t>(support), 0.0);
    int64_t samples = 0;
    for (const tok::TokenSeq& seq : seqs) {
        tok::validate_body(seq);
        for (size_t f = 0; f * tok::kTokensPerNote < seq.size(); ++f) {
            tok::TokenInfo info = tok::describe(seq[f * tok::kTokensPerNote + slot]);
            counts[static_cast<size_t>(info.value)] += 1.0;
            ++samples;
        }
    }
    return normalize_counts(std::move(counts), samples, dim_name);
}

Distribution pedal_joint_distribution(std::span<const tok::TokenSeq> seqs) {
    std::vector<double> counts(kPedalSupport, 0.0);
    int64_t samples = 0;
    for (const tok::TokenSeq& seq : seqs) {
        tok::validate_body(seq);
        for (size_t f = 0; f * tok::kTokensPerNote < seq.size(); ++f) {
            int code = 0;
            for (int k = 0; k < 4; ++k) {
                tok::TokenInfo info = tok::describe(seq[f * tok::kTokensPerNote + 4 + k]);
                code = (code << 1) | (info.value >= kPedalBinarizeThreshold ? 1 : 0);
            }
            counts[static_cast<size_t>(code)] += 1.0;
            ++samples;
        }
    }
    return normalize_counts(std::move(counts), samples, "pedal");
}

double js_divergence(const Distribution& p, const Distribution& q) {
    check_supports(p, q);
    // ½KL(p‖m) + ½KL(q‖m) with m = ½(p+q); 0·log0 terms excluded analytically.
    double js = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) {
        double pi = p.p[i];
        double qi = q.p[i];
        double mi = 0.5 * (pi + qi);
        if (pi > 0.0) js += 0.5 * pi * std::log2(pi / mi);
        if (qi > 0.0) js += 0.5 * qi * std::log2(qi / mi);
    }
    return std::clamp(js, 0.0, 1.0);
}

double intersection_area(const Distribution& p, const Distribution& q) {
    check_supports(p, q);
    double area = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) area += std::min(p.p[i], q.p[i]);
    return area;
}

MetricReport evaluate_testset(std::span<const tok::TokenSeq> candidates,
                              std::span<const tok::TokenSeq> references) {
    if (candidates.empty() || references.empty()) {
        throw EmptyDimension("evaluate_testset needs non-empty candidate and reference sets");
    }
    MetricReport r;
    r.velocity = score_dimension(candidates, references, Dimension::velocity);
    r.duration = score_dimension(candidates, references, Dimension::duration);
    r.ioi = score_dimension(candidates, references, Dimension::ioi);
    r.pedal = score_dimension(candidates, references, Dimension::pedal);
    r.overall.js = (r.velocity.js + r.duration.js + r.ioi.js + r.pedal.js) / 4.0;
    r.overall.intersection = (r.velocity.intersection + r.duration.intersection +
                              r.ioi.intersection + r.pedal.intersection) / 4.0;
    return r;
}

MetricReport human_baseline(std::span<const std::vector<tok::TokenSeq>> groups) {
    MetricReport sum;
    int64_t runs = 0;
    for (size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].size() < 2) {
            throw SingletonGroup("group " + std::to_string(g) +
                                 " has fewer than 2 performances");
        }
        for (size_t held = 0; held < groups[g].size(); ++held) {
            std::vector<tok::TokenSeq> candidate{groups[g][held]};
            std::vector<tok::TokenSeq> rest;
            for (size_t i = 0; i < groups[g].size(); ++i) {
                if (i != held) rest.push_back(groups[g][i]);
            }
            MetricReport r = evaluate_testset(candidate, rest);
            auto add = [](DimensionScore& acc, const DimensionScore& x) {
                acc.js += x.js;
                acc.intersection += x.intersection;
            };
            add(sum.velocity, r.velocity);
            add(sum.duration, r.duration);
            add(sum.ioi, r.ioi);
            add(sum.pedal, r.pedal);
            add(sum.overall, r.overall);
            ++runs;
        }
    }
    if (runs == 0) throw SingletonGroup("no performance groups given");
    auto scale = [runs](DimensionScore& s) {
        s.js /= double(runs);
        s.intersection /= double(runs);
    };
    scale(sum.velocity);
    scale(sum.duration);
    scale(sum.ioi);
    scale(sum.pedal);
    scale(sum.overall);
    return sum;
}

Distribution rebin(const Distribution& d, int factor) {
    if (factor <= 1) return d;
    size_t bins = (d.p.size() + size_t(factor) - 1) / size_t(factor);
    std::vector<double> merged(bins, 0.0);
    for (size_t i = 0; i < d.p.size(); ++i) merged[i / size_t(factor)] += d.p[i];
    return Distribution{std::move(merged), d.samples};
}

namespace {

void append_dimension(std::ostringstream& out, const char* label, const DimensionScore& s) {
    out << label << ".js: " << s.js << "\n";
    out << label << ".intersection: " << s.intersection << "\n";
}

} // namespace

std::string report_text(const MetricReport& r) {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    append_dimension(out, "velocity", r.velocity);
    append_dimension(out, "duration", r.duration);
    append_dimension(out, "ioi", r.ioi);
    append_dimension(out, "pedal", r.pedal);
    append_dimension(out, "overall", r.overall);
    return out.str();
}

std::string report_csv(const MetricReport& r) {
    std::ostringstream out;
    out.precision(6);
    out << std::fixed;
    out << "dimension,js,intersection\n";
    auto row = [&](const char* label, const DimensionScore& s) {
        out << label << "," << s.js << "," << s.intersection << "\n";
    };
    row("velocity", r.velocity);
    row("duration", r.duration);
    row("ioi", r.ioi);
    row("pedal", r.pedal);
    row("overall", r.overall);
    return out.str();
}

} // namespace rubato::metrics
