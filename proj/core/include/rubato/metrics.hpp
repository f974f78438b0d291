#pragma once

#include <span>
#include <string>
#include <vector>

#include "rubato/error.hpp"
#include "rubato/tokenizer.hpp"

namespace rubato::metrics {

RUBATO_DEFINE_ERROR(SupportMismatch);
RUBATO_DEFINE_ERROR(EmptyDimension);
RUBATO_DEFINE_ERROR(SingletonGroup);

enum class Dimension { velocity, duration, ioi, pedal };

inline constexpr int kVelocitySupport = 128;
inline constexpr int kDurationSupport = 5000;
inline constexpr int kIoiSupport = 4991;
inline constexpr int kPedalSupport = 16; // joint binarized configurations
inline constexpr int kPedalBinarizeThreshold = 64;

struct Distribution {
    std::vector<double> p; // normalized, sums to 1
    int64_t samples = 0;
};

// Pools token counts for one dimension over all frames of all sequences.
// Dimension::pedal yields the 16-bin joint distribution.
Distribution token_distribution(std::span<const tok::TokenSeq> seqs, Dimension dim);

// Four pedal values per note, binarized at 64, packed with Pedal1 as the most
// significant bit.
Distribution pedal_joint_distribution(std::span<const tok::TokenSeq> seqs);

// Jensen-Shannon divergence, logarithm base 2, range [0, 1].
double js_divergence(const Distribution& p, const Distribution& q);

// Histogram intersection, sum of elementwise minima, range [0, 1].
double intersection_area(const Distribution& p, const Distribution& q);

struct DimensionScore {
    double js = 0.0;
    double intersection = 0.0;
};

struct MetricReport {
    DimensionScore velocity, duration, ioi, pedal;
    DimensionScore overall; // arithmetic mean of the four dimensions
};

MetricReport evaluate_testset(std::span<const tok::TokenSeq> candidates,
                              std::span<const tok::TokenSeq> references);

// Leave-one-out: each performance scored against the pooled remainder of its
// own group; the report is the mean over all held-out evaluations.
MetricReport human_baseline(std::span<const std::vector<tok::TokenSeq>> groups);

// Merges `factor` adjacent bins (last bin may pool fewer); for sparse
// desk-scale data.
Distribution rebin(const Distribution& d, int factor);

std::string report_text(const MetricReport& r); // key: value, one metric per line
std::string report_csv(const MetricReport& r);  // per-dimension columns plus overall

} // namespace rubato::metrics
