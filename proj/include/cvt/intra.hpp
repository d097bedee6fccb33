#pragma once

// Intrinsic truthfulness aggregation over a contiguous band of middle layers:
//
//   truthfulness(y) = sum_{l in layers} beta_l * q_l(p_l(truthful | y)) + b
//
// p_l comes from an independent learned-attention probe per layer, q_l is a rank-to-uniform
// quantile normalizer fit on a held-out calibration split, and (beta, b) is a ridge
// regression of 1 - label on the normalized probabilities of that same split.

#include "cvt/claimdump.hpp"
#include "cvt/probes.hpp"

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cvt {

// (ceil(L/3), ceil(2L/3)), inclusive.
std::pair<int, int> layer_range(int n_layers);

class QuantileNormalizer {
public:
    QuantileNormalizer() = default;
    // Throws UsageError for fewer than two or non-finite scores.
    explicit QuantileNormalizer(std::vector<double> calibration_scores);

    // Hazen plotting positions (i - 0.5)/M on the sorted calibration scores with linear
    // interpolation between neighbors; values outside the calibration range clamp to the
    // extreme positions. A value equal to a tied run maps to the run's mean position.
    double operator()(double p) const;

    const std::vector<double>& sorted() const { return sorted_; }
    std::size_t size() const { return sorted_.size(); }

private:
    double position(std::size_t i) const { return (static_cast<double>(i) + 0.5) / static_cast<double>(size()); }

    std::vector<double> sorted_;
};

QuantileNormalizer fit_quantile_normalizer(std::vector<double> calibration_scores);

struct AggregatorFit {
    std::vector<double> beta;
    double intercept = 0.0;
    bool underdetermined = false; // fewer rows than layers; ridge still solves it
};

// Ridge on mean-centered features and targets, intercept recovered afterwards and left
// unpenalized. Rows are claims, columns layers.
AggregatorFit fit_ridge(const std::vector<std::vector<double>>& features, std::span<const double> targets,
                        double lambda);

inline constexpr double kDefaultRidgeLambda = 1.0;
inline constexpr double kDefaultSplitRatio = 0.5;

struct IntraConfig {
    double split_ratio = kDefaultSplitRatio;
    std::optional<std::vector<int>> layers; // default: layer_range(L)
    TrainConfig train;
    double lambda = kDefaultRidgeLambda;
    std::uint64_t seed = 0;
};

struct IntraModel {
    std::string model_id;
    std::vector<int> layers;
    std::vector<LayerProbe> probes;
    std::vector<QuantileNormalizer> normalizers;
    std::vector<double> beta;
    double intercept = 0.0;
    IntraConfig config;

    // Per-layer truthfulness probabilities in layer order.
    std::vector<double> layer_probabilities(const ClaimRecord& record) const;
    // sum_l beta_l q_l(p_l) + b for given raw probabilities.
    double aggregate(std::span<const double> probabilities) const;
    double truthfulness(const ClaimRecord& record) const { return aggregate(layer_probabilities(record)); }
    double hallucination_score(const ClaimRecord& record) const { return -truthfulness(record); }

    void check() const;
};

double intra_score(const ClaimRecord& record, const IntraModel& model);

// One learned-attention probe per layer, trained independently (and in parallel) with a
// per-layer seed derived from config.seed.
std::vector<LayerProbe> train_layer_probes(const Dataset& train, const std::vector<int>& layers,
                                           const TrainConfig& config);

// Fits normalizers and the aggregator on a calibration split for already trained probes.
IntraModel calibrate_intra(std::vector<LayerProbe> probes, const Dataset& calib, double lambda);

// (beta, b) from normalized calibration probabilities.
AggregatorFit fit_aggregator(const Dataset& calib, std::span<const LayerProbe> probes,
                             std::span<const QuantileNormalizer> normalizers, double lambda);

IntraModel fit_intra(const Dataset& train, const IntraConfig& config);

} // namespace cvt
