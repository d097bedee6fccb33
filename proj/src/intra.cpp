#include "cvt/intra.hpp"

#include "cvt/error.hpp"
#include "cvt/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

namespace cvt {

std::pair<int, int> layer_range(int n_layers) {
    if (n_layers < 3) throw UsageError("layer_range needs at least 3 layers");
    return {(n_layers + 2) / 3, (2 * n_layers + 2) / 3};
}

QuantileNormalizer::QuantileNormalizer(std::vector<double> scores) : sorted_(std::move(scores)) {
    if (sorted_.size() < 2) throw UsageError("quantile normalizer needs at least 2 calibration scores");
    for (double v : sorted_)
        if (!std::isfinite(v)) throw UsageError("quantile normalizer: non-finite calibration score");
    std::sort(sorted_.begin(), sorted_.end());
}

double QuantileNormalizer::operator()(double p) const {
    const std::size_t m = size();
    const double lo_clamp = position(0), hi_clamp = position(m - 1);
    if (std::isnan(p)) throw UsageError("quantile normalizer: NaN input");

    // Run of calibration scores equal to v, as [first, last) indices.
    auto run_of = [&](double v) {
        const auto first = std::lower_bound(sorted_.begin(), sorted_.end(), v) - sorted_.begin();
        const auto last = std::upper_bound(sorted_.begin(), sorted_.end(), v) - sorted_.begin();
        return std::pair<std::size_t, std::size_t>(first, last);
    };
    auto run_position = [&](std::pair<std::size_t, std::size_t> run) {
        return 0.5 * (position(run.first) + position(run.second - 1));
    };

    const auto run = run_of(p);
    if (run.first != run.second) return run_position(run);
    const std::size_t above = run.first; // first calibration score > p
    if (above == 0) return lo_clamp;
    if (above == m) return hi_clamp;
    const double xa = sorted_[above - 1], xb = sorted_[above];
    const double ua = run_position(run_of(xa)), ub = run_position(run_of(xb));
    return ua + (p - xa) / (xb - xa) * (ub - ua);
}

QuantileNormalizer fit_quantile_normalizer(std::vector<double> scores) { return QuantileNormalizer(std::move(scores)); }

AggregatorFit fit_ridge(const std::vector<std::vector<double>>& features, std::span<const double> targets,
                        double lambda) {
    if (!(lambda > 0.0)) throw UsageError("ridge lambda must be > 0");
    if (features.empty() || features.size() != targets.size())
        throw UsageError("ridge: feature rows and targets must be nonempty and equally long");
    const auto n = static_cast<Eigen::Index>(features.size());
    const auto k = static_cast<Eigen::Index>(features.front().size());
    if (k == 0) throw UsageError("ridge: no feature columns");

    Eigen::MatrixXd x(n, k);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(features[i].size()) != k) throw UsageError("ridge: ragged feature rows");
        for (Eigen::Index j = 0; j < k; ++j) x(i, j) = features[i][j];
        y(i) = targets[i];
    }
    const Eigen::RowVectorXd x_mean = x.colwise().mean();
    const double y_mean = y.mean();
    x.rowwise() -= x_mean;
    y.array() -= y_mean;

    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    const Eigen::VectorXd beta = gram.ldlt().solve(x.transpose() * y);

    AggregatorFit fit;
    fit.beta.assign(beta.data(), beta.data() + k);
    fit.intercept = y_mean - x_mean.dot(beta);
    fit.underdetermined = n < k;
    return fit;
}

std::vector<double> IntraModel::layer_probabilities(const ClaimRecord& r) const {
    std::vector<double> p(probes.size());
    for (std::size_t j = 0; j < probes.size(); ++j) {
        if (probes[j].layer > r.shape.layers)
            throw UsageError("INTRA layer " + std::to_string(probes[j].layer) + " out of range for record");
        p[j] = probes[j].probability(r);
    }
    return p;
}

double IntraModel::aggregate(std::span<const double> p) const {
    if (p.size() != beta.size()) throw UsageError("INTRA: probability count does not match layer set");
    double t = intercept;
    for (std::size_t j = 0; j < p.size(); ++j) t += beta[j] * normalizers[j](p[j]);
    return t;
}

void IntraModel::check() const {
    if (layers.empty()) throw DataError("INTRA model has an empty layer set");
    if (probes.size() != layers.size() || normalizers.size() != layers.size() || beta.size() != layers.size())
        throw DataError("INTRA model: every layer needs a probe, a normalizer and a weight");
    for (std::size_t j = 0; j < layers.size(); ++j) {
        if (probes[j].layer != layers[j]) throw DataError("INTRA model: probe/layer order mismatch");
        if (probes[j].pooling != Pooling::learned_attention)
            throw DataError("INTRA model: layer probes must use learned attention");
    }
}

double intra_score(const ClaimRecord& record, const IntraModel& model) { return model.hallucination_score(record); }

std::vector<LayerProbe> train_layer_probes(const Dataset& train, const std::vector<int>& layers,
                                           const TrainConfig& config) {
    require_two_classes(train);
    std::vector<LayerProbe> probes(layers.size());
    parallel_for(
        layers.size(),
        [&](std::size_t j) {
            TrainConfig cfg = config;
            cfg.seed = derived_rng(config.seed, static_cast<std::uint64_t>(layers[j]))();
            probes[j] = train_layer_probe(train, layers[j], Pooling::learned_attention, cfg);
        },
        default_policy());
    return probes;
}

namespace {

std::vector<std::vector<double>> calib_probabilities(const Dataset& calib, std::span<const LayerProbe> probes) {
    std::vector<std::vector<double>> p(calib.size(), std::vector<double>(probes.size()));
    parallel_for(
        calib.size(),
        [&](std::size_t i) {
            for (std::size_t j = 0; j < probes.size(); ++j) p[i][j] = probes[j].probability(calib.records[i]);
        },
        default_policy());
    return p;
}

std::vector<double> truthfulness_targets(const Dataset& d) {
    const auto y = labels_of(d);
    std::vector<double> t(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) t[i] = 1.0 - y[i];
    return t;
}

} // namespace

AggregatorFit fit_aggregator(const Dataset& calib, std::span<const LayerProbe> probes,
                             std::span<const QuantileNormalizer> normalizers, double lambda) {
    if (probes.size() != normalizers.size()) throw UsageError("aggregator: probes and normalizers differ in count");
    auto x = calib_probabilities(calib, probes);
    for (auto& row : x)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] = normalizers[j](row[j]);
    auto fit = fit_ridge(x, truthfulness_targets(calib), lambda);
    if (fit.underdetermined)
        std::cerr << "warning: calibration split has fewer claims (" << x.size() << ") than layers ("
                  << probes.size() << "); ridge keeps the fit solvable\n";
    return fit;
}

IntraModel calibrate_intra(std::vector<LayerProbe> probes, const Dataset& calib, double lambda) {
    if (probes.empty()) throw UsageError("INTRA needs at least one layer");
    const auto p = calib_probabilities(calib, probes);
    IntraModel m;
    m.model_id = calib.header.model_id;
    for (const auto& pr : probes) m.layers.push_back(pr.layer);
    for (std::size_t j = 0; j < probes.size(); ++j) {
        std::vector<double> col(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) col[i] = p[i][j];
        m.normalizers.push_back(fit_quantile_normalizer(std::move(col)));
    }
    const auto fit = fit_aggregator(calib, probes, m.normalizers, lambda);
    m.probes = std::move(probes);
    m.beta = fit.beta;
    m.intercept = fit.intercept;
    m.config.lambda = lambda;
    return m;
}

IntraModel fit_intra(const Dataset& train, const IntraConfig& config) {
    config.train.check();
    std::vector<int> layers;
    if (config.layers) {
        layers = *config.layers;
    } else {
        const auto [lo, hi] = layer_range(train.shape().layers);
        for (int l = lo; l <= hi; ++l) layers.push_back(l);
    }
    if (layers.empty()) throw UsageError("INTRA layer set is empty");
    if (std::set<int>(layers.begin(), layers.end()).size() != layers.size())
        throw UsageError("INTRA layer set has duplicates");
    for (int l : layers)
        if (l < 0 || l > train.shape().layers)
            throw UsageError("INTRA layer " + std::to_string(l) + " outside 0.." +
                             std::to_string(train.shape().layers));

    const auto [part_a, part_b] = split_train_calib(train, config.split_ratio, config.seed);
    TrainConfig tc = config.train;
    tc.seed = config.seed;
    auto model = calibrate_intra(train_layer_probes(part_a, layers, tc), part_b, config.lambda);
    model.config = config;
    model.config.layers = layers;
    model.config.train.seed = config.seed;
    return model;
}

} // namespace cvt
