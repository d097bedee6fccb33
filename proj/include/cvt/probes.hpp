#pragma once

// Trainable probes over hidden states.
//
// A layer probe pools a claim's token states at one layer into a single vector and applies
// a logistic classifier whose positive class is TRUTHFUL:
//
//   pooled = sum_i a_i h_i,  a = softmax(theta^T h_1 .. theta^T h_N)   (learned attention)
//   p(truthful) = sigmoid(W^T pooled + bias)
//
// Hallucination scores derived from a probe are the negated logit, so higher means more
// likely hallucinated and saturated probabilities do not collapse into ties.

#include "cvt/claimdump.hpp"
#include "cvt/parallel.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cvt {

enum class Pooling { learned_attention, mean, last_token };

std::string pooling_name(Pooling p);
Pooling pooling_from_name(const std::string& name);

struct LinearHead {
    std::vector<double> weight;
    double bias = 0.0;

    double logit(std::span<const double> x) const;
};

struct LayerProbe {
    int layer = 0;
    Pooling pooling = Pooling::mean;
    std::vector<double> theta; // present iff pooling == learned_attention
    LinearHead head;
    bool use_bias = true;

    std::vector<double> pooled(const ClaimRecord& record) const;
    double logit(const ClaimRecord& record) const;
    // Probability that the claim is truthful.
    double probability(const ClaimRecord& record) const;
    double hallucination_score(const ClaimRecord& record) const { return -logit(record); }
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int max_epochs = 100;
    int batch_size = 64;
    int early_stop_patience = 5;
    double l2_penalty = 1e-4;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    bool use_bias = true;

    void check() const;
};

// Pools an N x d row-major block of token states.
std::vector<double> pool(std::span<const float> states, int n_tokens, int dim, Pooling pooling,
                         std::span<const double> theta = {});
// Same, for double-precision token states.
std::vector<double> pool(std::span<const double> states, int n_tokens, int dim, Pooling pooling,
                         std::span<const double> theta = {});

// sigmoid(W^T pooled + bias)
double probe_forward(const LayerProbe& probe, std::span<const double> pooled);

double sigmoid(double z);

// Mean binary cross-entropy of a probe plus (l2/2)(|W|^2 + |theta|^2); the bias is not
// penalized. Parameters are flattened as [W (d) | bias | theta (d, attention only)].
//
// Token blocks for learned attention are borrowed from the dataset, which must outlive
// the objective.
class ProbeObjective {
public:
    // Targets are 1 - label (truthful is the positive class).
    ProbeObjective(const Dataset& data, int layer, Pooling pooling, double l2_penalty);
    // Logistic regression on fixed feature rows.
    ProbeObjective(std::vector<std::vector<double>> features, std::vector<double> targets, double l2_penalty);

    std::size_t n_samples() const { return targets_.size(); }
    std::size_t n_params() const;
    int dim() const { return dim_; }
    bool attention() const { return pooling_ == Pooling::learned_attention; }
    double target(std::size_t i) const { return targets_[i]; }

    // Loss over a subset of samples; writes the gradient when `grad` is nonempty.
    double evaluate(std::span<const double> params, std::span<double> grad, std::span<const std::size_t> samples,
                    ExecPolicy policy) const;
    double evaluate(std::span<const double> params, std::span<double> grad, ExecPolicy policy) const;

    // Logit of one sample under params.
    double logit(std::span<const double> params, std::size_t sample) const;

private:
    double sample_loss_grad(std::span<const double> params, std::size_t s, std::span<double> grad) const;

    Pooling pooling_;
    int dim_ = 0;
    double l2_ = 0.0;
    std::vector<double> targets_;
    std::vector<std::vector<double>> pooled_;  // fixed pooling or feature rows
    std::vector<std::span<const float>> tokens_; // learned attention
    std::vector<int> n_tokens_;
};

struct TrainResult {
    std::vector<double> params;
    int epochs_run = 0;
    double best_validation_loss = 0.0;
};

// Mini-batch Adam on the objective with early stopping on a held-out slice; deterministic
// given config.seed. With config.use_bias off the bias stays pinned at 0.
TrainResult train_objective(const ProbeObjective& objective, const TrainConfig& config);

LayerProbe train_layer_probe(const Dataset& train, int layer, Pooling pooling, const TrainConfig& config);

LinearHead train_linear_head(std::vector<std::vector<double>> features, std::vector<double> targets,
                             const TrainConfig& config);

// --- baseline probe family ---

int saplma_default_layer(int n_layers); // round(L/2)
int sheeps_default_layer(int n_layers); // ceil(L/2)

// Last-token probe at a fixed layer.
LayerProbe saplma_fit(const Dataset& train, int layer, const TrainConfig& config);

// Learned-attention probe at a single layer.
LayerProbe sheeps_fit(const Dataset& train, int layer, const TrainConfig& config);

struct MassMeanProbe {
    int layer = 0;
    Pooling pooling = Pooling::mean;
    std::vector<double> direction; // mean(truthful) - mean(hallucinated)

    double hallucination_score(const ClaimRecord& record) const;
    double score_pooled(std::span<const double> pooled) const;
};

MassMeanProbe mass_mean_fit(const Dataset& train, int layer, Pooling pooling = Pooling::mean);

struct CcsProbe {
    int layer = 0;
    double margin = 1.0;
    std::vector<double> direction; // unit norm

    double hallucination_score(const ClaimRecord& record) const;
};

// Margin-ranking fit over mean-pooled last-layer states: minimizes the mean over sampled
// (truthful, hallucinated) pairs of max(0, margin - w^T x_true + w^T x_false), with w
// renormalized to unit length after every step.
CcsProbe ccs_fit(const Dataset& train, const TrainConfig& config, double margin = 1.0);

// Hinge loss of a CCS direction averaged over every (truthful, hallucinated) pair.
double ccs_pair_loss(const CcsProbe& probe, const Dataset& data);

struct MindCandidate {
    int layer = 0;
    Pooling pooling = Pooling::mean;
    double validation_auc = 0.0;
};

struct MindResult {
    LayerProbe probe;
    int layer = 0;
    Pooling pooling = Pooling::mean;
    std::vector<MindCandidate> candidates;
};

// Winner of a candidate sweep: highest validation AUC, ties to the lower layer, then mean pooling.
std::size_t mind_select(std::span<const MindCandidate> candidates);

MindResult mind_fit(const Dataset& train, double validation_fraction, const std::vector<int>& candidate_layers,
                    const TrainConfig& config);

// --- SATRMD ---

inline constexpr double kSatrmdShrinkage = 0.05;

struct GaussianStats {
    int layer = 0;
    std::vector<double> mean_in, mean_all; // truthful-class and background means
    std::vector<double> var_in, var_all;   // diagonal variances after shrinkage
    double shrinkage = kSatrmdShrinkage;

    // (1/N) sum_i [MD^2_in(h_i) - MD^2_all(h_i)] over a claim's tokens at this layer.
    double feature(const ClaimRecord& record) const;
    double relative_distance(std::span<const double> x) const;
};

struct SatrmdModel {
    std::vector<GaussianStats> stats;
    std::vector<double> feature_mean, feature_scale;
    LinearHead head; // predicts truthfulness from standardized features

    std::vector<double> features(const ClaimRecord& record) const;
    double hallucination_score(const ClaimRecord& record) const;
};

GaussianStats fit_gaussian_stats(const Dataset& train, int layer, double shrinkage = kSatrmdShrinkage);
std::vector<double> satrmd_features(const ClaimRecord& record, std::span<const GaussianStats> stats);
// Layers default to 1..L.
SatrmdModel satrmd_fit(const Dataset& train, const TrainConfig& config, std::vector<int> layers = {},
                       double shrinkage = kSatrmdShrinkage);

// Both classes present, labels set; throws DataError otherwise.
void require_two_classes(const Dataset& data);

} // namespace cvt
