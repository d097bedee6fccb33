#pragma once

// Planted-signal synthetic claims with closed-form Bayes AUC references.
//
// For every signal layer l a fixed random unit direction v_l is drawn. In each claim a
// rho-fraction of tokens carries mu * (1 - 2 * label) * v_l on top of isotropic N(0, sigma^2)
// noise; every other (layer, token) cell is pure noise. Token log-probabilities are
// min(0, N(m_label, sigma_p^2)) and entropies are their negation, so MTE carries the same
// signal as PPL by construction.

#include "cvt/claimdump.hpp"

#include <cstdint>
#include <vector>

#include <json.hpp>

namespace cvt {

struct SynthConfig {
    Shape shape{32, 64, 4};
    std::size_t n_claims = 2000;
    double prevalence = 0.5;
    int min_tokens = 8;
    int max_tokens = 32;
    std::vector<int> signal_layers = {12, 13, 14, 15, 16, 17, 18, 19, 20};
    double signal_strength = 1.0; // mu
    double signal_fraction = 0.5; // rho
    double noise = 1.0;           // sigma
    double logprob_mean_truthful = -1.0;
    double logprob_mean_hallucinated = -1.5;
    double logprob_std = 0.5;
    HiddenDtype dtype = HiddenDtype::f32;
    std::uint64_t seed = 0;
    std::string model_id = "synthetic";
    std::string claim_prefix = "c";

    void check() const;
    nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown keys are rejected.
    static SynthConfig from_json(const nlohmann::json& j);
};

Dataset generate(const SynthConfig& config);

// The planted unit direction of a signal layer (empty for other layers).
std::vector<double> signal_direction(const SynthConfig& config, int layer);

double normal_cdf(double x);

// Phi(Delta / (sqrt(2) s)) with Delta = 2 mu rho and s = sigma * sqrt(E[1/N]), the noise std of
// the mean-pooled projection for N uniform over the token range; 0.5 for layers without signal.
double oracle_layer_auc(const SynthConfig& config, int layer);

struct OracleValue {
    double auc = 0.5;
    bool approximate = false; // set when min(0, .) truncation is not negligible
};

// AUC of the mean-logprob statistic, Phi(sep / (sqrt(2 E[1/N]) sigma_p)), ignoring truncation at 0.
OracleValue oracle_sp_auc(const SynthConfig& config);

} // namespace cvt
