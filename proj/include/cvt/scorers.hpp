#pragma once

// Training-free hallucination scorers. Every score is oriented so that higher means
// more likely hallucinated.

#include "cvt/claimdump.hpp"

#include <map>
#include <vector>

namespace cvt {

// -sum_i log p(y_i)
double sp_score(const ClaimRecord& record);

// exp(-(1/N) sum_i log p(y_i))
double ppl_score(const ClaimRecord& record);

// Mean predictive entropy over tokens.
double mte_score(const ClaimRecord& record);

inline constexpr double kAttentionEpsilon = 1e-6;

// Negated mean log attention-diagonal over the given transformer blocks (1..L) and all
// heads. The eigenvalues of a causal attention map are its diagonal entries.
double attention_score(const ClaimRecord& record, const std::vector<int>& layer_set,
                       double epsilon = kAttentionEpsilon);

// Recurrent attention-based uncertainty. This is a reconstruction: one head per layer
// (the one with the highest mean previous-token attention on training data) propagates
// token confidence through the convex recurrence
//   c_1 = p(y_1),  c_i = alpha * p(y_i) + (1 - alpha) * attn_prev[i] * c_{i-1}
// and a layer's score is -(1/N) sum_i log(c_i + epsilon).
struct RauqConfig {
    double alpha = 0.7;
    double epsilon = 0.0;
    std::map<int, int> selected_heads; // layer -> head
    std::vector<int> layer_set;
};

// For every layer in layer_set, the head with the largest mean attn_prev over tokens
// i >= 1 of all training claims; ties go to the lowest head index.
std::map<int, int> select_rauq_heads(const Dataset& training, const std::vector<int>& layer_set);

double rauq_score(const ClaimRecord& record, const RauqConfig& config);

// Throws UsageError on an out-of-range layer/head or alpha outside [0,1].
void check_rauq_config(const RauqConfig& config, const Shape& shape);

} // namespace cvt
