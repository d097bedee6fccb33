#include "cvt/scorers.hpp"

#include "cvt/error.hpp"

#include <cmath>
#include <string>

namespace cvt {

namespace {

void require_logprobs(const ClaimRecord& r) {
    if (r.token_logprobs.empty() || static_cast<int>(r.token_logprobs.size()) != r.n_tokens)
        throw SectionMissing("logprobs");
}

void check_layers(const std::vector<int>& layers, const Shape& shape) {
    if (layers.empty()) throw UsageError("layer_set must be nonempty");
    for (int l : layers)
        if (l < 1 || l > shape.layers)
            throw UsageError("attention layer " + std::to_string(l) + " outside 1.." + std::to_string(shape.layers));
}

} // namespace

double sp_score(const ClaimRecord& r) {
    require_logprobs(r);
    double sum = 0.0;
    for (double lp : r.token_logprobs) sum += lp;
    return -sum;
}

double ppl_score(const ClaimRecord& r) {
    require_logprobs(r);
    double sum = 0.0;
    for (double lp : r.token_logprobs) sum += lp;
    return std::exp(-sum / r.n_tokens);
}

double mte_score(const ClaimRecord& r) {
    if (r.token_entropy.empty() || static_cast<int>(r.token_entropy.size()) != r.n_tokens)
        throw SectionMissing("entropy");
    double sum = 0.0;
    for (double h : r.token_entropy) sum += h;
    return sum / r.n_tokens;
}

double attention_score(const ClaimRecord& r, const std::vector<int>& layer_set, double epsilon) {
    if (r.attn_diag.empty()) throw SectionMissing("attn_diag");
    check_layers(layer_set, r.shape);
    double total = 0.0;
    for (int l : layer_set)
        for (int h = 0; h < r.shape.heads; ++h) {
            double row = 0.0;
            for (float a : r.diag_row(l, h)) row += std::log(static_cast<double>(a) + epsilon);
            total += row / r.n_tokens;
        }
    return -total / (static_cast<double>(layer_set.size()) * r.shape.heads);
}

std::map<int, int> select_rauq_heads(const Dataset& training, const std::vector<int>& layer_set) {
    if (training.records.empty()) throw DataError("RAUQ head selection needs a nonempty training set");
    if (!training.header.has(section::attn_prev)) throw SectionMissing("attn_prev");
    const Shape& s = training.shape();
    check_layers(layer_set, s);

    std::map<int, int> chosen;
    for (int l : layer_set) {
        std::vector<double> sums(s.heads, 0.0);
        for (const auto& r : training.records)
            for (int h = 0; h < s.heads; ++h) {
                const auto row = r.prev_row(l, h);
                for (int i = 1; i < r.n_tokens; ++i) sums[h] += row[i];
            }
        // All heads share one token count, so sums rank exactly like means.
        int best = 0;
        for (int h = 1; h < s.heads; ++h)
            if (sums[h] > sums[best]) best = h; // strict: lowest index wins ties
        chosen[l] = best;
    }
    return chosen;
}

void check_rauq_config(const RauqConfig& c, const Shape& shape) {
    if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw UsageError("RAUQ alpha must lie in [0,1]");
    if (c.epsilon < 0.0) throw UsageError("RAUQ epsilon must be >= 0");
    if (c.alpha == 0.0 && c.epsilon == 0.0) throw UsageError("RAUQ with alpha = 0 needs epsilon > 0");
    check_layers(c.layer_set, shape);
    for (int l : c.layer_set) {
        auto it = c.selected_heads.find(l);
        if (it == c.selected_heads.end()) throw UsageError("RAUQ: no head selected for layer " + std::to_string(l));
        if (it->second < 0 || it->second >= shape.heads)
            throw UsageError("RAUQ: head " + std::to_string(it->second) + " out of range");
    }
}

double rauq_score(const ClaimRecord& r, const RauqConfig& c) {
    require_logprobs(r);
    if (c.layer_set.empty()) throw UsageError("RAUQ layer_set must be nonempty");
    if (c.alpha < 1.0 && r.attn_prev.empty()) throw SectionMissing("attn_prev");
    check_rauq_config(c, r.shape);

    double total = 0.0;
    for (int l : c.layer_set) {
        const int head = c.selected_heads.at(l);
        double conf = std::exp(r.token_logprobs[0]);
        double layer = std::log(conf + c.epsilon);
        if (c.alpha == 1.0) {
            // The recurrence degenerates to per-token probabilities.
            for (int i = 1; i < r.n_tokens; ++i) layer += std::log(std::exp(r.token_logprobs[i]) + c.epsilon);
        } else {
            const auto prev = r.prev_row(l, head);
            for (int i = 1; i < r.n_tokens; ++i) {
                conf = c.alpha * std::exp(r.token_logprobs[i]) + (1.0 - c.alpha) * prev[i] * conf;
                layer += std::log(conf + c.epsilon);
            }
        }
        total += -layer / r.n_tokens;
    }
    return total / static_cast<double>(c.layer_set.size());
}

} // namespace cvt
