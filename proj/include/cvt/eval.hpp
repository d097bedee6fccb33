#pragma once

// Metrics and statistics: ROC-AUC, average precision, percentile bootstrap intervals,
// paired one-sided bootstrap tests, Benjamini-Hochberg FDR, and stratified reports.
// Positives are label 1 (hallucinated); higher scores should rank positives first.

#include "cvt/parallel.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cvt {

struct Scored {
    std::string claim_id;
    std::string method;
    double score = 0.0;
    int label = 0;
    std::map<std::string, std::string> meta;
};

// Normalized Mann-Whitney U: mean over (positive, negative) pairs of 1 / 0.5 / 0.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Average precision over descending unique thresholds; tied scores enter as one block.
double pr_auc(std::span<const double> scores, std::span<const int> labels);

enum class Metric { roc_auc, pr_auc };
std::string metric_name(Metric m);
double compute_metric(Metric m, std::span<const double> scores, std::span<const int> labels);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    int skipped = 0; // resamples that stayed single-class after 10 redraws
};

inline constexpr int kBootstrapResamples = 2000;

// Percentile bootstrap over claims. Resample r draws from derived_rng(seed, r), so the
// result does not depend on the thread count.
Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, Metric metric,
                      int n_resamples = kBootstrapResamples, double level = 0.95, std::uint64_t seed = 0,
                      ExecPolicy policy = default_policy());

// One-sided test of metric(A) > metric(B) with claims resampled jointly:
//   p = (1 + #{metric(A*) < metric(B*)} + 0.5 #{metric(A*) = metric(B*)}) / (n_resamples + 1)
double paired_bootstrap_test(std::span<const double> scores_a, std::span<const double> scores_b,
                             std::span<const int> labels, Metric metric, int n_resamples = kBootstrapResamples,
                             std::uint64_t seed = 0, ExecPolicy policy = default_policy());

// Aligns two scored sets by claim_id and runs paired_bootstrap_test.
double paired_bootstrap_test(const std::vector<Scored>& a, const std::vector<Scored>& b, Metric metric,
                             int n_resamples = kBootstrapResamples, std::uint64_t seed = 0);

// Benjamini-Hochberg step-up procedure.
std::vector<bool> bh_fdr(std::span<const double> p_values, double q);

enum class StrataKey { popularity_quintile, language, generation_length_group, position_bin };
std::string strata_key_name(StrataKey k);
StrataKey strata_key_from_name(const std::string& name);

struct StratifyOptions {
    // Fixed popularity edges (ascending) instead of sample quintiles; bins are [e_k, e_{k+1}).
    std::vector<double> popularity_edges;
};

std::string generation_length_group(long long claims_in_generation);
int position_bin(long long claim_index, long long generation_length);

// Stratum label -> indices into `scored`.
std::map<std::string, std::vector<std::size_t>> stratify(const std::vector<Scored>& scored, StrataKey key,
                                                         const StratifyOptions& options = {});

struct ReportRow {
    std::string method;
    std::string stratum; // "all" or "<key>=<group>"
    std::size_t n = 0;
    double prevalence = 0.0;
    std::optional<double> roc_auc, pr_auc, ci_lo, ci_hi;
    std::map<std::string, double> p_values;    // baseline -> p
    std::map<std::string, bool> fdr_rejected;  // baseline -> flag
};

struct ReportOptions {
    std::vector<StrataKey> strata;
    std::vector<std::string> baselines;
    double q = 0.05;
    int n_resamples = kBootstrapResamples;
    double level = 0.95;
    std::uint64_t seed = 0;
    StratifyOptions stratify;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    ReportOptions options;

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

// One row per (method, stratum). FDR correction runs within each stratum across all
// (method, baseline) comparisons.
EvalReport build_report(const std::map<std::string, std::vector<Scored>>& by_method, const ReportOptions& options);

} // namespace cvt
