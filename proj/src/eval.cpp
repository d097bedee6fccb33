#include "cvt/eval.hpp"

#include "cvt/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace cvt {

using nlohmann::json;

namespace {

// Scores sorted ascending with tied runs grouped into blocks. Metrics over any
// multiset of the original claims (a bootstrap resample) reduce to a weighted walk
// over these blocks, so a resample costs O(n) instead of a fresh sort.
struct Ranking {
    std::vector<std::size_t> order;
    std::vector<std::size_t> block_end; // exclusive end offsets into `order`

    explicit Ranking(std::span<const double> scores) : order(scores.size()) {
        for (double s : scores)
            if (!std::isfinite(s)) throw DataError("scores must be finite");
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
        for (std::size_t i = 1; i <= order.size(); ++i)
            if (i == order.size() || scores[order[i]] != scores[order[i - 1]]) block_end.push_back(i);
    }
};

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw UsageError("scores and labels differ in length");
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
}

// weights.empty() means every claim once.
double weighted_auc(const Ranking& rk, std::span<const int> y, std::span<const double> w) {
    double neg_below = 0.0, u = 0.0, pos_total = 0.0;
    std::size_t start = 0;
    for (auto end : rk.block_end) {
        double pos = 0.0, neg = 0.0;
        for (std::size_t k = start; k < end; ++k) {
            const auto i = rk.order[k];
            const double wi = w.empty() ? 1.0 : w[i];
            (y[i] == 1 ? pos : neg) += wi;
        }
        u += pos * neg_below + 0.5 * pos * neg;
        neg_below += neg;
        pos_total += pos;
        start = end;
    }
    if (pos_total == 0.0 || neg_below == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return u / (pos_total * neg_below);
}

double weighted_ap(const Ranking& rk, std::span<const int> y, std::span<const double> w) {
    double pos_total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] == 1) pos_total += w.empty() ? 1.0 : w[i];
    if (pos_total == 0.0) return std::numeric_limits<double>::quiet_NaN();
    double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
    for (std::size_t b = rk.block_end.size(); b-- > 0;) {
        const std::size_t start = b == 0 ? 0 : rk.block_end[b - 1];
        for (std::size_t k = start; k < rk.block_end[b]; ++k) {
            const auto i = rk.order[k];
            const double wi = w.empty() ? 1.0 : w[i];
            (y[i] == 1 ? tp : fp) += wi;
        }
        if (tp + fp == 0.0) continue;
        const double recall = tp / pos_total;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    return ap;
}

double weighted_metric(Metric m, const Ranking& rk, std::span<const int> y, std::span<const double> w) {
    return m == Metric::roc_auc ? weighted_auc(rk, y, w) : weighted_ap(rk, y, w);
}

// Multiplicity counts of one bootstrap resample; empty when every redraw stayed single-class.
std::vector<double> draw_resample(std::span<const int> y, std::mt19937_64& rng) {
    const std::size_t n = y.size();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> counts(n);
    for (int attempt = 0; attempt < 10; ++attempt) {
        std::fill(counts.begin(), counts.end(), 0.0);
        bool pos = false, neg = false;
        for (std::size_t k = 0; k < n; ++k) {
            const auto i = pick(rng);
            counts[i] += 1.0;
            (y[i] == 1 ? pos : neg) = true;
        }
        if (pos && neg) return counts;
    }
    return {};
}

double percentile(std::vector<double> v, double prob) {
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

json opt_num(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string csv_num(const std::optional<double>& v) {
    if (!v) return "";
    return json(*v).dump(); // shortest round-trip form
}

const std::string& meta_field(const Scored& s, const std::string& key) {
    auto it = s.meta.find(key);
    if (it == s.meta.end()) throw DataError("claim '" + s.claim_id + "' lacks meta field '" + key + "'");
    return it->second;
}

double meta_number(const Scored& s, const std::string& key) {
    const auto& v = meta_field(s, key);
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw DataError("claim '" + s.claim_id + "': meta field '" + key + "' is not numeric: '" + v + "'");
    }
}

} // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    if (scores.size() < 2) throw DataError("ROC-AUC needs at least two claims");
    const double v = weighted_auc(Ranking(scores), labels, {});
    if (std::isnan(v)) throw DataError("ROC-AUC undefined: single-class input");
    return v;
}

double pr_auc(std::span<const double> scores, std::span<const int> labels) {
    check_inputs(scores, labels);
    const double v = weighted_ap(Ranking(scores), labels, {});
    if (std::isnan(v)) throw DataError("PR-AUC undefined: no positive claims");
    return v;
}

std::string metric_name(Metric m) { return m == Metric::roc_auc ? "roc_auc" : "pr_auc"; }

double compute_metric(Metric m, std::span<const double> scores, std::span<const int> labels) {
    return m == Metric::roc_auc ? roc_auc(scores, labels) : pr_auc(scores, labels);
}

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels, Metric metric, int n_resamples,
                      double level, std::uint64_t seed, ExecPolicy policy) {
    if (n_resamples < 1) throw UsageError("n_resamples must be >= 1");
    if (!(level > 0.0 && level < 1.0)) throw UsageError("confidence level must lie in (0,1)");
    const double point = compute_metric(metric, scores, labels);
    const Ranking rk(scores);

    std::vector<double> stats(static_cast<std::size_t>(n_resamples));
    parallel_for(
        stats.size(),
        [&](std::size_t r) {
            auto rng = derived_rng(seed, r);
            const auto w = draw_resample(labels, rng);
            stats[r] = w.empty() ? std::numeric_limits<double>::quiet_NaN() : weighted_metric(metric, rk, labels, w);
        },
        policy);

    Interval ci;
    std::vector<double> valid;
    valid.reserve(stats.size());
    for (double s : stats) {
        if (std::isnan(s))
            ++ci.skipped;
        else
            valid.push_back(s);
    }
    if (valid.empty()) throw DataError("bootstrap: every resample was single-class");
    const double alpha = 1.0 - level;
    // Percentile endpoints can miss a point estimate on skewed samples; the interval is
    // widened to include it.
    ci.lo = std::min(percentile(valid, alpha / 2.0), point);
    ci.hi = std::max(percentile(valid, 1.0 - alpha / 2.0), point);
    return ci;
}

double paired_bootstrap_test(std::span<const double> a, std::span<const double> b, std::span<const int> labels,
                             Metric metric, int n_resamples, std::uint64_t seed, ExecPolicy policy) {
    check_inputs(a, labels);
    check_inputs(b, labels);
    if (n_resamples < 1) throw UsageError("n_resamples must be >= 1");
    compute_metric(metric, a, labels); // surfaces undefined-metric errors
    const Ranking ra(a), rb(b);

    // 1 = A below B, 0.5 = tie, 0 = A above B, NaN = skipped
    std::vector<double> outcome(static_cast<std::size_t>(n_resamples));
    parallel_for(
        outcome.size(),
        [&](std::size_t r) {
            auto rng = derived_rng(seed, r);
            const auto w = draw_resample(labels, rng);
            if (w.empty()) {
                outcome[r] = std::numeric_limits<double>::quiet_NaN();
                return;
            }
            const double ma = weighted_metric(metric, ra, labels, w);
            const double mb = weighted_metric(metric, rb, labels, w);
            outcome[r] = ma < mb ? 1.0 : ma == mb ? 0.5 : 0.0;
        },
        policy);

    double count = 0.0, used = 0.0;
    for (double o : outcome)
        if (!std::isnan(o)) {
            count += o;
            used += 1.0;
        }
    return (1.0 + count) / (used + 1.0);
}

double paired_bootstrap_test(const std::vector<Scored>& a, const std::vector<Scored>& b, Metric metric,
                             int n_resamples, std::uint64_t seed) {
    if (a.size() != b.size()) throw DataError("paired test: claim sets differ in size");
    std::map<std::string, const Scored*> by_id;
    for (const auto& s : b) by_id[s.claim_id] = &s;
    std::vector<double> sa, sb;
    std::vector<int> y;
    for (const auto& s : a) {
        auto it = by_id.find(s.claim_id);
        if (it == by_id.end()) throw DataError("paired test: claim '" + s.claim_id + "' missing from second set");
        sa.push_back(s.score);
        sb.push_back(it->second->score);
        y.push_back(s.label);
    }
    return paired_bootstrap_test(sa, sb, y, metric, n_resamples, seed);
}

std::vector<bool> bh_fdr(std::span<const double> p, double q) {
    if (!(q > 0.0 && q < 1.0)) throw UsageError("FDR level q must lie in (0,1)");
    for (double v : p)
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("p-values must lie in [0,1]");
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    std::size_t k = 0;
    for (std::size_t j = m; j >= 1; --j)
        if (p[order[j - 1]] <= static_cast<double>(j) * q / static_cast<double>(m)) {
            k = j;
            break;
        }
    std::vector<bool> reject(m, false);
    for (std::size_t j = 0; j < k; ++j) reject[order[j]] = true;
    return reject;
}

std::string strata_key_name(StrataKey k) {
    switch (k) {
    case StrataKey::popularity_quintile: return "popularity_quintile";
    case StrataKey::language: return "language";
    case StrataKey::generation_length_group: return "generation_length_group";
    case StrataKey::position_bin: return "position_bin";
    }
    return "?";
}

StrataKey strata_key_from_name(const std::string& name) {
    for (auto k : {StrataKey::popularity_quintile, StrataKey::language, StrataKey::generation_length_group,
                   StrataKey::position_bin})
        if (strata_key_name(k) == name) return k;
    throw UsageError("unknown strata key '" + name + "'");
}

std::string generation_length_group(long long claims) {
    if (claims <= 6) return "short";
    if (claims <= 12) return "medium";
    return "long";
}

int position_bin(long long claim_index, long long generation_length) {
    if (generation_length <= 1) return 0;
    double x = static_cast<double>(claim_index) / static_cast<double>(generation_length - 1);
    x = std::clamp(x, 0.0, 1.0);
    return std::min(9, static_cast<int>(std::floor(x * 10.0)));
}

std::map<std::string, std::vector<std::size_t>> stratify(const std::vector<Scored>& scored, StrataKey key,
                                                         const StratifyOptions& opt) {
    std::map<std::string, std::vector<std::size_t>> out;
    const std::string prefix = strata_key_name(key) + "=";
    switch (key) {
    case StrataKey::language:
        for (std::size_t i = 0; i < scored.size(); ++i) out[prefix + meta_field(scored[i], "language")].push_back(i);
        break;
    case StrataKey::generation_length_group:
        for (std::size_t i = 0; i < scored.size(); ++i) {
            const auto len = static_cast<long long>(meta_number(scored[i], "generation_length"));
            out[prefix + generation_length_group(len)].push_back(i);
        }
        break;
    case StrataKey::position_bin:
        for (std::size_t i = 0; i < scored.size(); ++i) {
            const auto idx = static_cast<long long>(meta_number(scored[i], "claim_index"));
            const auto len = static_cast<long long>(meta_number(scored[i], "generation_length"));
            out[prefix + std::to_string(position_bin(idx, len))].push_back(i);
        }
        break;
    case StrataKey::popularity_quintile: {
        std::vector<double> pop(scored.size());
        for (std::size_t i = 0; i < scored.size(); ++i) pop[i] = meta_number(scored[i], "popularity");
        if (!opt.popularity_edges.empty()) {
            const auto& e = opt.popularity_edges;
            if (!std::is_sorted(e.begin(), e.end())) throw UsageError("popularity edges must be ascending");
            auto fmt = [](double v) {
                std::ostringstream os;
                os << v;
                return os.str();
            };
            for (std::size_t i = 0; i < pop.size(); ++i) {
                const auto j = static_cast<std::size_t>(std::upper_bound(e.begin(), e.end(), pop[i]) - e.begin());
                std::string label;
                if (j == 0)
                    label = "<" + fmt(e.front());
                else if (j == e.size())
                    label = ">=" + fmt(e.back());
                else
                    label = "[" + fmt(e[j - 1]) + "," + fmt(e[j]) + ")";
                out["popularity=" + label].push_back(i);
            }
            break;
        }
        // Sample quintiles by rank; a run of tied values shares the bin of its first rank.
        std::vector<std::size_t> order(pop.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pop[a] < pop[b]; });
        const std::size_t n = pop.size();
        std::size_t run_start = 0;
        for (std::size_t r = 0; r < n; ++r) {
            if (r > 0 && pop[order[r]] != pop[order[r - 1]]) run_start = r;
            const auto bin = std::min<std::size_t>(4, 5 * run_start / n);
            out[prefix + "Q" + std::to_string(bin + 1)].push_back(order[r]);
        }
        for (auto& [_, idx] : out) std::sort(idx.begin(), idx.end());
        break;
    }
    }
    return out;
}

json EvalReport::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        rows_j.push_back({{"method", r.method},
                          {"stratum", r.stratum},
                          {"n", r.n},
                          {"prevalence", r.prevalence},
                          {"roc_auc", opt_num(r.roc_auc)},
                          {"pr_auc", opt_num(r.pr_auc)},
                          {"ci_lo", opt_num(r.ci_lo)},
                          {"ci_hi", opt_num(r.ci_hi)},
                          {"p_values", r.p_values},
                          {"fdr_rejected", r.fdr_rejected}});
    }
    json strata = json::array();
    for (auto k : options.strata) strata.push_back(strata_key_name(k));
    return {{"format", "cvt.eval_report"},
            {"version", 1},
            {"options",
             {{"strata", strata},
              {"baselines", options.baselines},
              {"q", options.q},
              {"n_resamples", options.n_resamples},
              {"level", options.level},
              {"seed", options.seed}}},
            {"rows", rows_j}};
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "method,stratum,n,prevalence,roc_auc,pr_auc,ci_lo,ci_hi";
    for (const auto& b : options.baselines) os << ",p_vs_" << b << ",fdr_vs_" << b;
    os << "\n";
    for (const auto& r : rows) {
        os << r.method << "," << r.stratum << "," << r.n << "," << csv_num(r.prevalence) << "," << csv_num(r.roc_auc)
           << "," << csv_num(r.pr_auc) << "," << csv_num(r.ci_lo) << "," << csv_num(r.ci_hi);
        for (const auto& b : options.baselines) {
            auto p = r.p_values.find(b);
            auto f = r.fdr_rejected.find(b);
            os << "," << (p == r.p_values.end() ? "" : csv_num(p->second)) << ","
               << (f == r.fdr_rejected.end() ? "" : (f->second ? "1" : "0"));
        }
        os << "\n";
    }
    return os.str();
}

EvalReport build_report(const std::map<std::string, std::vector<Scored>>& by_method, const ReportOptions& opt) {
    if (by_method.empty()) throw UsageError("report needs at least one scored method");
    for (const auto& b : opt.baselines)
        if (!by_method.count(b)) throw UsageError("baseline '" + b + "' has no scores");
    if (!(opt.q > 0.0 && opt.q < 1.0)) throw UsageError("FDR level q must lie in (0,1)");

    // Canonical claim order comes from the first method; the others are aligned to it.
    const auto& ref = by_method.begin()->second;
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < ref.size(); ++i)
        if (!pos.emplace(ref[i].claim_id, i).second) throw DataError("duplicate claim_id '" + ref[i].claim_id + "'");
    std::vector<int> labels(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) labels[i] = ref[i].label;

    std::map<std::string, std::vector<double>> aligned;
    for (const auto& [method, scored] : by_method) {
        if (scored.size() != ref.size()) throw DataError("method '" + method + "' scores a different claim set");
        std::vector<double> s(ref.size(), 0.0);
        for (const auto& sc : scored) {
            auto it = pos.find(sc.claim_id);
            if (it == pos.end()) throw DataError("method '" + method + "' scores unknown claim '" + sc.claim_id + "'");
            if (sc.label != labels[it->second]) throw DataError("label mismatch for claim '" + sc.claim_id + "'");
            s[it->second] = sc.score;
        }
        aligned[method] = std::move(s);
    }

    std::vector<std::pair<std::string, std::vector<std::size_t>>> strata;
    std::vector<std::size_t> all(ref.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    strata.emplace_back("all", all);
    for (auto key : opt.strata)
        for (auto& [label, idx] : stratify(ref, key, opt.stratify)) strata.emplace_back(label, std::move(idx));

    EvalReport rep;
    rep.options = opt;
    for (const auto& [stratum, idx] : strata) {
        std::vector<int> y(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) y[k] = labels[idx[k]];
        const auto pos_count = std::count(y.begin(), y.end(), 1);
        const bool defined = pos_count > 0 && pos_count < static_cast<std::ptrdiff_t>(y.size());
        auto scores_of = [&](const std::string& m) {
            std::vector<double> s(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) s[k] = aligned.at(m)[idx[k]];
            return s;
        };

        std::vector<double> family_p;
        std::vector<std::pair<std::size_t, std::string>> family_slot;
        for (const auto& [method, _] : by_method) {
            ReportRow row;
            row.method = method;
            row.stratum = stratum;
            row.n = idx.size();
            row.prevalence = idx.empty() ? 0.0 : static_cast<double>(pos_count) / static_cast<double>(idx.size());
            if (defined) {
                const auto s = scores_of(method);
                row.roc_auc = roc_auc(s, y);
                row.pr_auc = pr_auc(s, y);
                const auto ci = bootstrap_ci(s, y, Metric::roc_auc, opt.n_resamples, opt.level, opt.seed);
                row.ci_lo = ci.lo;
                row.ci_hi = ci.hi;
                for (const auto& b : opt.baselines) {
                    if (b == method) continue;
                    const double p =
                        paired_bootstrap_test(s, scores_of(b), y, Metric::roc_auc, opt.n_resamples, opt.seed);
                    row.p_values[b] = p;
                    family_p.push_back(p);
                    family_slot.emplace_back(rep.rows.size(), b);
                }
            }
            rep.rows.push_back(std::move(row));
        }
        if (!family_p.empty()) {
            const auto rej = bh_fdr(family_p, opt.q);
            for (std::size_t k = 0; k < rej.size(); ++k)
                rep.rows[family_slot[k].first].fdr_rejected[family_slot[k].second] = rej[k];
        }
    }
    return rep;
}

} // namespace cvt
