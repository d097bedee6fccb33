#include "cvt/probes.hpp"

#include "cvt/error.hpp"
#include "cvt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace cvt {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

template <class T>
std::vector<double> pool_impl(std::span<const T> states, int n, int d, Pooling pooling, std::span<const double> theta) {
    if (n < 1 || d < 1 || states.size() != static_cast<std::size_t>(n) * d)
        throw UsageError("pool: token block shape mismatch");
    std::vector<double> out(d, 0.0);
    switch (pooling) {
    case Pooling::last_token: {
        const auto* row = states.data() + static_cast<std::size_t>(n - 1) * d;
        for (int k = 0; k < d; ++k) out[k] = row[k];
        return out;
    }
    case Pooling::mean: {
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k) out[k] += states[static_cast<std::size_t>(i) * d + k];
        for (auto& v : out) v /= n;
        return out;
    }
    case Pooling::learned_attention: {
        if (theta.size() != static_cast<std::size_t>(d)) throw UsageError("pool: theta dimension mismatch");
        std::vector<double> s(n);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) acc += theta[k] * states[static_cast<std::size_t>(i) * d + k];
            s[i] = acc;
        }
        const double m = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (auto& v : s) z += (v = std::exp(v - m));
        for (int i = 0; i < n; ++i) {
            const double a = s[i] / z;
            for (int k = 0; k < d; ++k) out[k] += a * states[static_cast<std::size_t>(i) * d + k];
        }
        return out;
    }
    }
    return out;
}

std::vector<double> targets_of(const Dataset& data) {
    const auto y = labels_of(data);
    std::vector<double> t(y.size());
    std::transform(y.begin(), y.end(), t.begin(), [](int l) { return 1.0 - l; });
    return t;
}

void check_layer(const Dataset& data, int layer) {
    if (!data.header.has(section::hidden)) throw SectionMissing("hidden");
    if (layer < 0 || layer > data.shape().layers)
        throw UsageError("layer " + std::to_string(layer) + " outside 0.." + std::to_string(data.shape().layers));
}

std::vector<std::vector<double>> pooled_all(const Dataset& data, int layer, Pooling pooling) {
    std::vector<std::vector<double>> out(data.size());
    parallel_for(
        data.size(),
        [&](std::size_t i) {
            const auto& r = data.records[i];
            out[i] = pool(r.layer_states(layer), r.n_tokens, r.shape.hidden_dim, pooling);
        },
        default_policy());
    return out;
}

LayerProbe probe_from_params(int layer, Pooling pooling, int d, std::span<const double> params, bool use_bias) {
    LayerProbe p;
    p.layer = layer;
    p.pooling = pooling;
    p.use_bias = use_bias;
    p.head.weight.assign(params.begin(), params.begin() + d);
    p.head.bias = params[d];
    if (pooling == Pooling::learned_attention) p.theta.assign(params.begin() + d + 1, params.begin() + 2 * d + 1);
    return p;
}

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    long long t = 0;

    Adam(double lr_, std::size_t n) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t k = 0; k < params.size(); ++k) {
            m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
            params[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        }
    }
};

} // namespace

std::string pooling_name(Pooling p) {
    switch (p) {
    case Pooling::learned_attention: return "learned_attention";
    case Pooling::mean: return "mean";
    case Pooling::last_token: return "last_token";
    }
    return "?";
}

Pooling pooling_from_name(const std::string& name) {
    if (name == "learned_attention") return Pooling::learned_attention;
    if (name == "mean") return Pooling::mean;
    if (name == "last_token") return Pooling::last_token;
    throw UsageError("unknown pooling '" + name + "'");
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void TrainConfig::check() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
    if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (early_stop_patience < 1) throw UsageError("early_stop_patience must be >= 1");
    if (l2_penalty < 0.0) throw UsageError("l2_penalty must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
        throw UsageError("validation_fraction must lie in [0,1)");
}

std::vector<double> pool(std::span<const float> states, int n, int d, Pooling pooling, std::span<const double> theta) {
    return pool_impl(states, n, d, pooling, theta);
}
std::vector<double> pool(std::span<const double> states, int n, int d, Pooling pooling,
                         std::span<const double> theta) {
    return pool_impl(states, n, d, pooling, theta);
}

double LinearHead::logit(std::span<const double> x) const {
    if (x.size() != weight.size()) throw UsageError("linear head: dimension mismatch");
    return dot(weight, x) + bias;
}

double probe_forward(const LayerProbe& probe, std::span<const double> pooled) {
    return sigmoid(probe.head.logit(pooled));
}

std::vector<double> LayerProbe::pooled(const ClaimRecord& r) const {
    if (layer < 0 || layer > r.shape.layers) throw UsageError("probe layer out of range for record");
    return pool(r.layer_states(layer), r.n_tokens, r.shape.hidden_dim, pooling, theta);
}
double LayerProbe::logit(const ClaimRecord& r) const { return head.logit(pooled(r)); }
double LayerProbe::probability(const ClaimRecord& r) const { return sigmoid(logit(r)); }

// ---------------------------------------------------------------------------------------
// objective

ProbeObjective::ProbeObjective(const Dataset& data, int layer, Pooling pooling, double l2)
    : pooling_(pooling), dim_(data.shape().hidden_dim), l2_(l2), targets_(targets_of(data)) {
    check_layer(data, layer);
    if (pooling == Pooling::learned_attention) {
        tokens_.reserve(data.size());
        n_tokens_.reserve(data.size());
        for (const auto& r : data.records) {
            tokens_.push_back(r.layer_states(layer));
            n_tokens_.push_back(r.n_tokens);
        }
    } else {
        pooled_ = pooled_all(data, layer, pooling);
    }
}

ProbeObjective::ProbeObjective(std::vector<std::vector<double>> features, std::vector<double> targets, double l2)
    : pooling_(Pooling::mean), l2_(l2), targets_(std::move(targets)), pooled_(std::move(features)) {
    if (pooled_.size() != targets_.size() || pooled_.empty())
        throw UsageError("feature rows and targets must be nonempty and equally long");
    dim_ = static_cast<int>(pooled_.front().size());
    for (const auto& row : pooled_)
        if (static_cast<int>(row.size()) != dim_) throw UsageError("ragged feature rows");
}

std::size_t ProbeObjective::n_params() const {
    return static_cast<std::size_t>(dim_) + 1 + (attention() ? static_cast<std::size_t>(dim_) : 0);
}

double ProbeObjective::logit(std::span<const double> params, std::size_t s) const {
    const auto w = params.first(dim_);
    if (!attention()) return dot(w, pooled_[s]) + params[dim_];
    const auto pooled = pool(tokens_[s], n_tokens_[s], dim_, pooling_, params.subspan(dim_ + 1, dim_));
    return dot(w, pooled) + params[dim_];
}

double ProbeObjective::sample_loss_grad(std::span<const double> params, std::size_t s, std::span<double> grad) const {
    const int d = dim_;
    const auto w = params.first(d);
    const double t = targets_[s];

    if (!attention()) {
        const auto& x = pooled_[s];
        const double z = dot(w, x) + params[d];
        if (!grad.empty()) {
            const double dz = sigmoid(z) - t;
            for (int k = 0; k < d; ++k) grad[k] = dz * x[k];
            grad[d] = dz;
        }
        return softplus(z) - t * z;
    }

    const auto theta = params.subspan(d + 1, d);
    const auto tok = tokens_[s];
    const int n = n_tokens_[s];

    std::vector<double> a(n);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        const float* h = tok.data() + static_cast<std::size_t>(i) * d;
        for (int k = 0; k < d; ++k) acc += theta[k] * h[k];
        a[i] = acc;
    }
    const double mx = *std::max_element(a.begin(), a.end());
    double zsum = 0.0;
    for (auto& v : a) zsum += (v = std::exp(v - mx));
    for (auto& v : a) v /= zsum;

    std::vector<double> pooled(d, 0.0);
    for (int i = 0; i < n; ++i) {
        const float* h = tok.data() + static_cast<std::size_t>(i) * d;
        for (int k = 0; k < d; ++k) pooled[k] += a[i] * h[k];
    }
    const double z = dot(w, pooled) + params[d];
    if (!grad.empty()) {
        const double dz = sigmoid(z) - t;
        for (int k = 0; k < d; ++k) grad[k] = dz * pooled[k];
        grad[d] = dz;
        // d loss / d score_i = a_i * dz * (W^T h_i - W^T pooled)
        const double w_pooled = dot(w, pooled);
        auto gtheta = grad.subspan(d + 1, d);
        std::fill(gtheta.begin(), gtheta.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const float* h = tok.data() + static_cast<std::size_t>(i) * d;
            double w_h = 0.0;
            for (int k = 0; k < d; ++k) w_h += w[k] * h[k];
            const double ds = a[i] * dz * (w_h - w_pooled);
            for (int k = 0; k < d; ++k) gtheta[k] += ds * h[k];
        }
    }
    return softplus(z) - t * z;
}

double ProbeObjective::evaluate(std::span<const double> params, std::span<double> grad,
                                std::span<const std::size_t> samples, ExecPolicy policy) const {
    const std::size_t p = n_params();
    if (params.size() != p) throw UsageError("objective: parameter count mismatch");
    if (samples.empty()) throw UsageError("objective: empty sample set");
    const bool want_grad = !grad.empty();
    if (want_grad && grad.size() != p) throw UsageError("objective: gradient buffer size mismatch");

    // Per-sample results land in fixed slots and are reduced serially in sample order, so
    // the parallel and serial paths agree bit for bit.
    const std::size_t b = samples.size();
    std::vector<double> losses(b);
    std::vector<double> grads(want_grad ? b * p : 0);
    auto body = [&](std::size_t j) {
        std::span<double> g = want_grad ? std::span<double>(grads).subspan(j * p, p) : std::span<double>{};
        losses[j] = sample_loss_grad(params, samples[j], g);
    };
    parallel_for(b, body, policy);

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(b);

    const int d = dim_;
    double penalty = 0.0;
    for (int k = 0; k < d; ++k) penalty += params[k] * params[k];
    if (attention())
        for (int k = 0; k < d; ++k) penalty += params[d + 1 + k] * params[d + 1 + k];
    loss += 0.5 * l2_ * penalty;

    if (want_grad) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t k = 0; k < p; ++k) grad[k] += grads[j * p + k];
        for (auto& g : grad) g /= static_cast<double>(b);
        for (int k = 0; k < d; ++k) grad[k] += l2_ * params[k];
        if (attention())
            for (int k = 0; k < d; ++k) grad[d + 1 + k] += l2_ * params[d + 1 + k];
    }
    return loss;
}

double ProbeObjective::evaluate(std::span<const double> params, std::span<double> grad, ExecPolicy policy) const {
    std::vector<std::size_t> all(n_samples());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return evaluate(params, grad, all, policy);
}

TrainResult train_objective(const ProbeObjective& obj, const TrainConfig& cfg) {
    cfg.check();
    const std::size_t n = obj.n_samples();
    const std::size_t p = obj.n_params();
    const int d = obj.dim();
    const ExecPolicy policy = default_policy();

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t n_val = 0;
    if (cfg.validation_fraction > 0.0 && n >= 10)
        n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.validation_fraction * n)));
    std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());

    TrainResult res;
    res.params.assign(p, 0.0);
    std::vector<double> params(p, 0.0), grad(p);
    Adam adam(cfg.learning_rate, p);
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(train.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> batch(train.data() + start, stop - start);
            const double loss = obj.evaluate(params, grad, batch, policy);
            if (!std::isfinite(loss)) throw DataError("non-finite training loss");
            if (!cfg.use_bias) grad[d] = 0.0;
            adam.step(params, grad);
        }
        res.epochs_run = epoch + 1;
        if (val.empty()) continue;
        const double vloss = obj.evaluate(params, {}, val, policy);
        if (!std::isfinite(vloss)) throw DataError("non-finite validation loss");
        if (vloss < best) {
            best = vloss;
            res.params = params;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            break;
        }
    }
    if (val.empty()) {
        res.params = params;
        best = obj.evaluate(params, {}, policy);
    }
    res.best_validation_loss = best;
    return res;
}

void require_two_classes(const Dataset& data) {
    const auto y = labels_of(data);
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(y.size()))
        throw DataError("training data must contain both truthful and hallucinated claims");
}

LayerProbe train_layer_probe(const Dataset& train, int layer, Pooling pooling, const TrainConfig& cfg) {
    require_two_classes(train);
    check_layer(train, layer);
    const ProbeObjective obj(train, layer, pooling, cfg.l2_penalty);
    const auto res = train_objective(obj, cfg);
    return probe_from_params(layer, pooling, obj.dim(), res.params, cfg.use_bias);
}

LinearHead train_linear_head(std::vector<std::vector<double>> features, std::vector<double> targets,
                             const TrainConfig& cfg) {
    const ProbeObjective obj(std::move(features), std::move(targets), cfg.l2_penalty);
    const auto res = train_objective(obj, cfg);
    LinearHead h;
    h.weight.assign(res.params.begin(), res.params.begin() + obj.dim());
    h.bias = res.params[obj.dim()];
    return h;
}

// ---------------------------------------------------------------------------------------
// baseline family

int saplma_default_layer(int n_layers) { return static_cast<int>(std::lround(n_layers / 2.0)); }
int sheeps_default_layer(int n_layers) { return (n_layers + 1) / 2; }

LayerProbe saplma_fit(const Dataset& train, int layer, const TrainConfig& cfg) {
    return train_layer_probe(train, layer, Pooling::last_token, cfg);
}

LayerProbe sheeps_fit(const Dataset& train, int layer, const TrainConfig& cfg) {
    return train_layer_probe(train, layer, Pooling::learned_attention, cfg);
}

double MassMeanProbe::score_pooled(std::span<const double> pooled) const { return -dot(direction, pooled); }

double MassMeanProbe::hallucination_score(const ClaimRecord& r) const {
    return score_pooled(pool(r.layer_states(layer), r.n_tokens, r.shape.hidden_dim, pooling));
}

MassMeanProbe mass_mean_fit(const Dataset& train, int layer, Pooling pooling) {
    require_two_classes(train);
    check_layer(train, layer);
    if (pooling == Pooling::learned_attention) throw UsageError("mass-mean probe needs a fixed pooling");
    const auto y = labels_of(train);
    const auto pooled = pooled_all(train, layer, pooling);
    const int d = train.shape().hidden_dim;
    std::vector<double> mean_true(d, 0.0), mean_false(d, 0.0);
    double n_true = 0, n_false = 0;
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        auto& acc = y[i] == 0 ? mean_true : mean_false;
        (y[i] == 0 ? n_true : n_false) += 1;
        for (int k = 0; k < d; ++k) acc[k] += pooled[i][k];
    }
    MassMeanProbe p;
    p.layer = layer;
    p.pooling = pooling;
    p.direction.resize(d);
    for (int k = 0; k < d; ++k) p.direction[k] = mean_true[k] / n_true - mean_false[k] / n_false;
    if (std::sqrt(dot(p.direction, p.direction)) < 1e-12) throw DataError("degenerate direction: class means coincide");
    return p;
}

double CcsProbe::hallucination_score(const ClaimRecord& r) const {
    return -dot(direction, pool(r.layer_states(layer), r.n_tokens, r.shape.hidden_dim, Pooling::mean));
}

namespace {

double pair_hinge(const std::vector<double>& proj, const std::vector<int>& y, double margin) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < proj.size(); ++i) (y[i] == 0 ? pos : neg).push_back(proj[i]);
    std::sort(neg.begin(), neg.end());
    // sum over pairs of max(0, margin - p + q): for each p, only q > p - margin contribute.
    std::vector<double> suffix(neg.size() + 1, 0.0);
    for (std::size_t j = neg.size(); j-- > 0;) suffix[j] = suffix[j + 1] + neg[j];
    double total = 0.0;
    for (double p : pos) {
        const auto j = static_cast<std::size_t>(std::upper_bound(neg.begin(), neg.end(), p - margin) - neg.begin());
        const auto cnt = static_cast<double>(neg.size() - j);
        total += cnt * (margin - p) + suffix[j];
    }
    return total / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

void normalize(std::vector<double>& w) {
    const double nrm = std::sqrt(dot(w, w));
    if (nrm > 0)
        for (auto& v : w) v /= nrm;
}

} // namespace

double ccs_pair_loss(const CcsProbe& probe, const Dataset& data) {
    require_two_classes(data);
    const auto y = labels_of(data);
    std::vector<double> proj(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) proj[i] = -probe.hallucination_score(data.records[i]);
    return pair_hinge(proj, y, probe.margin);
}

CcsProbe ccs_fit(const Dataset& train, const TrainConfig& cfg, double margin) {
    cfg.check();
    require_two_classes(train);
    if (!(margin > 0.0)) throw UsageError("CCS margin must be > 0");
    const int layer = train.shape().layers;
    const int d = train.shape().hidden_dim;
    const auto y = labels_of(train);
    const auto x = pooled_all(train, layer, Pooling::mean);

    // Pairs are drawn as (member of record 0's class, member of the other class). The draw
    // sequence does not depend on which class is truthful, so swapping labels negates every
    // update exactly.
    const int first_class = y.front();
    std::vector<std::size_t> group_a, group_b;
    for (std::size_t i = 0; i < y.size(); ++i) (y[i] == first_class ? group_a : group_b).push_back(i);
    const double sign = first_class == 0 ? 1.0 : -1.0; // +1 when group_a is truthful

    CcsProbe probe;
    probe.layer = layer;
    probe.margin = margin;
    probe.direction.assign(d, 0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double s = y[i] == 0 ? 1.0 / static_cast<double>(y.size() - std::count(y.begin(), y.end(), 1))
                                   : -1.0 / static_cast<double>(std::count(y.begin(), y.end(), 1));
        for (int k = 0; k < d; ++k) probe.direction[k] += s * x[i][k];
    }
    if (std::sqrt(dot(probe.direction, probe.direction)) < 1e-12) probe.direction[0] = sign;
    normalize(probe.direction);

    auto full_loss = [&](const std::vector<double>& w) {
        std::vector<double> proj(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) proj[i] = dot(w, x[i]);
        return pair_hinge(proj, y, margin);
    };

    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick_a(0, group_a.size() - 1), pick_b(0, group_b.size() - 1);
    const std::size_t pairs_per_epoch = std::max(group_a.size(), group_b.size());
    Adam adam(cfg.learning_rate, d);
    std::vector<double> w = probe.direction, grad(d);
    double best = full_loss(w);
    for (int epoch = 0; epoch < cfg.max_epochs && best > 0.0; ++epoch) {
        for (std::size_t start = 0; start < pairs_per_epoch; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(pairs_per_epoch, start + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t k = start; k < stop; ++k) {
                const auto& xa = x[group_a[pick_a(rng)]];
                const auto& xb = x[group_b[pick_b(rng)]];
                double gap = 0.0; // w^T (x_true - x_false)
                for (int j = 0; j < d; ++j) gap += sign * w[j] * (xa[j] - xb[j]);
                if (margin - gap > 0.0)
                    for (int j = 0; j < d; ++j) grad[j] -= sign * (xa[j] - xb[j]);
            }
            for (auto& g : grad) g /= static_cast<double>(stop - start);
            adam.step(w, grad);
            normalize(w);
        }
        const double loss = full_loss(w);
        if (loss < best) {
            best = loss;
            probe.direction = w;
        }
    }
    return probe;
}

std::size_t mind_select(std::span<const MindCandidate> c) {
    if (c.empty()) throw UsageError("MIND: empty candidate set");
    std::size_t best = 0;
    auto rank = [](Pooling p) { return p == Pooling::mean ? 0 : p == Pooling::last_token ? 1 : 2; };
    for (std::size_t i = 1; i < c.size(); ++i) {
        const auto& a = c[i];
        const auto& b = c[best];
        if (a.validation_auc > b.validation_auc ||
            (a.validation_auc == b.validation_auc &&
             (a.layer < b.layer || (a.layer == b.layer && rank(a.pooling) < rank(b.pooling)))))
            best = i;
    }
    return best;
}

MindResult mind_fit(const Dataset& train, double validation_fraction, const std::vector<int>& layers,
                    const TrainConfig& cfg) {
    if (layers.empty()) throw UsageError("MIND: empty candidate set");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw UsageError("MIND validation_fraction must lie in (0,1)");
    require_two_classes(train);
    for (int l : layers) check_layer(train, l);
    const auto [inner, holdout] = split_train_calib(train, 1.0 - validation_fraction, cfg.seed);
    const auto val_labels = labels_of(holdout);

    const Pooling kinds[2] = {Pooling::mean, Pooling::last_token};
    std::vector<MindCandidate> cands;
    for (int l : layers)
        for (auto k : kinds) cands.push_back({l, k, 0.0});
    std::vector<LayerProbe> probes(cands.size());
    parallel_for(
        cands.size(),
        [&](std::size_t i) {
            probes[i] = train_layer_probe(inner, cands[i].layer, cands[i].pooling, cfg);
            std::vector<double> s(holdout.size());
            for (std::size_t j = 0; j < holdout.size(); ++j) s[j] = probes[i].hallucination_score(holdout.records[j]);
            cands[i].validation_auc = roc_auc(s, val_labels);
        },
        default_policy());

    const auto win = mind_select(cands);
    MindResult res;
    res.probe = probes[win];
    res.layer = cands[win].layer;
    res.pooling = cands[win].pooling;
    res.candidates = std::move(cands);
    return res;
}

// ---------------------------------------------------------------------------------------
// SATRMD

double GaussianStats::relative_distance(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double a = x[k] - mean_in[k];
        const double b = x[k] - mean_all[k];
        s += a * a / var_in[k] - b * b / var_all[k];
    }
    return s;
}

double GaussianStats::feature(const ClaimRecord& r) const {
    const int d = r.shape.hidden_dim;
    if (static_cast<std::size_t>(d) != mean_in.size()) throw UsageError("SATRMD: dimension mismatch");
    if (layer < 0 || layer > r.shape.layers) throw UsageError("SATRMD: layer out of range for record");
    std::vector<double> x(d);
    double total = 0.0;
    for (int i = 0; i < r.n_tokens; ++i) {
        const auto h = r.token_state(layer, i);
        std::copy(h.begin(), h.end(), x.begin());
        total += relative_distance(x);
    }
    return total / r.n_tokens;
}

GaussianStats fit_gaussian_stats(const Dataset& train, int layer, double shrinkage) {
    require_two_classes(train);
    check_layer(train, layer);
    if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw UsageError("shrinkage must lie in [0,1]");
    const int d = train.shape().hidden_dim;
    GaussianStats g;
    g.layer = layer;
    g.shrinkage = shrinkage;

    auto moments = [&](bool truthful_only, std::vector<double>& mean, std::vector<double>& var) {
        mean.assign(d, 0.0);
        var.assign(d, 0.0);
        double count = 0;
        for (const auto& r : train.records) {
            if (truthful_only && *r.label != 0) continue;
            for (int i = 0; i < r.n_tokens; ++i) {
                const auto h = r.token_state(layer, i);
                for (int k = 0; k < d; ++k) mean[k] += h[k];
            }
            count += r.n_tokens;
        }
        for (auto& m : mean) m /= count;
        for (const auto& r : train.records) {
            if (truthful_only && *r.label != 0) continue;
            for (int i = 0; i < r.n_tokens; ++i) {
                const auto h = r.token_state(layer, i);
                for (int k = 0; k < d; ++k) var[k] += (h[k] - mean[k]) * (h[k] - mean[k]);
            }
        }
        for (auto& v : var) {
            v = (1.0 - shrinkage) * (v / count) + shrinkage;
            if (!(v > 0.0)) throw DataError("SATRMD: zero variance at layer " + std::to_string(layer));
        }
    };
    moments(true, g.mean_in, g.var_in);
    moments(false, g.mean_all, g.var_all);
    return g;
}

std::vector<double> satrmd_features(const ClaimRecord& r, std::span<const GaussianStats> stats) {
    std::vector<double> f(stats.size());
    for (std::size_t j = 0; j < stats.size(); ++j) f[j] = stats[j].feature(r);
    return f;
}

std::vector<double> SatrmdModel::features(const ClaimRecord& r) const {
    auto f = satrmd_features(r, stats);
    for (std::size_t j = 0; j < f.size(); ++j) f[j] = (f[j] - feature_mean[j]) / feature_scale[j];
    return f;
}

double SatrmdModel::hallucination_score(const ClaimRecord& r) const { return -head.logit(features(r)); }

SatrmdModel satrmd_fit(const Dataset& train, const TrainConfig& cfg, std::vector<int> layers, double shrinkage) {
    require_two_classes(train);
    if (layers.empty())
        for (int l = 1; l <= train.shape().layers; ++l) layers.push_back(l);
    SatrmdModel m;
    m.stats.resize(layers.size());
    parallel_for(
        layers.size(), [&](std::size_t j) { m.stats[j] = fit_gaussian_stats(train, layers[j], shrinkage); },
        default_policy());

    std::vector<std::vector<double>> rows(train.size());
    parallel_for(
        train.size(), [&](std::size_t i) { rows[i] = satrmd_features(train.records[i], m.stats); }, default_policy());

    const std::size_t f = layers.size();
    m.feature_mean.assign(f, 0.0);
    m.feature_scale.assign(f, 0.0);
    for (const auto& row : rows)
        for (std::size_t j = 0; j < f; ++j) m.feature_mean[j] += row[j];
    for (auto& v : m.feature_mean) v /= static_cast<double>(rows.size());
    for (const auto& row : rows)
        for (std::size_t j = 0; j < f; ++j) m.feature_scale[j] += std::pow(row[j] - m.feature_mean[j], 2);
    for (auto& v : m.feature_scale) {
        v = std::sqrt(v / static_cast<double>(rows.size()));
        if (!(v > 1e-12)) v = 1.0;
    }
    for (auto& row : rows)
        for (std::size_t j = 0; j < f; ++j) row[j] = (row[j] - m.feature_mean[j]) / m.feature_scale[j];
    m.head = train_linear_head(std::move(rows), targets_of(train), cfg);
    return m;
}

} // namespace cvt
