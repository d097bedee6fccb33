// Serial reference vs parallel kernels.

#include "cvt/eval.hpp"
#include "cvt/pipeline.hpp"
#include "cvt/probes.hpp"
#include "cvt/synth.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

const cvt::Dataset& data() {
    static const cvt::Dataset ds = [] {
        cvt::SynthConfig c;
        c.n_claims = 1000;
        c.seed = 1;
        return cvt::generate(c);
    }();
    return ds;
}

cvt::ExecPolicy policy_of(const benchmark::State& state) {
    return state.range(0) ? cvt::ExecPolicy::parallel : cvt::ExecPolicy::serial;
}

void objective_evaluate(benchmark::State& state) {
    const cvt::ProbeObjective obj(data(), 16, cvt::Pooling::learned_attention, 1e-4);
    std::vector<double> params(obj.n_params(), 0.01), grad(obj.n_params());
    for (auto _ : state) benchmark::DoNotOptimize(obj.evaluate(params, grad, policy_of(state)));
}

void score_intra(benchmark::State& state) {
    static const nlohmann::json model = [] {
        cvt::MethodOptions o;
        o.train.max_epochs = 5;
        return cvt::train_method("intra", data(), o);
    }();
    const auto fn = cvt::make_scorer("intra", &model, data().header.shape);
    for (auto _ : state) benchmark::DoNotOptimize(cvt::score_dataset(data(), "intra", fn, policy_of(state)));
}

void bootstrap(benchmark::State& state) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> s(2000);
    std::vector<int> y(2000);
    for (std::size_t i = 0; i < s.size(); ++i) {
        y[i] = static_cast<int>(i % 2);
        s[i] = g(rng) + y[i];
    }
    for (auto _ : state)
        benchmark::DoNotOptimize(cvt::bootstrap_ci(s, y, cvt::Metric::roc_auc, 2000, 0.95, 0, policy_of(state)));
}

} // namespace

BENCHMARK(objective_evaluate)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(score_intra)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(bootstrap)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
