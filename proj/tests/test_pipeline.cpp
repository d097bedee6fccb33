#include "cvt/error.hpp"
#include "cvt/model_io.hpp"
#include "cvt/pipeline.hpp"
#include "cvt/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

using namespace cvt;
using nlohmann::json;

namespace {

SynthConfig small_config(std::uint64_t seed, std::size_t n) {
    SynthConfig c;
    c.shape = {6, 8, 2};
    c.n_claims = n;
    c.signal_layers = {2, 3, 4};
    c.min_tokens = 6;
    c.max_tokens = 12;
    c.signal_strength = 1.2;
    c.seed = seed;
    return c;
}

MethodOptions quick_options() {
    MethodOptions o;
    o.train.max_epochs = 25;
    o.train.learning_rate = 1e-2;
    o.seed = 3;
    return o;
}

// Train and test must share one generation: planted directions depend on the seed.
std::pair<Dataset, Dataset> split_generation(std::uint64_t seed, std::size_t n_train, std::size_t n_test) {
    const auto all = generate(small_config(seed, n_train + n_test));
    std::vector<std::size_t> a(n_train), b(n_test);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), n_train);
    return {subset(all, a), subset(all, b)};
}

} // namespace

TEST_CASE("base64 reals") {
    const std::vector<double> empty;
    CHECK(encode_reals(empty).empty());
    CHECK(decode_reals("").empty());
    const std::vector<double> v = {0.0, -0.0, 1.5, -2.25e-300, std::numeric_limits<double>::max(),
                                   std::numeric_limits<double>::denorm_min(), 0.1};
    const auto back = decode_reals(encode_reals(v));
    REQUIRE(back.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(back[i] == v[i]);
        CHECK(std::signbit(back[i]) == std::signbit(v[i]));
    }
    // 1.0 is 00 00 00 00 00 00 f0 3f little-endian
    CHECK(encode_reals(std::vector<double>{1.0}) == "AAAAAAAA8D8=");
    for (std::size_t n = 1; n <= 4; ++n) CHECK(decode_reals(encode_reals(std::vector<double>(n, 3.0))).size() == n);
    CHECK_THROWS_AS(decode_reals("AAAA"), DataError);         // 3 bytes, not a multiple of 8
    CHECK_THROWS_AS(decode_reals("AAAAAAAA8D8"), DataError);  // bad length
    CHECK_THROWS_AS(decode_reals("AAAAAA*A8D8="), DataError); // bad character
}

TEST_CASE("model json round trips") {
    const auto ds = generate(small_config(81, 240));
    auto o = quick_options();
    const auto cfg = o.train_config();

    SUBCASE("train config") {
        TrainConfig t;
        t.learning_rate = 0.123;
        t.use_bias = false;
        t.seed = 99;
        const auto back = train_config_from_json(to_json(t));
        CHECK(to_json(back) == to_json(t));
        CHECK_THROWS_AS(train_config_from_json(json{{"learning_rate", "x"}}), DataError);
    }
    SUBCASE("layer probes") {
        for (Pooling p : {Pooling::learned_attention, Pooling::mean, Pooling::last_token}) {
            const auto probe = train_layer_probe(ds, 3, p, cfg);
            const auto back = layer_probe_from_json(to_json(probe));
            for (const auto& r : ds.records) CHECK(back.logit(r) == probe.logit(r));
        }
    }
    SUBCASE("mass mean, ccs, satrmd") {
        const auto mm = mass_mean_fit(ds, 3);
        const auto mm2 = mass_mean_from_json(to_json(mm));
        const auto ccs = ccs_fit(ds, cfg);
        const auto ccs2 = ccs_from_json(to_json(ccs));
        const auto sat = satrmd_fit(ds, cfg);
        const auto sat2 = satrmd_from_json(to_json(sat));
        for (const auto& r : ds.records) {
            CHECK(mm2.hallucination_score(r) == mm.hallucination_score(r));
            CHECK(ccs2.hallucination_score(r) == ccs.hallucination_score(r));
            CHECK(sat2.hallucination_score(r) == sat.hallucination_score(r));
        }
    }
    SUBCASE("rauq and mind") {
        RauqConfig rc;
        rc.alpha = 0.1 + 0.2; // not exactly representable in decimal
        rc.epsilon = 1e-7;
        rc.layer_set = {2, 3};
        rc.selected_heads = select_rauq_heads(ds, rc.layer_set);
        const auto rc2 = rauq_from_json(to_json(rc));
        CHECK(rc2.alpha == rc.alpha);
        CHECK(rc2.epsilon == rc.epsilon);
        CHECK(rc2.selected_heads == rc.selected_heads);
        CHECK(rc2.layer_set == rc.layer_set);

        const auto mind = mind_fit(ds, 0.2, {2, 5}, cfg);
        const auto mind2 = mind_from_json(to_json(mind));
        CHECK(mind2.layer == mind.layer);
        CHECK(mind2.candidates.size() == mind.candidates.size());
        for (const auto& r : ds.records) CHECK(mind2.probe.logit(r) == mind.probe.logit(r));
    }
    SUBCASE("intra") {
        IntraConfig ic;
        ic.layers = std::vector<int>{2, 3, 4};
        ic.train = cfg;
        const auto m = fit_intra(ds, ic);
        const auto m2 = intra_from_json(to_json(m));
        CHECK(m2.layers == m.layers);
        CHECK(m2.beta == m.beta);
        CHECK(m2.intercept == m.intercept);
        for (const auto& r : ds.records) CHECK(intra_score(r, m2) == intra_score(r, m));
        auto j = to_json(m);
        j["format"] = "cvt.probe";
        CHECK_THROWS_AS(intra_from_json(j), DataError);
        j = to_json(m);
        j["beta"] = encode_reals(std::vector<double>{1.0});
        CHECK_THROWS(intra_from_json(j));
    }
}

TEST_CASE("method registry") {
    CHECK(method_names().size() == 12);
    for (const char* m : {"sp", "ppl", "mte", "attn_score"}) CHECK(is_training_free(m));
    for (const char* m : {"rauq", "saplma", "mm", "ccs", "mind", "sheeps", "satrmd", "intra"}) {
        CHECK(is_method(m));
        CHECK_FALSE(is_training_free(m));
    }
    CHECK_FALSE(is_method("bogus"));
    CHECK_THROWS_AS(require_method("bogus"), UsageError);
}

TEST_CASE("every method trains and scores") {
    const auto [train, test] = split_generation(82, 400, 200);
    auto o = quick_options();
    o.layers = std::vector<int>{2, 3, 4};
    o.layer = 3;
    const auto y = labels_of(test);
    for (const auto& method : method_names()) {
        CAPTURE(method);
        json model;
        const json* mp = nullptr;
        if (!is_training_free(method)) {
            model = train_method(method, train, o);
            CHECK(model.at("format") == "cvt.model");
            CHECK(model.at("version") == 1);
            CHECK(model.at("method") == method);
            CHECK(model.at("model_id") == "synthetic");
            CHECK(model.at("n_train") == 400);
            // survives a text round trip
            model = json::parse(model.dump());
            mp = &model;
        }
        const auto fn = make_scorer(method, mp, test.header.shape, o);
        const auto scored = score_dataset(test, method, fn);
        REQUIRE(scored.size() == test.records.size());
        std::vector<double> s;
        for (std::size_t i = 0; i < scored.size(); ++i) {
            CHECK(scored[i].claim_id == test.records[i].claim_id);
            CHECK(scored[i].method == method);
            CHECK(scored[i].label == y[i]);
            CHECK(std::isfinite(scored[i].score));
            s.push_back(scored[i].score);
        }
        // hidden-state methods that look at a signal layer should beat chance clearly
        if (method == "intra" || method == "sheeps" || method == "mm" || method == "mind")
            CHECK(roc_auc(s, y) > 0.8);
    }
}

TEST_CASE("scorer construction errors") {
    const auto ds = generate(small_config(84, 120));
    auto o = quick_options();
    o.layer = 3;
    const Shape& s = ds.header.shape;
    CHECK_THROWS_AS(make_scorer("saplma", nullptr, s, o), UsageError);
    const auto model = train_method("saplma", ds, o);
    CHECK_THROWS_AS(make_scorer("sheeps", &model, s, o), UsageError);
    auto wrong = model;
    wrong["format"] = "something";
    CHECK_THROWS(make_scorer("saplma", &wrong, s, o));
    wrong = model;
    wrong["version"] = 2;
    CHECK_THROWS(make_scorer("saplma", &wrong, s, o));
    CHECK_THROWS_AS(train_method("bogus", ds, o), UsageError);
    CHECK_THROWS_AS(make_scorer("bogus", nullptr, s, o), UsageError);
}

TEST_CASE("unlabeled records score with label -1") {
    const auto ds = testing::random_dataset(85, {2, 3, 1}, 5, 1, 4, false);
    const auto scored = score_dataset(ds, "sp", make_scorer("sp", nullptr, ds.header.shape));
    for (const auto& r : scored) CHECK(r.label == -1);
}

TEST_CASE("scores jsonl") {
    std::vector<Scored> v = {{"a", "sp", 0.1, 1, {{"language", "en"}}},
                             {"b", "sp", -3.25e-7, 0, {}},
                             {"c", "sp", 2.0, -1, {{"popularity", "5"}}}};
    const auto path = testing::temp_path("scores.jsonl");
    write_scores_jsonl(v, path);
    const auto back = read_scores_jsonl(path);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].claim_id == v[i].claim_id);
        CHECK(back[i].score == v[i].score);
        CHECK(back[i].label == v[i].label);
        CHECK(back[i].meta == v[i].meta);
    }
    {
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        std::getline(in, line);
        std::getline(in, line);
        CHECK_FALSE(json::parse(line).contains("label"));
    }
    {
        std::ofstream out(path);
        out << R"({"claim_id":"a","method":"sp","score":1.0})" << "\n" << "{not json\n";
    }
    try {
        read_scores_jsonl(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
    }
}

TEST_CASE("layer range parsing") {
    const auto r = parse_layer_ranges("0-8,11-22, 16");
    REQUIRE(r.size() == 3);
    CHECK(r[0].size() == 9);
    CHECK(r[0].front() == 0);
    CHECK(r[1].front() == 11);
    CHECK(r[1].back() == 22);
    CHECK(r[2] == std::vector<int>{16});
    CHECK(range_label(r[1]) == "11-22");
    CHECK(range_label(r[2]) == "16");
    CHECK_THROWS_AS(parse_layer_ranges("5-3"), UsageError);
    CHECK_THROWS_AS(parse_layer_ranges("a-b"), UsageError);
    CHECK_THROWS_AS(parse_layer_ranges(""), UsageError);
}

TEST_CASE("ablation rows") {
    const auto [train, test] = split_generation(86, 400, 200);
    AblationOptions ao;
    ao.intra.train.max_epochs = 20;
    ao.intra.train.learning_rate = 1e-2;
    ao.n_resamples = 200;
    const auto rows = ablate_intra(train, test, parse_layer_ranges("1,2-4,5-6"), ao);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].range == "1");
    CHECK(rows[1].layers == std::vector<int>{2, 3, 4});
    for (const auto& row : rows) {
        CHECK(row.n == 200);
        CHECK(row.ci_lo <= row.roc_auc);
        CHECK(row.roc_auc <= row.ci_hi);
    }
    CHECK(rows[1].roc_auc > rows[0].roc_auc);
    CHECK(rows[1].roc_auc > rows[2].roc_auc);
    const auto j = ablation_to_json(rows, ao);
    CHECK(j.at("format") == "cvt.ablation");
    CHECK(j.at("rows").size() == 3);
    CHECK_THROWS_AS(ablate_intra(train, test, parse_layer_ranges("7"), ao), UsageError);
}
