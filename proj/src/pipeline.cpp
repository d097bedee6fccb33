#include "cvt/pipeline.hpp"

#include "cvt/error.hpp"
#include "cvt/model_io.hpp"
#include "cvt/scorers.hpp"

#include <algorithm>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace cvt {

using nlohmann::json;

const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names = {"sp",  "ppl", "mte",  "attn_score", "rauq",   "saplma",
                                                   "mm",  "ccs", "mind", "sheeps",     "satrmd", "intra"};
    return names;
}

bool is_method(const std::string& name) {
    const auto& n = method_names();
    return std::find(n.begin(), n.end(), name) != n.end();
}

bool is_training_free(const std::string& name) {
    return name == "sp" || name == "ppl" || name == "mte" || name == "attn_score";
}

void require_method(const std::string& name) {
    if (!is_method(name)) {
        std::string all;
        for (const auto& m : method_names()) all += (all.empty() ? "" : ", ") + m;
        throw UsageError("unknown method '" + name + "' (expected one of: " + all + ")");
    }
}

TrainConfig MethodOptions::train_config() const {
    TrainConfig c = train;
    c.seed = seed;
    return c;
}

namespace {

std::vector<int> middle_layers(const Shape& shape) {
    const auto [lo, hi] = layer_range(shape.layers);
    std::vector<int> v;
    for (int l = lo; l <= hi; ++l) v.push_back(l);
    return v;
}

std::vector<int> all_blocks(const Shape& shape) {
    std::vector<int> v;
    for (int l = 1; l <= shape.layers; ++l) v.push_back(l);
    return v;
}

void check_layer(int layer, const Shape& shape) {
    if (layer < 0 || layer > shape.layers)
        throw UsageError("layer " + std::to_string(layer) + " outside 0.." + std::to_string(shape.layers));
}

json wrap(const std::string& method, const Dataset& train, json payload, const MethodOptions& o) {
    json j{{"format", "cvt.model"}, {"version", kModelFormatVersion}, {"method", method},
           {"model_id", train.header.model_id}, {"n_train", train.size()}, {"seed", o.seed}};
    j["train_config"] = to_json(o.train_config());
    j["model"] = std::move(payload);
    return j;
}

const json& unwrap(const std::string& method, const json* doc) {
    if (doc == nullptr) throw UsageError("method '" + method + "' needs a trained model (--model)");
    if (!doc->is_object() || doc->value("format", std::string()) != "cvt.model")
        throw DataError("model file is not a cvt.model document");
    if (doc->value("version", 0) != kModelFormatVersion) throw DataError("unsupported model document version");
    const auto m = doc->value("method", std::string());
    if (m != method) throw UsageError("model was trained for method '" + m + "', not '" + method + "'");
    if (!doc->contains("model")) throw DataError("model document has no 'model' payload");
    return doc->at("model");
}

} // namespace

json train_method(const std::string& method, const Dataset& train, const MethodOptions& o) {
    require_method(method);
    if (is_training_free(method)) throw UsageError("method '" + method + "' is training-free; nothing to train");
    const Shape& shape = train.shape();
    const TrainConfig cfg = o.train_config();
    cfg.check();

    if (method == "rauq") {
        RauqConfig rc;
        rc.alpha = o.alpha;
        rc.epsilon = o.epsilon;
        rc.layer_set = o.layers.value_or(middle_layers(shape));
        rc.selected_heads = select_rauq_heads(train, rc.layer_set);
        check_rauq_config(rc, shape);
        return wrap(method, train, to_json(rc), o);
    }
    if (method == "saplma" || method == "sheeps") {
        const int layer = o.layer.value_or(method == "saplma" ? saplma_default_layer(shape.layers)
                                                              : sheeps_default_layer(shape.layers));
        check_layer(layer, shape);
        const auto probe = method == "saplma" ? saplma_fit(train, layer, cfg) : sheeps_fit(train, layer, cfg);
        return wrap(method, train, to_json(probe), o);
    }
    if (method == "mm") {
        const int layer = o.layer.value_or(shape.layers);
        check_layer(layer, shape);
        return wrap(method, train, to_json(mass_mean_fit(train, layer)), o);
    }
    if (method == "ccs") return wrap(method, train, to_json(ccs_fit(train, cfg, o.ccs_margin)), o);
    if (method == "mind") {
        const auto layers = o.layers.value_or(all_blocks(shape));
        for (int l : layers) check_layer(l, shape);
        return wrap(method, train, to_json(mind_fit(train, o.mind_validation_fraction, layers, cfg)), o);
    }
    if (method == "satrmd") {
        const auto layers = o.layers.value_or(all_blocks(shape));
        for (int l : layers) check_layer(l, shape);
        return wrap(method, train, to_json(satrmd_fit(train, cfg, layers, o.satrmd_shrinkage)), o);
    }
    // intra
    IntraConfig ic;
    ic.split_ratio = o.split_ratio;
    ic.layers = o.layers;
    ic.train = cfg;
    ic.lambda = o.lambda;
    ic.seed = o.seed;
    return wrap(method, train, to_json(fit_intra(train, ic)), o);
}

ScoreFn make_scorer(const std::string& method, const json* model, const Shape& shape, const MethodOptions& o) {
    require_method(method);
    if (method == "sp") return sp_score;
    if (method == "ppl") return ppl_score;
    if (method == "mte") return mte_score;
    if (method == "attn_score") {
        const auto layers = o.layers.value_or(middle_layers(shape));
        if (layers.empty()) throw UsageError("attn_score needs a nonempty layer set");
        for (int l : layers)
            if (l < 1 || l > shape.layers) throw UsageError("attn_score layers must lie in 1..L");
        const double eps = o.attention_epsilon;
        return [layers, eps](const ClaimRecord& r) { return attention_score(r, layers, eps); };
    }

    const json& payload = unwrap(method, model);
    auto check_probe_layer = [&](int layer) {
        if (layer > shape.layers) throw DataError("model layer " + std::to_string(layer) + " exceeds dump depth");
    };
    if (method == "rauq") {
        auto rc = std::make_shared<RauqConfig>(rauq_from_json(payload));
        check_rauq_config(*rc, shape);
        return [rc](const ClaimRecord& r) { return rauq_score(r, *rc); };
    }
    if (method == "saplma" || method == "sheeps") {
        auto p = std::make_shared<LayerProbe>(layer_probe_from_json(payload));
        check_probe_layer(p->layer);
        return [p](const ClaimRecord& r) { return p->hallucination_score(r); };
    }
    if (method == "mm") {
        auto p = std::make_shared<MassMeanProbe>(mass_mean_from_json(payload));
        check_probe_layer(p->layer);
        return [p](const ClaimRecord& r) { return p->hallucination_score(r); };
    }
    if (method == "ccs") {
        auto p = std::make_shared<CcsProbe>(ccs_from_json(payload));
        check_probe_layer(p->layer);
        return [p](const ClaimRecord& r) { return p->hallucination_score(r); };
    }
    if (method == "mind") {
        auto p = std::make_shared<MindResult>(mind_from_json(payload));
        check_probe_layer(p->probe.layer);
        return [p](const ClaimRecord& r) { return p->probe.hallucination_score(r); };
    }
    if (method == "satrmd") {
        auto m = std::make_shared<SatrmdModel>(satrmd_from_json(payload));
        for (const auto& s : m->stats) check_probe_layer(s.layer);
        return [m](const ClaimRecord& r) { return m->hallucination_score(r); };
    }
    auto m = std::make_shared<IntraModel>(intra_from_json(payload));
    for (int l : m->layers) check_probe_layer(l);
    return [m](const ClaimRecord& r) { return m->hallucination_score(r); };
}

std::vector<Scored> score_dataset(const Dataset& data, const std::string& method, const ScoreFn& scorer,
                                  ExecPolicy policy) {
    std::vector<Scored> out(data.size());
    parallel_for(
        data.size(),
        [&](std::size_t i) {
            const auto& r = data.records[i];
            out[i].claim_id = r.claim_id;
            out[i].method = method;
            out[i].score = scorer(r);
            out[i].label = r.label.value_or(-1);
            out[i].meta = r.meta;
        },
        policy);
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open '" + tmp.string() + "' for writing");
        f << text;
        if (!f) throw DataError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move output into place at '" + path.string() + "': " + ec.message());
}

void write_scores_jsonl(const std::vector<Scored>& scored, const std::filesystem::path& path) {
    std::string text;
    for (const auto& s : scored) {
        json j{{"claim_id", s.claim_id}, {"method", s.method}, {"score", s.score}};
        if (s.label == 0 || s.label == 1) j["label"] = s.label;
        j["meta"] = s.meta;
        text += j.dump() + "\n";
    }
    write_text_file(path, text);
}

std::vector<Scored> read_scores_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open scores file '" + path.string() + "'");
    std::vector<Scored> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        try {
            const auto j = json::parse(line);
            Scored s;
            s.claim_id = j.at("claim_id").get<std::string>();
            s.method = j.at("method").get<std::string>();
            if (!j.at("score").is_number()) throw DataError(where + ": score is not a number");
            s.score = j.at("score").get<double>();
            s.label = -1;
            if (j.contains("label") && !j.at("label").is_null()) {
                s.label = j.at("label").get<int>();
                if (s.label != 0 && s.label != 1) throw DataError(where + ": label must be 0 or 1");
            }
            if (j.contains("meta"))
                for (const auto& [k, v] : j.at("meta").items())
                    s.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    return out;
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path.string() + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::vector<std::vector<int>> parse_layer_ranges(const std::string& spec) {
    std::vector<std::vector<int>> ranges;
    std::stringstream ss(spec);
    std::string part;
    auto to_int = [&](const std::string& s) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != s.size() || v < 0) throw UsageError("bad layer range element '" + s + "'");
        return v;
    };
    while (std::getline(ss, part, ',')) {
        part.erase(std::remove_if(part.begin(), part.end(), ::isspace), part.end());
        if (part.empty()) throw UsageError("empty entry in layer ranges '" + spec + "'");
        const auto dash = part.find('-');
        std::vector<int> layers;
        if (dash == std::string::npos) {
            layers.push_back(to_int(part));
        } else {
            const int lo = to_int(part.substr(0, dash)), hi = to_int(part.substr(dash + 1));
            if (hi < lo) throw UsageError("layer range '" + part + "' is reversed");
            for (int l = lo; l <= hi; ++l) layers.push_back(l);
        }
        ranges.push_back(std::move(layers));
    }
    if (ranges.empty()) throw UsageError("no layer ranges given");
    return ranges;
}

std::string range_label(const std::vector<int>& layers) {
    if (layers.size() == 1) return std::to_string(layers.front());
    return std::to_string(layers.front()) + "-" + std::to_string(layers.back());
}

std::vector<AblationRow> ablate_intra(const Dataset& train, const Dataset& test,
                                      const std::vector<std::vector<int>>& ranges, const AblationOptions& options) {
    if (!(train.shape() == test.shape())) throw DataError("train and test dumps have different shapes");
    std::set<int> needed;
    for (const auto& r : ranges)
        for (int l : r) {
            check_layer(l, train.shape());
            needed.insert(l);
        }
    const auto [part_a, part_b] = split_train_calib(train, options.intra.split_ratio, options.intra.seed);
    TrainConfig tc = options.intra.train;
    tc.seed = options.intra.seed;
    const std::vector<int> layer_list(needed.begin(), needed.end());
    const auto probes = train_layer_probes(part_a, layer_list, tc);
    const auto test_labels = labels_of(test);

    std::vector<AblationRow> rows;
    for (const auto& range : ranges) {
        std::vector<LayerProbe> chosen;
        for (int l : range)
            chosen.push_back(probes[std::lower_bound(layer_list.begin(), layer_list.end(), l) - layer_list.begin()]);
        const auto model = calibrate_intra(std::move(chosen), part_b, options.intra.lambda);
        std::vector<double> s(test.size());
        parallel_for(
            test.size(), [&](std::size_t i) { s[i] = model.hallucination_score(test.records[i]); }, default_policy());
        AblationRow row;
        row.range = range_label(range);
        row.layers = range;
        row.n = test.size();
        row.roc_auc = roc_auc(s, test_labels);
        row.pr_auc = pr_auc(s, test_labels);
        const auto ci =
            bootstrap_ci(s, test_labels, Metric::roc_auc, options.n_resamples, options.level, options.intra.seed);
        row.ci_lo = ci.lo;
        row.ci_hi = ci.hi;
        rows.push_back(std::move(row));
    }
    return rows;
}

json ablation_to_json(const std::vector<AblationRow>& rows, const AblationOptions& options) {
    json out{{"format", "cvt.ablation"}, {"version", 1}, {"method", "intra"}};
    out["config"] = {{"split_ratio", options.intra.split_ratio},
                     {"lambda", options.intra.lambda},
                     {"seed", options.intra.seed},
                     {"n_resamples", options.n_resamples},
                     {"level", options.level},
                     {"train", to_json(options.intra.train)}};
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"range", r.range},
                       {"layers", r.layers},
                       {"n", r.n},
                       {"roc_auc", r.roc_auc},
                       {"pr_auc", r.pr_auc},
                       {"ci_lo", r.ci_lo},
                       {"ci_hi", r.ci_hi}});
    out["rows"] = arr;
    return out;
}

} // namespace cvt
