// cvt: validate, synth, train, score, eval and ablate over CVD dumps.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include "cvt/claimdump.hpp"
#include "cvt/error.hpp"
#include "cvt/eval.hpp"
#include "cvt/parallel.hpp"
#include "cvt/pipeline.hpp"
#include "cvt/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <set>
#include <sstream>

using nlohmann::json;

namespace {

// Reads --run-config files: top-level keys are global flags, nested objects named after a
// subcommand hold that subcommand's flags, e.g. {"threads": 2, "train": {"epochs": 50}}.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        throw CLI::ConversionError("writing JSON run configs is not supported");
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            input >> j;
        } catch (const json::exception& e) {
            throw CLI::ConversionError(std::string("run config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("run config must be a JSON object");
        std::vector<CLI::ConfigItem> items;
        flatten(j, {}, items);
        return items;
    }

private:
    static void flatten(const json& obj, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
        for (const auto& [key, value] : obj.items()) {
            if (value.is_object()) {
                auto p = parents;
                p.push_back(key);
                flatten(value, p, out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v, key));
            } else {
                item.inputs.push_back(scalar(value, key));
            }
            out.push_back(std::move(item));
        }
    }

    static std::string scalar(const json& v, const std::string& key) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number()) return v.dump();
        throw CLI::ConversionError("run config: unsupported value for '" + key + "'");
    }
};

std::vector<int> flatten_layers(const std::string& spec) {
    std::vector<int> out;
    std::set<int> seen;
    for (const auto& r : cvt::parse_layer_ranges(spec))
        for (int l : r)
            if (seen.insert(l).second) out.push_back(l);
    return out;
}

struct TrainFlags {
    cvt::MethodOptions options;
    std::string layers;
    int layer = -1;
    bool no_bias = false;

    void add(CLI::App* app, bool with_method_knobs) {
        auto& t = options.train;
        app->add_option("--seed", options.seed, "Random seed")->capture_default_str();
        app->add_option("--lr", t.learning_rate, "Adam learning rate")->capture_default_str();
        app->add_option("--epochs", t.max_epochs, "Maximum training epochs")->capture_default_str();
        app->add_option("--batch-size", t.batch_size, "Mini-batch size")->capture_default_str();
        app->add_option("--patience", t.early_stop_patience, "Early-stopping patience in epochs")
            ->capture_default_str();
        app->add_option("--l2", t.l2_penalty, "L2 penalty on probe weights")->capture_default_str();
        app->add_option("--validation-fraction", t.validation_fraction, "Held-out share for early stopping")
            ->capture_default_str();
        app->add_flag("--no-bias", no_bias, "Train probes without a bias term");
        app->add_option("--split-ratio", options.split_ratio, "INTRA probe/calibration split ratio")
            ->capture_default_str();
        app->add_option("--lambda", options.lambda, "INTRA ridge penalty")->capture_default_str();
        if (!with_method_knobs) return;
        app->add_option("--layer", layer, "Probe layer for saplma, sheeps and mm");
        app->add_option("--layers", layers,
                        "Layer set, e.g. \"11-22\" or \"4,8,12\" (intra, rauq, attn_score, mind, satrmd)");
        app->add_option("--alpha", options.alpha, "RAUQ mixing weight")->capture_default_str();
        app->add_option("--epsilon", options.epsilon, "RAUQ log floor")->capture_default_str();
        app->add_option("--attn-epsilon", options.attention_epsilon, "Attention Score log floor")
            ->capture_default_str();
        app->add_option("--margin", options.ccs_margin, "CCS ranking margin")->capture_default_str();
        app->add_option("--mind-validation", options.mind_validation_fraction,
                        "MIND validation share for candidate selection")
            ->capture_default_str();
        app->add_option("--shrinkage", options.satrmd_shrinkage, "SATRMD variance shrinkage")
            ->capture_default_str();
    }

    cvt::MethodOptions resolve() const {
        auto o = options;
        o.train.use_bias = !no_bias;
        if (layer >= 0) o.layer = layer;
        if (!layers.empty()) o.layers = flatten_layers(layers);
        return o;
    }
};

int run_validate(const std::string& path) {
    const auto ds = cvt::read_dump(path, false);
    const auto violations = cvt::validate_dataset(ds);
    if (violations.empty()) {
        std::cout << path << ": ok, " << ds.size() << " claims, L=" << ds.shape().layers
                  << " d=" << ds.shape().hidden_dim << " H=" << ds.shape().heads << " hidden "
                  << cvt::dtype_name(ds.header.dtype_hidden) << "\n";
        return 0;
    }
    for (const auto& v : violations) std::cerr << path << ": " << v.to_string() << "\n";
    std::cerr << path << ": " << violations.size() << " violation(s)\n";
    return 2;
}

std::vector<cvt::StrataKey> parse_strata(const std::vector<std::string>& raw) {
    std::vector<cvt::StrataKey> out;
    for (const auto& item : raw) {
        std::stringstream ss(item);
        std::string k;
        while (std::getline(ss, k, ','))
            if (!k.empty()) out.push_back(cvt::strata_key_from_name(k));
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Claim-level hallucination detection from dumped model internals"};
    app.require_subcommand(1);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--run-config", "", "JSON run config; command-line flags take precedence");

    int threads = 0;
    bool deterministic = false;
    app.add_option("--threads", threads, "Worker threads (default: CVT_THREADS, else all cores)")
        ->check(CLI::PositiveNumber);
    app.add_flag("--deterministic", deterministic, "Serial execution and reductions");

    // validate
    auto* validate = app.add_subcommand("validate", "Check a CVD dump and list every violation");
    std::string validate_path;
    validate->add_option("dump", validate_path, "CVD file")->required();

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a planted-signal synthetic dump");
    std::string synth_config, synth_out, synth_holdout_out, synth_dtype, synth_signal_layers;
    std::size_t synth_n = 0, synth_holdout = 0;
    std::uint64_t synth_seed = 0;
    double synth_mu = -1.0;
    synth->add_option("--config", synth_config, "Synthetic-data config JSON (missing keys use defaults)");
    synth->add_option("--out", synth_out, "Output CVD path")->required();
    synth->add_option("--n-claims", synth_n, "Override n_claims");
    synth->add_option("--seed", synth_seed, "Override seed");
    synth->add_option("--dtype", synth_dtype, "Override hidden dtype")->check(CLI::IsMember({"f32", "f16"}));
    synth->add_option("--signal-strength", synth_mu, "Override signal strength");
    synth->add_option("--signal-layers", synth_signal_layers, "Override signal layers, e.g. \"12-20\"");
    synth->add_option("--holdout", synth_holdout, "Move the last K claims to --holdout-out");
    synth->add_option("--holdout-out", synth_holdout_out, "CVD path for the held-out claims");
    synth->add_flag("--print-config", "Print the resolved config with oracle AUCs to stdout");

    // train
    auto* train = app.add_subcommand("train", "Fit a method on a labeled dump");
    std::string train_method, train_data, train_out;
    TrainFlags train_flags;
    train->add_option("--method", train_method, "Method name")->required();
    train->add_option("--train", train_data, "Training CVD")->required();
    train->add_option("--out", train_out, "Output model JSON")->required();
    train_flags.add(train, true);

    // score
    auto* score = app.add_subcommand("score", "Score every claim of a dump");
    std::string score_method, score_model, score_data, score_out;
    TrainFlags score_flags;
    score->add_option("--method", score_method, "Method name")->required();
    score->add_option("--model", score_model, "Model JSON (required for trained methods)");
    score->add_option("--data", score_data, "CVD to score")->required();
    score->add_option("--out", score_out, "Output JSONL")->required();
    score->add_option("--layers", score_flags.layers, "attn_score layer set (default: middle layers)");
    score->add_option("--attn-epsilon", score_flags.options.attention_epsilon, "Attention Score log floor")
        ->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "Metrics, bootstrap CIs, paired tests and FDR over scored claims");
    std::vector<std::string> eval_scores, eval_strata, eval_baselines;
    std::string eval_out, eval_csv;
    std::vector<double> eval_edges;
    cvt::ReportOptions eval_opts;
    eval->add_option("--scores", eval_scores, "Scored JSONL files")->required();
    eval->add_option("--strata", eval_strata,
                     "Strata keys: popularity_quintile, language, generation_length_group, position_bin");
    eval->add_option("--baseline", eval_baselines, "Baseline method(s) for paired tests");
    eval->add_option("--q", eval_opts.q, "FDR level")->capture_default_str();
    eval->add_option("--resamples", eval_opts.n_resamples, "Bootstrap resamples")->capture_default_str();
    eval->add_option("--level", eval_opts.level, "Confidence level")->capture_default_str();
    eval->add_option("--seed", eval_opts.seed, "Bootstrap seed")->capture_default_str();
    eval->add_option("--popularity-edges", eval_edges, "Fixed popularity bin edges instead of quintiles");
    eval->add_option("--out", eval_out, "Report JSON")->required();
    eval->add_option("--csv", eval_csv, "Also write the report as CSV");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "INTRA layer-subset sweep");
    std::string ablate_method = "intra", ablate_train, ablate_test, ablate_ranges, ablate_out;
    TrainFlags ablate_flags;
    cvt::AblationOptions ablate_opts;
    ablate->add_option("--method", ablate_method, "Method (only intra)")
        ->check(CLI::IsMember({"intra"}))
        ->capture_default_str();
    ablate->add_option("--train", ablate_train, "Training CVD")->required();
    ablate->add_option("--test", ablate_test, "Test CVD")->required();
    ablate->add_option("--ranges", ablate_ranges, "Layer subsets, e.g. \"0-8,11-22,24-32,16\"")->required();
    ablate->add_option("--resamples", ablate_opts.n_resamples, "Bootstrap resamples for CIs")->capture_default_str();
    ablate->add_option("--level", ablate_opts.level, "Confidence level")->capture_default_str();
    ablate->add_option("--out", ablate_out, "Report JSON")->required();
    ablate_flags.add(ablate, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (threads > 0)
            cvt::set_threads(threads);
        else
            cvt::configure_threads_from_env();
        cvt::set_deterministic(deterministic);

        if (*validate) return run_validate(validate_path);

        if (*synth) {
            cvt::SynthConfig cfg;
            if (!synth_config.empty()) cfg = cvt::SynthConfig::from_json(cvt::read_json_file(synth_config));
            if (synth->count("--n-claims")) cfg.n_claims = synth_n;
            if (synth->count("--seed")) cfg.seed = synth_seed;
            if (synth->count("--dtype")) cfg.dtype = synth_dtype == "f16" ? cvt::HiddenDtype::f16 : cvt::HiddenDtype::f32;
            if (synth->count("--signal-strength")) cfg.signal_strength = synth_mu;
            if (synth->count("--signal-layers")) cfg.signal_layers = flatten_layers(synth_signal_layers);
            cfg.check();
            if ((synth_holdout > 0) != !synth_holdout_out.empty())
                throw cvt::UsageError("--holdout and --holdout-out go together");
            if (synth_holdout >= cfg.n_claims) throw cvt::UsageError("--holdout must be smaller than n_claims");

            const auto ds = cvt::generate(cfg);
            if (synth_holdout > 0) {
                std::vector<std::size_t> a(cfg.n_claims - synth_holdout), b(synth_holdout);
                for (std::size_t i = 0; i < a.size(); ++i) a[i] = i;
                for (std::size_t i = 0; i < b.size(); ++i) b[i] = a.size() + i;
                cvt::write_dump(cvt::subset(ds, a), synth_out);
                cvt::write_dump(cvt::subset(ds, b), synth_holdout_out);
            } else {
                cvt::write_dump(ds, synth_out);
            }
            if (synth->count("--print-config")) {
                json j = cfg.to_json();
                json oracle = json::object();
                for (int l : cfg.signal_layers) oracle[std::to_string(l)] = cvt::oracle_layer_auc(cfg, l);
                const auto sp = cvt::oracle_sp_auc(cfg);
                j["oracle_layer_auc"] = oracle;
                j["oracle_sp_auc"] = {{"auc", sp.auc}, {"approximate", sp.approximate}};
                std::cout << j.dump(2) << "\n";
            }
            return 0;
        }

        if (*train) {
            cvt::require_method(train_method);
            const auto ds = cvt::read_dump(train_data);
            const auto model = cvt::train_method(train_method, ds, train_flags.resolve());
            cvt::write_text_file(train_out, model.dump(2) + "\n");
            return 0;
        }

        if (*score) {
            cvt::require_method(score_method);
            const auto ds = cvt::read_dump(score_data);
            json model;
            const bool has_model = !score_model.empty();
            if (has_model) model = cvt::read_json_file(score_model);
            const auto fn =
                cvt::make_scorer(score_method, has_model ? &model : nullptr, ds.shape(), score_flags.resolve());
            cvt::write_scores_jsonl(cvt::score_dataset(ds, score_method, fn), score_out);
            return 0;
        }

        if (*eval) {
            std::map<std::string, std::vector<cvt::Scored>> by_method;
            for (const auto& path : eval_scores)
                for (auto& s : cvt::read_scores_jsonl(path)) {
                    if (s.label < 0) throw cvt::DataError(path + ": claim '" + s.claim_id + "' has no label");
                    by_method[s.method].push_back(std::move(s));
                }
            if (by_method.empty()) throw cvt::DataError("no scored claims in the given files");
            for (const auto& b : eval_baselines)
                if (!by_method.count(b)) throw cvt::UsageError("baseline '" + b + "' has no scores in the inputs");
            eval_opts.strata = parse_strata(eval_strata);
            eval_opts.baselines = eval_baselines;
            eval_opts.stratify.popularity_edges = eval_edges;
            const auto report = cvt::build_report(by_method, eval_opts);
            cvt::write_text_file(eval_out, report.to_json().dump(2) + "\n");
            if (!eval_csv.empty()) cvt::write_text_file(eval_csv, report.to_csv());
            return 0;
        }

        if (*ablate) {
            const auto o = ablate_flags.resolve();
            ablate_opts.intra.split_ratio = o.split_ratio;
            ablate_opts.intra.lambda = o.lambda;
            ablate_opts.intra.seed = o.seed;
            ablate_opts.intra.train = o.train_config();
            const auto ranges = cvt::parse_layer_ranges(ablate_ranges);
            const auto tr = cvt::read_dump(ablate_train);
            const auto te = cvt::read_dump(ablate_test);
            const auto rows = cvt::ablate_intra(tr, te, ranges, ablate_opts);
            cvt::write_text_file(ablate_out, cvt::ablation_to_json(rows, ablate_opts).dump(2) + "\n");
            for (const auto& r : rows) std::cout << r.range << "\troc_auc=" << r.roc_auc << "\n";
            return 0;
        }
    } catch (const cvt::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
