#pragma once

// Method registry and the train / score / ablate plumbing shared by the CLI, tests and
// benchmarks. Trained methods are stored as
//   {"format": "cvt.model", "version": 1, "method": ..., "model_id": ..., "model": {...}}

#include "cvt/claimdump.hpp"
#include "cvt/eval.hpp"
#include "cvt/intra.hpp"
#include "cvt/parallel.hpp"
#include "cvt/probes.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cvt {

const std::vector<std::string>& method_names();
bool is_method(const std::string& name);
// Methods scored straight from the dump without a trained model.
bool is_training_free(const std::string& name);
void require_method(const std::string& name);

struct MethodOptions {
    TrainConfig train;
    std::uint64_t seed = 0;
    std::optional<int> layer;               // saplma, sheeps, mm
    std::optional<std::vector<int>> layers; // intra, rauq, attn_score, satrmd, mind candidates
    double alpha = 0.7;                     // rauq
    double epsilon = 0.0;                   // rauq
    double attention_epsilon = 1e-6;        // attn_score
    double split_ratio = kDefaultSplitRatio;
    double lambda = kDefaultRidgeLambda;
    double ccs_margin = 1.0;
    double mind_validation_fraction = 0.2;
    double satrmd_shrinkage = kSatrmdShrinkage;

    // Config with seed folded into the training config.
    TrainConfig train_config() const;
};

// Trains `method` on a labeled dataset and returns its model document.
nlohmann::json train_method(const std::string& method, const Dataset& train, const MethodOptions& options);

using ScoreFn = std::function<double(const ClaimRecord&)>;

// Builds a scorer. Trained methods need a model document whose method matches;
// training-free methods ignore `model`.
ScoreFn make_scorer(const std::string& method, const nlohmann::json* model, const Shape& shape,
                    const MethodOptions& options = {});

// Scores every record; the result order follows the dataset. Records without a label get
// label -1.
std::vector<Scored> score_dataset(const Dataset& data, const std::string& method, const ScoreFn& scorer,
                                  ExecPolicy policy = default_policy());

void write_scores_jsonl(const std::vector<Scored>& scored, const std::filesystem::path& path);
std::vector<Scored> read_scores_jsonl(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Writes atomically through a temporary file.
void write_text_file(const std::filesystem::path& path, const std::string& text);

// "a-b" (inclusive) or "a"; comma-separated.
std::vector<std::vector<int>> parse_layer_ranges(const std::string& spec);
std::string range_label(const std::vector<int>& layers);

struct AblationRow {
    std::string range;
    std::vector<int> layers;
    std::size_t n = 0;
    double roc_auc = 0.0, pr_auc = 0.0, ci_lo = 0.0, ci_hi = 0.0;
};

struct AblationOptions {
    IntraConfig intra;
    int n_resamples = kBootstrapResamples;
    double level = 0.95;
};

// INTRA trained once per layer on part A of the training split; every range reuses those
// probes, fits its own normalizers and aggregator on part B and is scored on `test`.
std::vector<AblationRow> ablate_intra(const Dataset& train, const Dataset& test,
                                      const std::vector<std::vector<int>>& ranges, const AblationOptions& options);

nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows, const AblationOptions& options);

} // namespace cvt
