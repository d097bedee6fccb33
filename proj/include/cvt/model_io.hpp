#pragma once

// Versioned JSON documents for trained models. Real-valued parameter arrays are stored
// as base64 of little-endian IEEE-754 doubles so documents round-trip bit-exactly.

#include "cvt/intra.hpp"
#include "cvt/probes.hpp"
#include "cvt/scorers.hpp"

#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace cvt {

inline constexpr int kModelFormatVersion = 1;

std::string encode_reals(std::span<const double> values);
std::vector<double> decode_reals(const std::string& text);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const LayerProbe& probe);
LayerProbe layer_probe_from_json(const nlohmann::json& j);

// Standalone probe document: {format, version, model_id, layer, pooling, ..., config}.
nlohmann::json probe_document(const LayerProbe& probe, const std::string& model_id, const TrainConfig& config);

nlohmann::json to_json(const MassMeanProbe& probe);
MassMeanProbe mass_mean_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CcsProbe& probe);
CcsProbe ccs_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SatrmdModel& model);
SatrmdModel satrmd_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RauqConfig& config);
RauqConfig rauq_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MindResult& result);
MindResult mind_from_json(const nlohmann::json& j);

nlohmann::json to_json(const IntraModel& model);
IntraModel intra_from_json(const nlohmann::json& j);

} // namespace cvt
