#include "cvt/model_io.hpp"

#include "cvt/error.hpp"

#include <array>
#include <cstring>

namespace cvt {

using nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const unsigned char* data, std::size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (std::size_t i = 0; i < n; i += 3) {
        const std::uint32_t b0 = data[i];
        const std::uint32_t b1 = i + 1 < n ? data[i + 1] : 0;
        const std::uint32_t b2 = i + 2 < n ? data[i + 2] : 0;
        const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += i + 1 < n ? kAlphabet[(v >> 6) & 63] : '=';
        out += i + 2 < n ? kAlphabet[v & 63] : '=';
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& s) {
    std::array<int, 256> rev;
    rev.fill(-1);
    for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kAlphabet[i])] = i;
    if (s.size() % 4 != 0) throw DataError("base64 payload length is not a multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = s[i + k];
            if (c == '=' && i + 4 == s.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                v[k] = rev[static_cast<unsigned char>(c)];
                if (v[k] < 0 || pad > 0) throw DataError("invalid base64 payload");
            }
        }
        const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out.push_back(static_cast<unsigned char>(w >> 16));
        if (pad < 2) out.push_back(static_cast<unsigned char>((w >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(w & 0xff));
    }
    return out;
}

json header(const std::string& format) { return {{"format", format}, {"version", kModelFormatVersion}}; }

void expect_format(const json& j, const std::string& format) {
    if (!j.is_object() || j.value("format", std::string()) != format)
        throw DataError("expected a '" + format + "' document");
    if (j.value("version", 0) != kModelFormatVersion)
        throw DataError("unsupported " + format + " version " + std::to_string(j.value("version", 0)));
}

double real_of(const json& j, const char* key) {
    const auto v = decode_reals(j.at(key).get<std::string>());
    if (v.size() != 1) throw DataError(std::string("field '") + key + "' must hold one real");
    return v[0];
}

std::vector<double> reals_of(const json& j, const char* key) { return decode_reals(j.at(key).get<std::string>()); }

json one(double v) { return encode_reals(std::span<const double>(&v, 1)); }

template <class F>
auto guarded(const char* what, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed ") + what + " document: " + e.what());
    }
}

json linear_head_json(const LinearHead& h) { return {{"weight", encode_reals(h.weight)}, {"bias", one(h.bias)}}; }
LinearHead linear_head_from(const json& j) {
    LinearHead h;
    h.weight = reals_of(j, "weight");
    h.bias = real_of(j, "bias");
    return h;
}

} // namespace

std::string encode_reals(std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * sizeof(double));
    if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
    return base64_encode(bytes.data(), bytes.size());
}

std::vector<double> decode_reals(const std::string& text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % sizeof(double) != 0) throw DataError("real array payload is not a whole number of doubles");
    std::vector<double> v(bytes.size() / sizeof(double));
    if (!v.empty()) std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"max_epochs", c.max_epochs},
            {"batch_size", c.batch_size},
            {"early_stop_patience", c.early_stop_patience},
            {"l2_penalty", c.l2_penalty},
            {"seed", c.seed},
            {"validation_fraction", c.validation_fraction},
            {"use_bias", c.use_bias}};
}

TrainConfig train_config_from_json(const json& j) {
    return guarded("train config", [&] {
        TrainConfig c;
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
        c.l2_penalty = j.value("l2_penalty", c.l2_penalty);
        c.seed = j.value("seed", c.seed);
        c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
        c.use_bias = j.value("use_bias", c.use_bias);
        return c;
    });
}

json to_json(const LayerProbe& p) {
    json j{{"layer", p.layer}, {"pooling", pooling_name(p.pooling)}, {"use_bias", p.use_bias}};
    j["head"] = linear_head_json(p.head);
    if (p.pooling == Pooling::learned_attention) j["theta"] = encode_reals(p.theta);
    return j;
}

LayerProbe layer_probe_from_json(const json& j) {
    return guarded("probe", [&] {
        LayerProbe p;
        p.layer = j.at("layer").get<int>();
        p.pooling = pooling_from_name(j.at("pooling").get<std::string>());
        p.use_bias = j.value("use_bias", true);
        p.head = linear_head_from(j.at("head"));
        if (p.pooling == Pooling::learned_attention) {
            p.theta = reals_of(j, "theta");
            if (p.theta.size() != p.head.weight.size()) throw DataError("probe theta/weight dimension mismatch");
        }
        return p;
    });
}

json probe_document(const LayerProbe& probe, const std::string& model_id, const TrainConfig& config) {
    json j = header("cvt.probe");
    j["model_id"] = model_id;
    j.update(to_json(probe));
    j["config"] = to_json(config);
    return j;
}

json to_json(const MassMeanProbe& p) {
    return {{"layer", p.layer}, {"pooling", pooling_name(p.pooling)}, {"direction", encode_reals(p.direction)}};
}

MassMeanProbe mass_mean_from_json(const json& j) {
    return guarded("mass-mean", [&] {
        MassMeanProbe p;
        p.layer = j.at("layer").get<int>();
        p.pooling = pooling_from_name(j.at("pooling").get<std::string>());
        p.direction = reals_of(j, "direction");
        return p;
    });
}

json to_json(const CcsProbe& p) {
    return {{"layer", p.layer}, {"margin", one(p.margin)}, {"direction", encode_reals(p.direction)}};
}

CcsProbe ccs_from_json(const json& j) {
    return guarded("CCS", [&] {
        CcsProbe p;
        p.layer = j.at("layer").get<int>();
        p.margin = real_of(j, "margin");
        p.direction = reals_of(j, "direction");
        return p;
    });
}

json to_json(const SatrmdModel& m) {
    json stats = json::array();
    for (const auto& g : m.stats)
        stats.push_back({{"layer", g.layer},
                         {"shrinkage", one(g.shrinkage)},
                         {"mean_in", encode_reals(g.mean_in)},
                         {"mean_all", encode_reals(g.mean_all)},
                         {"var_in", encode_reals(g.var_in)},
                         {"var_all", encode_reals(g.var_all)}});
    return {{"stats", stats},
            {"feature_mean", encode_reals(m.feature_mean)},
            {"feature_scale", encode_reals(m.feature_scale)},
            {"head", linear_head_json(m.head)}};
}

SatrmdModel satrmd_from_json(const json& j) {
    return guarded("SATRMD", [&] {
        SatrmdModel m;
        for (const auto& s : j.at("stats")) {
            GaussianStats g;
            g.layer = s.at("layer").get<int>();
            g.shrinkage = real_of(s, "shrinkage");
            g.mean_in = reals_of(s, "mean_in");
            g.mean_all = reals_of(s, "mean_all");
            g.var_in = reals_of(s, "var_in");
            g.var_all = reals_of(s, "var_all");
            m.stats.push_back(std::move(g));
        }
        m.feature_mean = reals_of(j, "feature_mean");
        m.feature_scale = reals_of(j, "feature_scale");
        m.head = linear_head_from(j.at("head"));
        if (m.feature_mean.size() != m.stats.size() || m.feature_scale.size() != m.stats.size() ||
            m.head.weight.size() != m.stats.size())
            throw DataError("SATRMD document: feature count mismatch");
        return m;
    });
}

json to_json(const RauqConfig& c) {
    json heads = json::object();
    for (const auto& [l, h] : c.selected_heads) heads[std::to_string(l)] = h;
    return {{"alpha", one(c.alpha)}, {"epsilon", one(c.epsilon)}, {"selected_heads", heads}, {"layer_set", c.layer_set}};
}

RauqConfig rauq_from_json(const json& j) {
    return guarded("RAUQ", [&] {
        RauqConfig c;
        c.alpha = real_of(j, "alpha");
        c.epsilon = real_of(j, "epsilon");
        for (const auto& [k, v] : j.at("selected_heads").items()) c.selected_heads[std::stoi(k)] = v.get<int>();
        c.layer_set = j.at("layer_set").get<std::vector<int>>();
        return c;
    });
}

json to_json(const MindResult& r) {
    json cands = json::array();
    for (const auto& c : r.candidates)
        cands.push_back(
            {{"layer", c.layer}, {"pooling", pooling_name(c.pooling)}, {"validation_auc", c.validation_auc}});
    return {{"probe", to_json(r.probe)},
            {"layer", r.layer},
            {"pooling", pooling_name(r.pooling)},
            {"candidates", cands}};
}

MindResult mind_from_json(const json& j) {
    return guarded("MIND", [&] {
        MindResult r;
        r.probe = layer_probe_from_json(j.at("probe"));
        r.layer = j.at("layer").get<int>();
        r.pooling = pooling_from_name(j.at("pooling").get<std::string>());
        for (const auto& c : j.at("candidates"))
            r.candidates.push_back({c.at("layer").get<int>(), pooling_from_name(c.at("pooling").get<std::string>()),
                                    c.at("validation_auc").get<double>()});
        return r;
    });
}

json to_json(const IntraModel& m) {
    json probes = json::array(), norms = json::array();
    for (const auto& p : m.probes) probes.push_back(to_json(p));
    for (const auto& q : m.normalizers) norms.push_back(encode_reals(q.sorted()));
    json config{{"split_ratio", m.config.split_ratio},
                {"lambda", m.config.lambda},
                {"seed", m.config.seed},
                {"train", to_json(m.config.train)}};
    if (m.config.layers) config["layers"] = *m.config.layers;
    json j = header("cvt.intra");
    j.update({{"model_id", m.model_id},
              {"layers", m.layers},
              {"probes", probes},
              {"normalizers", norms},
              {"beta", encode_reals(m.beta)},
              {"intercept", one(m.intercept)},
              {"config", config}});
    return j;
}

IntraModel intra_from_json(const json& j) {
    expect_format(j, "cvt.intra");
    return guarded("INTRA", [&] {
        IntraModel m;
        m.model_id = j.at("model_id").get<std::string>();
        m.layers = j.at("layers").get<std::vector<int>>();
        for (const auto& p : j.at("probes")) m.probes.push_back(layer_probe_from_json(p));
        for (const auto& q : j.at("normalizers")) m.normalizers.emplace_back(decode_reals(q.get<std::string>()));
        m.beta = reals_of(j, "beta");
        m.intercept = real_of(j, "intercept");
        const auto& c = j.at("config");
        m.config.split_ratio = c.at("split_ratio").get<double>();
        m.config.lambda = c.at("lambda").get<double>();
        m.config.seed = c.at("seed").get<std::uint64_t>();
        m.config.train = train_config_from_json(c.at("train"));
        if (c.contains("layers")) m.config.layers = c.at("layers").get<std::vector<int>>();
        m.check();
        return m;
    });
}

} // namespace cvt
