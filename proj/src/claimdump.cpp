#include "cvt/claimdump.hpp"

#include "cvt/error.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "CVD I/O assumes a little-endian host");

namespace cvt {

using nlohmann::json;

namespace {

std::string index_str(std::initializer_list<std::size_t> idx) {
    std::string s = "[";
    bool first = true;
    for (auto i : idx) {
        if (!first) s += ",";
        s += std::to_string(i);
        first = false;
    }
    return s + "]";
}

std::uint32_t parse_sections(const json& j) {
    if (j.is_number_unsigned()) return j.get<std::uint32_t>();
    throw DataError("header field 'sections' must be an unsigned bitmask");
}

json header_to_json(const DumpHeader& h) {
    return json{{"version", h.version},
                {"model_id", h.model_id},
                {"L", h.shape.layers},
                {"d", h.shape.hidden_dim},
                {"H", h.shape.heads},
                {"n_claims", h.n_claims},
                {"dtype_hidden", dtype_name(h.dtype_hidden)},
                {"sections", h.sections}};
}

DumpHeader header_from_json(const json& j) {
    DumpHeader h;
    try {
        h.version = j.at("version").get<std::uint16_t>();
        h.model_id = j.at("model_id").get<std::string>();
        h.shape.layers = j.at("L").get<int>();
        h.shape.hidden_dim = j.at("d").get<int>();
        h.shape.heads = j.at("H").get<int>();
        h.n_claims = j.at("n_claims").get<std::size_t>();
        const auto dt = j.at("dtype_hidden").get<std::string>();
        if (dt == "f32")
            h.dtype_hidden = HiddenDtype::f32;
        else if (dt == "f16")
            h.dtype_hidden = HiddenDtype::f16;
        else
            throw DataError("unknown dtype_hidden '" + dt + "'");
        h.sections = parse_sections(j.at("sections"));
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed dump header: ") + e.what());
    }
    return h;
}

json claim_header_to_json(const ClaimRecord& r) {
    json j{{"claim_id", r.claim_id}, {"n_tokens", r.n_tokens}, {"meta", r.meta}};
    j["label"] = r.label ? json(*r.label) : json(nullptr);
    if (r.text) j["text"] = *r.text;
    return j;
}

std::size_t hidden_count(const Shape& s, int n) {
    return static_cast<std::size_t>(s.layers + 1) * n * s.hidden_dim;
}
std::size_t attn_count(const Shape& s, int n) {
    return static_cast<std::size_t>(s.layers) * s.heads * n;
}

// ---- writing ----

class Writer {
public:
    explicit Writer(std::ofstream& out) : out_(out) {}

    template <class T>
    void scalar(T v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }
    void prefixed(const std::string& s) {
        scalar(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }
    template <class T>
    void array(const std::vector<T>& v) {
        out_.write(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::streamsize>(v.size() * sizeof(T)));
    }
    void hidden_f16(const std::vector<float>& v) {
        std::vector<std::uint16_t> buf(v.size());
        std::transform(v.begin(), v.end(), buf.begin(), [](float f) {
            return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(f));
        });
        array(buf);
    }

private:
    std::ofstream& out_;
};

// ---- reading ----

class Reader {
public:
    explicit Reader(std::ifstream& in) : in_(in) {}

    void read(void* dst, std::size_t n, const std::string& what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError("truncated file while reading " + what);
    }
    template <class T>
    T scalar(const std::string& what) {
        T v{};
        read(&v, sizeof(T), what);
        return v;
    }
    std::string prefixed(const std::string& what) {
        const auto n = scalar<std::uint32_t>(what + " length");
        std::string s(n, '\0');
        read(s.data(), n, what);
        return s;
    }
    template <class T>
    std::vector<T> array(std::size_t n, const std::string& what) {
        std::vector<T> v(n);
        read(v.data(), n * sizeof(T), what);
        return v;
    }
    std::vector<float> hidden_f16(std::size_t n, const std::string& what) {
        const auto raw = array<std::uint16_t>(n, what);
        std::vector<float> v(n);
        std::transform(raw.begin(), raw.end(), v.begin(), [](std::uint16_t u) {
            return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(u));
        });
        return v;
    }
    bool at_eof() { return in_.peek() == std::ifstream::traits_type::eof(); }

private:
    std::ifstream& in_;
};

template <class T>
void check_finite(std::vector<Violation>& out, const std::vector<T>& v, const char* field) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i])) {
            out.push_back({field, index_str({i}), "value must be finite"});
            return;
        }
}

} // namespace

std::string dtype_name(HiddenDtype dtype) { return dtype == HiddenDtype::f16 ? "f16" : "f32"; }

std::string Violation::to_string() const {
    std::string s = field;
    if (!index.empty()) s += " " + index;
    return s + ": " + rule;
}

std::vector<Violation> validate_header(const DumpHeader& h) {
    std::vector<Violation> out;
    if (h.version != kDumpVersion) out.push_back({"version", "", "unsupported version " + std::to_string(h.version)});
    if (h.shape.layers < 1) out.push_back({"L", "", "must be >= 1"});
    if (h.shape.hidden_dim < 1) out.push_back({"d", "", "must be >= 1"});
    if (h.shape.heads < 1) out.push_back({"H", "", "must be >= 1"});
    if (!h.has(section::required)) out.push_back({"sections", "", "must include hidden and logprobs"});
    if ((h.sections & ~section::all) != 0) out.push_back({"sections", "", "unknown section bits"});
    return out;
}

std::vector<Violation> validate(const ClaimRecord& r, const DumpHeader& h) {
    std::vector<Violation> out;
    if (r.claim_id.empty()) out.push_back({"claim_id", "", "must be nonempty"});
    if (r.label && *r.label != 0 && *r.label != 1) out.push_back({"label", "", "must be 0 or 1"});
    if (r.n_tokens < 1) {
        out.push_back({"n_tokens", "", "must be >= 1"});
        return out;
    }
    if (r.shape != h.shape) out.push_back({"shape", "", "record shape differs from header"});

    const Shape& s = h.shape;
    const int n = r.n_tokens;
    auto check_size = [&](std::size_t got, std::size_t want, std::uint32_t sec, const char* field) {
        const std::size_t expect = h.has(sec) ? want : 0;
        if (got != expect) {
            out.push_back({field, "", "shape mismatch: expected " + std::to_string(expect) + " values, got " +
                                          std::to_string(got)});
            return false;
        }
        return true;
    };
    const bool hidden_ok = check_size(r.hidden.size(), hidden_count(s, n), section::hidden, "hidden");
    const bool lp_ok = check_size(r.token_logprobs.size(), n, section::logprobs, "token_logprobs");
    const bool ent_ok = check_size(r.token_entropy.size(), n, section::entropy, "token_entropy");
    const bool diag_ok = check_size(r.attn_diag.size(), attn_count(s, n), section::attn_diag, "attn_diag");
    const bool prev_ok = check_size(r.attn_prev.size(), attn_count(s, n), section::attn_prev, "attn_prev");

    if (hidden_ok) check_finite(out, r.hidden, "hidden");
    if (lp_ok) {
        check_finite(out, r.token_logprobs, "token_logprobs");
        for (int i = 0; i < n; ++i)
            if (r.token_logprobs[i] > 0.0) {
                out.push_back({"token_logprobs", index_str({std::size_t(i)}), "logprob > 0"});
                break;
            }
    }
    if (ent_ok && h.has(section::entropy)) {
        check_finite(out, r.token_entropy, "token_entropy");
        for (int i = 0; i < n; ++i)
            if (r.token_entropy[i] < 0.0) {
                out.push_back({"token_entropy", index_str({std::size_t(i)}), "entropy < 0"});
                break;
            }
    }
    auto check_attn = [&](const std::vector<float>& a, const char* field, bool prev) {
        for (int l = 0; l < s.layers; ++l)
            for (int hd = 0; hd < s.heads; ++hd)
                for (int i = 0; i < n; ++i) {
                    const float v = a[(static_cast<std::size_t>(l) * s.heads + hd) * n + i];
                    const auto idx = index_str({std::size_t(l), std::size_t(hd), std::size_t(i)});
                    if (!std::isfinite(v)) {
                        out.push_back({field, idx, "value must be finite"});
                        return;
                    }
                    if (v < 0.0f || v > 1.0f) {
                        out.push_back({field, idx, "value must lie in [0,1]"});
                        return;
                    }
                    if (prev && i == 0 && v != 0.0f) {
                        out.push_back({field, idx, "attn_prev at position 0 must be 0"});
                        return;
                    }
                }
    };
    if (diag_ok && h.has(section::attn_diag)) check_attn(r.attn_diag, "attn_diag", false);
    if (prev_ok && h.has(section::attn_prev)) check_attn(r.attn_prev, "attn_prev", true);
    return out;
}

void validate_or_throw(const Dataset& ds) {
    if (auto hv = validate_header(ds.header); !hv.empty()) throw DataError("invalid header: " + hv.front().to_string());
    if (ds.header.n_claims != ds.records.size())
        throw DataError("header n_claims " + std::to_string(ds.header.n_claims) + " != record count " +
                        std::to_string(ds.records.size()));
    std::set<std::string> seen;
    for (const auto& r : ds.records) {
        if (!seen.insert(r.claim_id).second) throw DataError("duplicate claim_id '" + r.claim_id + "'");
        if (auto v = validate(r, ds.header); !v.empty())
            throw DataError("claim '" + r.claim_id + "': " + v.front().to_string());
    }
}

std::vector<Violation> validate_dataset(const Dataset& ds) {
    auto out = validate_header(ds.header);
    if (ds.header.n_claims != ds.records.size())
        out.push_back({"n_claims", "", "header says " + std::to_string(ds.header.n_claims) + ", found " +
                                           std::to_string(ds.records.size())});
    std::set<std::string> seen;
    for (const auto& r : ds.records) {
        const std::string who = "claim '" + r.claim_id + "' ";
        if (!seen.insert(r.claim_id).second) out.push_back({who + "claim_id", "", "duplicate claim_id"});
        for (auto& v : validate(r, ds.header)) out.push_back({who + v.field, v.index, v.rule});
    }
    return out;
}

void write_dump(const Dataset& ds, const std::filesystem::path& path) {
    validate_or_throw(ds);

    // Serialize to a sibling temp file first so a failed write never leaves a partial dump.
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
        Writer w(out);
        out.write(kDumpMagic, 4);
        w.prefixed(header_to_json(ds.header).dump());
        for (const auto& r : ds.records) {
            w.prefixed(claim_header_to_json(r).dump());
            if (ds.header.dtype_hidden == HiddenDtype::f16)
                w.hidden_f16(r.hidden);
            else
                w.array(r.hidden);
            w.array(r.token_logprobs);
            if (ds.header.has(section::entropy)) w.array(r.token_entropy);
            if (ds.header.has(section::attn_diag)) w.array(r.attn_diag);
            if (ds.header.has(section::attn_prev)) w.array(r.attn_prev);
        }
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw DataError("write to '" + path.string() + "' failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw DataError("cannot write '" + path.string() + "': " + ec.message());
    }
}

Dataset read_dump(const std::filesystem::path& path, bool check_values) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    Reader rd(in);

    char magic[4];
    rd.read(magic, 4, "magic");
    if (std::memcmp(magic, kDumpMagic, 4) != 0) throw DataError("bad magic: not a CVD1 dump");

    Dataset ds;
    try {
        ds.header = header_from_json(json::parse(rd.prefixed("dump header")));
    } catch (const json::parse_error& e) {
        throw DataError(std::string("dump header is not valid JSON: ") + e.what());
    }
    if (auto hv = validate_header(ds.header); !hv.empty()) throw DataError("invalid header: " + hv.front().to_string());

    const DumpHeader& h = ds.header;
    ds.records.reserve(h.n_claims);
    std::set<std::string> seen;
    for (std::size_t c = 0; c < h.n_claims; ++c) {
        ClaimRecord r;
        const std::string where = "claim #" + std::to_string(c);
        json cj;
        try {
            cj = json::parse(rd.prefixed(where + " header"));
            r.claim_id = cj.at("claim_id").get<std::string>();
            r.n_tokens = cj.at("n_tokens").get<int>();
            if (!cj.at("label").is_null()) r.label = cj.at("label").get<int>();
            if (cj.contains("text")) r.text = cj.at("text").get<std::string>();
            if (cj.contains("meta")) r.meta = cj.at("meta").get<std::map<std::string, std::string>>();
        } catch (const json::exception& e) {
            throw DataError(where + ": malformed claim header: " + e.what());
        }
        if (r.n_tokens < 1) throw DataError("claim '" + r.claim_id + "': n_tokens must be >= 1");
        r.shape = h.shape;

        const std::string ctx = "claim '" + r.claim_id + "'";
        const int n = r.n_tokens;
        try {
            if (h.dtype_hidden == HiddenDtype::f16)
                r.hidden = rd.hidden_f16(hidden_count(h.shape, n), "hidden");
            else
                r.hidden = rd.array<float>(hidden_count(h.shape, n), "hidden");
            r.token_logprobs = rd.array<double>(n, "token_logprobs");
            if (h.has(section::entropy)) r.token_entropy = rd.array<double>(n, "token_entropy");
            if (h.has(section::attn_diag)) r.attn_diag = rd.array<float>(attn_count(h.shape, n), "attn_diag");
            if (h.has(section::attn_prev)) r.attn_prev = rd.array<float>(attn_count(h.shape, n), "attn_prev");
        } catch (const DataError& e) {
            throw DataError(ctx + ": " + e.what());
        }
        if (check_values) {
            if (auto v = validate(r, h); !v.empty()) throw DataError(ctx + ": " + v.front().to_string());
            if (!seen.insert(r.claim_id).second) throw DataError(ctx + ": duplicate claim_id");
        }
        ds.records.push_back(std::move(r));
    }
    if (!rd.at_eof()) throw DataError("trailing bytes after " + std::to_string(h.n_claims) + " claims");
    return ds;
}

std::pair<std::size_t, std::size_t> split_class_counts(std::size_t n0, std::size_t n1, double ratio) {
    const double t0 = ratio * static_cast<double>(n0);
    const double t1 = ratio * static_cast<double>(n1);
    std::size_t a0 = static_cast<std::size_t>(std::floor(t0));
    std::size_t a1 = static_cast<std::size_t>(std::floor(t1));
    const auto total = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n0 + n1)));
    std::size_t remainder = total > a0 + a1 ? total - a0 - a1 : 0;
    // Largest fractional part first; class 0 wins ties.
    const double f0 = t0 - std::floor(t0);
    const double f1 = t1 - std::floor(t1);
    const bool zero_first = f0 >= f1;
    for (int k = 0; k < 2 && remainder > 0; ++k) {
        const bool pick_zero = (k == 0) == zero_first;
        if (pick_zero && a0 < n0) {
            ++a0;
            --remainder;
        } else if (!pick_zero && a1 < n1) {
            ++a1;
            --remainder;
        }
    }
    return {a0, a1};
}

std::vector<int> labels_of(const Dataset& ds) {
    std::vector<int> y;
    y.reserve(ds.size());
    for (const auto& r : ds.records) {
        if (!r.label) throw DataError("claim '" + r.claim_id + "' is unlabeled");
        y.push_back(*r.label);
    }
    return y;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
    Dataset out;
    out.header = ds.header;
    out.records.reserve(indices.size());
    for (auto i : indices) out.records.push_back(ds.records.at(i));
    out.header.n_claims = out.records.size();
    return out;
}

std::pair<Dataset, Dataset> split_train_calib(const Dataset& ds, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw UsageError("split ratio must lie in (0,1)");
    const auto y = labels_of(ds);
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
    for (int c = 0; c < 2; ++c)
        if (by_class[c].size() < 2)
            throw DataError("label class " + std::to_string(c) + " has fewer than 2 members");

    const auto [a0, a1] = split_class_counts(by_class[0].size(), by_class[1].size(), ratio);
    std::mt19937_64 rng(seed);
    std::vector<char> in_a(ds.size(), 0);
    const std::size_t take[2] = {a0, a1};
    for (int c = 0; c < 2; ++c) {
        auto idx = by_class[c];
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k < take[c]; ++k) in_a[idx[k]] = 1;
    }
    std::vector<std::size_t> part_a, part_b;
    for (std::size_t i = 0; i < ds.size(); ++i) (in_a[i] ? part_a : part_b).push_back(i);
    return {subset(ds, part_a), subset(ds, part_b)};
}

} // namespace cvt
