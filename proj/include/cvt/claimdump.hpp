#pragma once

// Claim data model and the CVD binary dump format.
//
// File layout (little-endian throughout):
//   "CVD1" | u32 header_len | header JSON
//   per claim: u32 claim_header_len | claim header JSON
//              hidden     (L+1) x N x d   f32 or f16
//              logprobs   N               f64
//              entropy    N               f64   (if section present)
//              attn_diag  L x H x N       f32   (if section present)
//              attn_prev  L x H x N       f32   (if section present)

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cvt {

enum class HiddenDtype : std::uint8_t { f32, f16 };

namespace section {
inline constexpr std::uint32_t hidden = 1u << 0;
inline constexpr std::uint32_t logprobs = 1u << 1;
inline constexpr std::uint32_t entropy = 1u << 2;
inline constexpr std::uint32_t attn_diag = 1u << 3;
inline constexpr std::uint32_t attn_prev = 1u << 4;
inline constexpr std::uint32_t required = hidden | logprobs;
inline constexpr std::uint32_t all = hidden | logprobs | entropy | attn_diag | attn_prev;
} // namespace section

inline constexpr char kDumpMagic[4] = {'C', 'V', 'D', '1'};
inline constexpr std::uint16_t kDumpVersion = 1;

struct Shape {
    int layers = 0;     // transformer blocks L; hidden carries L+1 layers
    int hidden_dim = 0; // d
    int heads = 0;      // H

    bool operator==(const Shape&) const = default;
};

struct DumpHeader {
    std::uint16_t version = kDumpVersion;
    std::string model_id;
    Shape shape;
    std::size_t n_claims = 0;
    HiddenDtype dtype_hidden = HiddenDtype::f32;
    std::uint32_t sections = section::all;

    bool has(std::uint32_t s) const { return (sections & s) == s; }
    bool operator==(const DumpHeader&) const = default;
};

struct ClaimRecord {
    std::string claim_id;
    std::optional<std::string> text;
    std::optional<int> label; // 0 = truthful, 1 = hallucinated
    int n_tokens = 0;
    std::map<std::string, std::string> meta;
    Shape shape;

    std::vector<float> hidden;          // [(L+1) x N x d], layer 0 = embedding output
    std::vector<double> token_logprobs; // [N], natural log
    std::vector<double> token_entropy;  // [N], nats
    std::vector<float> attn_diag;       // [L x H x N], A[i,i]
    std::vector<float> attn_prev;       // [L x H x N], A[i,i-1], position 0 is 0

    // Token states of one layer as a row-major N x d block.
    std::span<const float> layer_states(int layer) const {
        const std::size_t block = static_cast<std::size_t>(n_tokens) * shape.hidden_dim;
        return {hidden.data() + static_cast<std::size_t>(layer) * block, block};
    }
    std::span<const float> token_state(int layer, int token) const {
        return layer_states(layer).subspan(static_cast<std::size_t>(token) * shape.hidden_dim,
                                           shape.hidden_dim);
    }
    // Attention summary row for transformer block `layer` (1..L) and head.
    std::span<const float> diag_row(int layer, int head) const { return attn_row(attn_diag, layer, head); }
    std::span<const float> prev_row(int layer, int head) const { return attn_row(attn_prev, layer, head); }

    bool operator==(const ClaimRecord&) const = default;

private:
    std::span<const float> attn_row(const std::vector<float>& a, int layer, int head) const {
        const std::size_t off =
            (static_cast<std::size_t>(layer - 1) * shape.heads + head) * n_tokens;
        return {a.data() + off, static_cast<std::size_t>(n_tokens)};
    }
};

struct Dataset {
    DumpHeader header;
    std::vector<ClaimRecord> records;

    std::size_t size() const { return records.size(); }
    const Shape& shape() const { return header.shape; }
    bool operator==(const Dataset&) const = default;
};

struct Violation {
    std::string field;
    std::string index; // human-readable position, empty when not applicable
    std::string rule;

    std::string to_string() const;
};

// Checks every ClaimRecord invariant against the header. Empty iff valid.
std::vector<Violation> validate(const ClaimRecord& record, const DumpHeader& header);
std::vector<Violation> validate_header(const DumpHeader& header);

// Throws DataError naming the first offending claim and field.
void validate_or_throw(const Dataset& dataset);

void write_dump(const Dataset& dataset, const std::filesystem::path& path);
// Structural damage (magic, header, truncation, trailing bytes) always throws DataError.
// With check_values off, record invariants are left to validate_dataset.
Dataset read_dump(const std::filesystem::path& path, bool check_values = true);

// Every violation of every record, plus duplicate claim ids.
std::vector<Violation> validate_dataset(const Dataset& dataset);

// Stratified, seeded partition. Per-class share of part A is floor(ratio * class_size);
// the remaining round(ratio * n) - sum(floors) records go to the classes with the largest
// fractional parts (ties by class order). Record order is preserved within each part.
std::pair<Dataset, Dataset> split_train_calib(const Dataset& dataset, double ratio, std::uint64_t seed);

// Per-class counts assigned to part A by split_train_calib for class sizes {n0, n1}.
std::pair<std::size_t, std::size_t> split_class_counts(std::size_t n0, std::size_t n1, double ratio);

// Subset of a dataset by record indices; header.n_claims follows.
Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

// Labels as a vector, throwing DataError when any record is unlabeled.
std::vector<int> labels_of(const Dataset& dataset);

std::string dtype_name(HiddenDtype dtype);

} // namespace cvt
