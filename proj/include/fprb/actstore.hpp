#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace fprb {

// Prompt-format conditions. First letter is input style (Structured/Natural),
// second is output mode (Letter/Free text); *_CF moves the format instruction
// to the start of the prompt.
enum class Condition { SL, NL, SF, NF, NL_CF, SL_CF };

std::string_view to_string(Condition c);
Condition parse_condition(std::string_view text);
bool is_multiple_choice(Condition c);

// Half-open token interval [start, end).
struct TokenSpan {
  std::int64_t start = 0;
  std::int64_t end = 0;

  std::int64_t length() const { return end - start; }
  bool empty() const { return end <= start; }
  bool contains(std::int64_t index) const { return index >= start && index < end; }
  bool within(const TokenSpan& outer) const { return start >= outer.start && end <= outer.end; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

using ResidualMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ActivationDump {
  std::string case_id;
  Condition condition = Condition::NL;
  std::string model_id;
  int layer = 0;
  ResidualMatrix residuals;  // token_count x dim
  std::vector<std::int32_t> token_ids;
  TokenSpan vignette_mask;
  std::optional<TokenSpan> scaffold_mask;
  std::int64_t decision_index = 0;
  TokenSpan content_range;
  // Harness-recorded conventions (chat templating, pooling range, ...).
  std::map<std::string, std::string> metadata;

  std::int64_t token_count() const { return residuals.rows(); }
  std::int64_t dim() const { return residuals.cols(); }
};

// Bitwise equality of every field, including the residual payload.
bool operator==(const ActivationDump& a, const ActivationDump& b);

// Throws Error(validation) naming the case when any invariant fails.
void validate_dump(const ActivationDump& dump);

void write_dump(const ActivationDump& dump, const std::filesystem::path& path);
ActivationDump read_dump(const std::filesystem::path& path);

struct SharedPrefix {
  std::size_t length = 0;
  bool vignette_inside = false;  // both vignette masks end at or before `length`
};

SharedPrefix shared_prefix_length(const ActivationDump& a, const ActivationDump& b);

struct PrefixNoiseReport {
  std::size_t rows_checked = 0;
  double max_relative_l2 = 0.0;
  std::vector<std::int64_t> violating_rows;
  bool ok() const { return violating_rows.empty(); }
};

// Matches two dump sets by case id (same layer and model). Throws naming the
// first case present on only one side.
std::vector<std::pair<const ActivationDump*, const ActivationDump*>> pair_dumps(std::span<const ActivationDump> a,
                                                                                 std::span<const ActivationDump> b);

// Residual rows inside the shared token prefix must agree up to numeric noise
// (relative L2 against the first dump's row).
PrefixNoiseReport check_prefix_noise(const ActivationDump& a, const ActivationDump& b, double tolerance = 0.01);

// CRC-32C (Castagnoli) over raw bytes.
std::uint32_t crc32c(std::span<const std::byte> bytes);
std::uint32_t file_crc32c(const std::filesystem::path& path);

// Standalone dense tensors (SAE weights, directions) share the dump framing;
// `extra` carries descriptor fields and is returned verbatim on read.
void write_tensor(const std::filesystem::path& path, const Eigen::MatrixXf& tensor,
                  const nlohmann::json& extra = nlohmann::json::object());

struct Tensor {
  Eigen::MatrixXf values;
  nlohmann::json header;
};

Tensor read_tensor(const std::filesystem::path& path);

struct ManifestEntry {
  std::string case_id;
  Condition condition = Condition::NL;
  int layer = 0;
  std::filesystem::path path;  // relative to the manifest directory when not absolute
  std::uint32_t checksum = 0;  // CRC-32C of the whole file
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::string gold_labels;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& entry) const;
};

CorpusManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

// Uniqueness of (case, condition, layer), file presence, checksum match.
void verify_manifest(const CorpusManifest& manifest);

// Loads every dump for (condition, layer), ordered by case id.
std::vector<ActivationDump> load_dumps(const CorpusManifest& manifest, Condition condition, int layer);

}  // namespace fprb
