#include "fprb/actstore.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <tuple>

#include <boost/crc.hpp>

#include "fprb/errors.hpp"

namespace fprb {

static_assert(std::endian::native == std::endian::little, "payloads are stored little-endian in native order");

namespace {

constexpr std::string_view kMagic = "FPRB1";
constexpr std::size_t kAlignment = 8;
constexpr std::size_t kMaxHeaderBytes = 1 << 20;

constexpr std::array<std::pair<Condition, std::string_view>, 6> kConditionNames{{
    {Condition::SL, "SL"},
    {Condition::NL, "NL"},
    {Condition::SF, "SF"},
    {Condition::NF, "NF"},
    {Condition::NL_CF, "NL_CF"},
    {Condition::SL_CF, "SL_CF"},
}};

nlohmann::json span_json(const TokenSpan& s) { return nlohmann::json::array({s.start, s.end}); }

TokenSpan span_from(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
    fail(ErrorKind::format, "malformed span field '" + field + "'");
  return {j[0].get<std::int64_t>(), j[1].get<std::int64_t>()};
}

std::vector<std::byte> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string(), path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    fail(ErrorKind::io, "read failed for " + path.string(), path.string());
  return bytes;
}

std::size_t padded(std::size_t offset) { return (offset + kAlignment - 1) / kAlignment * kAlignment; }

// Frame: magic, compact JSON header, '\n', zero padding to 8 bytes, blocks.
void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::initializer_list<std::span<const std::byte>> blocks) {
  const std::string text = header.dump();
  const std::size_t header_end = kMagic.size() + text.size() + 1;
  const std::size_t pad = padded(header_end) - header_end;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open for writing: " + path.string(), path.string());
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.put('\n');
  const std::array<char, kAlignment> zeros{};
  out.write(zeros.data(), static_cast<std::streamsize>(pad));
  for (auto block : blocks)
    out.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size()));
  out.flush();
  if (!out) fail(ErrorKind::io, "write failed for " + path.string(), path.string());
}

struct Framed {
  std::vector<std::byte> bytes;
  nlohmann::json header;
  std::size_t body_offset = 0;
};

Framed read_framed(const std::filesystem::path& path) {
  Framed f;
  f.bytes = read_all(path);
  const auto& b = f.bytes;
  if (b.size() < kMagic.size() || std::memcmp(b.data(), kMagic.data(), kMagic.size()) != 0)
    fail(ErrorKind::format, "bad magic in " + path.string(), path.string());
  const auto limit = std::min(b.size(), kMaxHeaderBytes);
  auto newline = std::find(b.begin() + static_cast<std::ptrdiff_t>(kMagic.size()),
                           b.begin() + static_cast<std::ptrdiff_t>(limit), std::byte{'\n'});
  if (newline == b.begin() + static_cast<std::ptrdiff_t>(limit))
    fail(ErrorKind::format, "unterminated header in " + path.string(), path.string());
  const std::string text(reinterpret_cast<const char*>(b.data()) + kMagic.size(),
                         reinterpret_cast<const char*>(&*newline));
  try {
    f.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed header in " + path.string() + ": " + e.what(), path.string());
  }
  if (!f.header.is_object()) fail(ErrorKind::format, "header is not an object in " + path.string(), path.string());
  f.body_offset = padded(static_cast<std::size_t>(newline - b.begin()) + 1);
  return f;
}

template <typename T>
T header_field(const nlohmann::json& header, const char* key, const std::filesystem::path& path) {
  if (!header.contains(key)) fail(ErrorKind::format, std::string("missing header field '") + key + "'", path.string());
  try {
    return header.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::format, std::string("bad header field '") + key + "'", path.string());
  }
}

std::span<const std::byte> bytes_of(const ResidualMatrix& m) {
  return {reinterpret_cast<const std::byte*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float)};
}

template <typename T>
std::span<const std::byte> bytes_of(const std::vector<T>& v) {
  return {reinterpret_cast<const std::byte*>(v.data()), v.size() * sizeof(T)};
}

}  // namespace

std::string_view to_string(Condition c) {
  for (auto [cond, name] : kConditionNames)
    if (cond == c) return name;
  return "?";
}

Condition parse_condition(std::string_view text) {
  for (auto [cond, name] : kConditionNames)
    if (name == text) return cond;
  fail(ErrorKind::validation, "unknown condition '" + std::string(text) + "'");
}

bool is_multiple_choice(Condition c) {
  return c == Condition::SL || c == Condition::NL || c == Condition::NL_CF || c == Condition::SL_CF;
}

std::uint32_t crc32c(std::span<const std::byte> bytes) {
  boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::uint32_t file_crc32c(const std::filesystem::path& path) { return crc32c(read_all(path)); }

bool operator==(const ActivationDump& a, const ActivationDump& b) {
  return a.case_id == b.case_id && a.condition == b.condition && a.model_id == b.model_id && a.layer == b.layer &&
         a.residuals.rows() == b.residuals.rows() && a.residuals.cols() == b.residuals.cols() &&
         std::memcmp(a.residuals.data(), b.residuals.data(),
                     static_cast<std::size_t>(a.residuals.size()) * sizeof(float)) == 0 &&
         a.token_ids == b.token_ids && a.vignette_mask == b.vignette_mask && a.scaffold_mask == b.scaffold_mask &&
         a.decision_index == b.decision_index && a.content_range == b.content_range && a.metadata == b.metadata;
}

void validate_dump(const ActivationDump& d) {
  const auto T = d.token_count();
  const auto& id = d.case_id;
  require(!d.case_id.empty(), "dump has empty case_id");
  require(T >= 1, "dump has no tokens", id);
  require(d.dim() >= 1, "dump has zero dimension", id);
  require(static_cast<std::int64_t>(d.token_ids.size()) == T, "token_ids length differs from token_count", id);
  require(d.decision_index >= 0 && d.decision_index < T, "decision_index outside [0, token_count)", id);
  auto span_ok = [T](const TokenSpan& s) { return 0 <= s.start && s.start <= s.end && s.end <= T; };
  require(span_ok(d.content_range), "content_range outside the token stream", id);
  require(span_ok(d.vignette_mask), "vignette_mask outside the token stream", id);
  require(d.vignette_mask.within(d.content_range), "vignette_mask not inside content_range", id);
  require(d.scaffold_mask.has_value() == is_multiple_choice(d.condition),
          "scaffold_mask must be present exactly for multiple-choice conditions", id);
  if (d.scaffold_mask) require(span_ok(*d.scaffold_mask), "scaffold_mask outside the token stream", id);
  require(d.residuals.allFinite(), "residual matrix has non-finite entries", id);
}

void write_dump(const ActivationDump& dump, const std::filesystem::path& path) {
  validate_dump(dump);
  const auto payload = bytes_of(dump.residuals);
  const auto tokens = bytes_of(dump.token_ids);
  nlohmann::json header{
      {"kind", "activation_dump"},
      {"case_id", dump.case_id},
      {"condition", to_string(dump.condition)},
      {"model_id", dump.model_id},
      {"layer", dump.layer},
      {"token_count", dump.token_count()},
      {"dim", dump.dim()},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"layout", "row_major"},
      {"payload_bytes", payload.size()},
      {"payload_crc32c", crc32c(payload)},
      {"token_ids_bytes", tokens.size()},
      {"token_ids_crc32c", crc32c(tokens)},
      {"vignette_mask", span_json(dump.vignette_mask)},
      {"scaffold_mask", dump.scaffold_mask ? span_json(*dump.scaffold_mask) : nlohmann::json(nullptr)},
      {"decision_index", dump.decision_index},
      {"content_range", span_json(dump.content_range)},
      {"metadata", dump.metadata},
  };
  write_framed(path, header, {payload, tokens});
}

ActivationDump read_dump(const std::filesystem::path& path) {
  const Framed f = read_framed(path);
  const auto& h = f.header;
  const auto name = path.string();
  if (header_field<std::string>(h, "kind", path) != "activation_dump")
    fail(ErrorKind::format, "not an activation dump: " + name, name);
  if (header_field<std::string>(h, "dtype", path) != "float32")
    fail(ErrorKind::format, "unsupported dtype in " + name, name);

  ActivationDump d;
  d.case_id = header_field<std::string>(h, "case_id", path);
  try {
    d.condition = parse_condition(header_field<std::string>(h, "condition", path));
  } catch (const Error& e) {
    fail(ErrorKind::format, e.what(), name);
  }
  d.model_id = header_field<std::string>(h, "model_id", path);
  d.layer = header_field<int>(h, "layer", path);
  const auto T = header_field<std::int64_t>(h, "token_count", path);
  const auto D = header_field<std::int64_t>(h, "dim", path);
  const auto payload_bytes = header_field<std::uint64_t>(h, "payload_bytes", path);
  const auto token_bytes = header_field<std::uint64_t>(h, "token_ids_bytes", path);
  if (T < 0 || D < 0 || payload_bytes != static_cast<std::uint64_t>(T * D) * sizeof(float) ||
      token_bytes != static_cast<std::uint64_t>(T) * sizeof(std::int32_t))
    fail(ErrorKind::format, "header sizes are inconsistent in " + name, name);
  if (f.bytes.size() != f.body_offset + payload_bytes + token_bytes)
    fail(ErrorKind::format,
         "size mismatch in " + name + ": expected " + std::to_string(f.body_offset + payload_bytes + token_bytes) +
             " bytes, found " + std::to_string(f.bytes.size()),
         name);

  const std::span<const std::byte> payload(f.bytes.data() + f.body_offset, payload_bytes);
  const std::span<const std::byte> tokens(payload.data() + payload_bytes, token_bytes);
  if (crc32c(payload) != header_field<std::uint32_t>(h, "payload_crc32c", path))
    fail(ErrorKind::format, "payload checksum mismatch in " + name, name);
  if (crc32c(tokens) != header_field<std::uint32_t>(h, "token_ids_crc32c", path))
    fail(ErrorKind::format, "token_ids checksum mismatch in " + name, name);

  d.residuals.resize(T, D);
  if (payload_bytes > 0) std::memcpy(d.residuals.data(), payload.data(), payload_bytes);
  d.token_ids.resize(static_cast<std::size_t>(T));
  if (token_bytes > 0) std::memcpy(d.token_ids.data(), tokens.data(), token_bytes);
  d.vignette_mask = span_from(h.value("vignette_mask", nlohmann::json()), "vignette_mask");
  if (h.contains("scaffold_mask") && !h["scaffold_mask"].is_null())
    d.scaffold_mask = span_from(h["scaffold_mask"], "scaffold_mask");
  d.decision_index = header_field<std::int64_t>(h, "decision_index", path);
  d.content_range = span_from(h.value("content_range", nlohmann::json()), "content_range");
  if (h.contains("metadata")) d.metadata = h["metadata"].get<std::map<std::string, std::string>>();

  try {
    validate_dump(d);
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string(e.what()) + " (" + name + ")", name);
  }
  return d;
}

std::vector<std::pair<const ActivationDump*, const ActivationDump*>> pair_dumps(std::span<const ActivationDump> a,
                                                                                 std::span<const ActivationDump> b) {
  std::map<std::string, const ActivationDump*> rhs;
  for (const auto& d : b) {
    require(rhs.emplace(d.case_id, &d).second, "duplicate dump for case " + d.case_id, d.case_id);
  }
  std::vector<std::pair<const ActivationDump*, const ActivationDump*>> out;
  std::set<std::string> seen;
  for (const auto& d : a) {
    require(seen.insert(d.case_id).second, "duplicate dump for case " + d.case_id, d.case_id);
    auto it = rhs.find(d.case_id);
    if (it == rhs.end())
      fail(ErrorKind::validation, "unpaired case " + d.case_id + ": no " + std::string(to_string(d.condition)) +
                                      " counterpart", d.case_id);
    require(d.layer == it->second->layer, "paired dumps come from different layers", d.case_id);
    require(d.model_id == it->second->model_id, "paired dumps come from different models", d.case_id);
    out.emplace_back(&d, it->second);
  }
  for (const auto& [id, d] : rhs)
    if (!seen.contains(id)) fail(ErrorKind::validation, "unpaired case " + id, id);
  return out;
}

SharedPrefix shared_prefix_length(const ActivationDump& a, const ActivationDump& b) {
  require(a.case_id == b.case_id, "shared_prefix_length: case ids differ (" + a.case_id + " vs " + b.case_id + ")",
          a.case_id);
  require(a.model_id == b.model_id, "shared_prefix_length: model ids differ", a.case_id);
  const auto n = std::min(a.token_ids.size(), b.token_ids.size());
  std::size_t len = 0;
  while (len < n && a.token_ids[len] == b.token_ids[len]) ++len;
  SharedPrefix out;
  out.length = len;
  const auto L = static_cast<std::int64_t>(len);
  out.vignette_inside = a.vignette_mask.end <= L && b.vignette_mask.end <= L;
  return out;
}

PrefixNoiseReport check_prefix_noise(const ActivationDump& a, const ActivationDump& b, double tolerance) {
  require(a.dim() == b.dim(), "check_prefix_noise: dimension mismatch", a.case_id);
  const auto prefix = shared_prefix_length(a, b);
  PrefixNoiseReport report;
  report.rows_checked = prefix.length;
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(prefix.length); ++t) {
    const Eigen::VectorXd ra = a.residuals.row(t).cast<double>();
    const Eigen::VectorXd rb = b.residuals.row(t).cast<double>();
    const double denom = ra.norm();
    const double rel = denom > 0.0 ? (ra - rb).norm() / denom : (rb.norm() > 0.0 ? 1.0 : 0.0);
    report.max_relative_l2 = std::max(report.max_relative_l2, rel);
    if (rel > tolerance) report.violating_rows.push_back(t);
  }
  return report;
}

void write_tensor(const std::filesystem::path& path, const Eigen::MatrixXf& tensor, const nlohmann::json& extra) {
  require(tensor.allFinite(), "tensor has non-finite entries", path.string());
  const ResidualMatrix row_major = tensor;
  const auto payload = bytes_of(row_major);
  nlohmann::json header{
      {"kind", "tensor"},
      {"rows", tensor.rows()},
      {"cols", tensor.cols()},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"layout", "row_major"},
      {"payload_bytes", payload.size()},
      {"payload_crc32c", crc32c(payload)},
      {"extra", extra},
  };
  write_framed(path, header, {payload});
}

Tensor read_tensor(const std::filesystem::path& path) {
  const Framed f = read_framed(path);
  const auto& h = f.header;
  const auto name = path.string();
  if (header_field<std::string>(h, "kind", path) != "tensor") fail(ErrorKind::format, "not a tensor: " + name, name);
  const auto rows = header_field<std::int64_t>(h, "rows", path);
  const auto cols = header_field<std::int64_t>(h, "cols", path);
  const auto payload_bytes = header_field<std::uint64_t>(h, "payload_bytes", path);
  if (rows < 0 || cols < 0 || payload_bytes != static_cast<std::uint64_t>(rows * cols) * sizeof(float))
    fail(ErrorKind::format, "header sizes are inconsistent in " + name, name);
  if (f.bytes.size() != f.body_offset + payload_bytes) fail(ErrorKind::format, "size mismatch in " + name, name);
  const std::span<const std::byte> payload(f.bytes.data() + f.body_offset, payload_bytes);
  if (crc32c(payload) != header_field<std::uint32_t>(h, "payload_crc32c", path))
    fail(ErrorKind::format, "payload checksum mismatch in " + name, name);
  ResidualMatrix m(rows, cols);
  if (payload_bytes > 0) std::memcpy(m.data(), payload.data(), payload_bytes);
  Tensor t;
  t.values = m;
  t.header = h.value("extra", nlohmann::json::object());
  if (!t.values.allFinite()) fail(ErrorKind::format, "tensor has non-finite entries: " + name, name);
  return t;
}

std::filesystem::path CorpusManifest::resolve(const ManifestEntry& entry) const {
  return entry.path.is_absolute() ? entry.path : base_dir / entry.path;
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string(), path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed manifest " + path.string() + ": " + e.what(), path.string());
  }
  CorpusManifest m;
  m.base_dir = path.parent_path();
  try {
    m.gold_labels = j.value("gold_labels", std::string{});
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.case_id = e.at("case_id").get<std::string>();
      entry.condition = parse_condition(e.at("condition").get<std::string>());
      entry.layer = e.at("layer").get<int>();
      entry.path = e.at("path").get<std::string>();
      entry.checksum = e.at("crc32c").get<std::uint32_t>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed manifest " + path.string() + ": " + e.what(), path.string());
  }
  return m;
}

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : manifest.entries)
    entries.push_back({{"case_id", e.case_id},
                       {"condition", to_string(e.condition)},
                       {"layer", e.layer},
                       {"path", e.path.generic_string()},
                       {"crc32c", e.checksum}});
  nlohmann::json j{{"gold_labels", manifest.gold_labels}, {"entries", entries}};
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write manifest " + path.string(), path.string());
  out << j.dump(2) << '\n';
}

void verify_manifest(const CorpusManifest& manifest) {
  std::set<std::tuple<std::string, Condition, int>> seen;
  for (const auto& e : manifest.entries) {
    require(seen.emplace(e.case_id, e.condition, e.layer).second,
            "duplicate manifest entry for (" + e.case_id + ", " + std::string(to_string(e.condition)) + ", " +
                std::to_string(e.layer) + ")",
            e.case_id);
    const auto p = manifest.resolve(e);
    if (!std::filesystem::exists(p)) fail(ErrorKind::io, "manifest references missing file " + p.string(), e.case_id);
    if (file_crc32c(p) != e.checksum) fail(ErrorKind::format, "checksum mismatch for " + p.string(), e.case_id);
  }
}

std::vector<ActivationDump> load_dumps(const CorpusManifest& manifest, Condition condition, int layer) {
  std::vector<const ManifestEntry*> selected;
  for (const auto& e : manifest.entries)
    if (e.condition == condition && e.layer == layer) selected.push_back(&e);
  std::sort(selected.begin(), selected.end(), [](auto* a, auto* b) { return a->case_id < b->case_id; });
  std::vector<ActivationDump> dumps;
  dumps.reserve(selected.size());
  for (const auto* e : selected) {
    const auto p = manifest.resolve(*e);
    if (file_crc32c(p) != e->checksum) fail(ErrorKind::format, "checksum mismatch for " + p.string(), e->case_id);
    auto d = read_dump(p);
    require(d.case_id == e->case_id && d.condition == condition && d.layer == layer,
            "dump header disagrees with manifest entry: " + p.string(), e->case_id);
    dumps.push_back(std::move(d));
  }
  return dumps;
}

}  // namespace fprb
