#pragma once

// Binary checkpoints and on-disk artifacts.
//
// Layout (all integers little-endian):
//
//   "INFL1"                       5-byte magic
//   u32 version                   kCheckpointVersion
//   u32 len, bytes                config echo (run seed omitted)
//   u32 count; {u32 len, name, u64 binding}      per locked layer
//   u32 count; {u32 len, name, u64 rows, u64 cols, u8 trainable, u64 offset}
//   u64 payload_bytes, payload    f64 values, segment order
//   u64 checksum                  FNV-1a 64 of every preceding byte
//
// Bindings are random nonces shared with the key files; they identify which
// key belongs to which checkpoint and carry no permutation information.

#include <bit>
#include <filesystem>
#include <fstream>

#include "infl/cli/config.hpp"

namespace infl::cli {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline constexpr std::string_view kCheckpointMagic = "INFL1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ExperimentConfig config;  // model/lock/lora fields describe the stored model
  ParamVector params;
  std::map<std::string, std::uint64_t> bindings;
  std::uint64_t checksum = 0;

  std::string id() const { return hex64(checksum); }
};

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t position() const { return pos_; }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n)
      throw std::runtime_error(concat("checkpoint truncated at byte ", pos_, " (need ", n, " more)"));
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  infl::detail::Fnv1a64 h;
  h.bytes(bytes);
  return h.state;
}
}  // namespace detail

/// Write `bytes` to `path` via a temporary file and rename.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(detail::concat("cannot write '", tmp.string(), "'"));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(detail::concat("write failed for '", tmp.string(), "'"));
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(detail::concat("cannot open '", path.string(), "'"));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Config text stored in a checkpoint: the run seed is dropped because keys
/// are derived from it, and the thread count because results do not depend on it.
inline std::string checkpoint_spec_echo(ExperimentConfig cfg, const ModelSpec& trained) {
  cfg.federation.seed = 0;
  cfg.federation.threads = 1;
  cfg.model.locked_layers = trained.locked_layers;
  cfg.model.lora_layers = trained.lora_layers;
  return format_config(cfg);
}

inline std::vector<std::uint8_t> serialize_checkpoint(const ExperimentConfig& cfg, const ModelSpec& trained,
                                                      const ParamVector& params,
                                                      const std::map<std::string, std::uint64_t>& bindings) {
  detail::Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(checkpoint_spec_echo(cfg, trained));
  w.u32(static_cast<std::uint32_t>(bindings.size()));
  for (const auto& [name, b] : bindings) {
    w.str(name);
    w.u64(b);
  }
  w.u32(static_cast<std::uint32_t>(params.segments.size()));
  std::uint64_t offset = 0;
  for (const auto& s : params.segments) {
    w.str(s.name);
    w.u64(s.rows);
    w.u64(s.cols);
    w.u8(s.trainable ? 1 : 0);
    w.u64(offset);
    offset += 8 * s.data.size();
  }
  w.u64(offset);
  for (const auto& s : params.segments)
    for (double v : s.data) w.f64(v);
  w.u64(detail::fnv1a(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kMinimum = 5 + 4 + 8;
  if (bytes.size() < kMinimum) throw std::runtime_error("checkpoint truncated");
  if (std::string_view(reinterpret_cast<const char*>(bytes.data()), 5) != kCheckpointMagic)
    throw std::runtime_error("not a checkpoint: bad magic");
  detail::Reader r(bytes.first(bytes.size() - 8));
  r.raw(kCheckpointMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error(detail::concat("unsupported checkpoint version ", version));
  const std::uint64_t stored = detail::Reader(bytes.last(8)).u64();
  if (detail::fnv1a(bytes.first(bytes.size() - 8)) != stored)
    throw std::runtime_error("checkpoint checksum mismatch");
  Checkpoint ck;
  ck.config = parse_config_text(r.str());
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    std::string name = r.str();
    ck.bindings.emplace(std::move(name), r.u64());
  }
  struct Dir {
    std::string name;
    std::uint64_t rows, cols;
    bool trainable;
    std::uint64_t offset;
  };
  std::vector<Dir> dir;
  for (std::uint32_t n = r.u32(), i = 0; i < n; ++i) {
    Dir d;
    d.name = r.str();
    d.rows = r.u64();
    d.cols = r.u64();
    d.trainable = r.u8() != 0;
    d.offset = r.u64();
    dir.push_back(std::move(d));
  }
  const std::uint64_t payload = r.u64();
  const std::size_t payload_start = r.position();
  const std::size_t available = bytes.size() - 8 - payload_start;
  if (payload != available)
    throw std::runtime_error(detail::concat("checkpoint payload is ", available, " bytes, directory says ",
                                            payload));
  ck.checksum = stored;
  for (const auto& d : dir) {
    if (d.rows != 0 && d.cols > std::numeric_limits<std::uint64_t>::max() / 8 / d.rows)
      throw std::runtime_error(detail::concat("segment '", d.name, "' has an impossible shape"));
    const std::uint64_t n = d.rows * d.cols;
    if (d.offset % 8 != 0 || d.offset > payload || payload - d.offset < 8 * n)
      throw std::runtime_error(detail::concat("segment '", d.name, "' lies outside the payload"));
    Segment s{d.name, static_cast<std::size_t>(d.rows), static_cast<std::size_t>(d.cols), d.trainable,
              Vector(static_cast<std::size_t>(n))};
    detail::Reader pr(bytes.subspan(payload_start + d.offset, 8 * n));
    for (auto& v : s.data) v = pr.f64();
    ck.params.segments.push_back(std::move(s));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg,
                            const ModelSpec& trained, const ParamVector& params,
                            const std::map<std::string, std::uint64_t>& bindings) {
  write_file_atomic(path, serialize_checkpoint(cfg, trained, params, bindings));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path));
}

/// Rebuild a model from a checkpoint. Locked layers still need keys (or an
/// attack lock state) to run.
inline Model model_from_checkpoint(const Checkpoint& ck) {
  Model m = Model::build(ck.config.model, derive_stream(0, {1}));
  m.set_parameters(ck.params);
  return m;
}

//---------------------------------------------------------------------------//
// Key files
//---------------------------------------------------------------------------//

inline std::filesystem::path key_file_path(const std::filesystem::path& dir, std::size_t client) {
  return dir / detail::concat("client_", client, ".key");
}

inline void save_key_file(const std::filesystem::path& path, const std::vector<KeyRecord>& records) {
  write_text_atomic(path, format_key_records(records));
}

inline std::vector<KeyRecord> load_key_file(const std::filesystem::path& path) {
  return parse_key_records(read_text_file(path.string()));
}

/// First key file in `dir` (any client's file authorizes inference).
inline std::filesystem::path find_key_file(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw ValidationError(detail::concat("key directory '", dir.string(), "' does not exist"));
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".key") files.push_back(e.path());
  detail::require(!files.empty(), "no .key files in '", dir.string(), "'");
  std::sort(files.begin(), files.end());
  return files.front();
}

//---------------------------------------------------------------------------//
// Key confinement scan
//---------------------------------------------------------------------------//

/// Byte encodings under which a permutation could appear in a binary blob:
/// its entries as little-endian u64, u32, f64 and u8 (when they fit), its
/// text form, and its fingerprint.
inline std::vector<std::vector<std::uint8_t>> key_signatures(const PermutationKey& key) {
  std::vector<std::vector<std::uint8_t>> sigs;
  detail::Writer u64s, u32s, f64s, u8s;
  bool fits_u8 = true;
  for (std::size_t v : key.perm()) {
    u64s.u64(v);
    u32s.u32(static_cast<std::uint32_t>(v));
    f64s.f64(static_cast<double>(v));
    fits_u8 = fits_u8 && v < 256;
    u8s.u8(static_cast<std::uint8_t>(v));
  }
  sigs.push_back(u64s.bytes());
  sigs.push_back(u32s.bytes());
  sigs.push_back(f64s.bytes());
  if (fits_u8) sigs.push_back(u8s.bytes());
  std::string text = "perm";
  for (std::size_t v : key.perm()) text += " " + std::to_string(v);
  sigs.emplace_back(text.begin(), text.end());
  const std::string fp = hex64(key_fingerprint(key));
  sigs.emplace_back(fp.begin(), fp.end());
  detail::Writer fpb;
  fpb.u64(key_fingerprint(key));
  sigs.push_back(fpb.bytes());
  return sigs;
}

/// True when any signature of `key` occurs in `blob`. Keys of size < 8 are
/// too short to scan meaningfully as raw bytes; only their text and
/// fingerprint forms are checked.
inline bool blob_contains_key(std::span<const std::uint8_t> blob, const PermutationKey& key) {
  auto sigs = key_signatures(key);
  for (std::size_t i = 0; i < sigs.size(); ++i) {
    const auto& s = sigs[i];
    const bool raw_form = i < sigs.size() - 3;
    if (raw_form && key.size() < 8) continue;
    if (std::search(blob.begin(), blob.end(), s.begin(), s.end()) != blob.end()) return true;
  }
  return false;
}

inline std::vector<std::uint8_t> param_bytes(const ParamVector& pv) {
  detail::Writer w;
  for (const auto& s : pv.segments) {
    w.raw(s.name);
    for (double v : s.data) w.f64(v);
  }
  return std::move(w.bytes());
}

}  // namespace infl::cli
