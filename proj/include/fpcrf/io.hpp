#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpcrf/errors.hpp"
#include "fpcrf/types.hpp"

namespace fpcrf {

// ---------------------------------------------------------------------------
// FPT1 tensor files.
// Layout: "FPT1" | u32 LE ndim | ndim x u32 LE extents | float32 LE row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace detail

inline constexpr std::uint32_t kMaxTensorDims = 8;
inline constexpr std::uint64_t kMaxTensorElems = 1ull << 40;

inline Tensor read_tensor(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();

  if (n < 4 || std::memcmp(p, "FPT1", 4) != 0)
    throw IoError(path + ": bad magic at byte offset 0 (expected \"FPT1\")");
  if (n < 8) throw IoError(path + ": truncated at byte offset 4 (missing ndim)");
  const std::uint32_t ndim = detail::read_u32_le(p + 4);
  if (ndim == 0 || ndim > kMaxTensorDims)
    throw IoError(path + ": implausible ndim " + std::to_string(ndim) + " at byte offset 4");

  const std::size_t header = 8 + 4ull * ndim;
  if (n < header)
    throw IoError(path + ": truncated at byte offset " + std::to_string(n) + " (extents need " +
                  std::to_string(header) + " bytes)");

  Tensor t;
  t.dims.resize(ndim);
  std::uint64_t numel = 1;
  for (std::uint32_t d = 0; d < ndim; ++d) {
    t.dims[d] = detail::read_u32_le(p + 8 + 4ull * d);
    if (t.dims[d] == 0) throw IoError(path + ": zero extent at byte offset " + std::to_string(8 + 4ull * d));
    numel *= t.dims[d];
    if (numel > kMaxTensorElems) throw IoError(path + ": tensor too large");
  }

  const std::uint64_t expected = header + 4ull * numel;
  if (n != expected)
    throw IoError(path + ": truncated at byte offset " + std::to_string(n) + " (expected " +
                  std::to_string(expected) + " bytes)");

  t.data.resize(numel);
  std::memcpy(t.data.data(), p + header, 4ull * numel);
  // stored little-endian; this code targets little-endian hosts
  for (std::uint64_t i = 0; i < numel; ++i)
    if (!std::isfinite(t.data[i]))
      throw IoError(path + ": non-finite value at byte offset " + std::to_string(header + 4 * i));
  return t;
}

inline void write_tensor(const Tensor& t, const std::string& path) {
  if (t.dims.empty() || t.dims.size() > kMaxTensorDims)
    throw IoError(path + ": tensor must have 1.." + std::to_string(kMaxTensorDims) + " dims");
  if (t.data.size() != t.numel()) throw IoError(path + ": data size does not match extents");
  for (std::size_t i = 0; i < t.data.size(); ++i)
    if (!std::isfinite(t.data[i]))
      throw NumericError(path + ": refusing to write non-finite value at element " +
                         std::to_string(i));
  std::string bytes;
  bytes.reserve(8 + 4 * t.dims.size() + 4 * t.data.size());
  bytes.append("FPT1");
  detail::append_u32_le(bytes, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::append_u32_le(bytes, d);
  const std::size_t payload = bytes.size();
  bytes.resize(payload + 4 * t.data.size());
  std::memcpy(bytes.data() + payload, t.data.data(), 4 * t.data.size());
  detail::write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) masks: 8-bit, maxval 255; pixel > 127 reads as building.
// ---------------------------------------------------------------------------

namespace detail {

// PGM header tokens are separated by whitespace; '#' starts a comment to EOL.
inline std::string next_pgm_token(const std::string& bytes, std::size_t& pos,
                                  const std::string& path) {
  while (pos < bytes.size()) {
    const char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw IoError(path + ": truncated PGM header");
  return bytes.substr(start, pos - start);
}

inline int parse_pgm_int(const std::string& tok, const std::string& path) {
  for (char c : tok)
    if (!std::isdigit(static_cast<unsigned char>(c)))
      throw IoError(path + ": bad PGM header token '" + tok + "'");
  return std::stoi(tok);
}

}  // namespace detail

inline BinaryMask read_mask_pgm(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  if (detail::next_pgm_token(bytes, pos, path) != "P5")
    throw IoError(path + ": not a binary PGM (magic must be P5)");
  const int w = detail::parse_pgm_int(detail::next_pgm_token(bytes, pos, path), path);
  const int h = detail::parse_pgm_int(detail::next_pgm_token(bytes, pos, path), path);
  const int maxval = detail::parse_pgm_int(detail::next_pgm_token(bytes, pos, path), path);
  if (maxval != 255) throw IoError(path + ": PGM maxval must be 255, got " + std::to_string(maxval));
  if (w <= 0 || h <= 0) throw IoError(path + ": empty PGM");
  ++pos;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < need)
    throw IoError(path + ": truncated PGM payload (" + std::to_string(bytes.size() - pos) + " of " +
                  std::to_string(need) + " bytes)");
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < need; ++i)
    m.bits[i] = static_cast<unsigned char>(bytes[pos + i]) > 127 ? 1 : 0;
  return m;
}

inline void write_mask_pgm(const BinaryMask& m, const std::string& path) {
  std::string bytes = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  bytes.reserve(bytes.size() + m.bits.size());
  for (auto b : m.bits) bytes.push_back(b ? static_cast<char>(255) : static_cast<char>(0));
  detail::write_file_bytes(path, bytes);
}

// ---------------------------------------------------------------------------
// `key = value` files: run configuration, checkpoint manifests, run manifests.
// ---------------------------------------------------------------------------

struct KvLine {
  std::string key;
  std::string value;
  int line = 0;
};

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<KvLine> parse_kv_text(const std::string& text, const std::string& what) {
  std::vector<KvLine> out;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string stripped = trim(raw);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(what + " line " + std::to_string(line) + ": expected `key = value`");
    KvLine kv;
    kv.key = trim(stripped.substr(0, eq));
    kv.value = trim(stripped.substr(eq + 1));
    kv.line = line;
    if (kv.key.empty())
      throw ConfigError(what + " line " + std::to_string(line) + ": empty key");
    out.push_back(std::move(kv));
  }
  return out;
}

inline std::vector<KvLine> read_kv_file(const std::string& path) {
  return parse_kv_text(detail::read_file_bytes(path), path);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

// ---------------------------------------------------------------------------
// RunSettings: CrfParams plus everything else a run can configure.
// ---------------------------------------------------------------------------

struct RunSettings {
  // CRF engine
  std::vector<KernelKind> kernels{KernelKind::FeatureDifference};
  double kernel_weight[5] = {1.0, 1.0, 1.0, 1.0, 1.0};  // indexed by KernelKind
  Bandwidths bandwidths;
  int filter_radius = 7;
  int iterations = 5;
  double tolerance = 1e-6;
  int classes = 11;

  // training
  double learning_rate = 0.0001;
  int epochs = 20;
  int batch_size = 4;
  std::uint64_t seed = 0;
  bool train_weights = true;
  bool train_bandwidths = true;
  bool train_compatibility = true;
  bool train_unary = true;

  // preprocessing
  double truncation = 20.0;  // key `T`
  int search_radius = 7;
  int patch_size = 256;  // key `size`
  int overlap = 0;

  // features / runtime
  int feature_window = 5;
  int threads = 1;
  std::vector<int> bench_radii{3, 5, 7, 9};

  CrfParams crf_params() const {
    CrfParams p;
    p.kernel_kinds = kernels;
    for (auto k : kernels) p.kernel_weights.push_back(kernel_weight[static_cast<int>(k)]);
    p.bandwidths = bandwidths;
    p.classes = classes;
    p.compatibility = potts_compatibility(classes);
    p.filter_radius = filter_radius;
    p.iterations = iterations;
    p.tolerance = tolerance;
    return p;
  }
};

namespace detail {

inline double parse_real(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& v, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(where + ": expected an integer, got '" + v + "'");
  }
}

}  // namespace detail

// `kernels = a+s+fd` per the shorthand a/s/fd/fs/fc; `none` disables pairwise terms.
inline std::vector<KernelKind> parse_kernel_list(const std::string& value,
                                                 const std::string& where) {
  if (trim(value) == "none") return {};
  std::vector<KernelKind> kinds;
  for (const std::string& name : split(value, '+')) {
    KernelKind k;
    if (name == "a") k = KernelKind::Appearance;
    else if (name == "s") k = KernelKind::Smooth;
    else if (name == "fd") k = KernelKind::FeatureDifference;
    else if (name == "fs") k = KernelKind::FeatureSpatial;
    else if (name == "fc") k = KernelKind::FeatureCosine;
    else throw ConfigError(where + ": unknown kernel name '" + name + "'");
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end())
      throw ConfigError(where + ": duplicate kernel '" + name + "'");
    kinds.push_back(k);
  }
  return kinds;
}

// Applies one `key = value` pair; `where` names the source ("config line 3",
// "flag --iterations") for error messages. CLI flags reuse this so flag and
// file validation cannot drift.
inline void apply_setting(RunSettings& s, const std::string& key, const std::string& value,
                          const std::string& where) {
  auto real = [&] { return detail::parse_real(value, where); };
  auto integer = [&] { return detail::parse_int(value, where); };
  auto positive_real = [&](const char* what) {
    const double x = real();
    if (!(x > 0) || !std::isfinite(x)) throw ConfigError(where + ": " + what + " must be > 0");
    return x;
  };

  if (key == "kernels") {
    s.kernels = parse_kernel_list(value, where);
  } else if (key == "filter_radius") {
    const long long r = integer();
    if (r < 2)
      throw ConfigError(where + ": filter_radius must be >= 2 (r = 1 leaves an empty neighborhood)");
    s.filter_radius = static_cast<int>(r);
  } else if (key == "iterations") {
    const long long it = integer();
    if (it < 1) throw ConfigError(where + ": iterations must be >= 1");
    s.iterations = static_cast<int>(it);
  } else if (key == "tolerance") {
    const double t = real();
    if (t < 0) throw ConfigError(where + ": tolerance must be >= 0");
    s.tolerance = t;
  } else if (key == "classes") {
    const long long c = integer();
    if (c < 2) throw ConfigError(where + ": classes must be >= 2");
    s.classes = static_cast<int>(c);
  } else if (key == "theta_alpha") {
    s.bandwidths.alpha = positive_real("theta_alpha");
  } else if (key == "theta_beta") {
    s.bandwidths.beta = positive_real("theta_beta");
  } else if (key == "theta_gamma") {
    s.bandwidths.gamma = positive_real("theta_gamma");
  } else if (key == "theta_delta") {
    s.bandwidths.delta = positive_real("theta_delta");
  } else if (key == "theta_zeta") {
    s.bandwidths.zeta = positive_real("theta_zeta");
  } else if (key == "theta_eta") {
    s.bandwidths.eta = positive_real("theta_eta");
  } else if (key == "weight_a") {
    s.kernel_weight[static_cast<int>(KernelKind::Appearance)] = real();
  } else if (key == "weight_s") {
    s.kernel_weight[static_cast<int>(KernelKind::Smooth)] = real();
  } else if (key == "weight_fd") {
    s.kernel_weight[static_cast<int>(KernelKind::FeatureDifference)] = real();
  } else if (key == "weight_fs") {
    s.kernel_weight[static_cast<int>(KernelKind::FeatureSpatial)] = real();
  } else if (key == "weight_fc") {
    s.kernel_weight[static_cast<int>(KernelKind::FeatureCosine)] = real();
  } else if (key == "learning_rate") {
    s.learning_rate = positive_real("learning_rate");
  } else if (key == "epochs") {
    const long long e = integer();
    if (e < 0) throw ConfigError(where + ": epochs must be >= 0");
    s.epochs = static_cast<int>(e);
  } else if (key == "batch_size") {
    const long long b = integer();
    if (b < 1) throw ConfigError(where + ": batch_size must be >= 1");
    s.batch_size = static_cast<int>(b);
  } else if (key == "seed") {
    s.seed = static_cast<std::uint64_t>(integer());
  } else if (key == "trainable") {
    s.train_weights = s.train_bandwidths = s.train_compatibility = s.train_unary = false;
    for (const std::string& g : split(value, ',')) {
      if (g == "weights") s.train_weights = true;
      else if (g == "bandwidths") s.train_bandwidths = true;
      else if (g == "compatibility") s.train_compatibility = true;
      else if (g == "unary") s.train_unary = true;
      else throw ConfigError(where + ": unknown trainable group '" + g + "'");
    }
  } else if (key == "T") {
    s.truncation = positive_real("T");
  } else if (key == "search_radius") {
    const long long r = integer();
    if (r < 0) throw ConfigError(where + ": search_radius must be >= 0");
    s.search_radius = static_cast<int>(r);
  } else if (key == "size") {
    const long long p = integer();
    if (p < 1) throw ConfigError(where + ": size must be >= 1");
    s.patch_size = static_cast<int>(p);
  } else if (key == "overlap") {
    const long long o = integer();
    if (o < 0) throw ConfigError(where + ": overlap must be >= 0");
    s.overlap = static_cast<int>(o);
  } else if (key == "feature_window") {
    const long long w = integer();
    if (w < 3 || w % 2 == 0)
      throw ConfigError(where + ": feature_window must be an odd integer >= 3");
    s.feature_window = static_cast<int>(w);
  } else if (key == "threads") {
    const long long t = integer();
    if (t < 1) throw ConfigError(where + ": threads must be >= 1");
    s.threads = static_cast<int>(t);
  } else if (key == "bench_radii") {
    std::vector<int> radii;
    for (const std::string& tok : split(value, ',')) {
      const long long r = detail::parse_int(tok, where);
      if (r < 2) throw ConfigError(where + ": bench_radii entries must be >= 2");
      radii.push_back(static_cast<int>(r));
    }
    if (radii.empty()) throw ConfigError(where + ": bench_radii must not be empty");
    s.bench_radii = std::move(radii);
  } else {
    throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Cross-field checks that cannot run per-line.
inline void validate_settings(const RunSettings& s) {
  if (s.overlap >= s.patch_size)
    throw ConfigError("overlap (" + std::to_string(s.overlap) + ") must be smaller than size (" +
                      std::to_string(s.patch_size) + ")");
  s.crf_params().validate();
}

inline RunSettings parse_config(const std::string& path) {
  RunSettings s;
  for (const KvLine& kv : read_kv_file(path))
    apply_setting(s, kv.key, kv.value, path + " line " + std::to_string(kv.line));
  validate_settings(s);
  return s;
}

}  // namespace fpcrf
