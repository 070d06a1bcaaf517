#include "scatsep/storage.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "scatsep/errors.hpp"
#include "scatsep/scatcov.hpp"

namespace scatsep {

static_assert(std::endian::native == std::endian::little, "storage assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'C', 'S', 'F'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p[k]) << (8 * k);
  return v;
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p[k]) << (8 * k);
  return v;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw IoError("cannot read " + path.string());
  return bytes;
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::size_t width(DType t) { return t == DType::F32 ? 4 : 8; }

ManifestEntry entry_for(const fs::path& p) { return {p.generic_string(), sha256_file(p)}; }

}  // namespace

std::string to_string(DType t) { return t == DType::F32 ? "f32" : "f64"; }

DType dtype_from_string(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw FormatError("unknown dtype '" + name + "'");
}

std::size_t Blob::element_count() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

const Blob& Container::blob(const std::string& name) const {
  for (const Blob& b : blobs)
    if (b.name == name) return b;
  throw FormatError("container has no blob '" + name + "'");
}

bool Container::has_blob(const std::string& name) const {
  for (const Blob& b : blobs)
    if (b.name == name) return true;
  return false;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 computation failed");
  std::ostringstream s;
  for (unsigned int k = 0; k < len; ++k) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
  return s.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

void write_container(const fs::path& path, const Container& c) {
  Json header;
  header["kind"] = c.kind;
  header["schema_version"] = kSchemaVersion;
  header["meta"] = c.meta;
  Json list = Json::array();
  std::vector<std::uint8_t> payload;
  for (const Blob& b : c.blobs) {
    if (b.data.size() != b.element_count())
      throw SizingError("blob '" + b.name + "' holds " + std::to_string(b.data.size()) + " values for shape of " +
                        std::to_string(b.element_count()));
    list.push_back({{"name", b.name}, {"dtype", to_string(b.dtype)}, {"shape", b.shape}, {"offset", payload.size()}});
    if (b.dtype == DType::F32) {
      for (double v : b.data) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        put_u32(payload, bits);
      }
    } else {
      for (double v : b.data) put_u64(payload, std::bit_cast<std::uint64_t>(v));
    }
  }
  header["blobs"] = list;
  const std::string h = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kContainerVersion);
  put_u64(out, h.size());
  out.insert(out.end(), h.begin(), h.end());
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(out.data(), out.size(), md, &len, EVP_sha256(), nullptr);
  out.insert(out.end(), md, md + len);
  write_bytes(path, out);
}

Container read_container(const fs::path& path, const std::string& expected_kind) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  constexpr std::size_t kDigest = 32;
  if (bytes.size() < 4 + 4 + 8 + 8 + kDigest) throw DigestError(path.string() + ": file is truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(path.string() + ": not a container file");

  const std::size_t body = bytes.size() - kDigest;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), body, md, &len, EVP_sha256(), nullptr);
  if (len != kDigest || std::memcmp(md, bytes.data() + body, kDigest) != 0)
    throw DigestError(path.string() + ": digest mismatch (file truncated or corrupt)");

  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kContainerVersion)
    throw FormatError(path.string() + ": container version " + std::to_string(version) + ", expected " +
                      std::to_string(kContainerVersion));
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (16 + hlen + 8 > body) throw FormatError(path.string() + ": header length out of range");
  const Json header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  const std::size_t pstart = 16 + hlen + 8;
  const std::uint64_t plen = get_u64(bytes.data() + 16 + hlen);
  if (pstart + plen != body) throw FormatError(path.string() + ": payload length mismatch");

  Container c;
  c.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && c.kind != expected_kind)
    throw FormatError(path.string() + ": expected a '" + expected_kind + "' file, found '" + c.kind + "'");
  if (header.at("schema_version").get<int>() != kSchemaVersion)
    throw FormatError(path.string() + ": unsupported schema version");
  c.meta = header.at("meta");
  for (const Json& jb : header.at("blobs")) {
    Blob b;
    b.name = jb.at("name").get<std::string>();
    b.dtype = dtype_from_string(jb.at("dtype").get<std::string>());
    b.shape = jb.at("shape").get<std::vector<std::size_t>>();
    const std::size_t off = jb.at("offset").get<std::size_t>();
    const std::size_t n = b.element_count();
    if (off + n * width(b.dtype) > plen) throw FormatError(path.string() + ": blob '" + b.name + "' out of range");
    const std::uint8_t* p = bytes.data() + pstart + off;
    b.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (b.dtype == DType::F32) {
        b.data[k] = std::bit_cast<float>(get_u32(p + 4 * k));
      } else {
        b.data[k] = std::bit_cast<double>(get_u64(p + 8 * k));
      }
    }
    c.blobs.push_back(std::move(b));
  }
  return c;
}

void write_f32(const fs::path& path, std::span<const double> values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * 4);
  for (double v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  write_bytes(path, out);
}

std::vector<double> read_f32(const fs::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() % 4 != 0) throw FormatError(path.string() + ": length is not a multiple of 4 bytes");
  std::vector<double> v(bytes.size() / 4);
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::bit_cast<float>(get_u32(bytes.data() + 4 * k));
  return v;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_signal(const fs::path& base, const SignalStore& s) {
  if (!(s.sample_rate > 0.0)) throw InvalidArgument("sample rate must be positive");
  fs::path data = base, meta = base;
  data.replace_extension(".f32");
  meta.replace_extension(".json");
  write_f32(data, s.samples);
  write_json(meta, {{"schema_version", kSchemaVersion},
                    {"n_samples", s.samples.size()},
                    {"sample_rate", s.sample_rate},
                    {"start_time", s.start_time},
                    {"channel", s.channel},
                    {"data", data.filename().string()}});
}

SignalStore ingest(const fs::path& path) {
  fs::path data = path, meta = path;
  data.replace_extension(".f32");
  meta.replace_extension(".json");
  if (!fs::exists(data)) throw IoError("missing sample file " + data.string());
  if (!fs::exists(meta)) throw IoError("missing metadata file " + meta.string());
  const Json m = read_json(meta);
  SignalStore s;
  try {
    if (m.at("schema_version").get<int>() != kSchemaVersion) throw FormatError("unsupported schema version");
    s.sample_rate = m.at("sample_rate").get<double>();
    s.start_time = m.value("start_time", 0.0);
    s.channel = m.value("channel", std::string("X"));
    s.samples = read_f32(data);
    if (s.samples.empty()) throw FormatError("sample file is empty");
    if (m.at("n_samples").get<std::size_t>() != s.samples.size())
      throw FormatError("metadata lists " + std::to_string(m.at("n_samples").get<std::size_t>()) +
                        " samples, file holds " + std::to_string(s.samples.size()));
  } catch (const Json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(data.string() + ": " + e.what());
  }
  if (!(s.sample_rate > 0.0)) throw FormatError(meta.string() + ": sample rate must be positive");
  return s;
}

void RunManifest::add_input(const fs::path& p) { inputs.push_back(entry_for(p)); }
void RunManifest::add_output(const fs::path& p) { outputs.push_back(entry_for(p)); }

Json RunManifest::deterministic_json() const {
  auto list = [](const std::vector<ManifestEntry>& v) {
    Json a = Json::array();
    for (const auto& e : v) a.push_back({{"path", e.path}, {"sha256", e.sha256}});
    return a;
  };
  return {{"schema_version", kSchemaVersion},
          {"stage", stage},
          {"config_hash", config_hash},
          {"seed", seed},
          {"config", config},
          {"versions", format_versions()},
          {"inputs", list(inputs)},
          {"outputs", list(outputs)}};
}

Json RunManifest::to_json() const {
  Json j = deterministic_json();
  j["timings"] = timings;
  return j;
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config");
  for (const auto& e : j.at("inputs")) m.inputs.push_back({e.at("path"), e.at("sha256")});
  for (const auto& e : j.at("outputs")) m.outputs.push_back({e.at("path"), e.at("sha256")});
  m.timings = j.value("timings", Json::object());
  return m;
}

Json format_versions() {
  return {{"container", kContainerVersion},
          {"schema", kSchemaVersion},
          {"scatcov_ordering", ScatCovLayout::kOrderingVersion}};
}

}  // namespace scatsep
