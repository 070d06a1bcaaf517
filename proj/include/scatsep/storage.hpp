#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace scatsep {

using Json = nlohmann::json;

/// Version of the binary container layout.
inline constexpr std::uint32_t kContainerVersion = 1;
/// Version carried by every JSON sidecar.
inline constexpr int kSchemaVersion = 1;

enum class DType { F32, F64 };

std::string to_string(DType t);
DType dtype_from_string(const std::string& name);

/// A named numeric array. Values are held in double precision; `dtype`
/// selects the on-disk width.
struct Blob {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t element_count() const;
};

/// Header JSON plus named blobs, written as
///   "SCSF" | u32 version | u64 header bytes | header | u64 payload bytes |
///   payload | sha256 of everything before it
/// with all integers and floats little-endian.
struct Container {
  std::string kind;
  Json meta = Json::object();
  std::vector<Blob> blobs;

  const Blob& blob(const std::string& name) const;
  bool has_blob(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
/// Throws DigestError on a digest mismatch or truncation, FormatError on a bad
/// magic, version or kind.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind = {});

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Raw little-endian float32 stream.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f32(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Raw sample stream plus its sidecar (<stem>.json next to <stem>.f32).
struct SignalStore {
  std::vector<double> samples;
  double sample_rate = 1.0;
  double start_time = 0.0;
  std::string channel = "X";

  double duration_seconds() const noexcept { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Writes <base>.f32 and <base>.json.
void write_signal(const std::filesystem::path& base, const SignalStore& s);
/// Reads and validates a stream written by write_signal (either file path or
/// the common base may be given).
SignalStore ingest(const std::filesystem::path& path);

/// Produced artifact with its content digest.
struct ManifestEntry {
  std::string path;
  std::string sha256;
};

struct RunManifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  Json config = Json::object();
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;
  Json timings = Json::object();

  void add_input(const std::filesystem::path& p);
  void add_output(const std::filesystem::path& p);
  /// Everything except timings.
  Json deterministic_json() const;
  Json to_json() const;
  static RunManifest from_json(const Json& j);
};

Json format_versions();

}  // namespace scatsep
