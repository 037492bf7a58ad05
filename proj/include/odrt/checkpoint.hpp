#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odrt/dit_policy.hpp"

namespace odrt {

// Binary container shared by checkpoints, residual logs and trajectory
// datasets. Little-endian throughout:
//
//   "ODRT" | u32 version | DiTConfig | u32 n_meta | (str key, str value)*
//   | u32 n_sections | section*
//   section = str name | u64 n_blobs | blob*
//   blob    = str name | u32 rank | u64 dims[rank] | f64 payload[prod(dims)]
//   str     = u32 length | bytes
//
// DiTConfig is written as i32 d_model, n_layers, n_heads, d_ff, horizon,
// action_dim, obs_dim, obs_tokens, diffusion_steps; u8 schedule;
// f64 beta_start, beta_end; u8 clip_sample; f64 clip_range.
inline constexpr std::uint32_t kEnvelopeVersion = 1;

struct Blob {
  std::string name;
  Tensor value;
};

struct Section {
  std::string name;
  std::vector<Blob> blobs;

  const Blob* find(const std::string& blob_name) const;
};

struct Envelope {
  DiTConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<Section> sections;

  const Section* find(const std::string& name) const;
  const Section& require_section(const std::string& name) const;
};

std::string encode_envelope(const Envelope& env);
Envelope decode_envelope(const std::string& bytes);
void write_envelope(const std::filesystem::path& path, const Envelope& env);
Envelope read_envelope(const std::filesystem::path& path);

Section weights_section(const std::string& name, const std::vector<NamedTensor>& params);
// Copies blob values into `params` by name; every parameter must be present
// with a matching shape.
void load_weights(const Section& section, const std::vector<NamedTensor>& params);

Envelope policy_envelope(const DiTPolicy& policy, std::map<std::string, std::string> metadata = {});
DiTPolicy policy_from_envelope(const Envelope& env);

// Metadata key holding the hex config hash.
inline constexpr const char* kConfigHashKey = "config_hash";
std::string hash_hex(std::uint64_t h);
// Throws a compat error when the envelope's stored config differs from `expected`.
void check_compatible(const Envelope& env, const DiTConfig& expected);

}  // namespace odrt
