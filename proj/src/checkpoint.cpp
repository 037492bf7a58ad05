#include "odrt/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "odrt/error.hpp"

namespace odrt {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      fail(ErrorKind::Data, "envelope truncated at byte " + std::to_string(pos_) + " (wanted " +
                                std::to_string(n) + " more)");
    }
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const DiTConfig& c) {
  w.i32(c.d_model);
  w.i32(c.n_layers);
  w.i32(c.n_heads);
  w.i32(c.d_ff);
  w.i32(c.horizon);
  w.i32(c.action_dim);
  w.i32(c.obs_dim);
  w.i32(c.obs_tokens);
  w.i32(c.diffusion_steps);
  w.u8(static_cast<std::uint8_t>(c.schedule));
  w.f64(c.beta_start);
  w.f64(c.beta_end);
  w.u8(c.clip_sample ? 1 : 0);
  w.f64(c.clip_range);
}

DiTConfig read_config(Reader& r) {
  DiTConfig c;
  c.d_model = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.d_ff = r.i32();
  c.horizon = r.i32();
  c.action_dim = r.i32();
  c.obs_dim = r.i32();
  c.obs_tokens = r.i32();
  c.diffusion_steps = r.i32();
  const std::uint8_t kind = r.u8();
  if (kind > 1) fail(ErrorKind::Data, "envelope: unknown schedule kind " + std::to_string(kind));
  c.schedule = static_cast<ScheduleKind>(kind);
  c.beta_start = r.f64();
  c.beta_end = r.f64();
  c.clip_sample = r.u8() != 0;
  c.clip_range = r.f64();
  return c;
}

}  // namespace

const Blob* Section::find(const std::string& blob_name) const {
  for (const auto& b : blobs)
    if (b.name == blob_name) return &b;
  return nullptr;
}

const Section* Envelope::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

const Section& Envelope::require_section(const std::string& name) const {
  const Section* s = find(name);
  if (!s) fail(ErrorKind::Data, "envelope has no section '" + name + "'");
  return *s;
}

std::string encode_envelope(const Envelope& env) {
  Writer w;
  w.u8('O');
  w.u8('D');
  w.u8('R');
  w.u8('T');
  w.u32(kEnvelopeVersion);
  write_config(w, env.config);
  w.u32(static_cast<std::uint32_t>(env.metadata.size()));
  for (const auto& [k, v] : env.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(env.sections.size()));
  for (const auto& s : env.sections) {
    w.str(s.name);
    w.u64(s.blobs.size());
    for (const auto& b : s.blobs) {
      w.str(b.name);
      w.u32(static_cast<std::uint32_t>(b.value.rank()));
      for (std::size_t dim : b.value.shape()) w.u64(dim);
      for (double v : b.value.values()) w.f64(v);
    }
  }
  return w.take();
}

Envelope decode_envelope(const std::string& bytes) {
  Reader r(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string(magic, 4) != "ODRT") fail(ErrorKind::Data, "not an ODRT file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kEnvelopeVersion) {
    fail(ErrorKind::Compat, "envelope version " + std::to_string(version) + " unsupported (expected " +
                                std::to_string(kEnvelopeVersion) + ")");
  }
  Envelope env;
  env.config = read_config(r);
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    env.metadata[k] = r.str();
  }
  const std::uint32_t n_sections = r.u32();
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    Section s;
    s.name = r.str();
    const std::uint64_t n_blobs = r.u64();
    for (std::uint64_t j = 0; j < n_blobs; ++j) {
      Blob b;
      b.name = r.str();
      const std::uint32_t rank = r.u32();
      if (rank > 8) fail(ErrorKind::Data, "blob '" + b.name + "' has implausible rank " + std::to_string(rank));
      Shape shape(rank);
      for (auto& dim : shape) dim = r.u64();
      const std::size_t n = shape_numel(shape);
      if (n > r.remaining() / 8) fail(ErrorKind::Data, "blob '" + b.name + "' payload truncated");
      std::vector<double> data(n);
      for (auto& v : data) v = r.f64();
      b.value = Tensor(shape, std::move(data));
      s.blobs.push_back(std::move(b));
    }
    env.sections.push_back(std::move(s));
  }
  if (!r.done()) fail(ErrorKind::Data, "trailing bytes after envelope");
  return env;
}

void write_envelope(const std::filesystem::path& path, const Envelope& env) {
  const std::string bytes = encode_envelope(env);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Data, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::Data, "write failed for " + path.string());
}

Envelope read_envelope(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Data, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_envelope(ss.str());
}

Section weights_section(const std::string& name, const std::vector<NamedTensor>& params) {
  Section s{name, {}};
  for (const auto& p : params) s.blobs.push_back(Blob{p.name, p.tensor.detach()});
  return s;
}

void load_weights(const Section& section, const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    const Blob* b = section.find(p.name);
    if (!b) fail(ErrorKind::Data, "section '" + section.name + "' lacks weight '" + p.name + "'");
    if (b->value.shape() != p.tensor.shape()) {
      fail(ErrorKind::Compat, "weight '" + p.name + "' stored as " + shape_str(b->value.shape()) +
                                  ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor target = p.tensor;
    auto dst = target.mutable_values();
    auto src = b->value.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Envelope policy_envelope(const DiTPolicy& policy, std::map<std::string, std::string> metadata) {
  Envelope env;
  env.config = policy.config();
  env.metadata = std::move(metadata);
  env.metadata[kConfigHashKey] = hash_hex(config_hash(policy.config()));
  env.sections.push_back(weights_section("policy", policy.parameters()));
  return env;
}

DiTPolicy policy_from_envelope(const Envelope& env) {
  Rng scratch(0);
  DiTPolicy policy(env.config, scratch);
  load_weights(env.require_section("policy"), policy.parameters());
  return policy;
}

void check_compatible(const Envelope& env, const DiTConfig& expected) {
  if (!(env.config == expected)) {
    fail(ErrorKind::Compat, "checkpoint config hash " + hash_hex(config_hash(env.config)) +
                                " does not match run config hash " + hash_hex(config_hash(expected)));
  }
}

}  // namespace odrt
