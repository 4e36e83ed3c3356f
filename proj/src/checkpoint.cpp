#include "panp/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <vector>

namespace panp {

namespace {

constexpr char kMagic[4] = {'P', 'A', 'N', 'P'};
constexpr uint32_t kVersion = 1;

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

struct Writer {
  std::vector<unsigned char> buf;

  void u8(uint8_t v) { buf.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    u64(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    buf.insert(buf.end(), s.begin(), s.end());
  }
  void f64_vec(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
};

struct Reader {
  const std::vector<unsigned char>& buf;
  size_t pos = 0;
  size_t end = 0;  // payload end (excludes the trailing checksum)

  void need(uint64_t n) const {
    if (n > end - pos) {
      throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint file is truncated");
    }
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos++]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos++]) << (8 * i);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str() {
    uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<double> f64_vec() {
    uint64_t n = u64();
    if (n > (end - pos) / 8) {
      throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint file is truncated");
    }
    std::vector<double> v(n);
    for (uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
};

void write_config(Writer& w, const ModelConfig& cfg) {
  w.str(variant_name(cfg.variant));
  w.u64(cfg.d_model);
  w.u64(cfg.n_heads);
  w.u64(cfg.depth);
  w.u64(cfg.latent_dim);
  w.u64(cfg.enc_hidden);
  w.u64(cfg.dec_hidden.size());
  for (size_t h : cfg.dec_hidden) w.u64(h);
  w.u64(cfg.patch_size);
  w.f64(cfg.sigma_floor);
  w.f64(cfg.sigma_scale);
}

ModelConfig read_config(Reader& r) {
  ModelConfig cfg;
  std::string name = r.str();
  try {
    cfg.variant = variant_from_name(name);
  } catch (const std::exception&) {
    throw CheckpointError(CheckpointErrorKind::Format,
                          "checkpoint names unknown model variant '" + name + "'");
  }
  cfg.d_model = r.u64();
  cfg.n_heads = r.u64();
  cfg.depth = r.u64();
  cfg.latent_dim = r.u64();
  cfg.enc_hidden = r.u64();
  cfg.dec_hidden.resize(r.u64());
  for (size_t& h : cfg.dec_hidden) h = r.u64();
  cfg.patch_size = r.u64();
  cfg.sigma_floor = r.f64();
  cfg.sigma_scale = r.f64();
  return cfg;
}

}  // namespace

uint32_t crc32(const unsigned char* data, size_t n) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (ckpt.adam_m.size() != ckpt.params.size() || ckpt.adam_v.size() != ckpt.params.size()) {
    throw std::invalid_argument("save_checkpoint: optimizer state does not match parameters");
  }
  Writer w;
  w.buf.insert(w.buf.end(), kMagic, kMagic + 4);
  w.u32(kVersion);

  write_config(w, ckpt.model);

  w.u64(ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    w.str(name);
    w.u64(t.rank());
    for (size_t d : t.shape()) w.u64(d);
    w.f64_vec(t.data());
  }

  w.u64(ckpt.adam_t);
  for (size_t i = 0; i < ckpt.params.size(); ++i) {
    w.f64_vec(ckpt.adam_m[i]);
    w.f64_vec(ckpt.adam_v[i]);
  }

  w.u64(ckpt.rng_state.seed);
  for (uint64_t word : ckpt.rng_state.words) w.u64(word);
  w.u8(ckpt.rng_state.has_spare ? 1 : 0);
  w.f64(ckpt.rng_state.spare);

  w.u64(ckpt.seed);
  w.u64(ckpt.next_episode);
  w.u64(ckpt.step);

  w.u32(crc32(w.buf.data(), w.buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointErrorKind::Io, "cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) {
    throw CheckpointError(CheckpointErrorKind::Io, "failed to write '" + path + "'");
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError(CheckpointErrorKind::Io, "cannot open '" + path + "'");
  }
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw CheckpointError(CheckpointErrorKind::Io, "failed to read '" + path + "'");
  }
  if (buf.size() < 12) {
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint file is truncated");
  }
  if (std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::Format, "not a checkpoint file (bad magic)");
  }

  Reader r{buf, 4, buf.size() - 4};
  uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError(CheckpointErrorKind::Version,
                          "unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.model = read_config(r);

  uint64_t n_params = r.u64();
  ckpt.params.reserve(n_params);
  for (uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.str();
    uint64_t rank = r.u64();
    std::vector<size_t> shape(rank);
    size_t numel = 1;
    for (uint64_t d = 0; d < rank; ++d) {
      shape[d] = r.u64();
      numel *= shape[d];
    }
    std::vector<double> data = r.f64_vec();
    if (data.size() != numel) {
      throw CheckpointError(CheckpointErrorKind::Format,
                            "parameter '" + name + "' has inconsistent shape and data");
    }
    ckpt.params.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }

  ckpt.adam_t = r.u64();
  ckpt.adam_m.reserve(n_params);
  ckpt.adam_v.reserve(n_params);
  for (uint64_t i = 0; i < n_params; ++i) {
    ckpt.adam_m.push_back(r.f64_vec());
    ckpt.adam_v.push_back(r.f64_vec());
    if (ckpt.adam_m.back().size() != ckpt.params[i].second.numel() ||
        ckpt.adam_v.back().size() != ckpt.params[i].second.numel()) {
      throw CheckpointError(CheckpointErrorKind::Format,
                            "optimizer moments do not match parameter '" + ckpt.params[i].first +
                                "'");
    }
  }

  ckpt.rng_state.seed = r.u64();
  for (uint64_t& word : ckpt.rng_state.words) word = r.u64();
  ckpt.rng_state.has_spare = r.u8() != 0;
  ckpt.rng_state.spare = r.f64();

  ckpt.seed = r.u64();
  ckpt.next_episode = r.u64();
  ckpt.step = r.u64();

  if (r.pos != r.end) {
    throw CheckpointError(CheckpointErrorKind::Format, "checkpoint has trailing bytes");
  }

  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
  }
  if (crc32(buf.data(), buf.size() - 4) != stored) {
    throw CheckpointError(CheckpointErrorKind::Checksum, "checkpoint checksum mismatch");
  }
  return ckpt;
}

}  // namespace panp
