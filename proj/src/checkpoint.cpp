#include "fewshot/checkpoint.hpp"

#include <unistd.h>
#include <zlib.h>

#include <ctime>

#include "fewshot/io.hpp"

namespace fewshot {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'L', 'C'};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in chunks
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint16_t narrow16(int v, const char* what) {
  if (v < 0 || v > 0xffff) throw Error(Errc::invalid_argument, std::string("checkpoint: ") + what + " out of range");
  return static_cast<std::uint16_t>(v);
}

[[noreturn]] void mismatch(const std::string& msg) {
  throw Error(Errc::incompatible, "checkpoint does not match the model: " + msg);
}

}  // namespace

const char* phase_name(Phase p) { return p == Phase::pretrained ? "pretrained" : "finetuned"; }

std::string default_checkpoint_comment() {
  char host[256] = {0};
  if (gethostname(host, sizeof host - 1) != 0) host[0] = '\0';
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char when[64];
  std::strftime(when, sizeof when, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string("created ") + when + " on " + (host[0] ? host : "unknown");
}

Checkpoint capture_checkpoint(const Model<float>& model, Phase phase, std::uint32_t epochs,
                              const AdamState<float>* adam, std::string config_text) {
  Checkpoint c;
  c.phase = phase;
  c.seed = model.seed();
  c.epochs = epochs;
  c.backbone = model.config();
  c.head_kind = model.head_kind();
  c.head_dim = static_cast<std::uint32_t>(model.head_dim());
  for (const auto& e : model.params()) {
    CheckpointEntry entry;
    entry.name = e.name;
    entry.role = e.role;
    entry.trainable = e.trainable;
    entry.shape = e.tensor.shape();
    entry.values.assign(e.tensor.values().begin(), e.tensor.values().end());
    c.entries.push_back(std::move(entry));
  }
  if (adam) c.adam = *adam;
  c.config_text = std::move(config_text);
  return c;
}

void load_into(Model<float>& model, const Checkpoint& ckpt) {
  if (!(model.config() == ckpt.backbone)) mismatch("backbone configuration differs");
  if (model.head_kind() != ckpt.head_kind || static_cast<std::uint32_t>(model.head_dim()) != ckpt.head_dim) {
    mismatch("head differs");
  }
  auto& params = model.params();
  if (params.size() != ckpt.entries.size()) {
    mismatch(std::to_string(ckpt.entries.size()) + " entries for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ckpt.entries[i];
    if (params[i].name != e.name) mismatch("entry " + std::to_string(i) + " is '" + e.name + "', expected '" + params[i].name + "'");
    if (params[i].role != e.role) mismatch("role of '" + e.name + "' differs");
    if (params[i].tensor.shape() != e.shape) {
      mismatch("shape of '" + e.name + "' is " + shape_str(e.shape) + ", expected " + shape_str(params[i].tensor.shape()));
    }
    if (e.role == ParamRole::buffer && e.trainable) mismatch("buffer '" + e.name + "' marked trainable");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = ckpt.entries[i];
    auto dst = params[i].tensor.mutable_values();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
    params.set_trainable(i, e.trainable);
  }
  params.clear_grads();
}

Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = Model<float>::build(ckpt.backbone, ckpt.seed);
  switch (ckpt.head_kind) {
    case HeadKind::none:
      break;
    case HeadKind::projection:
      model.attach_projection_head(static_cast<int>(ckpt.head_dim));
      break;
    case HeadKind::identity:
      model.attach_identity_head();
      break;
    case HeadKind::classifier:
      model.attach_classifier(static_cast<int>(ckpt.head_dim));
      break;
  }
  load_into(model, ckpt);
  return model;
}

std::vector<std::uint8_t> encode_payload(const Checkpoint& c) {
  io::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(c.phase));
  w.u64(c.seed);
  w.u32(c.epochs);
  w.u16(narrow16(c.backbone.input_channels, "input_channels"));
  w.u16(narrow16(c.backbone.input_size, "input_size"));
  w.u16(narrow16(c.backbone.num_stages(), "stage count"));
  for (int ch : c.backbone.stage_channels) w.u16(narrow16(ch, "stage channels"));
  w.u16(narrow16(c.backbone.blocks_per_stage, "blocks_per_stage"));
  w.u16(narrow16(c.backbone.embedding_dim, "embedding_dim"));
  w.u8(static_cast<std::uint8_t>(c.head_kind));
  w.u32(c.head_dim);
  w.u32(static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw Error(Errc::invalid_argument, "checkpoint entry '" + e.name + "' has inconsistent shape");
    }
    w.str16(e.name);
    w.u8(static_cast<std::uint8_t>(e.role));
    w.u8(e.trainable ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  w.u8(c.adam ? 1 : 0);
  if (c.adam) {
    const auto& a = *c.adam;
    w.f64(a.config.lr);
    w.f64(a.config.beta1);
    w.f64(a.config.beta2);
    w.f64(a.config.eps);
    w.u64(a.step);
    w.u32(static_cast<std::uint32_t>(a.moments.size()));
    for (const auto& [name, mom] : a.moments) {
      w.str16(name);
      w.u32(static_cast<std::uint32_t>(mom.m.size()));
      for (float v : mom.m) w.f32(v);
      for (float v : mom.v) w.f32(v);
    }
  }
  w.str32(c.config_text);
  return w.take();
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const auto payload = encode_payload(c);
  io::ByteWriter w;
  for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kCheckpointVersion);
  w.str32(c.comment);
  w.u64(payload.size());
  w.bytes(payload);
  w.u32(crc32_of(payload));
  return w.take();
}

std::pair<std::size_t, std::size_t> payload_range(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw Error(Errc::bad_magic, "not an SSLC checkpoint");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw Error(Errc::incompatible, "unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                                        std::to_string(kCheckpointVersion) + ")");
  }
  r.str32();
  const auto len = r.u64();
  const auto start = r.position();
  if (len > r.remaining()) throw Error(Errc::truncated, "checkpoint payload is truncated");
  return {start, static_cast<std::size_t>(len)};
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto [start, len] = payload_range(bytes);
  Checkpoint c;
  {
    io::ByteReader head(bytes);
    head.bytes(6);
    c.comment = head.str32();
  }
  const auto payload = bytes.subspan(start, len);
  io::ByteReader tail(bytes.subspan(start + len));
  const auto stored_crc = tail.u32();
  if (tail.remaining() != 0) throw Error(Errc::truncated, "trailing bytes after checkpoint checksum");
  if (crc32_of(payload) != stored_crc) throw Error(Errc::checksum, "checkpoint checksum mismatch");

  io::ByteReader r(payload);
  const auto phase = r.u8();
  if (phase > 1) throw Error(Errc::incompatible, "unknown checkpoint phase " + std::to_string(phase));
  c.phase = static_cast<Phase>(phase);
  c.seed = r.u64();
  c.epochs = r.u32();
  c.backbone.input_channels = r.u16();
  c.backbone.input_size = r.u16();
  const auto stages = r.u16();
  c.backbone.stage_channels.clear();
  for (int s = 0; s < stages; ++s) c.backbone.stage_channels.push_back(r.u16());
  c.backbone.blocks_per_stage = r.u16();
  c.backbone.embedding_dim = r.u16();
  const auto head = r.u8();
  if (head > 3) throw Error(Errc::incompatible, "unknown head kind " + std::to_string(head));
  c.head_kind = static_cast<HeadKind>(head);
  c.head_dim = r.u32();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str16();
    const auto role = r.u8();
    if (role > 1) throw Error(Errc::incompatible, "unknown parameter role in '" + e.name + "'");
    e.role = static_cast<ParamRole>(role);
    e.trainable = r.u8() != 0;
    const auto rank = r.u8();
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      e.shape.push_back(r.u32());
      n *= e.shape.back();
    }
    if (n * 4 > r.remaining()) throw Error(Errc::truncated, "checkpoint entry '" + e.name + "' is truncated");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    c.entries.push_back(std::move(e));
  }
  if (r.u8()) {
    AdamState<float> a;
    a.config.lr = r.f64();
    a.config.beta1 = r.f64();
    a.config.beta2 = r.f64();
    a.config.eps = r.f64();
    a.step = r.u64();
    const auto moments = r.u32();
    for (std::uint32_t i = 0; i < moments; ++i) {
      auto name = r.str16();
      const auto n = r.u32();
      if (static_cast<std::size_t>(n) * 8 > r.remaining()) throw Error(Errc::truncated, "Adam moments truncated");
      AdamMoments<float> mom;
      mom.m.resize(n);
      mom.v.resize(n);
      for (auto& v : mom.m) v = r.f32();
      for (auto& v : mom.v) v = r.f32();
      a.moments.emplace(std::move(name), std::move(mom));
    }
    c.adam = std::move(a);
  }
  c.config_text = r.str32();
  if (r.remaining() != 0) throw Error(Errc::truncated, "unexpected bytes at the end of the checkpoint payload");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace fewshot
