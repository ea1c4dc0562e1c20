#include "pipeline/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "data/binary_io.hpp"

namespace dast::pipeline {

namespace {

constexpr char kMagic[8] = {'D', 'L', 'C', 'K', 'P', 'T', '1', '\0'};

std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

const nc::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (meta != other.meta || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& a = tensors[i];
    const auto& b = other.tensors[i];
    if (a.first != b.first || a.second.shape != b.second.shape) return false;
    if (std::memcmp(a.second.data.data(), b.second.data.data(), a.second.data.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xffff) throw CheckpointError("checkpoint: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.u32(static_cast<std::uint32_t>(k.size()));
    w.bytes(k.data(), k.size());
    w.u32(static_cast<std::uint32_t>(v.size()));
    w.bytes(v.data(), v.size());
  }
  const auto& buf = w.buffer();
  w.u64(fnv1a(buf.data(), buf.size()));
  return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<unsigned char> bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic, not a DLCKPT1 file");
  }
  const std::size_t body = bytes.size() - 8;
  const std::uint64_t actual = fnv1a(bytes.data(), body);
  io::ByteReader r(std::move(bytes));
  Checkpoint out;
  try {
    char magic[8];
    r.bytes(magic, sizeof magic);
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = r.u32();
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = r.string(r.u16());
      if (!names.insert(name).second) throw CheckpointError("checkpoint: duplicate tensor '" + name + "'");
      nc::Shape shape(r.u32());
      if (shape.size() > 8) throw CheckpointError("checkpoint: implausible rank for '" + name + "'");
      std::size_t n = 1;
      for (auto& d : shape) {
        d = static_cast<std::size_t>(r.u64());
        if (d != 0 && n > (body / 8) / d) throw CheckpointError("checkpoint: tensor '" + name + "' larger than file");
        n *= d;
      }
      nc::Tensor t = nc::Tensor::zeros(shape);
      for (auto& v : t.data) v = r.f64();
      out.tensors.emplace_back(std::move(name), std::move(t));
    }
    const auto meta = r.u32();
    for (std::uint32_t i = 0; i < meta; ++i) {
      std::string k = r.string(r.u32());
      std::string v = r.string(r.u32());
      out.meta[std::move(k)] = std::move(v);
    }
    const std::uint64_t stored = r.u64();
    if (!r.at_end()) throw CheckpointError("checkpoint: trailing bytes");
    if (stored != actual) throw CheckpointError("checkpoint: checksum mismatch");
  } catch (const io::FormatError& e) {
    throw CheckpointError(std::string("checkpoint: truncated or corrupt (") + e.what() + ")");
  }
  return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  io::ByteWriter w;
  const auto bytes = encode_checkpoint(ckpt);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes));
}

void collect_params(Checkpoint& ckpt, const VisitAll& visit) {
  visit([&](const std::string& name, nc::Tensor& t) {
    if (ckpt.find(name)) throw CheckpointError("checkpoint: duplicate parameter '" + name + "'");
    ckpt.tensors.emplace_back(name, nc::Tensor(t.shape, t.data));
  });
}

void restore_params(const Checkpoint& ckpt, const VisitAll& visit) {
  // Validate everything first so a mismatch leaves the parameters untouched.
  std::vector<std::pair<nc::Tensor*, const nc::Tensor*>> plan;
  visit([&](const std::string& name, nc::Tensor& t) {
    const nc::Tensor* src = ckpt.find(name);
    if (!src) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    if (src->shape != t.shape) {
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + nc::shape_str(src->shape) + ", expected " +
                            nc::shape_str(t.shape));
    }
    plan.emplace_back(&t, src);
  });
  if (plan.size() != ckpt.tensors.size()) {
    for (const auto& [name, t] : ckpt.tensors) {
      const bool used = std::any_of(plan.begin(), plan.end(), [&](const auto& p) { return p.second == &t; });
      if (!used) throw CheckpointError("checkpoint: unexpected tensor '" + name + "'");
    }
  }
  for (auto& [dst, src] : plan) dst->data = src->data;
}

}  // namespace dast::pipeline
