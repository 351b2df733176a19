#include "rffi/checkpoint.hpp"

#include <stdexcept>

#include "rffi/binio.hpp"

namespace rffi {

Checkpoint checkpoint_from_params(const nn::ParamStore& ps, std::string arch_json,
                                  std::string meta_json) {
  Checkpoint c;
  c.arch_json = std::move(arch_json);
  c.meta_json = std::move(meta_json);
  c.tensors.reserve(ps.entries.size());
  for (const auto& e : ps.entries) c.tensors.emplace_back(e.name, e.value);
  return c;
}

void params_from_checkpoint(const Checkpoint& c, nn::ParamStore& ps) {
  for (const auto& [name, t] : c.tensors) {
    nn::Tensor& dst = ps.get(name);
    if (!dst.same_shape(t))
      throw std::runtime_error("checkpoint: shape mismatch for param " + name);
    dst.data = t.data;
  }
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& c) {
  BinWriter w;
  w.bytes("RFCK", 4);
  w.u32(c.version);
  w.str(c.arch_json);
  w.str(c.meta_json);
  w.u32(static_cast<uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<uint32_t>(d));
    w.f32_array(t.data.data(), t.data.size());
  }
  std::vector<uint8_t> out = w.data();
  uint32_t crc = crc32_of(out.data(), out.size());
  BinWriter tail;
  tail.u32(crc);
  out.insert(out.end(), tail.data().begin(), tail.data().end());
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 12) throw std::runtime_error("checkpoint: truncated");
  uint32_t stored_crc;
  {
    BinReader tail(bytes.data() + bytes.size() - 4, 4);
    stored_crc = tail.u32();
  }
  if (crc32_of(bytes.data(), bytes.size() - 4) != stored_crc)
    throw std::runtime_error("checkpoint: CRC mismatch");
  BinReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.u8());
  if (std::string(magic, 4) != "RFCK") throw std::runtime_error("checkpoint: bad magic");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != 1) throw std::runtime_error("checkpoint: unsupported version");
  c.arch_json = r.str();
  c.meta_json = r.str();
  uint32_t count = r.u32();
  c.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    uint32_t ndim = r.u32();
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    nn::Tensor t(shape);
    r.f32_array(t.data.data(), t.data.size());
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  write_file(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace rffi
