#include "ipg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ipg {

namespace {

constexpr char kCheckpointMagic[8] = {'I', 'P', 'G', 'C', 'K', 'P', 'T', '1'};
constexpr char kActivationsMagic[8] = {'I', 'P', 'G', 'A', 'C', 'T', 'S', '1'};
// Upper bound on any length field; fails fast on corrupt headers instead of
// attempting a huge allocation.
constexpr uint64_t kMaxField = 1ull << 33;

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  put_bytes(os, s.data(), s.size());
}

void get_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error("checkpoint: truncated file");
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  get_bytes(is, b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_len(std::istream& is, const char* what) {
  const uint64_t v = get_u64(is);
  if (v > kMaxField) throw std::runtime_error(std::string("checkpoint: implausible ") + what);
  return v;
}

std::string get_str(std::istream& is) {
  const uint64_t n = get_len(is, "string length");
  std::string s(static_cast<size_t>(n), '\0');
  get_bytes(is, s.data(), s.size());
  return s;
}

void check_magic(std::istream& is, const char (&magic)[8], const char* what) {
  char got[8];
  get_bytes(is, got, 8);
  if (std::memcmp(got, magic, 8) != 0)
    throw std::runtime_error(std::string("checkpoint: not a ") + what + " file");
}

void expect_eof(std::istream& is) {
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("checkpoint: trailing bytes after payload");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  return is;
}

}  // namespace

int64_t CheckpointPayload::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw std::runtime_error("checkpoint: missing metadata key '" + key + "'");
}

void save_checkpoint(const std::string& path, const CheckpointPayload& payload) {
  std::ofstream os = open_out(path);
  put_bytes(os, kCheckpointMagic, 8);
  put_u32(os, kCheckpointVersion);
  put_u32(os, payload.kind);
  put_u64(os, payload.meta.size());
  for (const auto& [key, value] : payload.meta) {
    put_str(os, key);
    put_u64(os, static_cast<uint64_t>(value));
  }
  put_u64(os, payload.tensors.size());
  for (const auto& [name, t] : payload.tensors) {
    if (!t.defined()) throw std::invalid_argument("checkpoint: undefined tensor '" + name + "'");
    put_str(os, name);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t dim : t.shape()) put_u64(os, static_cast<uint64_t>(dim));
    for (int64_t i = 0; i < t.size(); ++i)
      put_u64(os, std::bit_cast<uint64_t>(t.data()[i]));
  }
  os.flush();
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

CheckpointPayload load_checkpoint(const std::string& path) {
  std::ifstream is = open_in(path);
  check_magic(is, kCheckpointMagic, "checkpoint");
  const uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");
  CheckpointPayload payload;
  payload.kind = get_u32(is);
  const uint64_t metas = get_len(is, "metadata count");
  for (uint64_t i = 0; i < metas; ++i) {
    std::string key = get_str(is);
    const auto value = static_cast<int64_t>(get_u64(is));
    payload.meta.emplace_back(std::move(key), value);
  }
  const uint64_t tensors = get_len(is, "tensor count");
  for (uint64_t i = 0; i < tensors; ++i) {
    std::string name = get_str(is);
    const uint32_t rank = get_u32(is);
    if (rank > 2) throw std::runtime_error("checkpoint: tensor rank above 2");
    Shape shape;
    for (uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<int64_t>(get_len(is, "tensor dimension")));
    Tensor t = Tensor::zeros(shape);
    for (int64_t j = 0; j < t.size(); ++j)
      t.data()[j] = std::bit_cast<double>(get_u64(is));
    payload.tensors.emplace_back(std::move(name), std::move(t));
  }
  expect_eof(is);
  return payload;
}

void save_activations(const std::string& path, const ActivationDump& dump) {
  if (dump.layer < 0) throw std::invalid_argument("activations: negative layer");
  if (dump.width <= 0) throw std::invalid_argument("activations: width must be positive");
  if (static_cast<int64_t>(dump.rows.size()) % dump.width != 0)
    throw std::invalid_argument("activations: row data is not a whole number of rows");
  std::ofstream os = open_out(path);
  put_bytes(os, kActivationsMagic, 8);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<uint32_t>(dump.layer));
  put_u64(os, static_cast<uint64_t>(dump.width));
  put_u64(os, static_cast<uint64_t>(dump.count()));
  put_u64(os, dump.policy_hash);
  for (float f : dump.rows) put_u32(os, std::bit_cast<uint32_t>(f));
  os.flush();
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

ActivationDump load_activations(const std::string& path) {
  std::ifstream is = open_in(path);
  check_magic(is, kActivationsMagic, "activation dump");
  const uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");
  ActivationDump dump;
  dump.layer = static_cast<int>(get_u32(is));
  dump.width = static_cast<int64_t>(get_len(is, "width"));
  const uint64_t count = get_len(is, "row count");
  dump.policy_hash = get_u64(is);
  if (dump.width <= 0) throw std::runtime_error("checkpoint: corrupt activation width");
  dump.rows.resize(static_cast<size_t>(count * static_cast<uint64_t>(dump.width)));
  for (float& f : dump.rows) f = std::bit_cast<float>(get_u32(is));
  expect_eof(is);
  return dump;
}

}  // namespace ipg
