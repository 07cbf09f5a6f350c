#include "regionlets/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace regionlets {

namespace {

constexpr const char* kMagic = "REGIONLET-CKPT v1 ";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }

  const std::string& bytes_;
  std::size_t pos_;
};

}  // namespace

std::string encode_checkpoint(const NamedTensors& tensors) {
  std::string out = kMagic + std::to_string(tensors.size()) + "\n";
  for (const auto& [name, t] : tensors) {
    put_u64(out, name.size());
    out += name;
    put_u64(out, t.rank());
    for (auto e : t.shape()) put_u64(out, e);
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

NamedTensors decode_checkpoint(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  const std::string magic = kMagic;
  if (eol == std::string::npos || bytes.compare(0, magic.size(), magic) != 0) {
    throw CheckpointError("not a REGIONLET-CKPT v1 file");
  }
  std::size_t count = 0;
  try {
    count = std::stoull(bytes.substr(magic.size(), eol - magic.size()));
  } catch (const std::exception&) {
    throw CheckpointError("bad tensor count in checkpoint header");
  }
  Reader in(bytes, eol + 1);
  NamedTensors tensors;
  for (std::size_t n = 0; n < count; ++n) {
    const auto name_len = in.u64();
    std::string name = in.text(name_len);
    const auto rank = in.u64();
    if (rank > 16) throw CheckpointError("implausible rank for tensor " + name);
    Shape shape(rank);
    for (auto& e : shape) e = in.u64();
    std::vector<double> values(shape_product(shape));
    for (auto& v : values) v = in.f64();
    tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after last tensor");
  return tensors;
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(tensors);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace regionlets
