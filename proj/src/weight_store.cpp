#include "autospace/weight_store.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "autospace/io.hpp"

namespace autospace {

namespace {

constexpr char kMagic[4] = {'A', 'S', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n, "key");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated reading " + std::string(what) + " at offset " + std::to_string(pos_));
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Tensor WeightStore::get_or_create(const std::string& key, const Init& init) {
  if (auto it = tensors_.find(key); it != tensors_.end()) return it->second;
  Tensor t = init();
  tensors_.emplace(key, t);
  return t;
}

Tensor WeightStore::at(const std::string& key) const {
  auto it = tensors_.find(key);
  if (it == tensors_.end()) throw std::out_of_range("weight store has no key " + key);
  return it->second;
}

void WeightStore::put(const std::string& key, Tensor t) { tensors_[key] = std::move(t); }

std::vector<std::string> WeightStore::keys() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, _] : tensors_) out.push_back(k);
  return out;
}

std::string WeightStore::serialize() const {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [key, t] : tensors_) {
    put_u32(out, static_cast<std::uint32_t>(key.size()));
    out += key;
    put_u32(out, static_cast<std::uint32_t>(t.shape().rank()));
    for (int d : t.shape().dims()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

WeightStore WeightStore::deserialize(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("checkpoint: bad magic at offset 0");
  }
  Reader r(bytes);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  WeightStore store;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t key_len = r.u32();
    std::string key = r.str(key_len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank " + std::to_string(rank) + " at offset " + std::to_string(r.pos()));
    std::vector<int> dims;
    for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(static_cast<int>(r.u32()));
    Shape shape(dims);
    std::vector<double> values(shape.numel());
    for (double& v : values) v = std::bit_cast<float>(r.u32());
    store.put(key, Tensor::from(shape, std::move(values)));
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  return store;
}

void WeightStore::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

WeightStore WeightStore::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace autospace
