#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "autospace/tensor.hpp"

namespace autospace {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters shared across supernet rebuilds. A key, once registered,
/// always resolves to the same tensor object.
class WeightStore {
 public:
  using Init = std::function<Tensor()>;

  bool contains(const std::string& key) const { return tensors_.contains(key); }
  /// Returns the stored tensor, or registers the result of `init`.
  Tensor get_or_create(const std::string& key, const Init& init);
  Tensor at(const std::string& key) const;
  void put(const std::string& key, Tensor t);
  std::vector<std::string> keys() const;
  std::size_t size() const { return tensors_.size(); }

  /// "ASWT" | u32 version=1 | u32 count | per entry: u32 key length, key
  /// bytes, u32 rank, rank x u32 dims, then f32 values. Little endian,
  /// entries in key order.
  std::string serialize() const;
  static WeightStore deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static WeightStore load(const std::filesystem::path& path);

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace autospace
