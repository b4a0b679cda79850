#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autospace/genome.hpp"
#include "autospace/tensor.hpp"

namespace autospace {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

struct Dataset {
  Tensor images;  // N x C x H x W, standardized
  std::vector<int> labels;
  int classes = 0;
  std::string split;       // "train", "val", "test"
  std::string provenance;  // "idx", "cifar-binary", "synthetic(...)"
  std::vector<double> channel_mean;
  std::vector<double> channel_std;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.shape()[1]; }
  int height() const { return images.shape()[2]; }
  int width() const { return images.shape()[3]; }
  Batch gather(std::span<const int> indices) const;
  Dataset subset(std::span<const int> indices, const std::string& split_name) const;
};

struct DataSplits {
  Dataset train;
  Dataset val;
};

/// IDX image file (magic 00 00 08 03, big-endian N,H,W) plus labels
/// (magic 00 00 08 01). Pixels scaled to [0,1] then standardized.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes);

/// CIFAR-10 binary batches: records of 1 label byte + 3x32x32 planes.
Dataset load_cifar_binary(std::span<const std::filesystem::path> paths);
Dataset parse_cifar_binary(std::span<const std::string> files);

enum class SynthPattern {
  kBlobs,  // class-specific coloured Gaussian bumps, linearly separable
  kPairs,  // a +1 and a -1 marker at graded distances; label = which is left
};

struct SynthSpec {
  int classes = 4;
  int per_class = 100;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 0;
  SynthPattern pattern = SynthPattern::kBlobs;
};

/// Deterministic synthetic data, split 80/20 (per class) into train/val.
DataSplits synth_dataset(const SynthSpec& spec);

/// Shuffled split of a single dataset into train/val; `train_fraction` of
/// each class goes to train.
DataSplits split_dataset(const Dataset& data, double train_fraction, std::uint64_t seed);

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch next() = 0;
};

/// Cycles through a dataset in mini-batches, reshuffling every epoch.
class BatchIterator : public BatchSource {
 public:
  BatchIterator(const Dataset& data, int batch_size, std::uint64_t seed, bool shuffle = true);

  Batch next() override;
  int batches_per_epoch() const;
  int epoch() const { return epoch_; }

 private:
  void reshuffle();

  const Dataset* data_;
  int batch_size_;
  bool shuffle_;
  Rng rng_;
  std::vector<int> order_;
  int cursor_ = 0;
  int epoch_ = 0;
};

/// Consecutive batches covering the dataset once, in order.
std::vector<Batch> sequential_batches(const Dataset& data, int batch_size);

}  // namespace autospace
