#include "autospace/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "autospace/io.hpp"

namespace autospace {

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  const auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

void expect_magic(const std::string& bytes, unsigned char kind, const std::string& what) {
  if (bytes.size() < 4) throw DatasetError(what + ": truncated header at byte offset " + std::to_string(bytes.size()));
  const unsigned char m[4] = {static_cast<unsigned char>(bytes[0]), static_cast<unsigned char>(bytes[1]),
                              static_cast<unsigned char>(bytes[2]), static_cast<unsigned char>(bytes[3])};
  if (m[0] != 0 || m[1] != 0 || m[2] != 0x08 || m[3] != kind) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "wrong magic 0x%02x%02x%02x%02x at byte offset 0", m[0], m[1], m[2], m[3]);
    throw DatasetError(what + ": " + buf);
  }
}

std::string read_input(const std::filesystem::path& path) {
  try {
    return read_file(path);
  } catch (const std::runtime_error& e) {
    throw DatasetError(e.what());
  }
}

// Pixels in [0,1] -> per-channel standardization, statistics recorded.
void standardize(Dataset& d) {
  const int n = d.size(), c = d.channels();
  const std::size_t plane = static_cast<std::size_t>(d.height()) * d.width();
  auto data = d.images.data();
  d.channel_mean.assign(c, 0.0);
  d.channel_std.assign(c, 1.0);
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* p = data.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        sum += p[j];
        sq += p[j] * p[j];
      }
    }
    const double count = static_cast<double>(n) * plane;
    const double mean = sum / count;
    const double var = std::max(0.0, sq / count - mean * mean);
    const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
    d.channel_mean[ch] = mean;
    d.channel_std[ch] = sd;
    for (int i = 0; i < n; ++i) {
      double* p = data.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - mean) / sd;
    }
  }
}

}  // namespace

Batch Dataset::gather(std::span<const int> indices) const {
  const Shape& s = images.shape();
  const std::size_t per = static_cast<std::size_t>(s[1]) * s[2] * s[3];
  std::vector<double> out(indices.size() * per);
  std::vector<int> lab(indices.size());
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= size()) throw std::out_of_range("dataset index " + std::to_string(idx));
    std::copy_n(src.data() + idx * per, per, out.data() + i * per);
    lab[i] = labels[idx];
  }
  return {Tensor::from(Shape{static_cast<int>(indices.size()), s[1], s[2], s[3]}, std::move(out)), std::move(lab)};
}

Dataset Dataset::subset(std::span<const int> indices, const std::string& split_name) const {
  Batch b = gather(indices);
  Dataset d = *this;
  d.images = b.images;
  d.labels = std::move(b.labels);
  d.split = split_name;
  return d;
}

Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes) {
  expect_magic(image_bytes, 0x03, "idx images");
  expect_magic(label_bytes, 0x01, "idx labels");
  if (image_bytes.size() < 16) throw DatasetError("idx images: truncated header at byte offset " + std::to_string(image_bytes.size()));
  if (label_bytes.size() < 8) throw DatasetError("idx labels: truncated header at byte offset " + std::to_string(label_bytes.size()));
  const std::uint32_t n = read_be32(image_bytes, 4), h = read_be32(image_bytes, 8), w = read_be32(image_bytes, 12);
  const std::uint32_t nl = read_be32(label_bytes, 4);
  if (n != nl) {
    throw DatasetError("idx: image count " + std::to_string(n) + " (byte offset 4) differs from label count " +
                       std::to_string(nl) + " (byte offset 4)");
  }
  if (n == 0 || h == 0 || w == 0) throw DatasetError("idx images: empty dimension in header at byte offset 4");
  const std::uint64_t need = 16 + static_cast<std::uint64_t>(n) * h * w;
  if (image_bytes.size() != need) {
    throw DatasetError("idx images: expected " + std::to_string(need) + " bytes, file ends at byte offset " +
                       std::to_string(image_bytes.size()));
  }
  if (label_bytes.size() != 8 + static_cast<std::uint64_t>(n)) {
    throw DatasetError("idx labels: expected " + std::to_string(8 + static_cast<std::uint64_t>(n)) +
                       " bytes, file ends at byte offset " + std::to_string(label_bytes.size()));
  }
  Dataset d;
  std::vector<double> px(static_cast<std::size_t>(n) * h * w);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(image_bytes[16 + i]) / 255.0;
  d.images = Tensor::from(Shape{static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)}, std::move(px));
  d.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<unsigned char>(label_bytes[8 + i]);
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = std::max(2, max_label + 1);
  d.split = "train";
  d.provenance = "idx";
  standardize(d);
  return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_input(images), read_input(labels));
}

Dataset parse_cifar_binary(std::span<const std::string> files) {
  constexpr std::size_t kRecord = 3073, kPlane = 1024;
  std::size_t n = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    if (files[f].empty() || files[f].size() % kRecord != 0) {
      throw DatasetError("cifar file " + std::to_string(f) + ": size " + std::to_string(files[f].size()) +
                         " is not a positive multiple of 3073; last full record ends at byte offset " +
                         std::to_string(files[f].size() / kRecord * kRecord));
    }
    n += files[f].size() / kRecord;
  }
  if (n == 0) throw DatasetError("cifar: no records");
  Dataset d;
  std::vector<double> px(n * 3 * kPlane);
  d.labels.resize(n);
  std::size_t r = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const std::string& bytes = files[f];
    for (std::size_t off = 0; off < bytes.size(); off += kRecord, ++r) {
      const int label = static_cast<unsigned char>(bytes[off]);
      if (label >= 10) {
        throw DatasetError("cifar file " + std::to_string(f) + ": label out of range (" + std::to_string(label) +
                           ") at byte offset " + std::to_string(off));
      }
      d.labels[r] = label;
      for (std::size_t j = 0; j < 3 * kPlane; ++j) px[r * 3 * kPlane + j] = static_cast<unsigned char>(bytes[off + 1 + j]) / 255.0;
    }
  }
  d.images = Tensor::from(Shape{static_cast<int>(n), 3, 32, 32}, std::move(px));
  d.classes = 10;
  d.split = "train";
  d.provenance = "cifar-binary";
  standardize(d);
  return d;
}

Dataset load_cifar_binary(std::span<const std::filesystem::path> paths) {
  std::vector<std::string> files;
  for (const auto& p : paths) files.push_back(read_input(p));
  return parse_cifar_binary(files);
}

namespace {

std::vector<double> blobs_templates(const SynthSpec& s, Rng& rng) {
  const std::size_t per = static_cast<std::size_t>(s.channels) * s.height * s.width;
  std::vector<double> t(static_cast<std::size_t>(s.classes) * per);
  std::uniform_real_distribution<double> ux(0.2 * s.width, 0.8 * s.width), uy(0.2 * s.height, 0.8 * s.height);
  std::normal_distribution<double> mix(0.0, 1.0);
  const double sigma = 0.2 * std::min(s.height, s.width);
  for (int c = 0; c < s.classes; ++c) {
    const double cx = ux(rng), cy = uy(rng);
    std::vector<double> m(s.channels);
    for (double& v : m) v = mix(rng);
    for (int ch = 0; ch < s.channels; ++ch) {
      for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
          const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          t[c * per + (static_cast<std::size_t>(ch) * s.height + y) * s.width + x] =
              m[ch] * std::exp(-r2 / (2 * sigma * sigma));
        }
      }
    }
  }
  return t;
}

Dataset synth_blobs(const SynthSpec& s) {
  Rng rng(s.seed);
  const std::size_t per = static_cast<std::size_t>(s.channels) * s.height * s.width;
  const std::vector<double> t = blobs_templates(s, rng);
  // Noise norm stays under half the closest template gap, so the nearest
  // template (a linear rule) labels every sample correctly.
  double dmin = std::numeric_limits<double>::infinity();
  for (int a = 0; a < s.classes; ++a) {
    for (int b = a + 1; b < s.classes; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < per; ++j) d2 += (t[a * per + j] - t[b * per + j]) * (t[a * per + j] - t[b * per + j]);
      dmin = std::min(dmin, std::sqrt(d2));
    }
  }
  const double clip = 0.45 * dmin;
  std::normal_distribution<double> noise(0.0, 0.15);
  Dataset d;
  const int n = s.classes * s.per_class;
  std::vector<double> px(static_cast<std::size_t>(n) * per);
  d.labels.resize(n);
  std::vector<double> e(per);
  for (int i = 0; i < n; ++i) {
    const int c = i % s.classes;
    d.labels[i] = c;
    double norm = 0.0;
    for (double& v : e) {
      v = noise(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    const double f = norm > clip ? clip / norm : 1.0;
    for (std::size_t j = 0; j < per; ++j) px[i * per + j] = t[c * per + j] + f * e[j];
  }
  d.images = Tensor::from(Shape{n, s.channels, s.height, s.width}, std::move(px));
  return d;
}

Dataset synth_pairs(const SynthSpec& s) {
  if (s.classes != 2) throw std::invalid_argument("pairs pattern has exactly 2 classes");
  static constexpr int kDistances[] = {2, 6, 10};
  // Markers stay clear of the side borders so zero padding cannot reveal which one is left.
  static constexpr int kMargin = 4;
  if (s.width < 2 * kMargin + kDistances[2] + 1) throw std::invalid_argument("pairs pattern needs width >= 19");
  Rng rng(s.seed);
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  const std::size_t per = s.channels * plane;
  const int n = s.classes * s.per_class;
  Dataset d;
  std::vector<double> px(static_cast<std::size_t>(n) * per, 0.0);
  d.labels.resize(n);
  std::uniform_int_distribution<int> row(0, s.height - 1);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    const int dist = kDistances[(i / 2) % 3];
    // Every image holds one +1 and one -1; the label is which of them sits on the left.
    const double s1 = label == 0 ? 1.0 : -1.0;
    const double s2 = -s1;
    const int y = row(rng);
    const int x = std::uniform_int_distribution<int>(kMargin, s.width - 1 - kMargin - dist)(rng);
    for (int ch = 0; ch < s.channels; ++ch) {
      px[i * per + ch * plane + static_cast<std::size_t>(y) * s.width + x] = s1;
      px[i * per + ch * plane + static_cast<std::size_t>(y) * s.width + x + dist] = s2;
    }
    d.labels[i] = label;
  }
  d.images = Tensor::from(Shape{n, s.channels, s.height, s.width}, std::move(px));
  return d;
}

}  // namespace

DataSplits synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  if (spec.per_class < 5 || spec.channels < 1 || spec.height < 1 || spec.width < 1) {
    throw std::invalid_argument("synthetic dataset needs per_class >= 5 and positive image dims");
  }
  Dataset d = spec.pattern == SynthPattern::kBlobs ? synth_blobs(spec) : synth_pairs(spec);
  d.classes = spec.classes;
  std::ostringstream prov;
  prov << "synthetic(seed=" << spec.seed << ",pattern=" << (spec.pattern == SynthPattern::kBlobs ? "blobs" : "pairs")
       << ",classes=" << spec.classes << ",per_class=" << spec.per_class << ",shape=" << spec.channels << "x"
       << spec.height << "x" << spec.width << ")";
  d.provenance = prov.str();
  d.split = "train";
  standardize(d);
  return split_dataset(d, 0.8, spec.seed ^ 0x5851f42d4c957f2dULL);
}

DataSplits split_dataset(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must be in (0,1)");
  Rng rng(seed);
  std::vector<int> train, val;
  for (int c = 0; c < data.classes; ++c) {
    std::vector<int> idx;
    for (int i = 0; i < data.size(); ++i) {
      if (data.labels[i] == c) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    train.insert(train.end(), idx.begin(), idx.begin() + cut);
    val.insert(val.end(), idx.begin() + cut, idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  if (train.empty() || val.empty()) throw std::invalid_argument("split leaves an empty side");
  return {data.subset(train, "train"), data.subset(val, "val")};
}

BatchIterator::BatchIterator(const Dataset& data, int batch_size, std::uint64_t seed, bool shuffle)
    : data_(&data), batch_size_(std::min(batch_size, data.size())), shuffle_(shuffle), rng_(seed) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (data.size() == 0) throw std::invalid_argument("cannot iterate an empty dataset");
  order_.resize(data.size());
  reshuffle();
}

void BatchIterator::reshuffle() {
  for (int i = 0; i < static_cast<int>(order_.size()); ++i) order_[i] = i;
  if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

int BatchIterator::batches_per_epoch() const { return data_->size() / batch_size_; }

Batch BatchIterator::next() {
  if (cursor_ + batch_size_ > static_cast<int>(order_.size())) {
    ++epoch_;
    reshuffle();
  }
  std::span<const int> idx(order_.data() + cursor_, batch_size_);
  cursor_ += batch_size_;
  return data_->gather(idx);
}

std::vector<Batch> sequential_batches(const Dataset& data, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  std::vector<Batch> out;
  std::vector<int> idx;
  for (int start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (int i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    out.push_back(data.gather(idx));
  }
  return out;
}

}  // namespace autospace
