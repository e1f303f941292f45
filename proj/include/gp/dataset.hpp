#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gp/tensor.hpp"

namespace gp {

// Raw little-endian byte layout on disk: `meta` text file plus images.bin
// (count*channels*height*width unsigned 8-bit) and labels.bin (count unsigned
// 8-bit).
struct Dataset {
  int count = 0;
  int classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<uint8_t> images;
  std::vector<uint8_t> labels;

  int64_t image_bytes() const { return int64_t(channels) * height * width; }
};

// Class-conditional smooth patterns plus pixel noise; deterministic in seed.
Dataset make_synthetic_dataset(int classes, int count, int hw, uint64_t seed, int channels = 3);

Dataset load_dataset_dir(const std::string& dir);
void save_dataset_dir(const std::string& dir, const Dataset& ds);

// Index ranges for the train / recalibration / eval splits.
struct DatasetSplits {
  std::vector<int> train;
  std::vector<int> recalibration;
  std::vector<int> eval;
};
DatasetSplits split_dataset(const Dataset& ds, double train_frac = 0.7, double recal_frac = 0.15);

// Pixels mapped to [-1, 1]. Augmentation: random horizontal flip and random
// 1-pixel-padded crop.
template <typename S>
Tensor<S> batch_images(const Dataset& ds, const std::vector<int>& indices, size_t first, size_t n,
                       bool aug_crop, bool aug_flip, Rng* rng) {
  const int C = ds.channels, H = ds.height, W = ds.width;
  Tensor<S> out(Shape{int(n), C, H, W});
  for (size_t b = 0; b < n; ++b) {
    int idx = indices[first + b];
    const uint8_t* img = ds.images.data() + int64_t(idx) * ds.image_bytes();
    int dy = 0, dx = 0;
    bool flip = false;
    if (rng) {
      if (aug_crop) {
        dy = int(std::uniform_int_distribution<int>(-1, 1)(*rng));
        dx = int(std::uniform_int_distribution<int>(-1, 1)(*rng));
      }
      if (aug_flip) flip = std::uniform_int_distribution<int>(0, 1)(*rng) != 0;
    }
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          int sy = y + dy, sx = (flip ? W - 1 - x : x) + dx;
          S v = S(0);
          if (sy >= 0 && sy < H && sx >= 0 && sx < W)
            v = S(img[(int64_t(c) * H + sy) * W + sx]) / S(127.5) - S(1);
          out.data()[((size_t(b) * C + c) * H + y) * W + x] = v;
        }
  }
  return out;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& indices, size_t first,
                                     size_t n) {
  std::vector<int> out(n);
  for (size_t b = 0; b < n; ++b) out[b] = ds.labels[size_t(indices[first + b])];
  return out;
}

}  // namespace gp
