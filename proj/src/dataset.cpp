#include "gp/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gp {

Dataset make_synthetic_dataset(int classes, int count, int hw, uint64_t seed, int channels) {
  if (classes < 2 || count < classes || hw < 4 || channels < 1)
    throw std::invalid_argument("make_synthetic_dataset: bad parameters");
  Dataset ds;
  ds.count = count;
  ds.classes = classes;
  ds.channels = channels;
  ds.height = ds.width = hw;
  ds.images.resize(size_t(count) * ds.image_bytes());
  ds.labels.resize(size_t(count));
  Rng rng(seed);
  // One smooth sinusoidal pattern per (class, channel).
  std::vector<double> fx(size_t(classes) * channels), fy(size_t(classes) * channels),
      phase(size_t(classes) * channels);
  std::uniform_real_distribution<double> freq(0.5, 2.5), ph(0.0, 6.28318530717958647692);
  for (auto& v : fx) v = freq(rng);
  for (auto& v : fy) v = freq(rng);
  for (auto& v : phase) v = ph(rng);
  std::normal_distribution<double> noise(0.0, 20.0);
  for (int i = 0; i < count; ++i) {
    int k = i % classes;
    ds.labels[size_t(i)] = uint8_t(k);
    uint8_t* img = ds.images.data() + int64_t(i) * ds.image_bytes();
    for (int c = 0; c < channels; ++c) {
      size_t pc = size_t(k) * channels + c;
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          double s = std::sin(6.28318530717958647692 * (fx[pc] * x + fy[pc] * y) / hw + phase[pc]);
          double v = 127.5 + 90.0 * s + noise(rng);
          img[(int64_t(c) * hw + y) * hw + x] = uint8_t(std::clamp(v, 0.0, 255.0));
        }
    }
  }
  return ds;
}

Dataset load_dataset_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream meta(fs::path(dir) / "meta");
  if (!meta) throw std::runtime_error("dataset: cannot open " + dir + "/meta");
  Dataset ds;
  std::string key;
  while (meta >> key) {
    if (key == "count") meta >> ds.count;
    else if (key == "classes") meta >> ds.classes;
    else if (key == "channels") meta >> ds.channels;
    else if (key == "height") meta >> ds.height;
    else if (key == "width") meta >> ds.width;
    else throw std::runtime_error("dataset: unknown meta key '" + key + "'");
  }
  if (ds.count < 1 || ds.classes < 2 || ds.channels < 1 || ds.height < 1 || ds.width < 1)
    throw std::runtime_error("dataset: incomplete meta in " + dir);
  std::ifstream imgs(fs::path(dir) / "images.bin", std::ios::binary);
  std::ifstream labs(fs::path(dir) / "labels.bin", std::ios::binary);
  if (!imgs || !labs) throw std::runtime_error("dataset: missing images.bin/labels.bin in " + dir);
  ds.images.resize(size_t(ds.count) * ds.image_bytes());
  ds.labels.resize(size_t(ds.count));
  imgs.read(reinterpret_cast<char*>(ds.images.data()), std::streamsize(ds.images.size()));
  labs.read(reinterpret_cast<char*>(ds.labels.data()), std::streamsize(ds.labels.size()));
  if (imgs.gcount() != std::streamsize(ds.images.size()) ||
      labs.gcount() != std::streamsize(ds.labels.size()))
    throw std::runtime_error("dataset: truncated binary files in " + dir);
  for (uint8_t l : ds.labels)
    if (l >= ds.classes) throw std::runtime_error("dataset: label out of range in " + dir);
  return ds;
}

void save_dataset_dir(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream meta(fs::path(dir) / "meta");
  meta << "count " << ds.count << "\nclasses " << ds.classes << "\nchannels " << ds.channels
       << "\nheight " << ds.height << "\nwidth " << ds.width << "\n";
  std::ofstream imgs(fs::path(dir) / "images.bin", std::ios::binary);
  std::ofstream labs(fs::path(dir) / "labels.bin", std::ios::binary);
  imgs.write(reinterpret_cast<const char*>(ds.images.data()), std::streamsize(ds.images.size()));
  labs.write(reinterpret_cast<const char*>(ds.labels.data()), std::streamsize(ds.labels.size()));
  if (!meta || !imgs || !labs) throw std::runtime_error("dataset: failed to write " + dir);
}

DatasetSplits split_dataset(const Dataset& ds, double train_frac, double recal_frac) {
  DatasetSplits sp;
  int n_train = int(ds.count * train_frac);
  int n_recal = int(ds.count * recal_frac);
  for (int i = 0; i < ds.count; ++i) {
    if (i < n_train) sp.train.push_back(i);
    else if (i < n_train + n_recal) sp.recalibration.push_back(i);
    else sp.eval.push_back(i);
  }
  if (sp.train.empty() || sp.recalibration.empty() || sp.eval.empty())
    throw std::runtime_error("split_dataset: dataset too small to split");
  return sp;
}

}  // namespace gp
