#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gp/checkpoint.hpp"
#include "gp/correlation.hpp"
#include "gp/graph_ir.hpp"

using namespace gp;
namespace fs = std::filesystem;

namespace {

std::string model_path(const char* name) { return std::string(GP_SOURCE_DIR "/models/") + name; }

std::string tmp_path(const char* name) {
  return (fs::temp_directory_path() / (std::string("gp_io_test_") + name)).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.ratio_grid = {0.5, 1.0};
  cfg.augment_crop = cfg.augment_flip = false;
  return cfg;
}

}  // namespace

TEST_CASE("dataset save/load round trip") {
  Dataset ds = make_synthetic_dataset(3, 60, 8, 99);
  std::string dir = tmp_path("dataset");
  save_dataset_dir(dir, ds);
  Dataset back = load_dataset_dir(dir);
  CHECK(back.count == ds.count);
  CHECK(back.classes == ds.classes);
  CHECK(back.channels == ds.channels);
  CHECK(back.height == ds.height);
  CHECK(back.images == ds.images);
  CHECK(back.labels == ds.labels);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_dataset_dir(dir), std::runtime_error);
}

TEST_CASE("synthetic dataset is deterministic in the seed") {
  Dataset a = make_synthetic_dataset(4, 40, 8, 5);
  Dataset b = make_synthetic_dataset(4, 40, 8, 5);
  Dataset c = make_synthetic_dataset(4, 40, 8, 6);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images != c.images);
}

TEST_CASE("ratio file round trip and validation") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  std::vector<double> per(g.prunable.size());
  for (size_t k = 0; k < per.size(); ++k) per[k] = k % 2 ? 0.5 : 0.8;
  auto ratios = apply_ratio_sharing_prunable(g, per);
  std::string path = tmp_path("ratios.txt");
  write_ratio_file(path, g, ratios);
  auto back = read_ratio_file(path, g);
  REQUIRE(back.size() == ratios.size());
  for (size_t i = 0; i < back.size(); ++i) CHECK(back[i] == doctest::Approx(ratios[i]).epsilon(1e-15));

  // A file missing a prunable node is rejected.
  std::ofstream out(path);
  out << "# partial\n0 0.5\n";
  out.close();
  CHECK_THROWS_WITH_AS(read_ratio_file(path, g), doctest::Contains("missing ratio"),
                       std::runtime_error);
  fs::remove(path);
}

TEST_CASE("checkpoint round trip restores every parameter") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  Dataset ds = make_synthetic_dataset(3, 120, 8, 31);
  auto splits = split_dataset(ds);
  TrainConfig cfg = tiny_config();
  Pipeline<float> pipe(g, cfg, ds.classes);
  pipe.train(ds, splits);
  auto full = apply_ratio_sharing_prunable(g, std::vector<double>(g.prunable.size(), 1.0));
  pipe.recalibrate_bn(ds, splits.recalibration, full);

  uint64_t hash = fnv1a64(emit_model_description(g));
  CheckpointMeta meta;
  meta.model_hash = hash;
  meta.seed = cfg.seed;
  meta.epochs_completed = uint32_t(cfg.epochs);
  std::string path = tmp_path("ckpt.gpck");
  save_checkpoint(path, pipe, meta);

  cfg.seed = 999;  // fresh weights, then restored from disk
  Pipeline<float> other(g, cfg, ds.classes);
  CheckpointMeta back = load_checkpoint(path, other, hash);
  CHECK(back.model_hash == hash);
  CHECK(back.seed == meta.seed);
  CHECK(back.epochs_completed == 1);
  auto pa = pipe.main_params(), pb = other.main_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].data() == pb[i].data());
  for (auto& [key, st] : pipe.bn_bank) {
    auto& ost = other.bn_bank.at(key);
    CHECK(st.moving_mean == ost.moving_mean);
    CHECK(st.moving_var == ost.moving_var);
    CHECK(st.calibrated == ost.calibrated);
  }

  // Saving the restored pipeline reproduces the file byte for byte.
  std::string path2 = tmp_path("ckpt2.gpck");
  save_checkpoint(path2, other, back);
  CHECK(read_bytes(path) == read_bytes(path2));
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("checkpoint rejects corrupt or mismatched files") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  TrainConfig cfg = tiny_config();
  Pipeline<float> pipe(g, cfg, 3);
  uint64_t hash = fnv1a64(emit_model_description(g));
  std::string path = tmp_path("ckpt_err.gpck");
  CheckpointMeta meta;
  meta.model_hash = hash;
  save_checkpoint(path, pipe, meta);

  SUBCASE("hash mismatch") {
    CHECK_THROWS_WITH_AS(load_checkpoint(path, pipe, hash + 1), doctest::Contains("hash mismatch"),
                         std::runtime_error);
  }
  SUBCASE("bad magic") {
    std::string bytes = read_bytes(path);
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    CHECK_THROWS_WITH_AS(load_checkpoint(path, pipe, hash), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("bad version") {
    std::string bytes = read_bytes(path);
    bytes[4] = 9;
    std::ofstream(path, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    CHECK_THROWS_WITH_AS(load_checkpoint(path, pipe, hash), doctest::Contains("version"),
                         std::runtime_error);
  }
  SUBCASE("truncated") {
    std::string bytes = read_bytes(path);
    bytes.resize(bytes.size() / 2);
    std::ofstream(path, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(path, pipe, hash), std::runtime_error);
  }
  SUBCASE("wrong architecture") {
    ModelGraph g2 = load_model_file(model_path("resnet_tiny.mg"));
    Pipeline<float> other(g2, cfg, 3);
    // Same declared hash, different parameter shapes: size checks must fire.
    CHECK_THROWS_AS(load_checkpoint(path, other, hash), std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(tmp_path("nope.gpck"), pipe, hash), std::runtime_error);
  }
  fs::remove(path);
}

TEST_CASE("model hash tracks the description text") {
  ModelGraph g = load_model_file(model_path("mobilenet_v1_reduced.mg"));
  std::string text = emit_model_description(g);
  CHECK(fnv1a64(text) == fnv1a64(text));
  std::string other = text;
  other[0] ^= 1;
  CHECK(fnv1a64(text) != fnv1a64(other));
}
