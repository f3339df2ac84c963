#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "translab/train.hpp"

namespace translab {

enum class DatasetFormat { kIdx, kCsv };

std::string to_string(DatasetFormat f);
DatasetFormat dataset_format_from_string(const std::string& s);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;

  void validate() const;  // fractions >= 0 and sum <= 1
};

struct Dataset {
  Examples all;  // Z-score normalized with train-split statistics
  std::vector<int> train_idx, val_idx, test_idx;
  int channels = 1, height = 0, width = 0;
  std::vector<double> channel_mean, channel_std;  // train-split statistics
  double value_min = 0.0, value_max = 0.0;        // post-normalization range
  std::uint64_t content_hash = 0;                 // raw data + split provenance

  Examples train() const;
  Examples val() const;
  Examples test() const;
  int feature_count() const { return channels * height * width; }
};

// Raw (un-normalized) examples plus image geometry.
struct RawData {
  Tensor images;  // (count, c*h*w)
  std::vector<int> labels;
  int channels = 1, height = 0, width = 0;
  int class_count = 0;
};

// IDX pair (images magic 0x00000803, labels 0x00000801, big-endian dims).
RawData read_idx(const std::string& images_path, const std::string& labels_path);
void write_idx_images(const std::string& path, const Tensor& images, int height, int width);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// CSV rows "label,v0,v1,...". An optional leading "# height width channels"
// comment carries image geometry; otherwise rows are treated as flat 1 x d.
RawData read_csv(const std::string& path);
void write_csv(const std::string& path, const Tensor& images, const std::vector<int>& labels,
               int height, int width, int channels = 1);

// Deterministic seeded split followed by per-channel Z-score normalization
// with statistics from the train split only. Throws DataError when a channel
// is constant on the train split.
Dataset build_dataset(const RawData& raw, const SplitFractions& split, std::uint64_t seed);

Dataset ingest_dataset(const std::string& images_path, const std::string& labels_path,
                       DatasetFormat format, const SplitFractions& split, std::uint64_t seed);

// Synthetic image task built to reproduce the geometry the attack and
// transfer experiments rely on. Each image composes:
//   - a shared blobby base pattern under a random shift, plus per-sample
//     low-rank textures: large-amplitude structure carrying no class
//     information (the bulk of pixel variance, confined to a small
//     subspace);
//   - sparse per-class "beacon" pixels at high contrast, present with a
//     reliability < 1: class information that survives aggressive input
//     quantization;
//   - a dense per-class unit direction of small amplitude, orthogonalized
//     against the structure subspace: a clean linear feature that trained
//     full-precision nets lean on. Its amplitude bounds their margins, and
//     1-2 bit input quantization erases it.
// Full-precision nets are accurate yet fall to small L-inf attacks that
// transfer among them; low-bit input-quantized targets resist those
// perturbations.
struct SynthConfig {
  int classes = 10;
  int height = 14;
  int width = 14;
  int count = 6000;
  int max_shift = 1;        // base-pattern shift, uniform in [-max_shift, max_shift]^2
  double fg_level = 0.75;   // base pattern "on" pixel value
  double bg_level = 0.25;   // background pixel value
  double fill = 0.45;       // fraction of "on" pixels in the base pattern
  int texture_rank = 12;    // number of per-sample texture patterns
  double texture_amp = 0.10;
  int beacons_per_class = 5;
  double beacon_level = 0.85;
  double beacon_reliability = 0.95;  // chance each true-class beacon is present
  double beacon_decoy_rate = 0.25;   // chance an off-class beacon lights anyway
  double beacon_jitter = 0.30;       // uniform amplitude jitter on lit beacons
  double shortcut = 0.10;            // mean of the exponential part of the per-image
                                     // amplitude; margins then follow a shifted
                                     // exponential, the shape the strength sweeps fit
  double shortcut_floor = 0.06;      // guaranteed amplitude (keeps every image readable)
  double noise = 0.002;              // iid pixel noise
  std::uint64_t seed = 1;

  void validate() const;
};

RawData synth_raw(const SynthConfig& cfg);

std::uint64_t fnv1a64(const void* data, std::size_t bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hash_hex(std::uint64_t h);

}  // namespace translab
