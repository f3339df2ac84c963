#include "translab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "translab/errors.hpp"
#include "translab/rng.hpp"

namespace translab {

std::string to_string(DatasetFormat f) { return f == DatasetFormat::kIdx ? "idx" : "csv"; }

DatasetFormat dataset_format_from_string(const std::string& s) {
  if (s == "idx") return DatasetFormat::kIdx;
  if (s == "csv") return DatasetFormat::kCsv;
  throw ConfigError("unknown dataset format: " + s);
}

void SplitFractions::validate() const {
  if (train < 0.0 || val < 0.0 || test < 0.0)
    throw ConfigError("split fractions must be non-negative");
  if (train + val + test > 1.0 + 1e-9)
    throw ConfigError("split fractions must sum to at most 1");
  if (train == 0.0) throw ConfigError("train split fraction must be positive");
}

std::uint64_t fnv1a64(const void* data, std::size_t bytes, std::uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::uint32_t read_be32(std::ifstream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("unexpected end of IDX file " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_be32(std::ofstream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<char*>(b), 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

RawData read_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError("cannot open IDX image file " + images_path);
  const std::uint32_t img_magic = read_be32(imgs, images_path);
  if (img_magic != kIdxImagesMagic)
    throw DataError("IDX image magic mismatch in " + images_path + " (got " +
                    std::to_string(img_magic) + ", want 2051)");
  const std::uint32_t count = read_be32(imgs, images_path);
  const std::uint32_t rows = read_be32(imgs, images_path);
  const std::uint32_t cols = read_be32(imgs, images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError("cannot open IDX label file " + labels_path);
  const std::uint32_t lab_magic = read_be32(labs, labels_path);
  if (lab_magic != kIdxLabelsMagic)
    throw DataError("IDX label magic mismatch in " + labels_path + " (got " +
                    std::to_string(lab_magic) + ", want 2049)");
  const std::uint32_t lab_count = read_be32(labs, labels_path);
  if (lab_count != count)
    throw DataError("IDX image/label counts differ (" + std::to_string(count) + " vs " +
                    std::to_string(lab_count) + ")");

  RawData raw;
  raw.channels = 1;
  raw.height = static_cast<int>(rows);
  raw.width = static_cast<int>(cols);
  const std::size_t pixels = static_cast<std::size_t>(count) * rows * cols;
  std::vector<unsigned char> buf(pixels);
  imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
  if (!imgs) throw DataError("truncated IDX image file " + images_path);
  raw.images = Tensor::zeros({static_cast<int>(count), static_cast<int>(rows * cols)});
  for (std::size_t i = 0; i < pixels; ++i)
    raw.images.values[i] = static_cast<double>(buf[i]) / 255.0;

  std::vector<unsigned char> lbuf(count);
  labs.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(count));
  if (!labs) throw DataError("truncated IDX label file " + labels_path);
  raw.labels.resize(count);
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    raw.labels[i] = lbuf[i];
    max_label = std::max(max_label, raw.labels[i]);
  }
  raw.class_count = max_label + 1;
  return raw;
}

void write_idx_images(const std::string& path, const Tensor& images, int height, int width) {
  if (images.dim(1) != height * width)
    throw std::invalid_argument("image feature count does not match height*width");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_be32(os, kIdxImagesMagic);
  write_be32(os, static_cast<std::uint32_t>(images.dim(0)));
  write_be32(os, static_cast<std::uint32_t>(height));
  write_be32(os, static_cast<std::uint32_t>(width));
  for (double v : images.values) {
    const double clamped = std::clamp(v, 0.0, 1.0);
    os.put(static_cast<char>(std::lround(clamped * 255.0)));
  }
  if (!os) throw DataError("failed writing IDX image file " + path);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_be32(os, kIdxLabelsMagic);
  write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int v : labels) {
    if (v < 0 || v > 255) throw DataError("IDX labels must be in [0, 255]");
    os.put(static_cast<char>(v));
  }
  if (!os) throw DataError("failed writing IDX label file " + path);
}

RawData read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open CSV file " + path);
  RawData raw;
  raw.channels = 1;
  raw.height = 1;
  raw.width = -1;

  std::vector<double> values;
  std::string line;
  int row = 0;
  bool have_geometry = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      int h = 0, w = 0, c = 1;
      if (hs >> h >> w) {
        hs >> c;
        raw.height = h;
        raw.width = w;
        raw.channels = c;
        have_geometry = true;
      }
      continue;
    }
    ++row;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ',')) throw DataError("CSV row " + std::to_string(row) + " is empty");
    int label = 0;
    try {
      label = std::stoi(cell);
    } catch (const std::exception&) {
      throw DataError("CSV row " + std::to_string(row) + " has a non-integer label");
    }
    if (label < 0) throw DataError("CSV row " + std::to_string(row) + " has a negative label");
    raw.labels.push_back(label);

    int cols = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("CSV row " + std::to_string(row) + " has a non-numeric value");
      }
      ++cols;
    }
    if (raw.width < 0 && !have_geometry) raw.width = cols;
    const int want = have_geometry ? raw.channels * raw.height * raw.width : raw.width;
    if (cols != want)
      throw DataError("CSV row " + std::to_string(row) + " has " + std::to_string(cols) +
                      " values, expected " + std::to_string(want));
  }
  if (raw.labels.empty()) throw DataError("CSV file " + path + " has no data rows");
  const int features = have_geometry ? raw.channels * raw.height * raw.width : raw.width;
  if (!have_geometry) raw.height = 1;
  raw.images = Tensor({static_cast<int>(raw.labels.size()), features}, std::move(values));
  raw.class_count = *std::max_element(raw.labels.begin(), raw.labels.end()) + 1;
  return raw;
}

void write_csv(const std::string& path, const Tensor& images, const std::vector<int>& labels,
               int height, int width, int channels) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "# " << height << " " << width << " " << channels << "\n";
  char buf[32];
  for (int i = 0; i < images.dim(0); ++i) {
    os << labels[i];
    const double* r = row_ptr(images, i);
    for (int j = 0; j < images.dim(1); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", r[j]);
      os << ',' << buf;
    }
    os << '\n';
  }
  if (!os) throw DataError("failed writing CSV file " + path);
}

Examples Dataset::train() const { return all.subset(train_idx); }
Examples Dataset::val() const { return all.subset(val_idx); }
Examples Dataset::test() const { return all.subset(test_idx); }

Dataset build_dataset(const RawData& raw, const SplitFractions& split, std::uint64_t seed) {
  split.validate();
  const int n = raw.images.dim(0);
  if (n == 0) throw DataError("dataset is empty");
  if (static_cast<int>(raw.labels.size()) != n)
    throw DataError("image/label counts differ");
  for (int y : raw.labels)
    if (y < 0 || y >= raw.class_count)
      throw DataError("label out of range: " + std::to_string(y));

  Dataset ds;
  ds.channels = raw.channels;
  ds.height = raw.height;
  ds.width = raw.width;

  // Seeded permutation, then contiguous train/val/test blocks.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng::keyed(seed, 0x5eed511);
  rng.shuffle(perm);
  const int n_train = static_cast<int>(std::floor(split.train * n));
  const int n_val = static_cast<int>(std::floor(split.val * n));
  const int n_test = static_cast<int>(std::floor(split.test * n));
  if (n_train < 1) throw DataError("train split is empty");
  ds.train_idx.assign(perm.begin(), perm.begin() + n_train);
  ds.val_idx.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  ds.test_idx.assign(perm.begin() + n_train + n_val, perm.begin() + n_train + n_val + n_test);

  // Per-channel statistics from the train split only.
  const int chan_size = raw.height * raw.width;
  ds.channel_mean.assign(raw.channels, 0.0);
  ds.channel_std.assign(raw.channels, 0.0);
  for (int c = 0; c < raw.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    const std::size_t cnt = static_cast<std::size_t>(n_train) * chan_size;
    for (int i : ds.train_idx) {
      const double* r = row_ptr(raw.images, i) + static_cast<std::size_t>(c) * chan_size;
      for (int j = 0; j < chan_size; ++j) {
        sum += r[j];
        sq += r[j] * r[j];
      }
    }
    const double mean = sum / static_cast<double>(cnt);
    const double var = sq / static_cast<double>(cnt) - mean * mean;
    if (var <= 0.0)
      throw DataError("channel " + std::to_string(c) +
                      " is constant on the train split: Z-score undefined");
    ds.channel_mean[c] = mean;
    ds.channel_std[c] = std::sqrt(var);
  }

  ds.all.images = raw.images;
  ds.all.labels = raw.labels;
  for (int i = 0; i < n; ++i) {
    double* r = row_ptr(ds.all.images, i);
    for (int c = 0; c < raw.channels; ++c)
      for (int j = 0; j < chan_size; ++j) {
        double& v = r[static_cast<std::size_t>(c) * chan_size + j];
        v = (v - ds.channel_mean[c]) / ds.channel_std[c];
      }
  }
  auto [lo, hi] = std::minmax_element(ds.all.images.values.begin(), ds.all.images.values.end());
  ds.value_min = *lo;
  ds.value_max = *hi;

  // Provenance hash over the raw bytes and the split recipe.
  std::uint64_t h = fnv1a64(raw.images.values.data(), raw.images.values.size() * sizeof(double));
  h = fnv1a64(raw.labels.data(), raw.labels.size() * sizeof(int), h);
  const double recipe[4] = {split.train, split.val, split.test,
                            static_cast<double>(seed)};
  ds.content_hash = fnv1a64(recipe, sizeof(recipe), h);
  return ds;
}

Dataset ingest_dataset(const std::string& images_path, const std::string& labels_path,
                       DatasetFormat format, const SplitFractions& split, std::uint64_t seed) {
  RawData raw = format == DatasetFormat::kIdx ? read_idx(images_path, labels_path)
                                              : read_csv(images_path);
  return build_dataset(raw, split, seed);
}

void SynthConfig::validate() const {
  if (classes < 2) throw ConfigError("synth classes must be >= 2");
  if (height < 3 || width < 3) throw ConfigError("synth image size must be at least 3x3");
  if (count < classes) throw ConfigError("synth count must cover every class");
  if (fill <= 0.0 || fill >= 1.0) throw ConfigError("synth fill must lie in (0, 1)");
  if (max_shift < 0) throw ConfigError("synth max_shift must be >= 0");
  if (beacons_per_class < 0 || beacons_per_class * classes > height * width / 2)
    throw ConfigError("synth beacons do not fit the image");
  if (beacon_reliability < 0.0 || beacon_reliability > 1.0)
    throw ConfigError("synth beacon reliability must lie in [0, 1]");
  if (beacon_decoy_rate < 0.0 || beacon_decoy_rate > 1.0)
    throw ConfigError("synth beacon decoy rate must lie in [0, 1]");
  if (texture_rank < 0) throw ConfigError("synth texture rank must be >= 0");
}

namespace {

// Blobby 0/1 pattern: smoothed seeded noise thresholded at the fill quantile.
std::vector<std::uint8_t> blob_pattern(int h, int w, double fill, Rng rng) {
  const int d = h * w;
  std::vector<double> field(d);
  for (double& v : field) v = rng.normal();
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<double> sm(d, 0.0);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double acc = 0.0;
        int cnt = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            acc += field[ii * w + jj];
            ++cnt;
          }
        sm[i * w + j] = acc / cnt;
      }
    field = sm;
  }
  std::vector<double> sorted = field;
  std::sort(sorted.begin(), sorted.end());
  const double thresh = sorted[static_cast<std::size_t>((1.0 - fill) * (d - 1))];
  std::vector<std::uint8_t> out(d);
  for (int j = 0; j < d; ++j) out[j] = field[j] >= thresh ? 1 : 0;
  return out;
}

void subtract_projection(std::vector<double>& v, const std::vector<double>& basis) {
  double dot = 0.0, nn = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    dot += v[j] * basis[j];
    nn += basis[j] * basis[j];
  }
  if (nn == 0.0) return;
  const double s = dot / nn;
  for (std::size_t j = 0; j < v.size(); ++j) v[j] -= s * basis[j];
}

}  // namespace

RawData synth_raw(const SynthConfig& cfg) {
  cfg.validate();
  const int h = cfg.height, w = cfg.width, d = h * w;

  const std::vector<std::uint8_t> base = blob_pattern(h, w, cfg.fill, Rng::keyed(cfg.seed, 0x9001));

  // Texture patterns: per-pixel unit-variance fields.
  std::vector<std::vector<double>> textures(cfg.texture_rank, std::vector<double>(d));
  {
    Rng rng = Rng::keyed(cfg.seed, 0x7e87);
    for (auto& t : textures)
      for (double& v : t) v = rng.normal();
  }

  // Beacon positions: disjoint high-contrast pixels per class.
  std::vector<int> positions(d);
  std::iota(positions.begin(), positions.end(), 0);
  {
    Rng rng = Rng::keyed(cfg.seed, 0xbeac);
    rng.shuffle(positions);
  }
  std::vector<std::vector<int>> beacons(cfg.classes);
  std::vector<std::uint8_t> is_beacon(d, 0);
  for (int c = 0; c < cfg.classes; ++c)
    for (int k = 0; k < cfg.beacons_per_class; ++k) {
      const int p = positions[c * cfg.beacons_per_class + k];
      beacons[c].push_back(p);
      is_beacon[p] = 1;
    }

  // Nuisance subspace the shortcut directions must avoid: the mean shift,
  // every shifted base pattern and every texture.
  std::vector<std::vector<double>> nuisance;
  nuisance.emplace_back(d, 1.0);
  for (int dy = -cfg.max_shift; dy <= cfg.max_shift; ++dy)
    for (int dx = -cfg.max_shift; dx <= cfg.max_shift; ++dx) {
      std::vector<double> pat(d, 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y - dy, sx = x - dx;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) pat[y * w + x] = base[sy * w + sx];
        }
      nuisance.push_back(std::move(pat));
    }
  for (const auto& t : textures) nuisance.push_back(t);
  // Orthogonalize the nuisance set itself, then the class directions.
  for (std::size_t i = 0; i < nuisance.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) subtract_projection(nuisance[i], nuisance[j]);

  // Random-sign directions: uniform per-pixel magnitude, so minimal-norm
  // attacks along them spread over the whole image.
  std::vector<std::vector<double>> shortcut(cfg.classes, std::vector<double>(d));
  for (int c = 0; c < cfg.classes; ++c) {
    Rng rng = Rng::keyed(cfg.seed, 0xb000 + c);
    for (double& v : shortcut[c]) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (int j = 0; j < d; ++j)
      if (is_beacon[j]) shortcut[c][j] = 0.0;  // beacons override pixels
    for (const auto& basis : nuisance) subtract_projection(shortcut[c], basis);
    double norm = 0.0;
    for (double v : shortcut[c]) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : shortcut[c]) v /= norm;
  }

  const double tex_scale =
      cfg.texture_rank > 0 ? cfg.texture_amp / std::sqrt(static_cast<double>(cfg.texture_rank))
                           : 0.0;

  RawData raw;
  raw.channels = 1;
  raw.height = h;
  raw.width = w;
  raw.class_count = cfg.classes;
  raw.images = Tensor::zeros({cfg.count, d});
  raw.labels.resize(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    const int cls = i % cfg.classes;
    raw.labels[i] = cls;
    Rng rng = Rng::keyed(cfg.seed, 0xa000000 + i);
    const int dy = cfg.max_shift == 0 ? 0 : rng.uniform_int(2 * cfg.max_shift + 1) - cfg.max_shift;
    const int dx = cfg.max_shift == 0 ? 0 : rng.uniform_int(2 * cfg.max_shift + 1) - cfg.max_shift;
    std::vector<double> tex_coef(cfg.texture_rank);
    for (double& a : tex_coef) a = rng.normal();
    // Exponential per-image amplitude: margins pile up near zero, so attack
    // success grows like 1 - exp(b*eps) over the strength sweep.
    double u_draw = rng.uniform();
    while (u_draw <= 0.0) u_draw = rng.uniform();
    const double omega = cfg.shortcut_floor - cfg.shortcut * std::log(u_draw);

    double* img = row_ptr(raw.images, i);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int j = y * w + x;
        const int sy = y - dy, sx = x - dx;
        const bool on = sy >= 0 && sy < h && sx >= 0 && sx < w && base[sy * w + sx] != 0;
        double v = on ? cfg.fg_level : cfg.bg_level;
        for (int k = 0; k < cfg.texture_rank; ++k) v += tex_scale * tex_coef[k] * textures[k][j];
        v += omega * shortcut[cls][j];
        v += cfg.noise * rng.normal();
        img[j] = v;
      }
    }
    // True beacons fire often; every other class's beacons fire at the decoy
    // rate, so the beacon channel is informative but irreducibly noisy.
    for (int c = 0; c < cfg.classes; ++c) {
      const double p_on = c == cls ? cfg.beacon_reliability : cfg.beacon_decoy_rate;
      for (int p : beacons[c])
        if (rng.uniform() < p_on)
          img[p] = cfg.beacon_level - cfg.beacon_jitter * rng.uniform();
    }
    for (int j = 0; j < d; ++j) img[j] = std::clamp(img[j], 0.0, 1.0);
  }
  return raw;
}

}  // namespace translab
