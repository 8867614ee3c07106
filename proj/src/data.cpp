#include "fedmae/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "binary_io.hpp"
#include "fedmae/config.hpp"
#include "fedmae/error.hpp"

namespace fedmae {

void ImageGeometry::validate() const {
  require(channels >= 1 && height >= 1 && width >= 1 && patch >= 1, "geometry dims must be >= 1");
  require(height % patch == 0 && width % patch == 0,
          "image size " + std::to_string(height) + "x" + std::to_string(width) +
              " is not divisible by patch size " + std::to_string(patch));
}

void ImageBatch::validate() const {
  require(pixels.size() == n * image_size(), "image batch pixel count does not match its shape");
  require(labels.empty() || labels.size() == n, "image batch label count does not match n");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < num_classes, "label out of range");
}

ImageBatch ImageBatch::subset(std::span<const std::size_t> indices) const {
  ImageBatch out;
  out.n = indices.size();
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.num_classes = num_classes;
  const std::size_t sz = image_size();
  out.pixels.resize(out.n * sz);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    require(indices[j] < n, "subset index out of range");
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[j] * sz), sz,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(j * sz));
    if (has_labels()) out.labels.push_back(labels[indices[j]]);
  }
  return out;
}

PatchSequence PatchSequence::subset(std::span<const std::size_t> indices) const {
  require(!indices.empty(), "empty patch subset");
  PatchSequence out;
  out.geometry = geometry;
  const std::size_t per = num_patches() * patch_dim();
  out.data = Tensor({indices.size(), num_patches(), patch_dim()});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    require(indices[j] < n(), "subset index out of range");
    std::copy_n(data.data() + indices[j] * per, per, out.data.data() + j * per);
  }
  return out;
}

// ---------------------------------------------------------------------------

PatchSequence patchify(const ImageBatch& images, std::size_t patch) {
  ImageGeometry geo{images.channels, images.height, images.width, patch};
  geo.validate();
  require(images.n >= 1, "patchify: empty batch");
  require(images.pixels.size() == images.n * images.image_size(), "patchify: bad pixel count");
  PatchSequence out;
  out.geometry = geo;
  out.data = Tensor({images.n, geo.num_patches(), geo.patch_dim()});
  double* dst = out.data.data();
  for (std::size_t i = 0; i < images.n; ++i)
    for (std::size_t gr = 0; gr < geo.grid_h(); ++gr)
      for (std::size_t gc = 0; gc < geo.grid_w(); ++gc)
        for (std::size_t c = 0; c < geo.channels; ++c)
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x)
              *dst++ = images.at(i, c, gr * patch + y, gc * patch + x);
  return out;
}

ImageBatch unpatchify(const PatchSequence& patches) {
  const ImageGeometry& geo = patches.geometry;
  geo.validate();
  require(patches.data.ndim() == 3 && patches.data.dim(1) == geo.num_patches() &&
              patches.data.dim(2) == geo.patch_dim(),
          "unpatchify: patch tensor " + shape_string(patches.data.shape()) +
              " is inconsistent with its geometry");
  ImageBatch out;
  out.n = patches.n();
  out.channels = geo.channels;
  out.height = geo.height;
  out.width = geo.width;
  out.pixels.resize(out.n * out.image_size());
  const double* src = patches.data.data();
  const std::size_t P = geo.patch;
  for (std::size_t i = 0; i < out.n; ++i)
    for (std::size_t gr = 0; gr < geo.grid_h(); ++gr)
      for (std::size_t gc = 0; gc < geo.grid_w(); ++gc)
        for (std::size_t c = 0; c < geo.channels; ++c)
          for (std::size_t y = 0; y < P; ++y)
            for (std::size_t x = 0; x < P; ++x) out.at(i, c, gr * P + y, gc * P + x) = *src++;
  return out;
}

// ---------------------------------------------------------------------------

bool MaskPlan::is_visible(std::size_t i, std::size_t patch) const {
  auto vis = visible(i);
  return std::binary_search(vis.begin(), vis.end(), patch);
}

std::size_t MaskPlan::total_masked() const {
  std::size_t total = 0;
  for (auto v : visible_per_sample) total += num_patches - v;
  return total;
}

MaskPlan MaskPlan::all_visible(std::size_t n, std::size_t num_patches) {
  MaskPlan plan;
  plan.semantics = MaskSemantics::FixedCount;
  plan.ratio = 0.0;
  plan.num_patches = num_patches;
  plan.visible_count = num_patches;
  plan.order.assign(n, std::vector<std::size_t>(num_patches));
  for (auto& o : plan.order) std::iota(o.begin(), o.end(), std::size_t{0});
  plan.visible_per_sample.assign(n, num_patches);
  return plan;
}

MaskPlan MaskPlan::from_visible(std::size_t num_patches,
                                const std::vector<std::vector<std::size_t>>& visible) {
  require(!visible.empty(), "mask plan needs at least one sample");
  MaskPlan plan;
  plan.semantics = MaskSemantics::FixedCount;
  plan.num_patches = num_patches;
  plan.visible_count = visible.front().size();
  plan.ratio = 1.0 - static_cast<double>(plan.visible_count) / static_cast<double>(num_patches);
  for (const auto& vis : visible) {
    require(vis.size() == plan.visible_count, "fixed-count plan needs equal visible counts");
    std::vector<char> seen(num_patches, 0);
    std::vector<std::size_t> order(vis.begin(), vis.end());
    std::sort(order.begin(), order.end());
    for (auto p : order) {
      require(p < num_patches && !seen[p], "visible patch ids must be distinct and < B");
      seen[p] = 1;
    }
    for (std::size_t p = 0; p < num_patches; ++p)
      if (!seen[p]) order.push_back(p);
    plan.order.push_back(std::move(order));
    plan.visible_per_sample.push_back(plan.visible_count);
  }
  return plan;
}

MaskPlan sample_mask(std::size_t n, std::size_t num_patches, double p, MaskSemantics semantics,
                     RngStream& rng) {
  require(num_patches >= 1, "sample_mask: B must be >= 1");
  require(p >= 0.0 && p < 1.0, "sample_mask: ratio must be in [0, 1)");
  MaskPlan plan;
  plan.semantics = semantics;
  plan.ratio = p;
  plan.num_patches = num_patches;
  plan.order.reserve(n);
  plan.visible_per_sample.reserve(n);

  if (semantics == MaskSemantics::FixedCount) {
    const auto b = static_cast<std::size_t>(std::lround((1.0 - p) * static_cast<double>(num_patches)));
    if (b == 0)
      throw ValidationError("sample_mask: ratio " + std::to_string(p) + " leaves no visible patch");
    plan.visible_count = b;
    for (std::size_t i = 0; i < n; ++i) {
      auto perm = rng.permutation(num_patches);
      std::sort(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(b));
      std::sort(perm.begin() + static_cast<std::ptrdiff_t>(b), perm.end());
      plan.order.push_back(std::move(perm));
      plan.visible_per_sample.push_back(b);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> vis, masked;
      for (std::size_t t = 0; t < num_patches; ++t) (rng.bernoulli(p) ? masked : vis).push_back(t);
      plan.visible_per_sample.push_back(vis.size());
      vis.insert(vis.end(), masked.begin(), masked.end());
      plan.order.push_back(std::move(vis));
    }
  }
  return plan;
}

PatchSequence apply_mask_zero(const PatchSequence& patches, const MaskPlan& plan) {
  require(plan.n() == patches.n() && plan.num_patches == patches.num_patches(),
          "apply_mask_zero: plan does not match patch dims");
  PatchSequence out = patches;
  const std::size_t pd = patches.patch_dim();
  for (std::size_t i = 0; i < plan.n(); ++i)
    for (auto t : plan.masked(i))
      std::fill_n(out.data.data() + (i * plan.num_patches + t) * pd, pd, 0.0);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<ClientShard> partition_once(std::span<const int> labels, std::size_t num_classes,
                                        const PartitionSpec& spec, RngStream& rng) {
  const std::size_t n = labels.size();
  const std::size_t K = spec.clients;
  std::vector<std::vector<std::size_t>> pools(num_classes);
  for (std::size_t i = 0; i < n; ++i) pools[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& pool : pools) rng.shuffle(pool);

  std::vector<ClientShard> shards(K);
  for (std::size_t k = 0; k < K; ++k) shards[k].client = k;

  if (spec.alpha == 0.0) {
    // Deal every class round-robin, continuing where the previous class
    // stopped, so both per-class and total counts differ by at most one.
    std::size_t slot = 0;
    for (auto& pool : pools)
      for (auto idx : pool) shards[slot++ % K].indices.push_back(idx);
  } else {
    std::vector<std::size_t> remaining(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) remaining[c] = pools[c].size();
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t quota = n / K + (k < n % K ? 1 : 0);
      const auto prior = rng.dirichlet(num_classes, spec.alpha);
      for (std::size_t s = 0; s < quota; ++s) {
        double total = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c)
          if (remaining[c]) total += prior[c];
        std::size_t chosen = num_classes;
        if (total > 0.0) {
          double u = rng.uniform() * total;
          for (std::size_t c = 0; c < num_classes; ++c) {
            if (!remaining[c]) continue;
            chosen = c;
            u -= prior[c];
            if (u < 0.0) break;
          }
        } else {
          // The prior puts no mass on the classes that are left.
          std::size_t left = 0;
          for (auto r : remaining) left += r;
          auto u = rng.below(left);
          for (std::size_t c = 0; c < num_classes; ++c) {
            if (u < remaining[c]) {
              chosen = c;
              break;
            }
            u -= remaining[c];
          }
        }
        shards[k].indices.push_back(pools[chosen][--remaining[chosen]]);
      }
    }
  }
  for (auto& shard : shards) {
    std::sort(shard.indices.begin(), shard.indices.end());
    shard.label_histogram.assign(num_classes, 0);
    for (auto idx : shard.indices) ++shard.label_histogram[static_cast<std::size_t>(labels[idx])];
  }
  return shards;
}

}  // namespace

std::vector<ClientShard> partition(std::span<const int> labels, std::size_t num_classes,
                                   const PartitionSpec& spec, RngStream& rng) {
  require(spec.clients >= 1, "partition: need at least one client");
  require(std::isfinite(spec.alpha) && spec.alpha >= 0.0, "partition: alpha must be finite, >= 0");
  require(spec.clients <= labels.size(), "partition: more clients than samples");
  require(num_classes >= 1, "partition: need at least one class");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < num_classes, "partition: label out of range");

  constexpr int kMaxAttempts = 16;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream attempt_rng = rng.derive("partition-attempt", attempt);
    auto shards = partition_once(labels, num_classes, spec, attempt_rng);
    const bool any_empty = std::any_of(shards.begin(), shards.end(),
                                       [](const ClientShard& s) { return s.indices.empty(); });
    if (!any_empty) return shards;
  }
  throw ValidationError("partition: could not produce non-empty shards after " +
                        std::to_string(kMaxAttempts) + " attempts");
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kChannelTint[3] = {1.0, 0.85, 0.7};

struct Nuisance {
  double dx = 0.0, dy = 0.0;
  double angle = 0.0;
  double contrast = 1.0;
};

// Bar + blob intensity for class `label` at pixel centre (px, py).
double template_intensity(const SynthSpec& spec, int label, const Nuisance& nu, double px,
                          double py) {
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  const double N = static_cast<double>(spec.num_classes);
  const double c = static_cast<double>(label);
  const double cx = 0.5 * W + nu.dx, cy = 0.5 * H + nu.dy;

  const double theta = std::numbers::pi * c / N + nu.angle;
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double half_len = 0.35 * std::min(H, W);
  const double rx = px - cx, ry = py - cy;
  const double t = std::clamp(rx * ux + ry * uy, -half_len, half_len);
  const double ex = rx - t * ux, ey = ry - t * uy;
  const double bar = std::exp(-(ex * ex + ey * ey) / (2.0 * 0.8 * 0.8));

  const double phi = 2.0 * std::numbers::pi * c / N + std::numbers::pi / 4.0;
  const double radius = 0.3 * std::min(H, W);
  const double bx = cx + radius * std::cos(phi), by = cy + radius * std::sin(phi);
  const double d2 = (px - bx) * (px - bx) + (py - by) * (py - by);
  const double blob = std::exp(-d2 / (2.0 * 1.5 * 1.5));

  return std::clamp(0.9 * bar + 0.7 * blob, 0.0, 1.0);
}

void render(const SynthSpec& spec, int label, const Nuisance& nu, const double* background,
            double noise_sigma, RngStream* rng, ImageBatch& out, std::size_t i) {
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double v = nu.contrast * template_intensity(spec, label, nu, static_cast<double>(x) + 0.5,
                                                        static_cast<double>(y) + 0.5);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        double p = background[ch] + v * kChannelTint[ch % 3];
        if (rng && noise_sigma > 0.0) p += noise_sigma * rng->normal();
        out.at(i, ch, y, x) = std::clamp(p, 0.0, 1.0);
      }
    }
}

}  // namespace

ImageBatch synth_dataset(const SynthSpec& spec, RngStream& rng) {
  require(spec.num_classes >= 2, "synth_dataset: need at least two classes");
  require(spec.per_class >= 1 && spec.channels >= 1 && spec.height >= 4 && spec.width >= 4,
          "synth_dataset: bad dimensions");
  require(spec.noise >= 0.0, "synth_dataset: noise must be >= 0");
  ImageBatch out;
  out.n = spec.per_class * spec.num_classes;
  out.channels = spec.channels;
  out.height = spec.height;
  out.width = spec.width;
  out.num_classes = spec.num_classes;
  out.pixels.assign(out.n * out.image_size(), 0.0);
  out.labels.resize(out.n);

  const double s = spec.noise;
  const double max_shift = std::round(3.0 * s);
  const double max_angle = 0.25 * s * std::numbers::pi / static_cast<double>(spec.num_classes);
  std::vector<double> background(spec.channels);
  std::size_t i = 0;
  for (std::size_t k = 0; k < spec.per_class; ++k)
    for (std::size_t c = 0; c < spec.num_classes; ++c, ++i) {
      RngStream img = rng.derive("image", static_cast<std::int64_t>(i));
      Nuisance nu;
      if (s > 0.0) {
        nu.dx = static_cast<double>(img.below(static_cast<std::uint64_t>(2 * max_shift + 1))) - max_shift;
        nu.dy = static_cast<double>(img.below(static_cast<std::uint64_t>(2 * max_shift + 1))) - max_shift;
        nu.angle = img.uniform(-max_angle, max_angle);
        nu.contrast = img.uniform(1.0 - 0.5 * s, 1.0);
      }
      for (auto& b : background) b = s > 0.0 ? img.uniform(0.0, 0.4 * s) : 0.0;
      out.labels[i] = static_cast<int>(c);
      render(spec, static_cast<int>(c), nu, background.data(), 0.25 * s, &img, out, i);
    }
  return out;
}

ImageBatch class_template(const SynthSpec& spec, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < spec.num_classes, "template label out of range");
  ImageBatch out;
  out.n = 1;
  out.channels = spec.channels;
  out.height = spec.height;
  out.width = spec.width;
  out.num_classes = spec.num_classes;
  out.pixels.assign(out.image_size(), 0.0);
  out.labels = {label};
  std::vector<double> background(spec.channels, 0.0);
  render(spec, label, Nuisance{}, background.data(), 0.0, nullptr, out, 0);
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  require(k <= n, "binomial: k > n");
  k = std::min(k, n - k);
  unsigned __int128 c = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
    if (c > std::numeric_limits<std::uint64_t>::max())
      throw ValidationError("binomial(" + std::to_string(n) + ", " + std::to_string(k) +
                            ") overflows 64 bits");
  }
  return static_cast<std::uint64_t>(c);
}

std::uint64_t count_mask_variants(std::uint64_t n, std::uint64_t num_patches,
                                  std::uint64_t visible) {
  require(visible <= num_patches, "count_mask_variants: b > B");
  const unsigned __int128 total =
      static_cast<unsigned __int128>(n) * binomial(num_patches, visible);
  if (total > std::numeric_limits<std::uint64_t>::max())
    throw ValidationError("count_mask_variants: n * C(B, b) overflows 64 bits");
  return static_cast<std::uint64_t>(total);
}

// ---------------------------------------------------------------------------

void save_dataset(const std::filesystem::path& manifest, const ImageBatch& batch) {
  batch.validate();
  const std::string stem = manifest.stem().string();
  const std::string pixel_file = stem + ".pixels.f32";
  const std::string label_file = batch.has_labels() ? stem + ".labels.i32" : "none";
  const auto dir = manifest.parent_path();
  {
    std::ofstream out(manifest);
    if (!out) throw IoError("cannot write " + manifest.string());
    out << "version=1\n"
        << "n=" << batch.n << "\nchannels=" << batch.channels << "\nheight=" << batch.height
        << "\nwidth=" << batch.width << "\nnum_classes=" << batch.num_classes
        << "\npixels=" << pixel_file << "\nlabels=" << label_file << "\n";
    if (!out) throw IoError("write failed: " + manifest.string());
  }
  {
    std::ofstream out(dir / pixel_file, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / pixel_file).string());
    for (double v : batch.pixels) detail::put_f32(out, v);
    if (!out) throw IoError("write failed: " + (dir / pixel_file).string());
  }
  if (batch.has_labels()) {
    std::ofstream out(dir / label_file, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / label_file).string());
    for (int y : batch.labels) detail::put_i32(out, y);
    if (!out) throw IoError("write failed: " + (dir / label_file).string());
  }
}

ImageBatch load_dataset(const std::filesystem::path& manifest) {
  auto cfg = KeyValueConfig::load(manifest);
  cfg.reject_unknown({"version", "n", "channels", "height", "width", "num_classes", "pixels", "labels"});
  require(cfg.get_int("version") == 1, "dataset: unsupported version");
  ImageBatch batch;
  batch.n = static_cast<std::size_t>(cfg.get_int("n"));
  batch.channels = static_cast<std::size_t>(cfg.get_int("channels"));
  batch.height = static_cast<std::size_t>(cfg.get_int("height"));
  batch.width = static_cast<std::size_t>(cfg.get_int("width"));
  batch.num_classes = static_cast<std::size_t>(cfg.get_int("num_classes"));
  const auto dir = manifest.parent_path();

  std::ifstream px(dir / cfg.get("pixels"), std::ios::binary);
  if (!px) throw IoError("cannot open " + (dir / cfg.get("pixels")).string());
  batch.pixels.resize(batch.n * batch.image_size());
  for (auto& v : batch.pixels)
    if (!detail::get_f32(px, v)) throw IoError("dataset pixel file is truncated");

  if (cfg.get("labels") != "none") {
    std::ifstream lb(dir / cfg.get("labels"), std::ios::binary);
    if (!lb) throw IoError("cannot open " + (dir / cfg.get("labels")).string());
    batch.labels.resize(batch.n);
    for (auto& y : batch.labels) {
      std::int32_t v;
      if (!detail::get_i32(lb, v)) throw IoError("dataset label file is truncated");
      y = v;
    }
  }
  batch.validate();
  return batch;
}

ImageBatch load_cifar10_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  constexpr std::size_t kPixels = 3 * 32 * 32;
  ImageBatch batch;
  batch.channels = 3;
  batch.height = 32;
  batch.width = 32;
  batch.num_classes = 10;
  std::vector<unsigned char> record(1 + kPixels);
  while (in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()))) {
    batch.labels.push_back(record[0]);
    for (std::size_t j = 0; j < kPixels; ++j) batch.pixels.push_back(record[1 + j] / 255.0);
    ++batch.n;
  }
  if (in.gcount() != 0) throw IoError("CIFAR file has a trailing partial record: " + path.string());
  batch.validate();
  return batch;
}

void write_partition_csv(const std::filesystem::path& path, std::span<const ClientShard> shards) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "client_id,sample_index\n";
  for (const auto& shard : shards)
    for (auto idx : shard.indices) out << shard.client << ',' << idx << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace fedmae
