#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedmae/rng.hpp"
#include "fedmae/tensor.hpp"

namespace fedmae {

struct ImageGeometry {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t patch = 4;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
  void validate() const;

  friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;
};

// Pixels in [0, 1], layout [n, channels, height, width].
struct ImageBatch {
  std::size_t n = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  std::vector<int> labels;  // empty, or one per image
  std::size_t num_classes = 0;

  std::size_t image_size() const { return channels * height * width; }
  bool has_labels() const { return !labels.empty(); }
  double& at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) {
    return pixels[((i * channels + c) * height + y) * width + x];
  }
  double at(std::size_t i, std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[((i * channels + c) * height + y) * width + x];
  }
  ImageBatch subset(std::span<const std::size_t> indices) const;
  void validate() const;
};

// [n, B, patch_dim]; patch order is row-major over the patch grid and each
// patch is flattened channel-major, then row-major within the patch.
struct PatchSequence {
  ImageGeometry geometry;
  Tensor data;

  std::size_t n() const { return data.ndim() ? data.dim(0) : 0; }
  std::size_t num_patches() const { return geometry.num_patches(); }
  std::size_t patch_dim() const { return geometry.patch_dim(); }
  PatchSequence subset(std::span<const std::size_t> indices) const;
};

PatchSequence patchify(const ImageBatch& images, std::size_t patch);
ImageBatch unpatchify(const PatchSequence& patches);

enum class MaskSemantics { FixedCount, Bernoulli };

// Per-sample visible/masked assignment. order[i] is a permutation of [0, B)
// listing the visible patch ids (ascending) followed by the masked ones
// (ascending).
struct MaskPlan {
  MaskSemantics semantics = MaskSemantics::FixedCount;
  double ratio = 0.0;
  std::size_t num_patches = 0;
  std::size_t visible_count = 0;  // b for fixed-count plans
  std::vector<std::vector<std::size_t>> order;
  std::vector<std::size_t> visible_per_sample;

  std::size_t n() const { return order.size(); }
  std::span<const std::size_t> visible(std::size_t i) const {
    return {order[i].data(), visible_per_sample[i]};
  }
  std::span<const std::size_t> masked(std::size_t i) const {
    return {order[i].data() + visible_per_sample[i], num_patches - visible_per_sample[i]};
  }
  bool is_visible(std::size_t i, std::size_t patch) const;
  bool fixed_count() const { return semantics == MaskSemantics::FixedCount; }
  std::size_t total_masked() const;

  static MaskPlan all_visible(std::size_t n, std::size_t num_patches);
  // Builds a fixed-count plan from explicit visible sets (all the same size).
  static MaskPlan from_visible(std::size_t num_patches,
                               const std::vector<std::vector<std::size_t>>& visible);
};

// Fixed-count: b = round((1 - p) B) visible per sample, b >= 1 required.
// Bernoulli: every patch masked independently with probability p.
MaskPlan sample_mask(std::size_t n, std::size_t num_patches, double p, MaskSemantics semantics,
                     RngStream& rng);

PatchSequence apply_mask_zero(const PatchSequence& patches, const MaskPlan& plan);

struct ClientShard {
  std::size_t client = 0;
  std::vector<std::size_t> indices;
  std::vector<std::size_t> label_histogram;
};

struct PartitionSpec {
  std::size_t clients = 1;
  double alpha = 0.0;  // 0 means IID
  std::uint64_t seed = 0;
};

// alpha == 0: stratified IID split. alpha > 0: each client draws class
// priors from Dirichlet(alpha) and fills its quota by sampling classes from
// its prior without replacement, renormalizing over the classes that still
// have samples. Always a disjoint cover of [0, labels.size()).
std::vector<ClientShard> partition(std::span<const int> labels, std::size_t num_classes,
                                   const PartitionSpec& spec, RngStream& rng);

struct SynthSpec {
  std::size_t per_class = 64;
  std::size_t num_classes = 4;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  double noise = 0.5;
};

// Per-class templates: a bar at a class-specific orientation plus a blob at a
// class-specific position. noise scales the nuisance: random translation,
// contrast, background level and per-pixel Gaussian noise. noise = 0 yields
// the bare templates.
ImageBatch synth_dataset(const SynthSpec& spec, RngStream& rng);
// The noise-free template of one class, as a single-image batch.
ImageBatch class_template(const SynthSpec& spec, int label);

// n * C(B, b) with overflow-checked arithmetic.
std::uint64_t count_mask_variants(std::uint64_t n, std::uint64_t num_patches,
                                  std::uint64_t visible);
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

// Dataset file: text manifest (key=value) next to a little-endian float32
// pixel file and an int32 label file.
void save_dataset(const std::filesystem::path& manifest, const ImageBatch& batch);
ImageBatch load_dataset(const std::filesystem::path& manifest);
// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
ImageBatch load_cifar10_binary(const std::filesystem::path& path);

void write_partition_csv(const std::filesystem::path& path, std::span<const ClientShard> shards);

}  // namespace fedmae
