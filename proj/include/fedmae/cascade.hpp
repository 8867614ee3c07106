#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmae/data.hpp"
#include "fedmae/mae.hpp"
#include "fedmae/optim.hpp"

namespace fedmae {

struct CascadeSpec {
  std::size_t depth = 1;       // D
  std::size_t pretrained = 1;  // P_pre, slots 0..P_pre-1 are copied
  // Source model index per pretrained slot. Empty means 0, 1, ..., P_pre-1.
  std::vector<std::size_t> sources;
  // When set, every pretrained slot copies this one source.
  std::optional<std::size_t> replicate;
  std::uint64_t init_seed = 0;
  // Randomize the default source order under order_seed.
  bool shuffle_order = false;
  std::uint64_t order_seed = 0;

  void validate(std::size_t available_sources) const;
  // Source index for each pretrained slot after defaults and shuffling.
  std::vector<std::size_t> resolved_sources(std::size_t available_sources) const;
  // "0,2,1" or "replicate:3".
  void parse_source(const std::string& text);
};

// Cascaded encoder, mean pooling over tokens, LayerNorm, linear head. Names:
//   enc.embed.{w,b}  enc.pos  enc.block.<i>.*  norm.{g,s}  head.{w,b}
struct ViTClassifier {
  ImageGeometry geometry;
  MaeDims dims;  // dims.depth = D; d_dec unused
  std::size_t num_classes = 0;
  ParamStore params;
};

// Same per-component streams as init_mae, plus "head" for norm and head.
ViTClassifier init_classifier(const ImageGeometry& geometry, const MaeDims& dims,
                              std::size_t num_classes, const RngStream& rng);

// Slots 0..P_pre-1 get bit-exact copies of the sources' first encoder block;
// later slots are fresh. Patch embedding and positional table come from the
// first pretrained source when P_pre >= 1. The head is always fresh. Fresh
// parameters are drawn from RngStream(spec.init_seed).
ViTClassifier cascade_assemble(std::span<const MaeModel> sources, const CascadeSpec& spec,
                               std::size_t num_classes);

// Multi-block MAE: the encoder is assembled as above and the decoder is copied
// from the first pretrained source (fresh when P_pre = 0).
MaeModel assemble_multiblock_mae(std::span<const MaeModel> sources, const CascadeSpec& spec);
// Convenience: D distinct sources 0..D-1.
MaeModel assemble_multiblock_mae(std::span<const MaeModel> sources, std::size_t depth,
                                 std::uint64_t init_seed = 0);

struct TrainSpec {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double mask_ratio = 0.75;
  AdamWConfig optimizer;
};

// Masked-reconstruction training of an assembled model on unlabeled server
// images. Empty data or zero epochs leave the model untouched. Returns the
// mean loss per epoch.
std::vector<double> server_refine(MaeModel& model, const PatchSequence& unlabeled,
                                  const TrainSpec& spec, const RngStream& rng);

struct FinetuneCurve {
  std::vector<double> loss;            // mean cross-entropy per epoch
  std::vector<double> train_accuracy;  // on the labeled subsample, end of epoch
  std::vector<std::size_t> used;       // indices of the labeled subsample
};

// Per-class subsample of max(1, round(fraction * count)) examples, drawn
// without replacement.
std::vector<std::size_t> stratified_subsample(std::span<const int> labels, std::size_t num_classes,
                                              double fraction, RngStream& rng);

// Full fine-tuning (every parameter trainable) with softmax cross-entropy on a
// stratified label_fraction of the training set.
FinetuneCurve finetune(ViTClassifier& clf, const PatchSequence& train, std::span<const int> labels,
                       double label_fraction, const TrainSpec& spec, const RngStream& rng);

Matrix classifier_logits(const ViTClassifier& clf, const PatchSequence& patches);
// Argmax of the logits, ties to the lowest class index.
std::vector<int> predict(const ViTClassifier& clf, const PatchSequence& patches);
double accuracy(std::span<const int> predicted, std::span<const int> labels);
double evaluate(const ViTClassifier& clf, const PatchSequence& test, std::span<const int> labels);

// Mean masked-only reconstruction loss over the batch with masks from rng.
double heldout_recon_loss(const MaeModel& model, const PatchSequence& patches, double mask_ratio,
                          RngStream rng);

struct ReconstructionDump {
  std::size_t rows = 0;
  std::size_t width = 0;   // 4 * image width
  std::size_t height = 0;  // rows * image height
  MaskPlan plan;
};

// One row per image: masked input | fresh-model reconstruction | pretrained
// reconstruction | ground truth, written as a binary PPM (P6). Reconstructions
// are raw predictions for every patch, clamped to [0, 1].
ReconstructionDump reconstruct_dump(const MaeModel& fresh, const MaeModel& pretrained,
                                    const ImageBatch& images, double mask_ratio, RngStream rng,
                                    const std::filesystem::path& path);

void write_ppm(const std::filesystem::path& path, const ImageBatch& grid_image);

// Exact parameter count and a matmul FLOP estimate for one forward pass:
// 2 FLOPs per multiply-add over every dense product, attention scores and
// attention-weighted sums included; elementwise ops are not counted.
struct Footprint {
  std::size_t params = 0;
  std::uint64_t flops = 0;
};
Footprint model_footprint(const MaeModel& model);
Footprint model_footprint(const ViTClassifier& clf);
std::uint64_t block_flops(std::size_t tokens, std::size_t dim, std::size_t hidden);

void save_classifier(const std::filesystem::path& path, const ViTClassifier& clf);
ViTClassifier load_classifier(const std::filesystem::path& path);

}  // namespace fedmae
