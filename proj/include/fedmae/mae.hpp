#pragma once

#include <string>
#include <vector>

#include "fedmae/data.hpp"
#include "fedmae/layers.hpp"
#include "fedmae/optim.hpp"
#include "fedmae/rng.hpp"

namespace fedmae {

struct MaeDims {
  std::size_t d_enc = 64;
  std::size_t d_dec = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t depth = 1;  // encoder blocks; the decoder always has one

  void validate() const;
  friend bool operator==(const MaeDims&, const MaeDims&) = default;
};

// Masked autoencoder parameters. Names:
//   enc.embed.{w,b}  enc.pos  enc.block.<i>.*
//   dec.proj.{w,b}  dec.mask_token  dec.pos  dec.block.0.*  dec.head.{w,b}
// A one-block MAE is depth 1; a cascaded multi-block MAE uses the same type.
struct MaeModel {
  ImageGeometry geometry;
  MaeDims dims;
  ParamStore params;
};

std::string encoder_block_prefix(std::size_t i);

// Positional tables and the mask token: truncated normal, std 0.02. Each
// component draws from its own sub-stream of rng ("enc.embed", "enc.pos",
// ("enc.block", i), "dec"), so encoder block i is initialized identically in
// every model built from the same stream, whatever its depth.
MaeModel init_mae(const ImageGeometry& geometry, const MaeDims& dims, const RngStream& rng);
void init_encoder(ParamStore& params, const ImageGeometry& geometry, const MaeDims& dims,
                  std::size_t depth, const RngStream& rng);

// Shared by the MAE and the classifier: embed the plan's visible patches,
// add their positional rows (by original patch index), run `depth` blocks.
// Output rows are [sample, visible slot] with b = plan.visible_count tokens
// per sample.
struct EncoderCache {
  Matrix gathered;
  std::vector<std::size_t> positions;
  std::vector<BlockCache> blocks;
  std::size_t seq_len = 0;
};
Matrix encoder_forward(const ParamStore& params, std::size_t depth, std::size_t heads,
                       const PatchSequence& patches, const MaskPlan& plan, EncoderCache* cache);
void encoder_backward(ParamStore& params, std::size_t depth, std::size_t heads,
                      const EncoderCache& cache, const Matrix& dlatent);

// Latents [n, b, d_enc]. Requires a fixed-count plan with b >= 1.
Tensor encode_visible(const MaeModel& model, const PatchSequence& patches, const MaskPlan& plan);
// Reconstruction [n, B, patch_dim] from encode_visible output and the same plan.
PatchSequence decode_full(const MaeModel& model, const Tensor& latents, const MaskPlan& plan);
PatchSequence reconstruct(const MaeModel& model, const PatchSequence& patches,
                          const MaskPlan& plan);

enum class LossMode { MaskedOnly, All };

// 0.5 * mean squared error over masked-patch pixels (MaskedOnly) or over all
// pixels (All). MaskedOnly with nothing masked is an error.
double masked_recon_loss(const PatchSequence& recon, const PatchSequence& target,
                         const MaskPlan& plan, LossMode mode);

// Forward + backward: zeroes the gradients, accumulates d(loss)/d(params),
// returns the loss.
double mae_loss_and_grad(MaeModel& model, const PatchSequence& batch, const MaskPlan& plan,
                         LossMode mode);

// One optimizer step on a fresh fixed-count mask drawn from rng.
// Throws NonFiniteError if the loss is not finite.
double train_step(MaeModel& model, AdamW& opt, const PatchSequence& batch, double mask_ratio,
                  RngStream rng);

// dz = h(x) - h(x~), both encoded over all B tokens, x~ being x with the
// plan's masked patches zeroed. Shape [n, B, d_enc].
Tensor feature_interference(const MaeModel& model, const PatchSequence& patches,
                            const MaskPlan& plan);

}  // namespace fedmae
