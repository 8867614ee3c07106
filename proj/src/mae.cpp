#include "fedmae/mae.hpp"

#include <cmath>
#include <sstream>

#include "fedmae/error.hpp"

namespace fedmae {

void MaeDims::validate() const {
  require(d_enc >= 1 && d_dec >= 1 && heads >= 1 && mlp_ratio >= 1 && depth >= 1,
          "MAE dims must be positive");
  require(d_enc % heads == 0, "head count must divide d_enc");
  require(d_dec % heads == 0, "head count must divide d_dec");
}

std::string encoder_block_prefix(std::size_t i) { return "enc.block." + std::to_string(i); }

namespace {

void add_positional(ParamStore& ps, const std::string& name, std::size_t rows, std::size_t cols,
                    RngStream& rng) {
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = rng.truncated_normal(0.02);
  ps.add(name, std::move(t));
}

}  // namespace

void init_encoder(ParamStore& ps, const ImageGeometry& geometry, const MaeDims& dims,
                  std::size_t depth, const RngStream& rng) {
  RngStream embed_rng = rng.derive("enc.embed", 0);
  init_linear(ps, "enc.embed", geometry.patch_dim(), dims.d_enc, embed_rng);
  RngStream pos_rng = rng.derive("enc.pos", 0);
  add_positional(ps, "enc.pos", geometry.num_patches(), dims.d_enc, pos_rng);
  for (std::size_t i = 0; i < depth; ++i) {
    RngStream block_rng = rng.derive("enc.block", static_cast<std::int64_t>(i));
    init_block(ps, encoder_block_prefix(i), dims.d_enc, dims.mlp_ratio * dims.d_enc, block_rng);
  }
}

MaeModel init_mae(const ImageGeometry& geometry, const MaeDims& dims, const RngStream& rng) {
  geometry.validate();
  dims.validate();
  MaeModel m;
  m.geometry = geometry;
  m.dims = dims;
  init_encoder(m.params, geometry, dims, dims.depth, rng);
  RngStream dec_rng = rng.derive("dec", 0);
  init_linear(m.params, "dec.proj", dims.d_enc, dims.d_dec, dec_rng);
  Tensor token({dims.d_dec});
  for (auto& v : token.values()) v = dec_rng.truncated_normal(0.02);
  m.params.add("dec.mask_token", std::move(token));
  add_positional(m.params, "dec.pos", geometry.num_patches(), dims.d_dec, dec_rng);
  init_block(m.params, "dec.block.0", dims.d_dec, dims.mlp_ratio * dims.d_dec, dec_rng);
  init_linear(m.params, "dec.head", dims.d_dec, geometry.patch_dim(), dec_rng);
  return m;
}

// ---------------------------------------------------------------------------

Matrix encoder_forward(const ParamStore& params, std::size_t depth, std::size_t heads,
                       const PatchSequence& patches, const MaskPlan& plan, EncoderCache* cache) {
  require(plan.fixed_count(), "encoder: needs a fixed-count mask plan");
  require(plan.visible_count >= 1, "encoder: at least one visible patch is required");
  require(plan.n() == patches.n() && plan.num_patches == patches.num_patches(),
          "encoder: mask plan does not match the patch batch");
  const std::size_t n = patches.n(), b = plan.visible_count, pd = patches.patch_dim();
  const std::size_t rows = n * b;

  Matrix gathered(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(pd));
  std::vector<std::size_t> positions(rows);
  const auto src = patches.data.matrix();
  for (std::size_t i = 0; i < n; ++i) {
    auto vis = plan.visible(i);
    for (std::size_t j = 0; j < b; ++j) {
      const std::size_t r = i * b + j;
      positions[r] = vis[j];
      gathered.row(static_cast<Eigen::Index>(r)) =
          src.row(static_cast<Eigen::Index>(i * plan.num_patches + vis[j]));
    }
  }

  Matrix x = linear_forward(params, "enc.embed", gathered);
  const auto pos = params.value("enc.pos").matrix();
  for (std::size_t r = 0; r < rows; ++r)
    x.row(static_cast<Eigen::Index>(r)) += pos.row(static_cast<Eigen::Index>(positions[r]));

  if (cache) {
    cache->blocks.assign(depth, BlockCache{});
    cache->seq_len = b;
  }
  for (std::size_t i = 0; i < depth; ++i)
    x = block_forward(params, encoder_block_prefix(i), x, b, heads,
                      cache ? &cache->blocks[i] : nullptr);
  if (cache) {
    cache->gathered = std::move(gathered);
    cache->positions = std::move(positions);
  }
  return x;
}

void encoder_backward(ParamStore& params, std::size_t depth, std::size_t heads,
                      const EncoderCache& cache, const Matrix& dlatent) {
  Matrix dx = dlatent;
  for (std::size_t i = depth; i-- > 0;)
    dx = block_backward(params, encoder_block_prefix(i), cache.blocks[i], dx, cache.seq_len, heads);
  auto dpos = params.at("enc.pos").grad.matrix();
  for (std::size_t r = 0; r < cache.positions.size(); ++r)
    dpos.row(static_cast<Eigen::Index>(cache.positions[r])) += dx.row(static_cast<Eigen::Index>(r));
  linear_backward(params, "enc.embed", cache.gathered, dx, /*need_dx=*/false);
}

// ---------------------------------------------------------------------------

namespace {

struct DecoderCache {
  Matrix latent;
  BlockCache block;
  Matrix block_out;
};

Matrix decoder_forward(const MaeModel& model, const Matrix& latent, const MaskPlan& plan,
                       DecoderCache* cache) {
  const std::size_t n = plan.n(), b = plan.visible_count, B = plan.num_patches;
  require(plan.fixed_count() && b >= 1, "decoder: needs a fixed-count plan with b >= 1");
  require(B == model.geometry.num_patches(), "decoder: plan patch count does not match model");
  require(latent.rows() == static_cast<Eigen::Index>(n * b) &&
              latent.cols() == static_cast<Eigen::Index>(model.dims.d_enc),
          "decoder: latents do not match the mask plan");
  const ParamStore& ps = model.params;

  Matrix projected = linear_forward(ps, "dec.proj", latent);
  const auto token = ps.value("dec.mask_token").matrix();
  const auto pos = ps.value("dec.pos").matrix();
  Matrix full(static_cast<Eigen::Index>(n * B), static_cast<Eigen::Index>(model.dims.d_dec));
  for (std::size_t i = 0; i < n; ++i) {
    auto vis = plan.visible(i);
    auto masked = plan.masked(i);
    for (std::size_t j = 0; j < b; ++j)
      full.row(static_cast<Eigen::Index>(i * B + vis[j])) =
          projected.row(static_cast<Eigen::Index>(i * b + j));
    for (auto t : masked) full.row(static_cast<Eigen::Index>(i * B + t)) = token.row(0);
    for (std::size_t t = 0; t < B; ++t)
      full.row(static_cast<Eigen::Index>(i * B + t)) += pos.row(static_cast<Eigen::Index>(t));
  }
  Matrix out = block_forward(ps, "dec.block.0", full, B, model.dims.heads,
                             cache ? &cache->block : nullptr);
  Matrix recon = linear_forward(ps, "dec.head", out);
  if (cache) {
    cache->latent = latent;
    cache->block_out = std::move(out);
  }
  return recon;
}

Matrix decoder_backward(MaeModel& model, const MaskPlan& plan, const DecoderCache& cache,
                        const Matrix& drecon) {
  const std::size_t n = plan.n(), b = plan.visible_count, B = plan.num_patches;
  ParamStore& ps = model.params;
  Matrix dout = linear_backward(ps, "dec.head", cache.block_out, drecon);
  Matrix dfull = block_backward(ps, "dec.block.0", cache.block, dout, B, model.dims.heads);

  auto dpos = ps.at("dec.pos").grad.matrix();
  auto dtoken = ps.at("dec.mask_token").grad.matrix();
  Matrix dprojected(static_cast<Eigen::Index>(n * b), static_cast<Eigen::Index>(model.dims.d_dec));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < B; ++t)
      dpos.row(static_cast<Eigen::Index>(t)) += dfull.row(static_cast<Eigen::Index>(i * B + t));
    auto vis = plan.visible(i);
    for (std::size_t j = 0; j < b; ++j)
      dprojected.row(static_cast<Eigen::Index>(i * b + j)) =
          dfull.row(static_cast<Eigen::Index>(i * B + vis[j]));
    for (auto t : plan.masked(i)) dtoken.row(0) += dfull.row(static_cast<Eigen::Index>(i * B + t));
  }
  return linear_backward(ps, "dec.proj", cache.latent, dprojected);
}

std::vector<double> loss_row_weights(const MaskPlan& plan, LossMode mode) {
  std::vector<double> w(plan.n() * plan.num_patches, mode == LossMode::All ? 1.0 : 0.0);
  if (mode == LossMode::MaskedOnly)
    for (std::size_t i = 0; i < plan.n(); ++i)
      for (auto t : plan.masked(i)) w[i * plan.num_patches + t] = 1.0;
  return w;
}

PatchSequence as_patches(const ImageGeometry& geo, std::size_t n, const Matrix& rows) {
  PatchSequence out;
  out.geometry = geo;
  out.data = Tensor({n, geo.num_patches(), geo.patch_dim()});
  out.data.matrix() = rows;
  return out;
}

}  // namespace

Tensor encode_visible(const MaeModel& model, const PatchSequence& patches, const MaskPlan& plan) {
  Matrix z = encoder_forward(model.params, model.dims.depth, model.dims.heads, patches, plan, nullptr);
  Tensor out({patches.n(), plan.visible_count, model.dims.d_enc});
  out.matrix() = z;
  return out;
}

PatchSequence decode_full(const MaeModel& model, const Tensor& latents, const MaskPlan& plan) {
  require(latents.ndim() == 3 && latents.dim(0) == plan.n() &&
              latents.dim(1) == plan.visible_count && latents.dim(2) == model.dims.d_enc,
          "decode_full: latent shape " + shape_string(latents.shape()) +
              " does not match the mask plan");
  Matrix recon = decoder_forward(model, Matrix(latents.matrix()), plan, nullptr);
  return as_patches(model.geometry, plan.n(), recon);
}

PatchSequence reconstruct(const MaeModel& model, const PatchSequence& patches,
                          const MaskPlan& plan) {
  Matrix z = encoder_forward(model.params, model.dims.depth, model.dims.heads, patches, plan, nullptr);
  return as_patches(model.geometry, patches.n(), decoder_forward(model, z, plan, nullptr));
}

double masked_recon_loss(const PatchSequence& recon, const PatchSequence& target,
                         const MaskPlan& plan, LossMode mode) {
  require(recon.data.shape() == target.data.shape(), "masked_recon_loss: shape mismatch");
  require(plan.n() == target.n() && plan.num_patches == target.num_patches(),
          "masked_recon_loss: plan does not match");
  if (mode == LossMode::MaskedOnly && plan.total_masked() == 0)
    throw ValidationError("masked_recon_loss: masked-only mode with no masked patches");
  const auto w = loss_row_weights(plan, mode);
  return masked_mse(Matrix(recon.data.matrix()), Matrix(target.data.matrix()), w, nullptr);
}

double mae_loss_and_grad(MaeModel& model, const PatchSequence& batch, const MaskPlan& plan,
                         LossMode mode) {
  if (mode == LossMode::MaskedOnly && plan.total_masked() == 0)
    throw ValidationError("mae loss: masked-only mode with no masked patches");
  model.params.zero_grad();
  EncoderCache enc;
  DecoderCache dec;
  Matrix z = encoder_forward(model.params, model.dims.depth, model.dims.heads, batch, plan, &enc);
  Matrix recon = decoder_forward(model, z, plan, &dec);
  Matrix drecon;
  const auto w = loss_row_weights(plan, mode);
  const double loss = masked_mse(recon, Matrix(batch.data.matrix()), w, &drecon);
  Matrix dz = decoder_backward(model, plan, dec, drecon);
  encoder_backward(model.params, model.dims.depth, model.dims.heads, enc, dz);
  return loss;
}

double train_step(MaeModel& model, AdamW& opt, const PatchSequence& batch, double mask_ratio,
                  RngStream rng) {
  require(batch.n() >= 1, "train_step: empty batch");
  MaskPlan plan = sample_mask(batch.n(), batch.num_patches(), mask_ratio,
                              MaskSemantics::FixedCount, rng);
  const double loss = mae_loss_and_grad(model, batch, plan, LossMode::MaskedOnly);
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "train_step: non-finite loss (" << loss << ") at optimizer step "
       << opt.step_count() + 1 << ", rng " << rng.path_string();
    throw NonFiniteError(os.str());
  }
  opt.step(model.params);
  return loss;
}

Tensor feature_interference(const MaeModel& model, const PatchSequence& patches,
                            const MaskPlan& plan) {
  const MaskPlan full = MaskPlan::all_visible(patches.n(), patches.num_patches());
  const PatchSequence corrupted = apply_mask_zero(patches, plan);
  Matrix z = encoder_forward(model.params, model.dims.depth, model.dims.heads, patches, full, nullptr);
  Matrix zt = encoder_forward(model.params, model.dims.depth, model.dims.heads, corrupted, full, nullptr);
  Tensor out({patches.n(), patches.num_patches(), model.dims.d_enc});
  out.matrix() = z - zt;
  return out;
}

}  // namespace fedmae
