#include "fedmae/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fedmae/checkpoint.hpp"
#include "fedmae/config.hpp"
#include "fedmae/error.hpp"

namespace fedmae {

void CascadeSpec::validate(std::size_t available_sources) const {
  require(depth >= 1, "cascade: depth must be >= 1");
  require(pretrained <= depth, "cascade: pretrained count " + std::to_string(pretrained) +
                                   " exceeds depth " + std::to_string(depth));
  if (pretrained == 0) return;
  if (replicate) {
    require(*replicate < available_sources,
            "cascade: replicate source " + std::to_string(*replicate) + " not available");
    return;
  }
  if (sources.empty()) {
    require(pretrained <= available_sources,
            "cascade: " + std::to_string(pretrained) + " pretrained blocks need as many sources, got " +
                std::to_string(available_sources));
    return;
  }
  require(sources.size() == pretrained, "cascade: source list length " +
                                            std::to_string(sources.size()) +
                                            " does not match pretrained count " +
                                            std::to_string(pretrained));
  for (auto s : sources)
    require(s < available_sources, "cascade: source " + std::to_string(s) + " not available");
}

std::vector<std::size_t> CascadeSpec::resolved_sources(std::size_t available_sources) const {
  validate(available_sources);
  if (pretrained == 0) return {};
  if (replicate) return std::vector<std::size_t>(pretrained, *replicate);
  if (!sources.empty()) return sources;
  std::vector<std::size_t> ids(available_sources);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  if (shuffle_order) {
    RngStream rng = RngStream(order_seed).derive("cascade-order", 0);
    rng.shuffle(ids);
  }
  ids.resize(pretrained);
  return ids;
}

void CascadeSpec::parse_source(const std::string& text) {
  const std::string t = trim(text);
  sources.clear();
  replicate.reset();
  if (t.empty()) return;
  const std::string prefix = "replicate:";
  if (t.rfind(prefix, 0) == 0) {
    const auto v = parse_int(trim(t.substr(prefix.size())), "cascade source");
    require(v >= 0, "cascade: replicate source must be non-negative");
    replicate = static_cast<std::size_t>(v);
    return;
  }
  for (const auto& part : split(t, ',')) {
    const auto v = parse_int(trim(part), "cascade source");
    require(v >= 0, "cascade: source ids must be non-negative");
    sources.push_back(static_cast<std::size_t>(v));
  }
}

// ---------------------------------------------------------------------------

ViTClassifier init_classifier(const ImageGeometry& geometry, const MaeDims& dims,
                              std::size_t num_classes, const RngStream& rng) {
  geometry.validate();
  dims.validate();
  require(num_classes >= 2, "classifier: need at least two classes");
  ViTClassifier clf;
  clf.geometry = geometry;
  clf.dims = dims;
  clf.num_classes = num_classes;
  init_encoder(clf.params, geometry, dims, dims.depth, rng);
  RngStream head_rng = rng.derive("head", 0);
  init_layer_norm(clf.params, "norm", dims.d_enc);
  init_linear(clf.params, "head", dims.d_enc, num_classes, head_rng);
  return clf;
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

void check_compatible(std::span<const MaeModel> sources) {
  require(!sources.empty(), "cascade: at least one source model is required");
  const MaeModel& a = sources.front();
  for (std::size_t i = 1; i < sources.size(); ++i) {
    const MaeModel& b = sources[i];
    require(b.geometry == a.geometry, "cascade: source " + std::to_string(i) +
                                          " has a different image geometry");
    require(b.dims.d_enc == a.dims.d_enc && b.dims.heads == a.dims.heads &&
                b.dims.mlp_ratio == a.dims.mlp_ratio,
            "cascade: source " + std::to_string(i) + " has different encoder dims");
  }
}

// Copies enc.block.0.* of src into enc.block.<slot>.* of dst.
void copy_block(ParamStore& dst, std::size_t slot, const ParamStore& src) {
  const std::string from = encoder_block_prefix(0) + ".";
  const std::string to = encoder_block_prefix(slot) + ".";
  for (const auto& [name, p] : src) {
    if (!starts_with(name, from)) continue;
    Param& target = dst.at(to + name.substr(from.size()));
    require(target.value.shape() == p.value.shape(), "cascade: shape mismatch for " + name);
    target.value = p.value;
  }
}

void copy_prefixed(ParamStore& dst, const ParamStore& src, const std::string& prefix) {
  for (const auto& [name, p] : src)
    if (starts_with(name, prefix)) dst.at(name).value = p.value;
}

void fill_encoder(ParamStore& dst, std::span<const MaeModel> sources,
                  const std::vector<std::size_t>& slots) {
  for (std::size_t i = 0; i < slots.size(); ++i) copy_block(dst, i, sources[slots[i]].params);
  if (!slots.empty()) {
    copy_prefixed(dst, sources[slots[0]].params, "enc.embed.");
    copy_prefixed(dst, sources[slots[0]].params, "enc.pos");
  }
  dst.zero_grad();
}

}  // namespace

ViTClassifier cascade_assemble(std::span<const MaeModel> sources, const CascadeSpec& spec,
                               std::size_t num_classes) {
  check_compatible(sources);
  const auto slots = spec.resolved_sources(sources.size());
  MaeDims dims = sources.front().dims;
  dims.depth = spec.depth;
  ViTClassifier clf =
      init_classifier(sources.front().geometry, dims, num_classes, RngStream(spec.init_seed));
  fill_encoder(clf.params, sources, slots);
  return clf;
}

MaeModel assemble_multiblock_mae(std::span<const MaeModel> sources, const CascadeSpec& spec) {
  check_compatible(sources);
  const auto slots = spec.resolved_sources(sources.size());
  MaeDims dims = sources.front().dims;
  dims.depth = spec.depth;
  if (!slots.empty()) dims.d_dec = sources[slots[0]].dims.d_dec;
  MaeModel m = init_mae(sources.front().geometry, dims, RngStream(spec.init_seed));
  fill_encoder(m.params, sources, slots);
  if (!slots.empty()) copy_prefixed(m.params, sources[slots[0]].params, "dec.");
  m.params.zero_grad();
  return m;
}

MaeModel assemble_multiblock_mae(std::span<const MaeModel> sources, std::size_t depth,
                                 std::uint64_t init_seed) {
  CascadeSpec spec;
  spec.depth = depth;
  spec.pretrained = depth;
  spec.init_seed = init_seed;
  return assemble_multiblock_mae(sources, spec);
}

// ---------------------------------------------------------------------------

std::vector<double> server_refine(MaeModel& model, const PatchSequence& unlabeled,
                                  const TrainSpec& spec, const RngStream& rng) {
  std::vector<double> losses;
  if (unlabeled.n() == 0 || spec.epochs == 0) return losses;
  require(spec.batch_size >= 1, "server_refine: batch size must be >= 1");
  AdamW opt(model.params, spec.optimizer);
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const RngStream epoch_rng = rng.derive("epoch", static_cast<std::int64_t>(e));
    RngStream order_rng = epoch_rng.derive("order", 0);
    const auto order = order_rng.permutation(unlabeled.n());
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      const PatchSequence batch =
          unlabeled.subset(std::span<const std::size_t>(order.data() + start, end - start));
      sum += train_step(model, opt, batch, spec.mask_ratio,
                        epoch_rng.derive("batch", static_cast<std::int64_t>(batches)));
      ++batches;
    }
    losses.push_back(sum / static_cast<double>(batches));
  }
  return losses;
}

// ---------------------------------------------------------------------------

namespace {

struct ClassifierCache {
  EncoderCache encoder;
  LayerNormCache norm;
  Matrix normed;
  std::size_t tokens = 0;
};

Matrix classifier_forward(const ViTClassifier& clf, const PatchSequence& patches,
                          ClassifierCache* cache) {
  require(patches.geometry == clf.geometry, "classifier: image geometry does not match the model");
  const std::size_t n = patches.n(), B = patches.num_patches();
  const MaskPlan full = MaskPlan::all_visible(n, B);
  Matrix z = encoder_forward(clf.params, clf.dims.depth, clf.dims.heads, patches, full,
                             cache ? &cache->encoder : nullptr);
  Matrix pooled(static_cast<Eigen::Index>(n), z.cols());
  for (std::size_t i = 0; i < n; ++i)
    pooled.row(static_cast<Eigen::Index>(i)) =
        z.middleRows(static_cast<Eigen::Index>(i * B), static_cast<Eigen::Index>(B)).colwise().mean();
  Matrix normed = layer_norm_forward(clf.params, "norm", pooled, cache ? &cache->norm : nullptr);
  Matrix logits = linear_forward(clf.params, "head", normed);
  if (cache) {
    cache->normed = std::move(normed);
    cache->tokens = B;
  }
  return logits;
}

void classifier_backward(ViTClassifier& clf, const ClassifierCache& cache, const Matrix& dlogits) {
  Matrix dnormed = linear_backward(clf.params, "head", cache.normed, dlogits);
  Matrix dpooled = layer_norm_backward(clf.params, "norm", cache.norm, dnormed);
  const std::size_t n = static_cast<std::size_t>(dpooled.rows()), B = cache.tokens;
  Matrix dz(static_cast<Eigen::Index>(n * B), dpooled.cols());
  const double scale = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < B; ++t)
      dz.row(static_cast<Eigen::Index>(i * B + t)) = dpooled.row(static_cast<Eigen::Index>(i)) * scale;
  encoder_backward(clf.params, clf.dims.depth, clf.dims.heads, cache.encoder, dz);
}

}  // namespace

std::vector<std::size_t> stratified_subsample(std::span<const int> labels, std::size_t num_classes,
                                              double fraction, RngStream& rng) {
  require(fraction > 0.0 && fraction <= 1.0, "label fraction must be in (0, 1]");
  std::vector<std::vector<std::size_t>> pools(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < num_classes,
            "label out of range at index " + std::to_string(i));
    pools[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = pools[c];
    require(!pool.empty(), "class " + std::to_string(c) + " has no labeled examples");
    const auto want = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size()))));
    rng.shuffle(pool);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  }
  std::sort(out.begin(), out.end());
  return out;
}

FinetuneCurve finetune(ViTClassifier& clf, const PatchSequence& train, std::span<const int> labels,
                       double label_fraction, const TrainSpec& spec, const RngStream& rng) {
  require(labels.size() == train.n(), "finetune: label count does not match the training set");
  require(label_fraction > 0.0 && label_fraction <= 1.0, "finetune: label fraction must be in (0, 1]");
  require(label_fraction * static_cast<double>(train.n()) >= static_cast<double>(clf.num_classes),
          "finetune: label fraction leaves fewer examples than classes");
  require(spec.batch_size >= 1, "finetune: batch size must be >= 1");

  FinetuneCurve curve;
  RngStream sub_rng = rng.derive("subsample", 0);
  curve.used = stratified_subsample(labels, clf.num_classes, label_fraction, sub_rng);
  const PatchSequence data = train.subset(curve.used);
  std::vector<int> y(curve.used.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = labels[curve.used[i]];

  AdamW opt(clf.params, spec.optimizer);
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    const RngStream epoch_rng = rng.derive("epoch", static_cast<std::int64_t>(e));
    RngStream order_rng = epoch_rng.derive("order", 0);
    const auto order = order_rng.permutation(data.n());
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      const std::span<const std::size_t> ids(order.data() + start, end - start);
      const PatchSequence batch = data.subset(ids);
      std::vector<int> by(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) by[i] = y[ids[i]];

      clf.params.zero_grad();
      ClassifierCache cache;
      Matrix logits = classifier_forward(clf, batch, &cache);
      Matrix dlogits;
      const double loss = softmax_cross_entropy(logits, by, &dlogits);
      if (!std::isfinite(loss))
        throw NonFiniteError("finetune: non-finite loss at epoch " + std::to_string(e) +
                             ", batch " + std::to_string(batches));
      classifier_backward(clf, cache, dlogits);
      opt.step(clf.params);
      sum += loss;
      ++batches;
    }
    curve.loss.push_back(sum / static_cast<double>(batches));
    curve.train_accuracy.push_back(evaluate(clf, data, y));
  }
  return curve;
}

Matrix classifier_logits(const ViTClassifier& clf, const PatchSequence& patches) {
  const std::size_t n = patches.n();
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(clf.num_classes));
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    std::vector<std::size_t> ids(end - start);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = start + i;
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(ids.size())) =
        classifier_forward(clf, patches.subset(ids), nullptr);
  }
  return out;
}

std::vector<int> predict(const ViTClassifier& clf, const PatchSequence& patches) {
  const Matrix logits = classifier_logits(clf, patches);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  require(!labels.empty(), "accuracy: empty label set");
  require(predicted.size() == labels.size(), "accuracy: prediction count does not match labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate(const ViTClassifier& clf, const PatchSequence& test, std::span<const int> labels) {
  require(test.n() >= 1, "evaluate: empty test set");
  const auto pred = predict(clf, test);
  return accuracy(pred, labels);
}

double heldout_recon_loss(const MaeModel& model, const PatchSequence& patches, double mask_ratio,
                          RngStream rng) {
  const MaskPlan plan =
      sample_mask(patches.n(), patches.num_patches(), mask_ratio, MaskSemantics::FixedCount, rng);
  return masked_recon_loss(reconstruct(model, patches, plan), patches, plan, LossMode::MaskedOnly);
}

// ---------------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const ImageBatch& img) {
  require(img.n == 1, "write_ppm: expects a single image");
  require(img.channels == 1 || img.channels == 3, "write_ppm: needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(0, img.channels == 1 ? 0 : c, y, x), 0.0, 1.0);
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

ReconstructionDump reconstruct_dump(const MaeModel& fresh, const MaeModel& pretrained,
                                    const ImageBatch& images, double mask_ratio, RngStream rng,
                                    const std::filesystem::path& path) {
  images.validate();
  require(images.n >= 1, "reconstruct_dump: no images");
  require(fresh.geometry == pretrained.geometry, "reconstruct_dump: models differ in geometry");
  const ImageGeometry& geo = fresh.geometry;
  require(images.channels == geo.channels && images.height == geo.height && images.width == geo.width,
          "reconstruct_dump: images do not match the model geometry");

  const PatchSequence patches = patchify(images, geo.patch);
  ReconstructionDump dump;
  dump.plan = sample_mask(images.n, geo.num_patches(), mask_ratio, MaskSemantics::FixedCount, rng);
  const ImageBatch columns[4] = {
      unpatchify(apply_mask_zero(patches, dump.plan)),
      unpatchify(reconstruct(fresh, patches, dump.plan)),
      unpatchify(reconstruct(pretrained, patches, dump.plan)),
      images,
  };

  dump.rows = images.n;
  dump.width = 4 * images.width;
  dump.height = images.n * images.height;
  ImageBatch grid;
  grid.n = 1;
  grid.channels = images.channels;
  grid.height = dump.height;
  grid.width = dump.width;
  grid.pixels.assign(grid.channels * grid.height * grid.width, 0.0);
  for (std::size_t i = 0; i < images.n; ++i)
    for (std::size_t col = 0; col < 4; ++col)
      for (std::size_t c = 0; c < images.channels; ++c)
        for (std::size_t y = 0; y < images.height; ++y)
          for (std::size_t x = 0; x < images.width; ++x)
            grid.at(0, c, i * images.height + y, col * images.width + x) =
                std::clamp(columns[col].at(i, c, y, x), 0.0, 1.0);
  write_ppm(path, grid);
  return dump;
}

// ---------------------------------------------------------------------------

std::uint64_t block_flops(std::size_t tokens, std::size_t dim, std::size_t hidden) {
  const std::uint64_t T = tokens, d = dim, h = hidden;
  const std::uint64_t projections = 4 * 2 * T * d * d;
  const std::uint64_t scores = 2 * T * T * d;
  const std::uint64_t mix = 2 * T * T * d;
  const std::uint64_t mlp = 2 * 2 * T * d * h;
  return projections + scores + mix + mlp;
}

Footprint model_footprint(const MaeModel& model) {
  const auto& g = model.geometry;
  const auto& d = model.dims;
  const std::uint64_t B = g.num_patches(), pd = g.patch_dim();
  // Pretraining forward at the default 75% ratio: b visible tokens.
  const std::uint64_t b = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(0.25 * B)));
  Footprint f;
  f.params = model.params.scalar_count();
  f.flops = 2 * b * pd * d.d_enc;
  f.flops += d.depth * block_flops(b, d.d_enc, d.mlp_ratio * d.d_enc);
  f.flops += 2 * b * d.d_enc * d.d_dec;
  f.flops += block_flops(B, d.d_dec, d.mlp_ratio * d.d_dec);
  f.flops += 2 * B * d.d_dec * pd;
  return f;
}

Footprint model_footprint(const ViTClassifier& clf) {
  const auto& g = clf.geometry;
  const auto& d = clf.dims;
  const std::uint64_t B = g.num_patches(), pd = g.patch_dim();
  Footprint f;
  f.params = clf.params.scalar_count();
  f.flops = 2 * B * pd * d.d_enc;
  f.flops += d.depth * block_flops(B, d.d_enc, d.mlp_ratio * d.d_enc);
  f.flops += 2 * d.d_enc * clf.num_classes;
  return f;
}

// ---------------------------------------------------------------------------

void save_classifier(const std::filesystem::path& path, const ViTClassifier& clf) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "vit";
  put_geometry(ckpt.metadata, clf.geometry);
  ckpt.metadata["d_enc"] = std::to_string(clf.dims.d_enc);
  ckpt.metadata["d_dec"] = std::to_string(clf.dims.d_dec);
  ckpt.metadata["heads"] = std::to_string(clf.dims.heads);
  ckpt.metadata["mlp_ratio"] = std::to_string(clf.dims.mlp_ratio);
  ckpt.metadata["depth"] = std::to_string(clf.dims.depth);
  ckpt.metadata["num_classes"] = std::to_string(clf.num_classes);
  ckpt.params = clf.params;
  save_checkpoint(path, ckpt);
}

ViTClassifier load_classifier(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  auto kind = ckpt.metadata.find("kind");
  if (kind == ckpt.metadata.end() || kind->second != "vit")
    throw IoError(path.string() + ": not a classifier checkpoint");
  MaeDims dims;
  dims.d_enc = meta_size(ckpt.metadata, "d_enc");
  dims.d_dec = meta_size(ckpt.metadata, "d_dec");
  dims.heads = meta_size(ckpt.metadata, "heads");
  dims.mlp_ratio = meta_size(ckpt.metadata, "mlp_ratio");
  dims.depth = meta_size(ckpt.metadata, "depth");
  const ViTClassifier reference = init_classifier(get_geometry(ckpt.metadata), dims,
                                                  meta_size(ckpt.metadata, "num_classes"),
                                                  RngStream(0));
  require(reference.params.names() == ckpt.params.names(),
          path.string() + ": parameter set does not match its declared dims");
  for (const auto& [name, p] : reference.params)
    require(p.value.shape() == ckpt.params.at(name).value.shape(),
            path.string() + ": shape mismatch for " + name);
  ViTClassifier clf = reference;
  clf.params = std::move(ckpt.params);
  return clf;
}

}  // namespace fedmae
