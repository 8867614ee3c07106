#include "fedmae/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "fedmae/error.hpp"

namespace fedmae {

const std::set<std::string>& PipelineConfig::keys() {
  static const std::set<std::string> k = [] {
    std::set<std::string> s = FedRunConfig::keys();
    s.insert({"dataset", "test_dataset", "server_dataset", "per_class", "test_per_class",
              "num_classes", "noise", "channels", "height", "width", "alpha", "depth", "p_pre",
              "source", "shuffle_order", "label_fraction", "finetune_epochs", "finetune_batch",
              "finetune_lr", "finetune_weight_decay", "server_images", "refine_epochs",
              "refine_batch", "refine_lr", "heldout_images", "dump_rows", "oracle_clients",
              "oracle_d", "oracle_n", "oracle_m", "oracle_p", "oracle_semantics",
              "oracle_gd_steps"});
    return s;
  }();
  return k;
}

void PipelineConfig::validate() const {
  fed.validate();
  require(depth >= 1, "depth must be >= 1");
  require(p_pre <= depth, "p_pre must not exceed depth");
  require(label_fraction > 0.0 && label_fraction <= 1.0, "label_fraction must be in (0, 1]");
  require(alpha >= 0.0, "alpha must be non-negative");
  require(synth.per_class >= 1 && synth.num_classes >= 2, "need per_class >= 1 and >= 2 classes");
  require(dataset.empty() == test_dataset.empty(),
          "dataset and test_dataset must be given together");
  require(server_images == 0 || dataset.empty() || !server_dataset.empty(),
          "server_images with a file dataset needs server_dataset");
}

PipelineConfig PipelineConfig::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown(keys());
  auto size = [&](const std::string& key, std::size_t fallback) {
    const auto v = cfg.get_int(key, static_cast<std::int64_t>(fallback));
    require(v >= 0, "config: " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  PipelineConfig c;
  c.fed = FedRunConfig::from_config(cfg, keys());
  c.seed = c.fed.seed;
  c.dataset = cfg.get_string("dataset", "");
  c.test_dataset = cfg.get_string("test_dataset", "");
  c.server_dataset = cfg.get_string("server_dataset", "");
  c.synth.per_class = size("per_class", c.synth.per_class);
  c.synth.num_classes = size("num_classes", c.synth.num_classes);
  c.synth.noise = cfg.get_double("noise", c.synth.noise);
  c.synth.channels = size("channels", c.synth.channels);
  c.synth.height = size("height", c.synth.height);
  c.synth.width = size("width", c.synth.width);
  c.test_per_class = size("test_per_class", c.test_per_class);
  c.alpha = cfg.get_double("alpha", c.alpha);

  c.depth = size("depth", c.depth);
  const std::string p = cfg.get_string("p_pre", "depth");
  c.p_pre = p == "depth" ? c.depth : static_cast<std::size_t>(parse_int(p, "p_pre"));
  c.source = cfg.get_string("source", "");
  c.shuffle_order = cfg.get_bool("shuffle_order", false);
  c.label_fraction = cfg.get_double("label_fraction", c.label_fraction);
  c.finetune.epochs = size("finetune_epochs", c.finetune.epochs);
  c.finetune.batch_size = size("finetune_batch", c.finetune.batch_size);
  c.finetune.optimizer = c.fed.optimizer;
  c.finetune.optimizer.lr = cfg.get_double("finetune_lr", 1e-3);
  c.finetune.optimizer.weight_decay =
      cfg.get_double("finetune_weight_decay", c.fed.optimizer.weight_decay);

  c.server_images = size("server_images", c.server_images);
  c.refine.epochs = size("refine_epochs", c.refine.epochs);
  c.refine.batch_size = size("refine_batch", c.fed.batch_size);
  c.refine.mask_ratio = c.fed.mask_ratio;
  c.refine.optimizer = c.fed.optimizer;
  c.refine.optimizer.lr = cfg.get_double("refine_lr", c.fed.optimizer.lr);

  c.heldout_images = size("heldout_images", c.heldout_images);
  c.dump_rows = size("dump_rows", c.dump_rows);

  if (cfg.has("oracle_clients")) {
    c.oracle.clients.clear();
    for (const auto& v : cfg.get_list("oracle_clients"))
      c.oracle.clients.push_back(static_cast<std::size_t>(parse_int(v, "oracle_clients")));
  }
  c.oracle.d = size("oracle_d", c.oracle.d);
  c.oracle.n = size("oracle_n", c.oracle.n);
  c.oracle.m = size("oracle_m", c.oracle.m);
  c.oracle.p = cfg.get_double("oracle_p", c.oracle.p);
  const std::string sem = cfg.get_string("oracle_semantics", "bernoulli");
  require(sem == "bernoulli" || sem == "fixed", "oracle_semantics must be bernoulli or fixed");
  c.oracle.semantics = sem == "fixed" ? MaskSemantics::FixedCount : MaskSemantics::Bernoulli;
  c.oracle.gd_steps = size("oracle_gd_steps", c.oracle.gd_steps);
  c.oracle.seed = c.seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

ImageBatch synth_count(SynthSpec spec, std::size_t count, const RngStream& rng) {
  if (count == 0) return ImageBatch{};
  spec.per_class = (count + spec.num_classes - 1) / spec.num_classes;
  RngStream r = rng;
  ImageBatch all = synth_dataset(spec, r);
  std::vector<std::size_t> ids(count);
  std::iota(ids.begin(), ids.end(), 0);
  return all.subset(ids);
}

}  // namespace

PipelineData make_pipeline_data(const PipelineConfig& cfg) {
  cfg.validate();
  const RngStream root(cfg.seed);
  PipelineData d;
  if (cfg.dataset.empty()) {
    RngStream train_rng = root.derive("train-data", 0);
    d.train = synth_dataset(cfg.synth, train_rng);
    SynthSpec ts = cfg.synth;
    ts.per_class = cfg.test_per_class;
    RngStream test_rng = root.derive("test-data", 0);
    d.test = synth_dataset(ts, test_rng);
    d.server = synth_count(cfg.synth, cfg.server_images, root.derive("server-data", 0));
  } else {
    d.train = load_dataset(cfg.dataset);
    d.test = load_dataset(cfg.test_dataset);
    if (cfg.server_images > 0) {
      ImageBatch all = load_dataset(cfg.server_dataset);
      require(all.n >= cfg.server_images, "server_dataset has fewer images than server_images");
      std::vector<std::size_t> ids(cfg.server_images);
      std::iota(ids.begin(), ids.end(), 0);
      d.server = all.subset(ids);
    }
  }
  require(d.train.has_labels() && d.test.has_labels(), "training and test sets need labels");
  require(d.train.num_classes == d.test.num_classes, "training and test sets disagree on classes");
  d.geometry = {d.train.channels, d.train.height, d.train.width, cfg.fed.patch};
  d.geometry.validate();
  d.train_patches = patchify(d.train, cfg.fed.patch);
  d.test_patches = patchify(d.test, cfg.fed.patch);
  if (d.server.n > 0) d.server_patches = patchify(d.server, cfg.fed.patch);

  PartitionSpec ps{cfg.fed.clients, cfg.alpha, cfg.seed};
  RngStream part_rng = root.derive("partition", 0);
  d.shards = partition(d.train.labels, d.train.num_classes, ps, part_rng);
  return d;
}

PretrainResult pretrain_sources(const PipelineConfig& cfg, const PipelineData& data) {
  ServerState st = run_pretraining(cfg.fed, data.train_patches, data.shards);
  PretrainResult r;
  if (st.mode == FedMode::Relay)
    for (auto& l : st.lineages) r.sources.push_back(std::move(l.model));
  else
    r.sources.push_back(std::move(st.global));
  r.final_loss = cfg.fed.rounds ? st.metrics.mean_loss(cfg.fed.rounds) : 0.0;
  r.metrics = std::move(st.metrics);
  return r;
}

MaeModel template_source(const PipelineConfig& cfg, const ImageGeometry& geometry) {
  MaeDims dims = cfg.fed.model;
  dims.depth = 1;
  return init_mae(geometry, dims, RngStream(cfg.seed).derive("init", 0));
}

CascadeSpec cascade_spec(const PipelineConfig& cfg) {
  CascadeSpec cs;
  cs.depth = cfg.depth;
  cs.pretrained = cfg.p_pre;
  cs.parse_source(cfg.source);
  cs.init_seed = cfg.seed;
  cs.shuffle_order = cfg.shuffle_order;
  cs.order_seed = cfg.seed;
  return cs;
}

ViTClassifier classifier_from_mae(const MaeModel& mae, std::size_t num_classes,
                                  std::uint64_t init_seed) {
  ViTClassifier clf = init_classifier(mae.geometry, mae.dims, num_classes, RngStream(init_seed));
  for (const auto& [name, p] : mae.params)
    if (name.rfind("enc.", 0) == 0) clf.params.at(name).value = p.value;
  clf.params.zero_grad();
  return clf;
}

DownstreamResult run_downstream(const PipelineConfig& cfg, const PipelineData& data,
                                const std::vector<MaeModel>& sources) {
  const RngStream root(cfg.seed);
  const CascadeSpec cs = cascade_spec(cfg);
  std::vector<MaeModel> templ;
  std::span<const MaeModel> src(sources);
  if (src.empty()) {
    require(cfg.p_pre == 0, "pretrained blocks requested but no source models were given");
    templ.push_back(template_source(cfg, data.geometry));
    src = templ;
  }
  const std::size_t classes = data.train.num_classes;
  DownstreamResult r;
  ViTClassifier clf;
  if (cfg.server_images > 0 && cfg.refine.epochs > 0) {
    MaeModel mae = assemble_multiblock_mae(src, cs);
    r.refine_loss = server_refine(mae, data.server_patches, cfg.refine, root.derive("refine", 0));
    clf = classifier_from_mae(mae, classes, cs.init_seed);
  } else {
    clf = cascade_assemble(src, cs, classes);
  }
  const FinetuneCurve curve = finetune(clf, data.train_patches, data.train.labels,
                                       cfg.label_fraction, cfg.finetune, root.derive("finetune", 0));
  r.final_train_loss = curve.loss.empty() ? 0.0 : curve.loss.back();
  r.accuracy = evaluate(clf, data.test_patches, data.test.labels);
  return r;
}

}  // namespace fedmae
