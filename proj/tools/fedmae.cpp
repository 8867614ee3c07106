#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedmae/cascade.hpp"
#include "fedmae/checkpoint.hpp"
#include "fedmae/error.hpp"
#include "fedmae/linear_oracle.hpp"
#include "fedmae/pipeline.hpp"
#include "fedmae/report.hpp"

namespace fs = std::filesystem;
using namespace fedmae;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitJob = 2;
constexpr int kExitIo = 3;

// Options shared by every subcommand: --config, --seed, --out and one
// --<key> flag per pipeline config key.
struct CommonOptions {
  std::string config;
  std::string out = ".";
  std::int64_t seed = -1;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key = value configuration file");
    app->add_option("--seed", seed, "root seed");
    app->add_option("--out", out, "output directory");
    for (const auto& key : PipelineConfig::keys()) {
      if (key == "seed") continue;
      app->add_option("--" + key, overrides[key], "config key " + key)->group("Config keys");
    }
  }

  KeyValueConfig load() const {
    KeyValueConfig cfg = config.empty() ? KeyValueConfig{} : KeyValueConfig::load(config);
    for (const auto& [k, v] : overrides)
      if (!v.empty()) cfg.set(k, v);
    if (seed >= 0) cfg.set("seed", std::to_string(seed));
    return cfg;
  }
};

std::vector<MaeModel> load_sources(const std::vector<std::string>& paths) {
  std::vector<MaeModel> out;
  for (const auto& p : paths) out.push_back(load_mae(p));
  return out;
}

int cmd_pretrain(const CommonOptions& opt) {
  KeyValueConfig cfg = opt.load();
  const fs::path out = opt.out;
  fs::create_directories(out);
  if (!cfg.has("checkpoint_dir")) cfg.set("checkpoint_dir", (out / "checkpoints").string());
  const PipelineConfig pc = PipelineConfig::from_config(cfg);
  const PipelineData data = make_pipeline_data(pc);
  write_partition_csv(out / "partition.csv", data.shards);
  const PretrainResult r = pretrain_sources(pc, data);
  r.metrics.write_csv(out / "metrics.csv");
  for (std::size_t i = 0; i < r.sources.size(); ++i)
    save_mae(out / ("source_" + std::to_string(i) + ".ckpt"), r.sources[i]);
  std::cout << "pretrained " << r.sources.size() << " model(s), final-round loss "
            << std::setprecision(6) << r.final_loss << "\n";
  return 0;
}

int cmd_cascade(const CommonOptions& opt, const std::vector<std::string>& source_paths, bool as_mae,
                std::size_t num_classes) {
  const KeyValueConfig cfg = opt.load();
  const PipelineConfig pc = PipelineConfig::from_config(cfg);
  const auto sources = load_sources(source_paths);
  require(!sources.empty(), "cascade: --sources is required");
  const CascadeSpec cs = cascade_spec(pc);
  const fs::path out = opt.out;
  fs::create_directories(out);
  if (as_mae) {
    const MaeModel m = assemble_multiblock_mae(sources, cs);
    save_mae(out / "cascade_mae.ckpt", m);
    const Footprint f = model_footprint(m);
    std::cout << "multi-block MAE depth " << cs.depth << ": " << f.params << " params, " << f.flops
              << " FLOPs per image\n";
  } else {
    const ViTClassifier clf = cascade_assemble(sources, cs, num_classes);
    save_classifier(out / "classifier.ckpt", clf);
    const Footprint f = model_footprint(clf);
    std::cout << "classifier depth " << cs.depth << " (" << cs.pretrained << " pretrained): "
              << f.params << " params, " << f.flops << " FLOPs per image\n";
  }
  return 0;
}

int cmd_finetune(const CommonOptions& opt, const std::string& model_path) {
  const KeyValueConfig cfg = opt.load();
  const PipelineConfig pc = PipelineConfig::from_config(cfg);
  const PipelineData data = make_pipeline_data(pc);
  ViTClassifier clf = load_classifier(model_path);
  require(clf.geometry == data.geometry, "finetune: model geometry does not match the data");
  require(clf.num_classes == data.train.num_classes,
          "finetune: model class count does not match the data");
  const FinetuneCurve curve = finetune(clf, data.train_patches, data.train.labels,
                                       pc.label_fraction, pc.finetune,
                                       RngStream(pc.seed).derive("finetune", 0));
  const double acc = evaluate(clf, data.test_patches, data.test.labels);
  const fs::path out = opt.out;
  fs::create_directories(out);
  save_classifier(out / "finetuned.ckpt", clf);
  std::ofstream curve_csv(out / "curve.csv");
  curve_csv << "epoch,loss,train_accuracy\n" << std::setprecision(17);
  for (std::size_t e = 0; e < curve.loss.size(); ++e)
    curve_csv << e << ',' << curve.loss[e] << ',' << curve.train_accuracy[e] << "\n";
  std::ofstream acc_csv(out / "accuracy.csv");
  acc_csv << "depth,p_pre,seed,label_fraction,accuracy\n" << std::setprecision(17)
          << clf.dims.depth << ',' << pc.p_pre << ',' << pc.seed << ',' << pc.label_fraction << ','
          << acc << "\n";
  if (!curve_csv || !acc_csv) throw IoError("failed writing results under " + out.string());
  std::cout << "test accuracy " << std::setprecision(4) << acc << "\n";
  return 0;
}

int cmd_oracle(const CommonOptions& opt) {
  const PipelineConfig pc = PipelineConfig::from_config(opt.load());
  const auto rows = run_oracle_sweep(pc.oracle);
  fs::create_directories(opt.out);
  write_oracle_csv(fs::path(opt.out) / "oracle.csv", rows);
  for (const auto& r : rows)
    std::cout << "K=" << r.K << " closed-form " << std::setprecision(8) << r.residual_closed_form
              << " gd " << r.residual_gd << "\n";
  return 0;
}

int cmd_reconstruct(const CommonOptions& opt, const std::string& fresh_path,
                    const std::string& pretrained_path) {
  const PipelineConfig pc = PipelineConfig::from_config(opt.load());
  const PipelineData data = make_pipeline_data(pc);
  const MaeModel fresh = load_mae(fresh_path);
  const MaeModel pre = load_mae(pretrained_path);
  std::vector<std::size_t> rows(std::min(std::max<std::size_t>(pc.dump_rows, 1), data.test.n));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  fs::create_directories(opt.out);
  const fs::path path = fs::path(opt.out) / "reconstruction.ppm";
  const auto dump = reconstruct_dump(fresh, pre, data.test.subset(rows), pc.fed.mask_ratio,
                                     RngStream(pc.seed).derive("dump-mask", 0), path);
  const RngStream eval_rng = RngStream(pc.seed).derive("heldout-mask", 0);
  std::cout << "wrote " << path.string() << " (" << dump.width << "x" << dump.height << ")\n"
            << "held-out masked loss: pretrained "
            << heldout_recon_loss(pre, data.test_patches, pc.fed.mask_ratio, eval_rng) << ", fresh "
            << heldout_recon_loss(fresh, data.test_patches, pc.fed.mask_ratio, eval_rng) << "\n";
  return 0;
}

int cmd_plan(const std::string& plan_path, const std::string& out, std::int64_t seed,
             std::size_t workers) {
  KeyValueConfig cfg = KeyValueConfig::load(plan_path);
  if (!out.empty()) cfg.set("out", out);
  if (seed >= 0) cfg.set("seeds", std::to_string(seed));
  if (workers > 0) cfg.set("workers", std::to_string(workers));
  const ExperimentPlan plan = ExperimentPlan::parse(cfg);
  const PlanOutcome o = run_plan(plan);
  std::cout << o.total << " jobs: " << o.ran << " ran, " << o.skipped << " already complete, "
            << o.failed << " failed\n";
  std::ifstream txt(plan.out / "summary.txt");
  std::cout << txt.rdbuf();
  return o.exit_code();
}

int cmd_summarize(const std::string& dir) {
  const Summary s = summarize(dir);
  std::ifstream txt(fs::path(dir) / "summary.txt");
  std::cout << txt.rdbuf();
  return s.missing_jobs.empty() ? 0 : kExitJob;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated one-block MAE pretraining, cascading and evaluation"};
  app.require_subcommand(1);

  CommonOptions pretrain_opt, cascade_opt, finetune_opt, oracle_opt, recon_opt;
  auto* pretrain = app.add_subcommand("pretrain", "federated pretraining of one-block MAEs");
  pretrain_opt.attach(pretrain);

  auto* cascade = app.add_subcommand("cascade", "stack pretrained blocks into a deeper model");
  cascade_opt.attach(cascade);
  std::vector<std::string> source_paths;
  bool as_mae = false;
  std::size_t num_classes = 4;
  cascade->add_option("--sources", source_paths, "MAE checkpoints, in lineage order")->delimiter(',');
  cascade->add_flag("--mae", as_mae, "assemble a multi-block MAE instead of a classifier");
  cascade->add_option("--classes", num_classes, "classifier output classes");

  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune and evaluate a classifier");
  finetune_opt.attach(finetune_cmd);
  std::string model_path;
  finetune_cmd->add_option("--model", model_path, "classifier checkpoint")->required();

  auto* oracle = app.add_subcommand("oracle", "closed-form vs gradient-descent linear oracle");
  oracle_opt.attach(oracle);

  auto* recon = app.add_subcommand("reconstruct", "write a reconstruction grid (PPM)");
  recon_opt.attach(recon);
  std::string fresh_path, pretrained_path;
  recon->add_option("--fresh", fresh_path, "fresh MAE checkpoint")->required();
  recon->add_option("--pretrained", pretrained_path, "pretrained MAE checkpoint")->required();

  auto* plan = app.add_subcommand("plan", "run an experiment plan");
  std::string plan_path, plan_out;
  std::int64_t plan_seed = -1;
  std::size_t plan_workers = 0;
  plan->add_option("--config,plan_file", plan_path, "plan file")->required();
  plan->add_option("--out", plan_out, "override the plan's output directory");
  plan->add_option("--seed", plan_seed, "run a single seed");
  plan->add_option("--workers", plan_workers, "parallel jobs");

  auto* summ = app.add_subcommand("summarize", "medians and IQRs of a finished plan");
  std::string summ_dir;
  summ->add_option("--out,dir", summ_dir, "plan output directory")->required();
  summ->add_option("--config", plan_path, "ignored; accepted for uniformity");
  summ->add_option("--seed", plan_seed, "ignored; accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*pretrain) return cmd_pretrain(pretrain_opt);
    if (*cascade) return cmd_cascade(cascade_opt, source_paths, as_mae, num_classes);
    if (*finetune_cmd) return cmd_finetune(finetune_opt, model_path);
    if (*oracle) return cmd_oracle(oracle_opt);
    if (*recon) return cmd_reconstruct(recon_opt, fresh_path, pretrained_path);
    if (*plan) return cmd_plan(plan_path, plan_out, plan_seed, plan_workers);
    if (*summ) return cmd_summarize(summ_dir);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kExitJob;
  }
  return 0;
}
