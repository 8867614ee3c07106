#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedmae/cascade.hpp"
#include "fedmae/config.hpp"
#include "fedmae/data.hpp"
#include "fedmae/fed.hpp"
#include "fedmae/linear_oracle.hpp"

namespace fedmae {

// Everything one pretrain -> cascade -> finetune -> evaluate run needs. Read
// from a flat key/value config; every artifact is a function of it.
struct PipelineConfig {
  // Data. Empty paths select the synthetic task.
  std::string dataset;
  std::string test_dataset;
  std::string server_dataset;
  SynthSpec synth;  // per_class counts training images
  std::size_t test_per_class = 100;
  double alpha = 0.0;

  FedRunConfig fed;

  // Downstream.
  std::size_t depth = 1;
  std::size_t p_pre = 1;
  std::string source;  // "" (lineage order), "0,2,1" or "replicate:k"
  bool shuffle_order = false;
  double label_fraction = 0.1;
  TrainSpec finetune;

  // Server refinement of the assembled multi-block MAE.
  std::size_t server_images = 0;
  TrainSpec refine;

  // Held-out reconstruction.
  std::size_t heldout_images = 128;
  std::size_t dump_rows = 8;

  OracleSweepSpec oracle;

  std::uint64_t seed = 0;

  void validate() const;
  static const std::set<std::string>& keys();
  // "p_pre = depth" resolves to the depth value.
  static PipelineConfig from_config(const KeyValueConfig& cfg);
};

struct PipelineData {
  ImageGeometry geometry;
  ImageBatch train;
  ImageBatch test;
  ImageBatch server;
  PatchSequence train_patches;
  PatchSequence test_patches;
  PatchSequence server_patches;
  std::vector<ClientShard> shards;
};

// Synthetic sets use the streams ("train-data", "test-data", "server-data")
// of RngStream(seed); the partition uses ("partition", 0).
PipelineData make_pipeline_data(const PipelineConfig& cfg);

// Runs federated pretraining and returns the lineage models (relay) or the
// single global model (fedavg), plus the final-round mean loss.
struct PretrainResult {
  std::vector<MaeModel> sources;
  double final_loss = 0.0;
  MetricsLog metrics;
};
PretrainResult pretrain_sources(const PipelineConfig& cfg, const PipelineData& data);

// Fresh depth-1 MAE with the configured dims, used as the dimension template
// when no pretraining is needed.
MaeModel template_source(const PipelineConfig& cfg, const ImageGeometry& geometry);

CascadeSpec cascade_spec(const PipelineConfig& cfg);

// Classifier whose encoder is copied from an (assembled, possibly refined)
// MAE; norm and head are fresh from RngStream(init_seed).
ViTClassifier classifier_from_mae(const MaeModel& mae, std::size_t num_classes,
                                  std::uint64_t init_seed);

struct DownstreamResult {
  double accuracy = 0.0;
  double final_train_loss = 0.0;
  std::vector<double> refine_loss;
};
// assemble -> optional server refinement -> finetune -> evaluate.
DownstreamResult run_downstream(const PipelineConfig& cfg, const PipelineData& data,
                                const std::vector<MaeModel>& sources);

}  // namespace fedmae
