// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dimple/model.hpp"
#include "dimple/synth_data.hpp"

namespace dimple {

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  Objective objective = Objective::dimple;
  PromptMode mode = PromptMode::coupled;
  LossWeights loss;
  EncoderConfig encoder;
  KernelSpec kernel;
  bool use_cmi = true;         // false drops the independence term entirely
  bool train_encoders = true;  // false freezes both transformer stacks
  double class_token_scale = 1.0;  // norm of the class token embeddings
  HeadInit head_init = HeadInit::gaussian;

  void validate() const;
};

/// Settings matching the few-shot protocol: 16 shots per class, batch 4,
/// 5 epochs, lr 0.0035.
void apply_paper_regime(TrainConfig& cfg, TaskSpec& task);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double ce = 0.0;
  double spurious = 0.0;
  double cmi = 0.0;
  double total = 0.0;
};

struct GroupReport {
  double avg_acc = 0.0;    // sample-weighted accuracy over all samples
  double worst_acc = 0.0;  // minimum over non-empty groups
  std::map<int, double> per_group;
  std::map<int, std::size_t> group_sizes;
  std::vector<std::string> warnings;
};

struct RunMetrics {
  std::vector<StepRecord> steps;
  std::vector<StepRecord> epochs;  // per-epoch means
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
  double avg_group_acc = 0.0;
  double worst_group_acc = 0.0;
  std::map<int, double> group_acc;
  std::map<std::string, double> shift_acc;
  std::vector<std::string> warnings;
};

double harmonic_mean(double base, double novel);
double accuracy(std::span<const int> predictions, std::span<const int> labels);
/// Per-group accuracy over groups 0..num_groups-1; empty groups are skipped.
/// eval_groups adds warnings for empty groups of the evaluated classes.
GroupReport group_accuracy(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> groups, std::size_t num_groups);

/// Evaluation parallelism: DIMPLE_THREADS if set, else hardware threads.
std::size_t eval_threads();

/// Builds a fresh model for `task` using the "init" substream of cfg.seed.
Model init_model(const TrainConfig& cfg, const SyntheticTask& task);

/// Plain (optionally momentum) SGD over seeded shuffles of the training split.
/// Throws DivergedRunError on a non-finite loss.
Model train(const TrainConfig& cfg, const SyntheticTask& task, RunMetrics& metrics);
/// Continues training an existing model in place.
void train_model(Model& model, const TrainConfig& cfg, const SyntheticTask& task, RunMetrics& metrics);

struct BaseNovelReport {
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
};
BaseNovelReport eval_base_novel(const Model& model, const LabeledBatch& base_test, const LabeledBatch& novel_test,
                                std::span<const int> base, std::span<const int> novel);
GroupReport eval_groups(const Model& model, const LabeledBatch& test, std::span<const int> class_ids);
/// Accuracy on the shifted split and on test_id under each shift kind.
std::map<std::string, double> eval_shift(const Model& model, const SyntheticTask& task, std::span<const int> class_ids);

/// Fills the evaluation fields of `metrics`.
void evaluate(const Model& model, const SyntheticTask& task, RunMetrics& metrics);

nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const RunMetrics& metrics);
void write_run_json(const std::string& path, const TrainConfig& cfg, const TaskSpec& task, const RunMetrics& metrics);
void write_steps_csv(const std::string& path, const RunMetrics& metrics);

/// CSV with one row per (sample, modality, component) and per (class, modality, component).
void export_embeddings(const Model& model, const LabeledBatch& batch, std::span<const int> class_ids,
                       const std::string& path);

struct GridRanges {
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<std::size_t> prompt_len;
  std::vector<std::size_t> prompt_depth;
};

struct GridRow {
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t prompt_len = 0;
  std::size_t prompt_depth = 0;
  std::string status;  // "ok" or "skipped: <reason>"
  RunMetrics metrics;
};

/// Runs every cell of the cross product from the same seed and returns rows
/// sorted by hm (descending); skipped cells follow in grid order.
std::vector<GridRow> gridsearch(const TrainConfig& base, const SyntheticTask& task, const GridRanges& ranges,
                                std::size_t threads = 1);
void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows);

}  // namespace dimple
