#pragma once

// Alternating task / alignment fine-tuning of adapter sets.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midalign/corpus.hpp"
#include "midalign/model.hpp"

namespace midalign::train {

struct TrainConfig {
  double peak_lr = 5e-4;
  double warmup_ratio = 0.03;
  int effective_batch = 128;
  int micro_batch = 32;
  int contrastive_batch = 32;  // n in the contrastive loss; negatives come from this mini-batch
  double tau = 0.1;
  std::set<int> align_layers;  // empty: resolved to the middle layer L / 2
  int max_epochs = 5;
  int eval_every = 200;
  int patience = 5;
  int task_steps = 1;  // alternation ratio task:align
  int align_steps = 1;
  bool symmetric_alignment = false;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long max_steps = 0;  // hard cap on optimizer steps, 0 = none
  std::uint64_t seed = 0;

  /// Checks the invariants against a model with `num_layers` blocks.
  void validate(int num_layers) const;
  std::set<int> resolved_align_layers(int num_layers) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class Objective { kTask, kAlign };
const char* to_string(Objective o);

struct StepRecord {
  long step = 0;
  Objective objective = Objective::kTask;
  double loss = 0.0;
  double lr = 0.0;
};

struct EvalRecord {
  long step = 0;
  std::optional<double> dev_task_loss;
  std::optional<double> dev_align_loss;
  int checkpoint_id = 0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  int best_checkpoint = -1;  // index into evals
  bool stopped_early = false;
  long planned_steps = 0;

  std::string to_jsonl() const;
};

struct TrainData {
  std::vector<corpus::TaskExample> task;
  std::vector<corpus::SentencePair> align;
  std::vector<corpus::TaskExample> dev_task;
  std::vector<corpus::SentencePair> dev_align;
};

struct TrainHooks {
  /// Replaces the dev task loss computation (receives the 1-based eval index).
  std::function<double(const AdapterSet<float>&, int)> dev_task_loss;
  /// Called after every optimizer step.
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  AdapterSet<float> adapters;  // best checkpoint
  TrainLog log;
};

/// Optimizer steps alternate `task_steps` task steps with `align_steps`
/// alignment steps. A task step averages the loss of one effective batch of
/// examples (accumulated over micro-batches); an alignment step averages
/// effective_batch / contrastive_batch contrastive mini-batches. Either
/// objective is skipped when its data is empty.
TrainResult train(const Transformer<float>& model, AdapterSet<float> adapters,
                  const TrainData& data, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Mean task loss of `examples` in eval mode.
double evaluate_task_loss(const Transformer<float>& model, const AdapterSet<float>* adapters,
                          const std::vector<corpus::TaskExample>& examples, int batch_size = 64);

/// Mean alignment loss over contrastive mini-batches of `pairs` in eval mode.
double evaluate_alignment_loss(const Transformer<float>& model, const AdapterSet<float>* adapters,
                               const std::vector<corpus::SentencePair>& pairs,
                               const TrainConfig& config, int num_layers);

/// Full-parameter causal language modelling on raw sentences, used to give
/// the frozen base model general sequence abilities before adapter tuning.
struct PretrainConfig {
  double peak_lr = 3e-3;
  double warmup_ratio = 0.05;
  int batch_size = 32;
  long steps = 2000;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainLog {
  std::vector<double> losses;
};

PretrainLog pretrain(Transformer<float>& model, const std::vector<std::vector<TokenId>>& documents,
                     const PretrainConfig& config);

}  // namespace midalign::train
