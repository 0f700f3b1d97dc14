#pragma once

// Experiment configuration, recipes and the on-disk workspace shared by the
// command-line tool and the acceptance suite.
//
// Workspace layout under an output directory:
//   config.json                 resolved configuration
//   corpus/                     corpus archive
//   base.ckpt                   pretrained base model
//   logs/pretrain.jsonl         pretraining losses
//   variants.json               trained variants of the recipe
//   adapters/<variant>.ckpt     best adapter checkpoint per variant
//   logs/<variant>.jsonl        TrainLog per variant
//   reports/<name>.retrieval.{json,csv}
//   reports/<name>.task.{json,csv}
//   reports/sweep.csv           merge weight sweep (merge recipe)
//   summary.json, summary.csv, layers.csv, placement.csv

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "midalign/corpus.hpp"
#include "midalign/evaluation.hpp"
#include "midalign/merging.hpp"
#include "midalign/model.hpp"
#include "midalign/retrieval.hpp"
#include "midalign/train.hpp"

namespace midalign::experiment {

struct CorpusSection {
  int num_sentences = 4000;
  std::vector<std::string> languages = {"l0", "l1", "l2", "l3", "l4", "l5"};
  corpus::GrammarConfig grammar;
  corpus::SplitFractions splits;
};

struct PretrainSection {
  train::PretrainConfig optimizer;
  corpus::PretrainingMix mix;
};

struct AdapterSection {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.1;
};

struct TaskSection {
  std::vector<std::string> supervised = {"l0", "l1"};
  std::vector<std::string> aligned = {"l2", "l3"};
  std::string pivot = "l0";  // alignment target language
  std::size_t align_cap = 300;
  std::string eval_split = "test";
  std::size_t max_eval_sentences = 200;
  std::string decoding = "free";
};

struct RetrievalSection {
  int k = retrieval::kDefaultNeighbours;
  std::vector<std::string> languages;  // empty: every corpus language
  std::string split = "test";
  std::size_t max_sentences = 200;
};

struct MergeSection {
  std::vector<double> grid = merging::kDefaultGrid;
  std::string space = "factor";
  std::size_t max_dev_sentences = 200;
};

/// Desk-scale fine-tuning defaults.
train::TrainConfig default_train_config();
train::PretrainConfig default_pretrain_config();

struct ExperimentConfig {
  std::string recipe = "mid-align";
  std::uint64_t seed = 0;
  CorpusSection corpus;
  ModelConfig model;  // vocab_size 0 is filled in from the corpus
  PretrainSection pretrain{default_pretrain_config(), {}};
  AdapterSection adapters;
  train::TrainConfig train = default_train_config();
  TaskSection task;
  RetrievalSection retrieval;
  MergeSection merge;

  /// Throws ConfigError on unknown recipes, languages or layers.
  void validate() const;
  /// Copy with every seed set to `seed` and the vocabulary size derived from
  /// the corpus layout.
  ExperimentConfig resolved() const;
  std::vector<std::string> retrieval_languages() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Unknown keys at any level are configuration errors.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

/// One fine-tuning run of a recipe.
struct Variant {
  std::string name;
  bool task = true;
  std::vector<std::pair<std::string, std::string>> align_pairs;
  std::set<int> align_layers;

  std::vector<std::string> aligned_languages() const;
};

void to_json(nlohmann::json& j, const Variant& v);
void from_json(const nlohmann::json& j, Variant& v);

const std::vector<std::string>& recipe_names();

/// Variants trained by a recipe. Every recipe other than baseline-sft also
/// trains the "sft" reference. resource-level ranks the candidate languages
/// by their retrieval accuracy against the pivot in `untrained`.
std::vector<Variant> recipe_variants(const ExperimentConfig& config,
                                     const retrieval::RetrievalReport* untrained = nullptr);

/// Language groups used to score a variant's task report.
evaluation::LanguageGroups groups_for(const ExperimentConfig& config, const Variant& variant);

corpus::MultiwayCorpus make_corpus(const ExperimentConfig& config);
Transformer<float> pretrain_base(const ExperimentConfig& config, const corpus::MultiwayCorpus& corpus,
                                 train::PretrainLog* log = nullptr);
AdapterSet<float> initial_adapters(const ExperimentConfig& config);

train::TrainResult train_variant(const ExperimentConfig& config, const Transformer<float>& model,
                                 const corpus::MultiwayCorpus& corpus, const Variant& variant);

retrieval::RetrievalReport evaluate_retrieval(const ExperimentConfig& config, const Transformer<float>& model,
                                              const AdapterSet<float>* adapters,
                                              const corpus::MultiwayCorpus& corpus);

evaluation::TaskReport evaluate_task(const ExperimentConfig& config, const Transformer<float>& model,
                                     const AdapterSet<float>* adapters, const corpus::MultiwayCorpus& corpus,
                                     const evaluation::LanguageGroups& groups);

/// Mean dev-split F1 over the supervised languages (merge weight selection).
double dev_task_f1(const ExperimentConfig& config, const Transformer<float>& model,
                   const AdapterSet<float>& adapters, const corpus::MultiwayCorpus& corpus);

/// Paths inside a workspace directory.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path base() const { return root / "base.ckpt"; }
  std::filesystem::path variants() const { return root / "variants.json"; }
  std::filesystem::path adapters(const std::string& name) const { return root / "adapters" / (name + ".ckpt"); }
  std::filesystem::path log(const std::string& name) const { return root / "logs" / (name + ".jsonl"); }
  std::filesystem::path report(const std::string& name, const std::string& kind, const std::string& ext) const {
    return root / "reports" / (name + "." + kind + "." + ext);
  }
};

using Progress = std::function<void(const std::string&)>;

/// Loads the corpus archive, or generates and saves it.
corpus::MultiwayCorpus ensure_corpus(const ExperimentConfig& config, const Workspace& ws,
                                     const Progress& progress = {});
/// Loads base.ckpt, or pretrains and saves it with its loss log.
Transformer<float> ensure_base(const ExperimentConfig& config, const Workspace& ws,
                               const corpus::MultiwayCorpus& corpus, const Progress& progress = {});

/// Saves the zero-B "untrained" adapters, trains every recipe variant and
/// writes adapters, logs and variants.json.
void train_recipe(const ExperimentConfig& config, const Workspace& ws, const Transformer<float>& model,
                  const corpus::MultiwayCorpus& corpus, const Progress& progress = {});

/// "untrained", every variant of variants.json and "merged" when its
/// adapters exist.
std::vector<Variant> workspace_targets(const Workspace& ws);

/// Writes reports/<name>.retrieval.{json,csv}.
void write_retrieval_report(const Workspace& ws, const std::string& name, const retrieval::RetrievalReport& report);
/// Writes reports/<name>.task.{json,csv}.
void write_task_report(const Workspace& ws, const std::string& name, const evaluation::TaskReport& report);

/// Retrieval and task reports for every workspace target.
void evaluate_workspace(const ExperimentConfig& config, const Workspace& ws, const Transformer<float>& model,
                        const corpus::MultiwayCorpus& corpus, const Progress& progress = {});

/// Sweeps merge weights of adapters `task` and `align` on the dev metric,
/// writes reports/sweep.csv and adapters/merged.ckpt.
merging::SweepResult merge_workspace(const ExperimentConfig& config, const Workspace& ws,
                                     const Transformer<float>& model, const corpus::MultiwayCorpus& corpus,
                                     const std::string& task = "sft", const std::string& align = "align-only");

/// Joins variants.json and the reports into summary.json, summary.csv,
/// layers.csv and (for placement variants) placement.csv.
nlohmann::json write_report(const Workspace& ws);

/// gen, pretrain, train, merge (merge recipe), evaluate and report.
nlohmann::json run_recipe(const ExperimentConfig& config, const Workspace& ws, const Progress& progress = {});

}  // namespace midalign::experiment
