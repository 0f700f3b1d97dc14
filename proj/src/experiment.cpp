#include "midalign/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "midalign/checkpoint.hpp"
#include "midalign/errors.hpp"

namespace midalign::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(section + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get(const json& j, const std::string& section, const char* key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

void require_language(const std::vector<std::string>& languages, const std::string& tag, const char* what) {
  if (std::find(languages.begin(), languages.end(), tag) == languages.end()) {
    throw ConfigError(std::string(what) + ": unknown language '" + tag + "'");
  }
}

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

std::string join_layers(const std::set<int>& layers) {
  std::string out;
  for (int l : layers) out += (out.empty() ? "" : " ") + std::to_string(l);
  return out;
}

void emit(const Progress& progress, const std::string& message) {
  if (progress) progress(message);
}

std::vector<corpus::SentencePair> dev_alignment_pairs(const corpus::MultiwayCorpus& corpus,
                                                      const std::vector<std::pair<std::string, std::string>>& pairs,
                                                      std::size_t cap) {
  std::vector<corpus::SentencePair> out;
  for (const auto& [src, tgt] : pairs) {
    std::size_t taken = 0;
    for (auto id : corpus.split("dev")) {
      if (taken++ >= cap) break;
      out.push_back({src, tgt, id, corpus.sentence(id, src), corpus.sentence(id, tgt)});
    }
  }
  return out;
}

}  // namespace

train::TrainConfig default_train_config() {
  train::TrainConfig c;
  c.peak_lr = 3e-3;
  c.effective_batch = 64;
  c.micro_batch = 32;
  c.contrastive_batch = 32;
  c.max_epochs = 8;
  c.eval_every = 25;
  c.patience = 5;
  return c;
}

train::PretrainConfig default_pretrain_config() {
  train::PretrainConfig c;
  c.steps = 6000;
  c.peak_lr = 3e-3;
  c.batch_size = 32;
  return c;
}

const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names = {"baseline-sft", "mid-align", "placement",
                                                 "resource-level", "merge", "language-generalization"};
  return names;
}

void ExperimentConfig::validate() const {
  const auto& names = recipe_names();
  if (std::find(names.begin(), names.end(), recipe) == names.end()) {
    throw ConfigError("unknown recipe '" + recipe + "'");
  }
  const auto& langs = corpus.languages;
  if (langs.size() < 2) throw ConfigError("corpus: need at least two languages");
  if (std::set<std::string>(langs.begin(), langs.end()).size() != langs.size()) {
    throw ConfigError("corpus: duplicate language tags");
  }
  if (corpus.num_sentences < 1) throw ConfigError("corpus: num_sentences must be positive");
  corpus.grammar.validate();
  if (model.num_layers < 2 || model.num_layers % 2 != 0) {
    throw ConfigError("model: num_layers must be even and at least 2 for the even-layer aggregate");
  }
  if (task.supervised.empty()) throw ConfigError("task: supervised languages must not be empty");
  for (const auto& l : task.supervised) require_language(langs, l, "task.supervised");
  for (const auto& l : task.aligned) {
    require_language(langs, l, "task.aligned");
    if (l == task.pivot) throw ConfigError("task.aligned: pivot '" + l + "' cannot be aligned to itself");
  }
  require_language(langs, task.pivot, "task.pivot");
  if (task.align_cap < 1) throw ConfigError("task: align_cap must be at least 1");
  evaluation::parse_decoding(task.decoding);
  for (const auto& l : retrieval.languages) require_language(langs, l, "retrieval.languages");
  if (!retrieval.languages.empty() && retrieval.languages.size() < 2) {
    throw ConfigError("retrieval: need at least two languages");
  }
  if (retrieval.k < 1) throw ConfigError("retrieval: k must be at least 1");
  if (merge.grid.empty()) throw ConfigError("merge: grid must not be empty");
  for (double w : merge.grid) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("merge: grid weights must lie in [0, 1]");
  }
  merging::parse_merge_space(merge.space);
  if (adapters.rank < 1) throw ConfigError("adapters: rank must be at least 1");
  if (adapters.dropout < 0.0 || adapters.dropout >= 1.0) throw ConfigError("adapters: dropout must lie in [0, 1)");
  train.validate(model.num_layers);
  if (recipe == "resource-level" || recipe == "language-generalization" || recipe == "mid-align" ||
      recipe == "placement" || recipe == "merge") {
    if (task.aligned.empty()) throw ConfigError("recipe '" + recipe + "' needs task.aligned languages");
  }
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig c = *this;
  c.train.seed = seed;
  c.pretrain.optimizer.seed = seed;
  c.model.vocab_size = corpus::kFirstSlotLabel + corpus.grammar.num_slots +
                       static_cast<int>(corpus.languages.size()) * corpus.grammar.base_vocab_size;
  c.validate();
  c.model.validate();
  return c;
}

std::vector<std::string> ExperimentConfig::retrieval_languages() const {
  return retrieval.languages.empty() ? corpus.languages : retrieval.languages;
}

void to_json(json& j, const ExperimentConfig& c) {
  json pretrain = c.pretrain.optimizer;
  pretrain["parallel_fraction"] = c.pretrain.mix.parallel_fraction;
  pretrain["copy_documents"] = c.pretrain.mix.copy_documents;
  j = {{"recipe", c.recipe},
       {"seed", c.seed},
       {"corpus",
        {{"num_sentences", c.corpus.num_sentences},
         {"languages", c.corpus.languages},
         {"grammar", c.corpus.grammar},
         {"splits", c.corpus.splits}}},
       {"model", c.model},
       {"pretrain", pretrain},
       {"adapters", {{"rank", c.adapters.rank}, {"alpha", c.adapters.alpha}, {"dropout", c.adapters.dropout}}},
       {"train", c.train},
       {"task",
        {{"supervised", c.task.supervised},
         {"aligned", c.task.aligned},
         {"pivot", c.task.pivot},
         {"align_cap", c.task.align_cap},
         {"eval_split", c.task.eval_split},
         {"max_eval_sentences", c.task.max_eval_sentences},
         {"decoding", c.task.decoding}}},
       {"retrieval",
        {{"k", c.retrieval.k},
         {"languages", c.retrieval.languages},
         {"split", c.retrieval.split},
         {"max_sentences", c.retrieval.max_sentences}}},
       {"merge",
        {{"grid", c.merge.grid}, {"space", c.merge.space}, {"max_dev_sentences", c.merge.max_dev_sentences}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
  check_keys(j, "config", {"recipe", "seed", "corpus", "model", "pretrain", "adapters", "train", "task",
                           "retrieval", "merge"});
  c.recipe = get(j, "config", "recipe", c.recipe);
  c.seed = get(j, "config", "seed", c.seed);
  try {
    if (j.contains("corpus")) {
      const auto& s = j.at("corpus");
      check_keys(s, "corpus", {"num_sentences", "languages", "grammar", "splits"});
      c.corpus.num_sentences = get(s, "corpus", "num_sentences", c.corpus.num_sentences);
      c.corpus.languages = get(s, "corpus", "languages", c.corpus.languages);
      if (s.contains("grammar")) from_json(s.at("grammar"), c.corpus.grammar);
      if (s.contains("splits")) from_json(s.at("splits"), c.corpus.splits);
    }
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("pretrain")) {
      json s = j.at("pretrain");
      if (!s.is_object()) throw ConfigError("pretrain: expected an object");
      c.pretrain.mix.parallel_fraction = get(s, "pretrain", "parallel_fraction", c.pretrain.mix.parallel_fraction);
      c.pretrain.mix.copy_documents = get(s, "pretrain", "copy_documents", c.pretrain.mix.copy_documents);
      s.erase("parallel_fraction");
      s.erase("copy_documents");
      from_json(s, c.pretrain.optimizer);
    }
    if (j.contains("adapters")) {
      const auto& s = j.at("adapters");
      check_keys(s, "adapters", {"rank", "alpha", "dropout"});
      c.adapters.rank = get(s, "adapters", "rank", c.adapters.rank);
      c.adapters.alpha = get(s, "adapters", "alpha", c.adapters.alpha);
      c.adapters.dropout = get(s, "adapters", "dropout", c.adapters.dropout);
    }
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("task")) {
      const auto& s = j.at("task");
      check_keys(s, "task", {"supervised", "aligned", "pivot", "align_cap", "eval_split", "max_eval_sentences",
                             "decoding"});
      c.task.supervised = get(s, "task", "supervised", c.task.supervised);
      c.task.aligned = get(s, "task", "aligned", c.task.aligned);
      c.task.pivot = get(s, "task", "pivot", c.task.pivot);
      c.task.align_cap = get(s, "task", "align_cap", c.task.align_cap);
      c.task.eval_split = get(s, "task", "eval_split", c.task.eval_split);
      c.task.max_eval_sentences = get(s, "task", "max_eval_sentences", c.task.max_eval_sentences);
      c.task.decoding = get(s, "task", "decoding", c.task.decoding);
    }
    if (j.contains("retrieval")) {
      const auto& s = j.at("retrieval");
      check_keys(s, "retrieval", {"k", "languages", "split", "max_sentences"});
      c.retrieval.k = get(s, "retrieval", "k", c.retrieval.k);
      c.retrieval.languages = get(s, "retrieval", "languages", c.retrieval.languages);
      c.retrieval.split = get(s, "retrieval", "split", c.retrieval.split);
      c.retrieval.max_sentences = get(s, "retrieval", "max_sentences", c.retrieval.max_sentences);
    }
    if (j.contains("merge")) {
      const auto& s = j.at("merge");
      check_keys(s, "merge", {"grid", "space", "max_dev_sentences"});
      c.merge.grid = get(s, "merge", "grid", c.merge.grid);
      c.merge.space = get(s, "merge", "space", c.merge.space);
      c.merge.max_dev_sentences = get(s, "merge", "max_dev_sentences", c.merge.max_dev_sentences);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  ExperimentConfig c;
  from_json(j, c);
  return c;
}

std::vector<std::string> Variant::aligned_languages() const {
  std::vector<std::string> out;
  for (const auto& [src, _] : align_pairs) {
    if (std::find(out.begin(), out.end(), src) == out.end()) out.push_back(src);
  }
  return out;
}

void to_json(json& j, const Variant& v) {
  json pairs = json::array();
  for (const auto& [s, t] : v.align_pairs) pairs.push_back({s, t});
  j = {{"name", v.name}, {"task", v.task}, {"align_pairs", pairs}, {"align_layers", v.align_layers}};
}

void from_json(const json& j, Variant& v) {
  check_keys(j, "variant", {"name", "task", "align_pairs", "align_layers"});
  v.name = j.at("name").get<std::string>();
  v.task = j.at("task").get<bool>();
  v.align_pairs.clear();
  for (const auto& p : j.at("align_pairs")) v.align_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
  v.align_layers = j.at("align_layers").get<std::set<int>>();
}

std::vector<Variant> recipe_variants(const ExperimentConfig& config, const retrieval::RetrievalReport* untrained) {
  const int L = config.model.num_layers;
  const int middle = L / 2;
  const int bottom = std::max(1, L / 4);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& l : config.task.aligned) pairs.emplace_back(l, config.task.pivot);

  const Variant sft{"sft", true, {}, {}};
  const auto& r = config.recipe;
  if (r == "baseline-sft") return {sft};
  if (r == "mid-align") return {sft, {"mid-align", true, pairs, {middle}}};
  if (r == "placement") {
    return {sft,
            {"bottom", true, pairs, {bottom}},
            {"middle", true, pairs, {middle}},
            {"top", true, pairs, {L}},
            {"multi", true, pairs, {middle, L}}};
  }
  if (r == "merge") return {sft, {"mid-align", true, pairs, {middle}}, {"align-only", false, pairs, {middle}}};
  if (r == "language-generalization") {
    return {sft, {"single-pair", true, {pairs.front()}, {middle}}, {"multi-pair", true, pairs, {middle}}};
  }
  if (r == "resource-level") {
    if (untrained == nullptr) throw ConfigError("resource-level needs the untrained retrieval report");
    // Candidates ranked by untrained retrieval against the pivot at the middle layer.
    const auto& langs = untrained->languages;
    const auto pivot_it = std::find(langs.begin(), langs.end(), config.task.pivot);
    if (pivot_it == langs.end()) throw ConfigError("resource-level: pivot missing from the retrieval languages");
    const auto p = static_cast<std::size_t>(pivot_it - langs.begin());
    std::vector<std::pair<double, std::string>> ranked;
    for (std::size_t i = 0; i < langs.size(); ++i) {
      const auto& tag = langs[i];
      if (i == p) continue;
      const auto& sup = config.task.supervised;
      if (std::find(sup.begin(), sup.end(), tag) != sup.end()) continue;
      const double score = 0.5 * (untrained->at(static_cast<std::size_t>(middle), i, p) +
                                  untrained->at(static_cast<std::size_t>(middle), p, i));
      ranked.emplace_back(score, tag);
    }
    std::sort(ranked.begin(), ranked.end());
    const std::size_t group = std::min(config.task.aligned.size(), ranked.size() / 2);
    if (group == 0) throw ConfigError("resource-level: not enough candidate languages");
    Variant low{"align-low", true, {}, {middle}}, high{"align-high", true, {}, {middle}};
    for (std::size_t i = 0; i < group; ++i) {
      low.align_pairs.emplace_back(ranked[i].second, config.task.pivot);
      high.align_pairs.emplace_back(ranked[ranked.size() - 1 - i].second, config.task.pivot);
    }
    return {sft, low, high};
  }
  throw ConfigError("unknown recipe '" + r + "'");
}

evaluation::LanguageGroups groups_for(const ExperimentConfig& config, const Variant& variant) {
  evaluation::LanguageGroups g;
  g.supervised = config.task.supervised;
  g.aligned = variant.align_pairs.empty() ? config.task.aligned : variant.aligned_languages();
  for (const auto& l : config.corpus.languages) {
    const bool used = std::find(g.supervised.begin(), g.supervised.end(), l) != g.supervised.end() ||
                      std::find(g.aligned.begin(), g.aligned.end(), l) != g.aligned.end();
    if (!used) g.other.push_back(l);
  }
  return g;
}

corpus::MultiwayCorpus make_corpus(const ExperimentConfig& config) {
  auto c = corpus::gen_corpus(config.corpus.num_sentences, config.corpus.grammar, config.corpus.languages,
                              config.seed, config.corpus.splits);
  if (config.model.vocab_size != 0 && c.vocab_size() != config.model.vocab_size) {
    throw ConfigError("model: vocab_size " + std::to_string(config.model.vocab_size) + " does not match the corpus (" +
                      std::to_string(c.vocab_size()) + ")");
  }
  return c;
}

Transformer<float> pretrain_base(const ExperimentConfig& config, const corpus::MultiwayCorpus& corpus,
                                 train::PretrainLog* log) {
  ModelConfig mc = config.model;
  mc.vocab_size = corpus.vocab_size();
  auto model = Transformer<float>::random(mc, config.seed);
  const auto docs = corpus::make_pretraining_documents(corpus, "train", config.pretrain.mix, config.seed);
  auto optimizer = config.pretrain.optimizer;
  optimizer.seed = config.seed;
  auto result = train::pretrain(model, docs, optimizer);
  if (log != nullptr) *log = std::move(result);
  return model;
}

AdapterSet<float> initial_adapters(const ExperimentConfig& config) {
  return AdapterSet<float>::initialize(config.model, config.adapters.rank, config.adapters.alpha,
                                       config.adapters.dropout, config.seed);
}

train::TrainResult train_variant(const ExperimentConfig& config, const Transformer<float>& model,
                                 const corpus::MultiwayCorpus& corpus, const Variant& variant) {
  train::TrainData data;
  const auto& sup = config.task.supervised;
  train::TrainConfig tc = config.train;
  tc.seed = config.seed;
  if (!variant.align_layers.empty()) tc.align_layers = variant.align_layers;
  if (!variant.align_pairs.empty()) data.align = corpus::make_alignment_dataset(corpus, variant.align_pairs, config.task.align_cap);
  if (variant.task) {
    data.task = corpus::make_task_dataset(corpus, sup, "train");
    data.dev_task = corpus::make_task_dataset(corpus, sup, "dev");
  } else {
    // Same number of alignment steps as the joint run, early-stopped on dev alignment loss.
    const auto n = corpus::make_task_dataset(corpus, sup, "train").size();
    const auto eff = static_cast<std::size_t>(tc.effective_batch);
    const long task_steps = static_cast<long>((n + eff - 1) / eff) * tc.max_epochs;
    const long align_steps = (task_steps * tc.align_steps + tc.task_steps - 1) / tc.task_steps;
    const auto probe = corpus::build_alignment_schedule(data.align, static_cast<std::size_t>(tc.contrastive_batch), tc.seed);
    const long per_step = tc.effective_batch / tc.contrastive_batch;
    const long per_epoch = std::max(1L, (static_cast<long>(probe.size()) + per_step - 1) / per_step);
    tc.max_epochs = static_cast<int>((align_steps + per_epoch - 1) / per_epoch);
    if (tc.max_steps == 0 || tc.max_steps > align_steps) tc.max_steps = align_steps;
    data.dev_align = dev_alignment_pairs(corpus, variant.align_pairs, config.task.align_cap);
  }
  return train::train(model, initial_adapters(config), data, tc);
}

retrieval::RetrievalReport evaluate_retrieval(const ExperimentConfig& config, const Transformer<float>& model,
                                              const AdapterSet<float>* adapters,
                                              const corpus::MultiwayCorpus& corpus) {
  auto report = retrieval::layerwise_report(model, adapters, corpus, config.retrieval_languages(), config.retrieval.k,
                                            config.retrieval.split, config.retrieval.max_sentences);
  report.corpus_id = "synthetic-seed-" + std::to_string(config.seed);
  return report;
}

evaluation::TaskReport evaluate_task(const ExperimentConfig& config, const Transformer<float>& model,
                                     const AdapterSet<float>* adapters, const corpus::MultiwayCorpus& corpus,
                                     const evaluation::LanguageGroups& groups) {
  return evaluation::evaluate_task(model, adapters, corpus, groups, config.task.eval_split,
                                   config.task.max_eval_sentences, evaluation::parse_decoding(config.task.decoding));
}

double dev_task_f1(const ExperimentConfig& config, const Transformer<float>& model,
                   const AdapterSet<float>& adapters, const corpus::MultiwayCorpus& corpus) {
  evaluation::LanguageGroups groups;
  groups.supervised = config.task.supervised;
  const auto report = evaluation::evaluate_task(model, &adapters, corpus, groups, "dev", config.merge.max_dev_sentences,
                                                evaluation::parse_decoding(config.task.decoding));
  return report.group_f1(groups.supervised);
}

corpus::MultiwayCorpus ensure_corpus(const ExperimentConfig& config, const Workspace& ws, const Progress& progress) {
  if (fs::exists(ws.corpus() / "manifest.json")) {
    emit(progress, "loading corpus from " + ws.corpus().string());
    return corpus::load_corpus(ws.corpus());
  }
  emit(progress, "generating corpus (" + std::to_string(config.corpus.num_sentences) + " sentences, " +
                     std::to_string(config.corpus.languages.size()) + " languages)");
  auto c = make_corpus(config);
  corpus::save_corpus(c, ws.corpus());
  return c;
}

Transformer<float> ensure_base(const ExperimentConfig& config, const Workspace& ws,
                               const corpus::MultiwayCorpus& corpus, const Progress& progress) {
  if (fs::exists(ws.base())) {
    emit(progress, "loading base model from " + ws.base().string());
    auto model = load_model(ws.base());
    if (model.config().vocab_size != corpus.vocab_size()) {
      throw ConfigError("base model vocabulary (" + std::to_string(model.config().vocab_size) +
                        ") does not match the corpus (" + std::to_string(corpus.vocab_size()) + ")");
    }
    return model;
  }
  emit(progress, "pretraining base model (" + std::to_string(config.pretrain.optimizer.steps) + " steps)");
  train::PretrainLog log;
  auto model = pretrain_base(config, corpus, &log);
  save_model(ws.base(), model);
  std::ostringstream lines;
  for (std::size_t i = 0; i < log.losses.size(); ++i) {
    lines << json{{"step", i + 1}, {"loss", log.losses[i]}}.dump() << '\n';
  }
  io::write_file(ws.root / "logs" / "pretrain.jsonl", lines.str());
  return model;
}

void train_recipe(const ExperimentConfig& config, const Workspace& ws, const Transformer<float>& model,
                  const corpus::MultiwayCorpus& corpus, const Progress& progress) {
  const auto untrained = initial_adapters(config);
  save_adapters(ws.adapters("untrained"), model.config(), untrained);
  std::optional<retrieval::RetrievalReport> reference;
  if (config.recipe == "resource-level") reference = evaluate_retrieval(config, model, &untrained, corpus);
  const auto variants = recipe_variants(config, reference ? &*reference : nullptr);
  for (const auto& v : variants) {
    emit(progress, "training " + v.name + (v.align_layers.empty() ? "" : " (align layers " + join_layers(v.align_layers) + ")"));
    const auto result = train_variant(config, model, corpus, v);
    save_adapters(ws.adapters(v.name), model.config(), result.adapters);
    io::write_file(ws.log(v.name), result.log.to_jsonl());
    emit(progress, "  " + std::to_string(result.log.steps.size()) + " steps, best eval " +
                       std::to_string(result.log.best_checkpoint + 1) + (result.log.stopped_early ? ", stopped early" : ""));
  }
  json list = json::array();
  for (const auto& v : variants) list.push_back(v);
  io::write_file(ws.variants(), json{{"recipe", config.recipe}, {"seed", config.seed}, {"variants", list}}.dump(2) + "\n");
}

std::vector<Variant> workspace_targets(const Workspace& ws) {
  if (!fs::exists(ws.variants())) throw InputError("missing " + ws.variants().string() + " (run the train command first)");
  std::vector<Variant> out{{"untrained", true, {}, {}}};
  for (auto& v : json::parse(io::read_file(ws.variants())).at("variants").get<std::vector<Variant>>()) {
    out.push_back(std::move(v));
  }
  if (fs::exists(ws.adapters("merged"))) out.push_back({"merged", true, {}, {}});
  return out;
}

void write_retrieval_report(const Workspace& ws, const std::string& name, const retrieval::RetrievalReport& report) {
  io::write_file(ws.report(name, "retrieval", "json"), report.to_json().dump(2) + "\n");
  io::write_file(ws.report(name, "retrieval", "csv"), report.to_csv());
}

void write_task_report(const Workspace& ws, const std::string& name, const evaluation::TaskReport& report) {
  io::write_file(ws.report(name, "task", "json"), report.to_json().dump(2) + "\n");
  io::write_file(ws.report(name, "task", "csv"), report.to_csv());
}

void evaluate_workspace(const ExperimentConfig& config, const Workspace& ws, const Transformer<float>& model,
                        const corpus::MultiwayCorpus& corpus, const Progress& progress) {
  for (const auto& v : workspace_targets(ws)) {
    emit(progress, "evaluating " + v.name);
    const auto adapters = load_adapters(ws.adapters(v.name), model.config());
    auto r = evaluate_retrieval(config, model, &adapters, corpus);
    r.model_id = v.name;
    const auto t = evaluate_task(config, model, &adapters, corpus, groups_for(config, v));
    write_retrieval_report(ws, v.name, r);
    write_task_report(ws, v.name, t);
  }
}

merging::SweepResult merge_workspace(const ExperimentConfig& config, const Workspace& ws,
                                     const Transformer<float>& model, const corpus::MultiwayCorpus& corpus,
                                     const std::string& task, const std::string& align) {
  const auto t = load_adapters(ws.adapters(task), model.config());
  const auto a = load_adapters(ws.adapters(align), model.config());
  const auto space = merging::parse_merge_space(config.merge.space);
  const auto result = merging::sweep<float>(
      t, a, config.merge.grid,
      [&](const AdapterSet<float>& merged) { return dev_task_f1(config, model, merged, corpus); }, space);
  io::write_file(ws.root / "reports" / "sweep.csv", result.to_csv());
  save_adapters(ws.adapters("merged"), model.config(), merging::merge(t, a, result.best_weight, space));
  return result;
}

json write_report(const Workspace& ws) {
  const auto variants_json = json::parse(io::read_file(ws.variants()));
  std::vector<Variant> variants;
  for (auto& v : workspace_targets(ws)) {
    if (fs::exists(ws.report(v.name, "task", "json")) && fs::exists(ws.report(v.name, "retrieval", "json"))) {
      variants.push_back(std::move(v));
    }
  }

  struct Row {
    Variant variant;
    double supervised, aligned, other, aligned_concept, aggregate;
    std::vector<double> layers;
  };
  std::vector<Row> rows;
  json summary = {{"recipe", variants_json.at("recipe")}, {"seed", variants_json.at("seed")}};
  json entries = json::array();
  for (const auto& v : variants) {
    const auto t = evaluation::TaskReport::from_json(json::parse(io::read_file(ws.report(v.name, "task", "json"))));
    const auto r = retrieval::RetrievalReport::from_json(json::parse(io::read_file(ws.report(v.name, "retrieval", "json"))));
    Row row{v,
            t.group_f1(t.groups.supervised),
            t.group_f1(t.groups.aligned),
            t.group_f1(t.groups.other),
            t.group_concept_f1(t.groups.aligned),
            retrieval::aggregate(r),
            {}};
    for (std::size_t l = 0; l < r.num_layers; ++l) row.layers.push_back(r.layer_mean(l));
    json e = {{"variant", v}, {"supervised_f1", row.supervised}, {"aligned_f1", row.aligned}, {"other_f1", row.other},
              {"aligned_concept_f1", row.aligned_concept}, {"aggregate", row.aggregate}, {"layer_mean", row.layers}, {"task", t.to_json()}};
    if (fs::exists(ws.log(v.name))) {
      std::istringstream lines(io::read_file(ws.log(v.name)));
      std::string line;
      while (std::getline(lines, line)) {
        const auto j = json::parse(line);
        if (j.at("type") == "summary") e["train"] = j;
      }
    }
    entries.push_back(std::move(e));
    rows.push_back(std::move(row));
  }
  summary["variants"] = entries;
  if (fs::exists(ws.root / "reports" / "sweep.csv")) summary["sweep_csv"] = "reports/sweep.csv";
  std::ostringstream csv;
  csv << "variant,align_layers,supervised_f1,aligned_f1,other_f1,aligned_concept_f1,aggregate\n";
  for (const auto& r : rows) {
    csv << r.variant.name << ',' << join_layers(r.variant.align_layers) << ',' << format_double(r.supervised) << ','
        << format_double(r.aligned) << ',' << format_double(r.other) << ',' << format_double(r.aligned_concept) << ','
        << format_double(r.aggregate) << '\n';
  }
  std::ostringstream layers;
  layers << "variant,layer,accuracy\n";
  for (const auto& r : rows) {
    for (std::size_t l = 0; l < r.layers.size(); ++l) layers << r.variant.name << ',' << l << ',' << format_double(r.layers[l]) << '\n';
  }
  io::write_file(ws.root / "summary.csv", csv.str());
  io::write_file(ws.root / "layers.csv", layers.str());

  const Row* sft = nullptr;
  for (const auto& r : rows) {
    if (r.variant.name == "sft") sft = &r;
  }
  std::ostringstream placement;
  bool any_placement = false;
  placement << "placement,align_layers,supervised_f1,aligned_f1,other_f1,aggregate,aligned_gain,aggregate_gain\n";
  for (const auto* name : {"bottom", "middle", "top", "multi"}) {
    for (const auto& r : rows) {
      if (r.variant.name != name) continue;
      any_placement = true;
      placement << name << ',' << join_layers(r.variant.align_layers) << ',' << format_double(r.supervised) << ','
                << format_double(r.aligned) << ',' << format_double(r.other) << ',' << format_double(r.aggregate) << ','
                << (sft ? format_double(r.aligned - sft->aligned) : "") << ','
                << (sft ? format_double(r.aggregate - sft->aggregate) : "") << '\n';
    }
  }
  if (any_placement) io::write_file(ws.root / "placement.csv", placement.str());
  io::write_file(ws.root / "summary.json", summary.dump(2) + "\n");
  return summary;
}

json run_recipe(const ExperimentConfig& config, const Workspace& ws, const Progress& progress) {
  io::write_file(ws.config(), json(config).dump(2) + "\n");
  const auto c = ensure_corpus(config, ws, progress);
  const auto model = ensure_base(config, ws, c, progress);
  train_recipe(config, ws, model, c, progress);
  if (config.recipe == "merge") {
    const auto sweep = merge_workspace(config, ws, model, c);
    emit(progress, "merge weight " + format_double(sweep.best_weight));
  }
  evaluate_workspace(config, ws, model, c, progress);
  return write_report(ws);
}

}  // namespace midalign::experiment
