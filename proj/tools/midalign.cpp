// Command-line harness: corpus generation, pretraining, adapter training,
// evaluation, merging and reports over a workspace directory.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "midalign/checkpoint.hpp"
#include "midalign/errors.hpp"
#include "midalign/experiment.hpp"

namespace fs = std::filesystem;
using namespace midalign;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "midalign-out";
  std::string recipe;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON experiment configuration");
  cmd->add_option("--seed", o.seed, "Seed, overrides the configuration");
  cmd->add_option("--out", o.out, "Workspace directory")->capture_default_str();
  cmd->add_option("--recipe", o.recipe, "Recipe name, overrides the configuration");
}

void progress(const std::string& message) { std::cerr << "[midalign] " << message << std::endl; }

/// Explicit --config, else the workspace's config.json, else defaults; then
/// --recipe and --seed overrides. Echoes the result.
experiment::ExperimentConfig resolve(const CommonOptions& o, const experiment::Workspace& ws) {
  experiment::ExperimentConfig config;
  if (!o.config.empty()) {
    config = experiment::load_config(o.config);
  } else if (fs::exists(ws.config())) {
    config = experiment::load_config(ws.config());
  }
  if (!o.recipe.empty()) config.recipe = o.recipe;
  if (o.seed) config.seed = *o.seed;
  config = config.resolved();
  io::write_file(ws.config(), json(config).dump(2) + "\n");
  std::cout << "seed: " << config.seed << "\n" << "config: " << json(config).dump() << std::endl;
  return config;
}

fs::path adapters_path(const experiment::Workspace& ws, const std::string& name_or_path) {
  if (name_or_path.find('/') != std::string::npos || name_or_path.ends_with(".ckpt")) return name_or_path;
  return ws.adapters(name_or_path);
}

int run(int argc, char** argv) {
  CLI::App app{"Middle-layer cross-lingual alignment laboratory"};
  app.require_subcommand(1);

  CommonOptions o;
  auto* gen = app.add_subcommand("gen", "Generate the synthetic corpus, or ingest a TSV file");
  std::string tsv;
  gen->add_option("--tsv", tsv, "Ingest this TSV (header row = language tags) instead of generating");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model");
  auto* train = app.add_subcommand("train", "Train every adapter variant of the recipe");
  auto* eval_retrieval = app.add_subcommand("eval-retrieval", "Layer-wise translation retrieval reports");
  auto* eval_task = app.add_subcommand("eval-task", "Slot-filling F1 reports");
  std::string adapters_arg, name_arg;
  for (auto* cmd : {eval_retrieval, eval_task}) {
    cmd->add_option("--adapters", adapters_arg, "Adapter name in the workspace or checkpoint path (default: all)");
    cmd->add_option("--name", name_arg, "Report name for --adapters (default: the adapter name)");
  }
  auto* merge = app.add_subcommand("merge", "Merge task and alignment adapters");
  std::string task_name = "sft", align_name = "align-only", merge_out, space_arg;
  std::optional<double> weight;
  merge->add_option("--task", task_name, "Task adapters (name or path)")->capture_default_str();
  merge->add_option("--align", align_name, "Alignment adapters (name or path)")->capture_default_str();
  merge->add_option("--weight", weight, "Fixed weight w in [0, 1]; sweeps the configured grid when absent");
  merge->add_option("--space", space_arg, "factor or delta (overrides the configuration)");
  merge->add_option("--output", merge_out, "Output checkpoint (default: adapters/merged.ckpt)");
  auto* report = app.add_subcommand("report", "Join logs and reports into summary files");
  auto* run_cmd = app.add_subcommand("run", "Run a recipe end to end");
  for (auto* cmd : {gen, pretrain, train, eval_retrieval, eval_task, merge, report, run_cmd}) add_common(cmd, o);

  CLI11_PARSE(app, argc, argv);
  const experiment::Workspace ws{o.out};
  fs::create_directories(ws.root);
  auto config = resolve(o, ws);

  if (gen->parsed()) {
    if (!tsv.empty()) {
      auto c = corpus::ingest_tsv(tsv, config.corpus.languages);
      corpus::save_corpus(c, ws.corpus());
      std::cout << "ingested " << c.size() << " sentences, skipped " << c.skipped_rows << " rows" << std::endl;
    } else {
      const auto c = experiment::ensure_corpus(config, ws, progress);
      std::cout << "corpus: " << c.size() << " sentences, " << c.languages.size() << " languages, vocabulary "
                << c.vocab_size() << std::endl;
    }
    return 0;
  }
  if (report->parsed()) {
    const auto summary = experiment::write_report(ws);
    std::cout << summary.dump(2) << std::endl;
    return 0;
  }
  if (run_cmd->parsed()) {
    experiment::run_recipe(config, ws, progress);
    std::cout << io::read_file(ws.root / "summary.csv");
    return 0;
  }

  const bool builds = pretrain->parsed() || train->parsed();
  if (!builds && !fs::exists(ws.base())) {
    throw InputError("missing " + ws.base().string() + " (run the pretrain or train command first)");
  }
  const auto c = experiment::ensure_corpus(config, ws, progress);
  const auto model = experiment::ensure_base(config, ws, c, progress);
  if (pretrain->parsed()) return 0;
  if (train->parsed()) {
    experiment::train_recipe(config, ws, model, c, progress);
    return 0;
  }
  if (merge->parsed()) {
    if (!space_arg.empty()) config.merge.space = space_arg;
    const auto space = merging::parse_merge_space(config.merge.space);
    const auto t = load_adapters(adapters_path(ws, task_name), model.config());
    const auto a = load_adapters(adapters_path(ws, align_name), model.config());
    double w;
    if (weight) {
      w = *weight;
    } else {
      const auto sweep = merging::sweep<float>(
          t, a, config.merge.grid,
          [&](const AdapterSet<float>& m) { return experiment::dev_task_f1(config, model, m, c); }, space);
      io::write_file(ws.root / "reports" / "sweep.csv", sweep.to_csv());
      std::cout << sweep.to_csv();
      w = sweep.best_weight;
    }
    const fs::path out = merge_out.empty() ? ws.adapters("merged") : fs::path(merge_out);
    save_adapters(out, model.config(), merging::merge(t, a, w, space));
    std::cout << "merged w=" << w << " -> " << out.string() << std::endl;
    return 0;
  }

  // Evaluation commands.
  std::vector<std::pair<std::string, fs::path>> targets;
  std::vector<experiment::Variant> variants;
  if (!adapters_arg.empty()) {
    const auto path = adapters_path(ws, adapters_arg);
    const std::string name = !name_arg.empty() ? name_arg : path.stem().string();
    targets.emplace_back(name, path);
    variants.push_back({name, true, {}, {}});
    if (fs::exists(ws.variants())) {
      for (const auto& v : experiment::workspace_targets(ws)) {
        if (v.name == name) variants.back() = v;
      }
    }
  } else {
    for (const auto& v : experiment::workspace_targets(ws)) {
      targets.emplace_back(v.name, ws.adapters(v.name));
      variants.push_back(v);
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& [name, path] = targets[i];
    progress("evaluating " + name);
    const auto adapters = load_adapters(path, model.config());
    if (eval_retrieval->parsed()) {
      auto r = experiment::evaluate_retrieval(config, model, &adapters, c);
      r.model_id = name;
      experiment::write_retrieval_report(ws, name, r);
      std::cout << name << " aggregate " << retrieval::aggregate(r) << std::endl;
    } else {
      const auto groups = experiment::groups_for(config, variants[i]);
      const auto t = experiment::evaluate_task(config, model, &adapters, c, groups);
      experiment::write_task_report(ws, name, t);
      std::cout << name << " supervised " << t.group_f1(groups.supervised) << " aligned " << t.group_f1(groups.aligned)
                << " other " << t.group_f1(groups.other) << std::endl;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees many mid-sized arrays; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << std::endl;
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << std::endl;
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
