// Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
// exits 0 once every criterion has been evaluated; a red criterion is a
// result, not a crash.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <unistd.h>

#include <CLI11.hpp>

#include "gradcheck.hpp"
#include "midalign/checkpoint.hpp"
#include "midalign/experiment.hpp"
#include "midalign/merging.hpp"
#include "midalign/objectives.hpp"
#include "midalign/retrieval.hpp"
#include "oracles.hpp"

namespace {

using namespace midalign;
namespace fs = std::filesystem;
using experiment::ExperimentConfig;
using experiment::Variant;

constexpr double kImprovement = 0.05;  // layer-mean retrieval gain that counts as an improvement

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

void note(const std::string& line) {
  std::printf("  %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << x;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double cpu_seconds() {
  timespec ts{};
  ::clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

Matrix<double> gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

std::vector<PooledEmbedding<double>> as_pooled(const Matrix<double>& m) {
  std::vector<PooledEmbedding<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)].vector = m.row(i);
  return out;
}

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 24;
  c.max_seq_len = 16;
  return c;
}

template <typename Scalar>
AdapterSet<Scalar> random_adapters(const ModelConfig& c, std::uint64_t seed) {
  auto a = AdapterSet<Scalar>::initialize(c, 4, 8.0, 0.1, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& [name, f] : a.entries) {
    for (Eigen::Index i = 0; i < f.b.size(); ++i) f.b.data()[i] = static_cast<Scalar>(normal(rng));
  }
  return a;
}

template <typename Scalar>
bool bit_equal(const AdapterSet<Scalar>& x, const AdapterSet<Scalar>& y) {
  if (x.rank != y.rank || x.alpha != y.alpha || x.entries.size() != y.entries.size()) return false;
  for (const auto& [name, f] : x.entries) {
    const auto it = y.entries.find(name);
    if (it == y.entries.end()) return false;
    const auto& g = it->second;
    if (f.a.rows() != g.a.rows() || f.a.cols() != g.a.cols() || f.b.rows() != g.b.rows() || f.b.cols() != g.b.cols()) {
      return false;
    }
    if (std::memcmp(f.a.data(), g.a.data(), sizeof(Scalar) * static_cast<std::size_t>(f.a.size())) != 0) return false;
    if (std::memcmp(f.b.data(), g.b.data(), sizeof(Scalar) * static_cast<std::size_t>(f.b.size())) != 0) return false;
  }
  return true;
}

template <typename M>
bool bytes_equal(const M& x, const M& y) {
  return x.rows() == y.rows() && x.cols() == y.cols() &&
         std::memcmp(x.data(), y.data(), sizeof(typename M::Scalar) * static_cast<std::size_t>(x.size())) == 0;
}

// Oracle equivalence.

void criterion_oracles() {
  const auto start = std::chrono::steady_clock::now();
  constexpr int kTrials = 100;
  std::mt19937_64 rng(2024);
  std::map<std::string, double> worst;
  std::map<std::string, int> count;

  for (int trial = 0; trial < kTrials; ++trial) {
    const Eigen::Index n = 2 + trial % 15;
    const auto s = gaussian(n, 16, rng), t = gaussian(n, 16, rng);
    const double tau = 0.05 + 0.01 * (trial % 20);
    const double want = oracle::alignment_loss(s, t, tau);
    const double got = objectives::alignment_loss(as_pooled(s), as_pooled(t), tau);
    worst["alignment_loss"] = std::max(worst["alignment_loss"], std::abs(got - want) / std::max(1.0, std::abs(want)));
    ++count["alignment_loss"];
  }

  std::uniform_int_distribution<TokenId> tok(5, 47);
  std::uniform_int_distribution<int> len(1, 8);
  for (int trial = 0; trial < kTrials; ++trial) {
    corpus::TaskExample ex;
    ex.prompt_tokens = {corpus::kBos};
    for (int i = len(rng); i > 0; --i) ex.prompt_tokens.push_back(tok(rng));
    ex.prompt_tokens.push_back(corpus::kTaskMarker);
    for (int i = len(rng); i > 0; --i) ex.target_tokens.push_back(tok(rng));
    ex.loss_mask.assign(ex.prompt_tokens.size(), false);
    ex.loss_mask.resize(ex.prompt_tokens.size() + ex.target_tokens.size(), true);
    const auto logits = gaussian(static_cast<Eigen::Index>(ex.loss_mask.size()), 48, rng, 3.0);
    const double want = oracle::task_loss(logits, ex);
    const double got = objectives::task_loss(logits, ex);
    worst["task_loss"] = std::max(worst["task_loss"], std::abs(got - want) / std::max(1.0, std::abs(want)));
    ++count["task_loss"];
  }

  for (int trial = 0; trial < kTrials; ++trial) {
    const Eigen::Index m = 5 + trial % 20, n = 5 + (trial * 7) % 20;
    const auto q = gaussian(m, 12, rng), c = gaussian(n, 12, rng);
    const auto got = retrieval::margin_scores(q, c, 4);
    const auto want = oracle::margin_scores(q, c, 4);
    worst["margin_scores"] = std::max(worst["margin_scores"], (got - want).cwiseAbs().maxCoeff());
    ++count["margin_scores"];
  }

  std::uniform_int_distribution<int> coarse(0, 3);
  for (int trial = 0; trial < kTrials; ++trial) {
    Matrix<double> sc = gaussian(10, 10, rng);
    if (trial % 2 == 0) sc = sc.unaryExpr([&](double) { return static_cast<double>(coarse(rng)); });
    const auto got = retrieval::retrieve_accuracy(sc);
    const auto want = oracle::retrieve_accuracy(sc);
    double err = std::abs(got.accuracy - want.accuracy);
    if (got.ties != want.ties) err = 1.0;
    worst["retrieve_accuracy"] = std::max(worst["retrieve_accuracy"], err);
    ++count["retrieve_accuracy"];
  }

  std::uniform_real_distribution<double> unit;
  for (int trial = 0; trial < kTrials; ++trial) {
    retrieval::RetrievalReport r;
    const std::size_t langs = 2 + static_cast<std::size_t>(trial % 5);
    for (std::size_t i = 0; i < langs; ++i) r.languages.push_back("l" + std::to_string(i));
    r.num_layers = 3 + 2 * static_cast<std::size_t>(trial % 4);
    r.accuracy.assign(r.num_layers * langs * langs, 0.0);
    r.ties.assign(r.accuracy.size(), 0);
    for (std::size_t l = 0; l < r.num_layers; ++l) {
      for (std::size_t s = 0; s < langs; ++s) {
        for (std::size_t t = 0; t < langs; ++t) r.accuracy[r.index(l, s, t)] = s == t ? std::nan("") : unit(rng);
      }
    }
    worst["aggregate"] = std::max(worst["aggregate"], std::abs(retrieval::aggregate(r) - oracle::aggregate(r)));
    ++count["aggregate"];
  }

  const auto mc = small_model();
  const std::vector<double> weights = {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto t = random_adapters<double>(mc, 10 + static_cast<std::uint64_t>(trial));
    const auto a = random_adapters<double>(mc, 900 + static_cast<std::uint64_t>(trial));
    const double w = weights[static_cast<std::size_t>(trial) % weights.size()];
    const auto got = merging::merge(t, a, w);
    const auto want = oracle::merge(t, a, w);
    double err = 0.0;
    for (const auto& [name, f] : got.entries) {
      err = std::max(err, (f.a - want.entries.at(name).a).cwiseAbs().maxCoeff());
      err = std::max(err, (f.b - want.entries.at(name).b).cwiseAbs().maxCoeff());
    }
    worst["merge"] = std::max(worst["merge"], err);
    ++count["merge"];
  }

  const std::map<std::string, double> tolerance = {{"alignment_loss", 1e-8}, {"task_loss", 1e-10},
                                                   {"margin_scores", 1e-10}, {"retrieve_accuracy", 1e-12},
                                                   {"aggregate", 1e-12},     {"merge", 1e-12}};
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  bool pass = seconds < 60.0;
  std::string detail;
  for (const auto& [name, tol] : tolerance) {
    pass = pass && worst[name] <= tol && count[name] >= kTrials;
    detail += name + " " + fmt(worst[name], 2) + "/" + fmt(tol, 1) + " ";
  }
  report(1, pass, "oracle equivalence over " + std::to_string(kTrials) + " instances each: " + detail + "(" +
                      fmt(seconds, 3) + " s)");
}

// Finite differences on the composed losses.

void criterion_gradients() {
  const auto start = std::chrono::steady_clock::now();
  auto problem = gradcheck::ComposedProblem::make(2, 16, 31);
  const auto stats = problem.check(1e-4, 1e-4, 1);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = stats.fraction() >= 0.99 && stats.max_rel < 1e-3 && seconds < 120.0;
  report(2, pass,
         "finite differences on " + std::to_string(stats.checked) + " coordinates: within 1e-4 " +
             fmt(100.0 * stats.fraction(), 5) + "%, max relative error " + fmt(stats.max_rel, 3) + " at " + stats.worst +
             " (" + fmt(seconds, 3) + " s)");
}

// Identity and merge endpoints.

void criterion_identity(const Transformer<float>& model, const ExperimentConfig& config, const corpus::MultiwayCorpus& c,
                        const AdapterSet<float>& task, const AdapterSet<float>& align) {
  bool logits_equal = true;
  const auto zero = experiment::initial_adapters(config);
  const auto ids = c.split("test");
  for (std::size_t i = 0; i < std::min<std::size_t>(ids.size(), 20); ++i) {
    for (const auto& lang : config.corpus.languages) {
      std::vector<TokenId> tokens{corpus::kBos};
      const auto& s = c.sentence(ids[i], lang);
      tokens.insert(tokens.end(), s.begin(), s.end());
      logits_equal = logits_equal && bytes_equal(model.run(tokens).logits, model.run(tokens, &zero).logits);
    }
  }
  const auto mc = small_model();
  const auto small = Transformer<double>::random(mc, 8);
  const auto zero_small = AdapterSet<double>::initialize(mc, 4, 8.0, 0.1, 9);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(mc.vocab_size - 1));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenId> tokens(static_cast<std::size_t>(1 + trial % mc.max_seq_len));
    for (auto& t : tokens) t = tok(rng);
    logits_equal = logits_equal && bytes_equal(small.run(tokens).logits, small.run(tokens, &zero_small).logits);
  }

  bool endpoints = bit_equal(merging::merge(task, align, 1.0), task) && bit_equal(merging::merge(task, align, 0.0), align);
  bool fixed = true;
  for (double w : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
    fixed = fixed && bit_equal(merging::merge(task, task, w), task) && bit_equal(merging::merge(align, align, w), align);
  }
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto x = random_adapters<double>(mc, trial), y = random_adapters<double>(mc, 100 + trial);
    endpoints = endpoints && bit_equal(merging::merge(x, y, 1.0), x) && bit_equal(merging::merge(x, y, 0.0), y);
    fixed = fixed && bit_equal(merging::merge(x, x, 0.37), x);
  }
  report(3, logits_equal && endpoints && fixed,
         std::string("zero-B logits bit-identical: ") + (logits_equal ? "yes" : "no") +
             ", merge endpoints exact: " + (endpoints ? "yes" : "no") + ", merge(w, X, X) = X: " + (fixed ? "yes" : "no"));
}

// One seed of the desk-scale experiment.

struct VariantScores {
  double supervised = 0.0;
  double transfer = 0.0;
  double transfer_concept = 0.0;
  double aggregate = 0.0;
  std::vector<double> layers;
  double cpu_seconds = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  VariantScores untrained;
  std::map<std::string, VariantScores> variants;  // sft, bottom, middle, top, merged
  double merge_weight = 0.0;
  int num_layers = 0;
};

std::vector<double> layer_means(const retrieval::RetrievalReport& r) {
  std::vector<double> out;
  for (std::size_t l = 0; l < r.num_layers; ++l) out.push_back(r.layer_mean(l));
  return out;
}

VariantScores score(const ExperimentConfig& config, const experiment::Workspace& ws, const std::string& name,
                    const Transformer<float>& model, const AdapterSet<float>* adapters, const corpus::MultiwayCorpus& c,
                    const Variant& groups_variant, bool retrieval_too) {
  VariantScores s;
  const auto groups = experiment::groups_for(config, groups_variant);
  const auto task = experiment::evaluate_task(config, model, adapters, c, groups);
  experiment::write_task_report(ws, name, task);
  s.supervised = task.group_f1(groups.supervised);
  s.transfer = task.group_f1(groups.aligned);
  s.transfer_concept = task.group_concept_f1(groups.aligned);
  if (retrieval_too) {
    const auto r = experiment::evaluate_retrieval(config, model, adapters, c);
    experiment::write_retrieval_report(ws, name, r);
    s.aggregate = retrieval::aggregate(r);
    s.layers = layer_means(r);
  }
  return s;
}

std::string describe(const std::string& name, const VariantScores& s) {
  std::string line = name + ": supervised " + fmt(100 * s.supervised, 3) + ", transfer " + fmt(100 * s.transfer, 3) +
                     " (concept " + fmt(100 * s.transfer_concept, 3) + ")";
  if (!s.layers.empty()) {
    line += ", aggregate " + fmt(100 * s.aggregate, 3) + ", layers";
    for (double x : s.layers) line += " " + fmt(100 * x, 3);
  }
  if (s.cpu_seconds > 0) line += ", " + fmt(s.cpu_seconds / 60.0, 3) + " CPU-min";
  return line;
}

SeedResult run_seed(std::uint64_t seed, const fs::path& out, std::optional<std::pair<Transformer<float>, ExperimentConfig>>* keep,
                    std::vector<std::pair<AdapterSet<float>, AdapterSet<float>>>* trained) {
  ExperimentConfig base_config;
  base_config.seed = seed;
  base_config.recipe = "placement";
  const auto config = base_config.resolved();
  const experiment::Workspace ws{out / ("seed-" + std::to_string(seed))};
  fs::create_directories(ws.root / "adapters");
  fs::create_directories(ws.root / "reports");
  auto progress = [](const std::string& m) { note(m); };
  const auto c = experiment::ensure_corpus(config, ws, progress);
  auto model = experiment::ensure_base(config, ws, c, progress);

  SeedResult result;
  result.seed = seed;
  result.num_layers = config.model.num_layers;
  const auto placement = experiment::recipe_variants(config);
  ExperimentConfig merge_config = config;
  merge_config.recipe = "merge";
  const auto merge_variants = experiment::recipe_variants(merge_config);
  const Variant& sft = placement[0];

  result.untrained = score(config, ws, "untrained", model, nullptr, c, sft, true);
  note("seed " + std::to_string(seed) + " " + describe("untrained", result.untrained));

  std::map<std::string, AdapterSet<float>> adapters;
  std::vector<Variant> to_train(placement.begin(), placement.begin() + 4);  // sft, bottom, middle, top
  to_train.push_back(merge_variants[2]);                                   // align-only
  for (const auto& v : to_train) {
    const double t0 = cpu_seconds();
    auto trained_variant = experiment::train_variant(config, model, c, v);
    const double spent = cpu_seconds() - t0;
    save_adapters(ws.adapters(v.name), model.config(), trained_variant.adapters);
    io::write_file(ws.log(v.name), trained_variant.log.to_jsonl());
    adapters.emplace(v.name, std::move(trained_variant.adapters));
    if (!v.task) {
      note("seed " + std::to_string(seed) + " " + v.name + ": " + fmt(spent / 60.0, 3) + " CPU-min");
      continue;
    }
    auto s = score(config, ws, v.name, model, &adapters.at(v.name), c, v, true);
    s.cpu_seconds = spent;
    note("seed " + std::to_string(seed) + " " + describe(v.name, s));
    result.variants[v.name] = std::move(s);
  }

  const auto& task_adapters = adapters.at("sft");
  const auto& align_adapters = adapters.at("align-only");
  const auto sweep = merging::sweep<float>(
      task_adapters, align_adapters, config.merge.grid,
      [&](const AdapterSet<float>& merged) { return experiment::dev_task_f1(config, model, merged, c); },
      merging::parse_merge_space(config.merge.space));
  io::write_file(ws.root / "reports" / "sweep.csv", sweep.to_csv());
  result.merge_weight = sweep.best_weight;
  const auto merged = merging::merge(task_adapters, align_adapters, sweep.best_weight,
                                     merging::parse_merge_space(config.merge.space));
  result.variants["merged"] = score(config, ws, "merged", model, &merged, c, placement[2], false);
  note("seed " + std::to_string(seed) + " merge weight " + fmt(sweep.best_weight) + " " +
       describe("merged", result.variants["merged"]));

  if (keep != nullptr && !keep->has_value()) keep->emplace(std::move(model), config);
  if (trained != nullptr) trained->emplace_back(task_adapters, align_adapters);
  return result;
}

std::vector<double> collect(const std::vector<SeedResult>& runs, const std::function<double(const SeedResult&)>& f) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(f(r));
  return out;
}

std::string list(const std::vector<double>& v, double scale = 100.0) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(scale * v[i], 3);
  return s + "]";
}

/// Median over seeds of the per-layer retrieval gain of `name` over sft.
std::vector<double> median_layer_gain(const std::vector<SeedResult>& runs, const std::string& name) {
  std::vector<double> out;
  const auto layers = runs.front().variants.at("sft").layers.size();
  for (std::size_t l = 0; l < layers; ++l) {
    out.push_back(median(collect(runs, [&](const SeedResult& r) {
      return r.variants.at(name).layers[l] - r.variants.at("sft").layers[l];
    })));
  }
  return out;
}

std::vector<int> improved_layers(const std::vector<double>& gain) {
  std::vector<int> out;
  for (std::size_t l = 1; l < gain.size(); ++l) {
    if (gain[l] >= kImprovement) out.push_back(static_cast<int>(l));
  }
  return out;
}

std::string layer_list(const std::vector<int>& v) {
  std::string s = "{";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "}";
}

void experiment_criteria(const std::vector<SeedResult>& runs) {
  const int L = runs.front().num_layers;
  const int middle = L / 2;

  // Transfer.
  const auto sft_transfer = collect(runs, [](const SeedResult& r) { return r.variants.at("sft").transfer; });
  const auto mid_transfer = collect(runs, [](const SeedResult& r) { return r.variants.at("middle").transfer; });
  const auto sft_sup = collect(runs, [](const SeedResult& r) { return r.variants.at("sft").supervised; });
  const auto mid_sup = collect(runs, [](const SeedResult& r) { return r.variants.at("middle").supervised; });
  const auto run_minutes = collect(runs, [](const SeedResult& r) {
    double m = 0.0;
    for (const auto& [name, v] : r.variants) m = std::max(m, v.cpu_seconds / 60.0);
    return m;
  });
  const double transfer_gain = median(mid_transfer) - median(sft_transfer);
  const double sup_drop = median(sft_sup) - median(mid_sup);
  const double slowest = *std::max_element(run_minutes.begin(), run_minutes.end());
  report(4, transfer_gain >= 0.05 && sup_drop < 0.02 && slowest < 20.0,
         "aligned-language F1 mid-align " + list(mid_transfer) + " vs sft " + list(sft_transfer) + ": median gain " +
             fmt(100 * transfer_gain, 3) + " (need >= 5); supervised drop " + fmt(100 * sup_drop, 3) +
             " (need < 2); slowest run " + fmt(slowest, 3) + " CPU-min");
  note("concept-level aligned F1 mid-align " +
       list(collect(runs, [](const SeedResult& r) { return r.variants.at("middle").transfer_concept; })) + " vs sft " +
       list(collect(runs, [](const SeedResult& r) { return r.variants.at("sft").transfer_concept; })));

  // Retrieval shift.
  const auto agg_gain = collect(runs, [](const SeedResult& r) {
    return r.variants.at("middle").aggregate - r.variants.at("sft").aggregate;
  });
  const auto mid_gain = median_layer_gain(runs, "middle");
  const auto mid_layers = improved_layers(mid_gain);
  const bool at_aligned = std::find(mid_layers.begin(), mid_layers.end(), middle) != mid_layers.end();
  const bool before = std::any_of(mid_layers.begin(), mid_layers.end(), [&](int l) { return l < middle; });
  report(5, median(agg_gain) >= 0.15 && at_aligned && before,
         "aggregate gain mid-align - sft " + list(agg_gain) + " median " + fmt(100 * median(agg_gain), 3) +
             " (need >= 15); improved layers " + layer_list(mid_layers) + " (need " + std::to_string(middle) +
             " and an earlier one)");

  // SFT neutrality.
  const auto shift = collect(runs, [](const SeedResult& r) {
    return r.variants.at("sft").aggregate - r.untrained.aggregate;
  });
  const bool neutral = std::all_of(shift.begin(), shift.end(), [](double d) { return std::abs(d) < 0.03; });
  report(6, neutral, "sft - untrained aggregate " + list(shift) + " (need every |d| < 3)");

  // Placement.
  const auto bottom_transfer = collect(runs, [](const SeedResult& r) { return r.variants.at("bottom").transfer; });
  const auto bottom_layers = improved_layers(median_layer_gain(runs, "bottom"));
  const auto top_layers = improved_layers(median_layer_gain(runs, "top"));
  const bool bottom_lower = median(bottom_transfer) < median(mid_transfer);
  const bool middle_spans = mid_layers.size() >= 2;
  const bool top_confined = top_layers == std::vector<int>{L};
  report(7, bottom_lower && middle_spans && top_confined,
         "transfer F1 median bottom " + fmt(100 * median(bottom_transfer), 3) + " vs middle " +
             fmt(100 * median(mid_transfer), 3) + " (need strictly lower); improved layers bottom " +
             layer_list(bottom_layers) + ", middle " + layer_list(mid_layers) + " (need >= 2), top " +
             layer_list(top_layers) + " (need exactly {" + std::to_string(L) + "})");

  // Merge.
  const auto merged_transfer = collect(runs, [](const SeedResult& r) { return r.variants.at("merged").transfer; });
  const double joint_gain = median(mid_transfer) - median(sft_transfer);
  const double merged_gain = median(merged_transfer) - median(sft_transfer);
  const bool recovered = joint_gain > 0.0 && merged_gain >= 0.5 * joint_gain;
  report(8, recovered,
         "aligned-language F1 merged " + list(merged_transfer) + " (weights " +
             list(collect(runs, [](const SeedResult& r) { return r.merge_weight; }), 1.0) + "): gain over sft " +
             fmt(100 * merged_gain, 3) + " vs joint gain " + fmt(100 * joint_gain, 3) +
             (joint_gain > 0.0 ? " (ratio " + fmt(merged_gain / joint_gain, 3) + ", need >= 0.5)"
                               : " (no joint gain to recover)"));
  note("concept-level aligned F1 merged " +
       list(collect(runs, [](const SeedResult& r) { return r.variants.at("merged").transfer_concept; })));
}

// Determinism.

void criterion_determinism(const fs::path& out) {
  ExperimentConfig c;
  c.seed = 5;
  c.recipe = "merge";
  c.corpus.num_sentences = 400;
  c.model.num_layers = 2;
  c.model.hidden_dim = 16;
  c.model.num_heads = 2;
  c.model.ffn_dim = 32;
  c.pretrain.optimizer.steps = 40;
  c.train.max_epochs = 1;
  c.train.eval_every = 4;
  c.task.max_eval_sentences = 30;
  c.task.align_cap = 60;
  c.retrieval.max_sentences = 30;
  c.merge.max_dev_sentences = 30;
  const auto config = c.resolved();

  std::vector<std::map<std::string, std::string>> artifacts;
  for (int run = 0; run < 2; ++run) {
    const experiment::Workspace ws{out / ("determinism-" + std::to_string(run))};
    fs::remove_all(ws.root);
    experiment::run_recipe(config, ws);
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(ws.root)) {
      const auto ext = entry.path().extension();
      if (entry.is_regular_file() && (ext == ".csv" || ext == ".jsonl")) {
        files[fs::relative(entry.path(), ws.root).string()] = io::read_file(entry.path());
      }
    }
    artifacts.push_back(std::move(files));
  }
  std::size_t logs = 0, csvs = 0;
  std::vector<std::string> differing;
  for (const auto& [name, bytes] : artifacts[0]) {
    (name.ends_with(".jsonl") ? logs : csvs) += 1;
    const auto it = artifacts[1].find(name);
    if (it == artifacts[1].end() || it->second != bytes) differing.push_back(name);
  }
  if (artifacts[0].size() != artifacts[1].size()) differing.push_back("(file sets differ)");
  std::string detail = std::to_string(logs) + " loss logs and " + std::to_string(csvs) + " CSVs compared across two runs";
  if (!differing.empty()) {
    detail += "; differing:";
    for (const auto& d : differing) detail += " " + d;
  }
  report(9, differing.empty() && logs > 0 && csvs > 0, detail);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"midalign acceptance suite"};
  std::string out = (fs::temp_directory_path() / ("midalign_acceptance_" + std::to_string(::getpid()))).string();
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  app.add_option("--out", out, "Working directory for workspaces and reports");
  app.add_option("--seeds", seeds, "Seeds of the desk-scale runs");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out);
    criterion_oracles();
    criterion_gradients();

    std::vector<SeedResult> runs;
    std::optional<std::pair<Transformer<float>, ExperimentConfig>> first;
    std::vector<std::pair<AdapterSet<float>, AdapterSet<float>>> trained;
    for (auto seed : seeds) runs.push_back(run_seed(seed, out, &first, &trained));

    const auto& [model, config] = *first;
    const auto c = experiment::ensure_corpus(config, experiment::Workspace{fs::path(out) / ("seed-" + std::to_string(seeds.front()))});
    criterion_identity(model, config, c, trained.front().first, trained.front().second);
    experiment_criteria(runs);
    criterion_determinism(out);
  } catch (const std::exception& e) {
    std::printf("acceptance suite aborted: %s\n", e.what());
    return 1;
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::printf("\nsummary\n");
  int passed = 0;
  for (const auto& v : verdicts) {
    std::printf("criterion %d: %s\n", v.id, v.pass ? "PASS" : "FAIL");
    passed += v.pass ? 1 : 0;
  }
  std::printf("%d of %zu criteria pass\n", passed, verdicts.size());
  return 0;
}
