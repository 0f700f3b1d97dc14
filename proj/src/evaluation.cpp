#include "midalign/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "midalign/parallel.hpp"

namespace midalign::evaluation {

std::vector<std::vector<TokenId>> greedy_decode(const Transformer<float>& model, const AdapterSet<float>* adapters,
                                                const std::vector<std::vector<TokenId>>& prompts, int max_new_tokens,
                                                std::size_t batch_size,
                                                const std::vector<std::vector<TokenId>>& allowed) {
  if (!allowed.empty() && allowed.size() != prompts.size()) {
    throw InputError("greedy_decode: need one allowed-token list per prompt");
  }
  if (max_new_tokens < 1) throw ConfigError("greedy_decode: max_new_tokens must be positive");
  if (batch_size < 1) throw ConfigError("greedy_decode: batch_size must be positive");
  std::vector<std::vector<TokenId>> out(prompts.size());
  const std::size_t chunks = (prompts.size() + batch_size - 1) / batch_size;
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  parallel_for(chunks, [&](std::size_t chunk) {
    const std::size_t start = chunk * batch_size;
    const std::size_t end = std::min(prompts.size(), start + batch_size);
    std::vector<std::size_t> active;
    std::vector<std::vector<TokenId>> seqs;
    for (std::size_t i = start; i < end; ++i) {
      if (prompts[i].size() < max_len) active.push_back(i);
    }
    for (int step = 0; step < max_new_tokens && !active.empty(); ++step) {
      seqs.clear();
      for (auto i : active) {
        auto s = prompts[i];
        s.insert(s.end(), out[i].begin(), out[i].end());
        seqs.push_back(std::move(s));
      }
      const auto logits = model.last_logits(seqs, adapters);
      std::vector<std::size_t> still;
      for (std::size_t r = 0; r < active.size(); ++r) {
        const auto i = active[r];
        const auto row = logits.row(static_cast<Eigen::Index>(r));
        Eigen::Index best = 0;
        if (allowed.empty()) {
          row.maxCoeff(&best);
        } else {
          const auto& ids = allowed[i];
          if (ids.empty()) throw InputError("greedy_decode: empty allowed-token list");
          best = ids.front();
          for (TokenId t : ids) {
            if (t < 0 || t >= row.size()) throw InputError("greedy_decode: allowed token outside the vocabulary");
            if (row(t) > row(best) || (row(t) == row(best) && t < best)) best = t;
          }
        }
        const auto token = static_cast<TokenId>(best);
        out[i].push_back(token);
        const bool done = token == corpus::kEos || token == corpus::kNone ||
                          prompts[i].size() + out[i].size() >= max_len;
        if (!done) still.push_back(i);
      }
      active.swap(still);
    }
  });
  return out;
}

Decoding parse_decoding(const std::string& name) {
  if (name == "free") return Decoding::kFree;
  if (name == "extractive") return Decoding::kExtractive;
  throw ConfigError("unknown decoding '" + name + "' (expected free or extractive)");
}

const char* to_string(Decoding d) { return d == Decoding::kFree ? "free" : "extractive"; }

std::vector<TokenId> extractive_vocabulary(const std::vector<TokenId>& prompt, int num_slots) {
  std::vector<TokenId> ids = {corpus::kEos, corpus::kNone};
  for (int k = 0; k < num_slots; ++k) ids.push_back(corpus::slot_label(k));
  for (TokenId t : prompt) {
    if (t >= corpus::kFirstSlotLabel + num_slots) ids.push_back(t);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

ParsedSlots parse_slots(const std::vector<TokenId>& generated, int num_slots) {
  ParsedSlots result;
  const auto is_label = [num_slots](TokenId t) {
    return t >= corpus::kFirstSlotLabel && t < corpus::kFirstSlotLabel + num_slots;
  };
  const auto is_value = [num_slots](TokenId t) { return t >= corpus::kFirstSlotLabel + num_slots; };
  auto malformed = [&result]() {
    result.tuples.clear();
    result.malformed = true;
    return result;
  };
  if (generated.size() == 1 && generated[0] == corpus::kNone) return result;
  std::size_t p = 0;
  while (p < generated.size()) {
    const TokenId t = generated[p];
    if (t == corpus::kEos) {
      if (p + 1 != generated.size() || result.tuples.empty()) return malformed();
      return result;
    }
    if (!is_label(t)) return malformed();
    corpus::SlotTuple tuple;
    tuple.slot = t - corpus::kFirstSlotLabel;
    ++p;
    while (p < generated.size() && is_value(generated[p])) tuple.value.push_back(generated[p++]);
    if (tuple.value.empty()) return malformed();
    result.tuples.push_back(std::move(tuple));
  }
  return malformed();  // no terminating <eos>
}

double SlotCounts::precision() const {
  const auto d = true_positives + false_positives;
  return d == 0 ? 1.0 : static_cast<double>(true_positives) / static_cast<double>(d);
}

double SlotCounts::recall() const {
  const auto d = true_positives + false_negatives;
  return d == 0 ? 1.0 : static_cast<double>(true_positives) / static_cast<double>(d);
}

double SlotCounts::f1() const {
  const auto d = 2 * true_positives + false_positives + false_negatives;
  return d == 0 ? 1.0 : 2.0 * static_cast<double>(true_positives) / static_cast<double>(d);
}

SlotCounts& SlotCounts::operator+=(const SlotCounts& o) {
  true_positives += o.true_positives;
  false_positives += o.false_positives;
  false_negatives += o.false_negatives;
  return *this;
}

SlotCounts count_tuples(const std::vector<corpus::SlotTuple>& predicted, const std::vector<corpus::SlotTuple>& gold) {
  auto p = predicted;
  auto g = gold;
  std::sort(p.begin(), p.end());
  std::sort(g.begin(), g.end());
  std::vector<corpus::SlotTuple> common;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(common));
  SlotCounts c;
  c.true_positives = common.size();
  c.false_positives = p.size() - common.size();
  c.false_negatives = g.size() - common.size();
  return c;
}

std::map<std::string, LanguageScore> eval_slot_f1(const std::vector<std::string>& languages,
                                                  const std::vector<std::vector<corpus::SlotTuple>>& predictions,
                                                  const std::vector<std::vector<corpus::SlotTuple>>& gold,
                                                  const std::vector<bool>& malformed) {
  if (languages.size() != predictions.size() || predictions.size() != gold.size() ||
      (!malformed.empty() && malformed.size() != gold.size())) {
    throw InputError("eval_slot_f1: predictions, gold and language labels must align");
  }
  std::map<std::string, LanguageScore> out;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    auto& score = out[languages[i]];
    score.counts += count_tuples(predictions[i], gold[i]);
    ++score.sentences;
    if (!malformed.empty() && malformed[i]) ++score.malformed;
  }
  return out;
}

std::vector<std::string> LanguageGroups::all() const {
  std::vector<std::string> out = supervised;
  out.insert(out.end(), aligned.begin(), aligned.end());
  out.insert(out.end(), other.begin(), other.end());
  return out;
}

double TaskReport::group_f1(const std::vector<std::string>& group) const {
  if (group.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (const auto& lang : group) sum += languages.at(lang).f1();
  return sum / static_cast<double>(group.size());
}

double TaskReport::group_concept_f1(const std::vector<std::string>& group) const {
  if (group.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (const auto& lang : group) sum += languages.at(lang).concept_f1();
  return sum / static_cast<double>(group.size());
}

std::vector<corpus::SlotTuple> concept_tuples(const std::vector<corpus::SlotTuple>& tuples,
                                              const corpus::MultiwayCorpus& corpus) {
  auto out = tuples;
  for (auto& t : out) {
    for (auto& v : t.value) {
      for (const auto& lang : corpus.languages) {
        if (const auto base = corpus::decipher(lang, v)) {
          v = -1 - *base;
          break;
        }
      }
    }
  }
  return out;
}

namespace {

const char* group_of(const LanguageGroups& g, const std::string& lang) {
  if (std::find(g.supervised.begin(), g.supervised.end(), lang) != g.supervised.end()) return "supervised";
  if (std::find(g.aligned.begin(), g.aligned.end(), lang) != g.aligned.end()) return "aligned";
  return "other";
}

nlohmann::json nan_to_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json TaskReport::to_json() const {
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [lang, s] : languages) {
    langs[lang] = {{"group", group_of(groups, lang)},
                   {"f1", s.f1()},
                   {"precision", s.counts.precision()},
                   {"recall", s.counts.recall()},
                   {"tp", s.counts.true_positives},
                   {"fp", s.counts.false_positives},
                   {"fn", s.counts.false_negatives},
                   {"sentences", s.sentences},
                   {"malformed", s.malformed},
                   {"concept_f1", s.concept_f1()},
                   {"concept_tp", s.concept_counts.true_positives},
                   {"concept_fp", s.concept_counts.false_positives},
                   {"concept_fn", s.concept_counts.false_negatives}};
  }
  return {{"split", split},
          {"decoding", decoding},
          {"languages", langs},
          {"groups", {{"supervised", groups.supervised}, {"aligned", groups.aligned}, {"other", groups.other}}},
          {"group_f1",
           {{"supervised", nan_to_null(group_f1(groups.supervised))},
            {"aligned", nan_to_null(group_f1(groups.aligned))},
            {"other", nan_to_null(group_f1(groups.other))}}},
          {"group_concept_f1",
           {{"supervised", nan_to_null(group_concept_f1(groups.supervised))},
            {"aligned", nan_to_null(group_concept_f1(groups.aligned))},
            {"other", nan_to_null(group_concept_f1(groups.other))}}}};
}

TaskReport TaskReport::from_json(const nlohmann::json& j) {
  TaskReport r;
  try {
    r.split = j.at("split").get<std::string>();
    r.decoding = j.value("decoding", "free");
    r.groups.supervised = j.at("groups").at("supervised").get<std::vector<std::string>>();
    r.groups.aligned = j.at("groups").at("aligned").get<std::vector<std::string>>();
    r.groups.other = j.at("groups").at("other").get<std::vector<std::string>>();
    for (const auto& [lang, v] : j.at("languages").items()) {
      LanguageScore s;
      s.counts.true_positives = v.at("tp").get<std::size_t>();
      s.counts.false_positives = v.at("fp").get<std::size_t>();
      s.counts.false_negatives = v.at("fn").get<std::size_t>();
      s.sentences = v.at("sentences").get<std::size_t>();
      s.malformed = v.at("malformed").get<std::size_t>();
      s.concept_counts.true_positives = v.value("concept_tp", std::size_t{0});
      s.concept_counts.false_positives = v.value("concept_fp", std::size_t{0});
      s.concept_counts.false_negatives = v.value("concept_fn", std::size_t{0});
      r.languages[lang] = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task report: ") + e.what());
  }
  return r;
}

std::string TaskReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "language,group,f1,precision,recall,tp,fp,fn,sentences,malformed,concept_f1\n";
  for (const auto& lang : groups.all()) {
    const auto it = languages.find(lang);
    if (it == languages.end()) continue;
    const auto& s = it->second;
    out << lang << ',' << group_of(groups, lang) << ',' << s.f1() << ',' << s.counts.precision() << ','
        << s.counts.recall() << ',' << s.counts.true_positives << ',' << s.counts.false_positives << ','
        << s.counts.false_negatives << ',' << s.sentences << ',' << s.malformed << ',' << s.concept_f1() << '\n';
  }
  return out.str();
}

TaskReport evaluate_task(const Transformer<float>& model, const AdapterSet<float>* adapters,
                         const corpus::MultiwayCorpus& corpus, const LanguageGroups& groups, const std::string& split,
                         std::size_t max_sentences, Decoding decoding) {
  if (!corpus.grammar) throw ConfigError("evaluate_task: corpus has no slot annotations");
  const auto languages = groups.all();
  auto examples = corpus::make_task_dataset(corpus, languages, split);
  if (max_sentences > 0) {
    std::vector<corpus::TaskExample> kept;
    std::map<std::string, std::size_t> seen;
    for (auto& ex : examples) {
      if (seen[ex.language]++ < max_sentences) kept.push_back(std::move(ex));
    }
    examples = std::move(kept);
  }
  std::vector<std::vector<TokenId>> prompts;
  for (const auto& ex : examples) prompts.push_back(ex.prompt_tokens);
  const auto& g = *corpus.grammar;
  const int budget = g.max_slots_per_template * (1 + g.max_value_length) + 1;
  std::vector<std::vector<TokenId>> allowed;
  if (decoding == Decoding::kExtractive) {
    for (const auto& p : prompts) allowed.push_back(extractive_vocabulary(p, g.num_slots));
  }
  const auto generated = greedy_decode(model, adapters, prompts, budget, 128, allowed);
  std::vector<std::string> labels;
  std::vector<std::vector<corpus::SlotTuple>> predicted, gold;
  std::vector<bool> malformed;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto parsed = parse_slots(generated[i], g.num_slots);
    labels.push_back(examples[i].language);
    predicted.push_back(std::move(parsed.tuples));
    gold.push_back(examples[i].gold);
    malformed.push_back(parsed.malformed);
  }
  TaskReport report;
  report.languages = eval_slot_f1(labels, predicted, gold, malformed);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    report.languages[labels[i]].concept_counts +=
        count_tuples(concept_tuples(predicted[i], corpus), concept_tuples(gold[i], corpus));
  }
  report.groups = groups;
  report.split = split;
  report.decoding = to_string(decoding);
  return report;
}

}  // namespace midalign::evaluation
