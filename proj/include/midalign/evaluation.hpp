#pragma once

// Greedy slot-filling decoding and exact-match tuple F1.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midalign/corpus.hpp"
#include "midalign/model.hpp"

namespace midalign::evaluation {

/// Greedy continuation of each prompt until <eos> or <none> or the token
/// budget runs out. Returned sequences exclude the prompt. When `allowed` is
/// nonempty, allowed[i] lists the only token ids prompt i may emit.
std::vector<std::vector<TokenId>> greedy_decode(const Transformer<float>& model,
                                                const AdapterSet<float>* adapters,
                                                const std::vector<std::vector<TokenId>>& prompts,
                                                int max_new_tokens, std::size_t batch_size = 128,
                                                const std::vector<std::vector<TokenId>>& allowed = {});

/// kFree decodes over the whole vocabulary. kExtractive restricts outputs to
/// the control tokens (<eos>, <none>, slot labels) and the prompt's own
/// sentence tokens, since slot values are spans of the input.
enum class Decoding { kFree, kExtractive };
Decoding parse_decoding(const std::string& name);
const char* to_string(Decoding d);

/// Tokens an extractive decoder may emit for `prompt`.
std::vector<TokenId> extractive_vocabulary(const std::vector<TokenId>& prompt, int num_slots);

struct ParsedSlots {
  std::vector<corpus::SlotTuple> tuples;
  bool malformed = false;
};

/// Parses (<slot:k> value+)* <eos> or a lone <none>. Anything else is
/// malformed and yields an empty tuple set.
ParsedSlots parse_slots(const std::vector<TokenId>& generated, int num_slots);

struct SlotCounts {
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;

  double precision() const;
  double recall() const;
  /// 1.0 when there is nothing to find and nothing was predicted.
  double f1() const;
  SlotCounts& operator+=(const SlotCounts& o);
};

/// Multiset match of predicted against gold tuples.
SlotCounts count_tuples(const std::vector<corpus::SlotTuple>& predicted,
                        const std::vector<corpus::SlotTuple>& gold);

struct LanguageScore {
  SlotCounts counts;
  // Same match after mapping every value token to its base index, so a value
  // emitted in another language's vocabulary still counts (diagnostic only).
  SlotCounts concept_counts;
  std::size_t sentences = 0;
  std::size_t malformed = 0;
  double f1() const { return counts.f1(); }
  double concept_f1() const { return concept_counts.f1(); }
};

/// Value tokens replaced by -1 - base index when they fall in some
/// language's block of `corpus`; other tokens are kept.
std::vector<corpus::SlotTuple> concept_tuples(const std::vector<corpus::SlotTuple>& tuples,
                                              const corpus::MultiwayCorpus& corpus);

/// Micro-F1 per language; languages[i] labels predictions[i] and gold[i].
std::map<std::string, LanguageScore> eval_slot_f1(
    const std::vector<std::string>& languages,
    const std::vector<std::vector<corpus::SlotTuple>>& predictions,
    const std::vector<std::vector<corpus::SlotTuple>>& gold,
    const std::vector<bool>& malformed = {});

/// Languages with task training data, languages aligned to them, the rest.
struct LanguageGroups {
  std::vector<std::string> supervised;
  std::vector<std::string> aligned;
  std::vector<std::string> other;

  std::vector<std::string> all() const;
};

struct TaskReport {
  std::map<std::string, LanguageScore> languages;
  LanguageGroups groups;
  std::string split;
  std::string decoding = "free";

  /// Mean per-language F1 over a group (NaN when the group is empty).
  double group_f1(const std::vector<std::string>& group) const;
  double group_concept_f1(const std::vector<std::string>& group) const;
  nlohmann::json to_json() const;
  static TaskReport from_json(const nlohmann::json& j);
  /// Columns: language,group,f1,precision,recall,tp,fp,fn,sentences,malformed,concept_f1.
  std::string to_csv() const;
};

/// Decodes every sentence of `split` in every grouped language and scores it.
TaskReport evaluate_task(const Transformer<float>& model, const AdapterSet<float>* adapters,
                         const corpus::MultiwayCorpus& corpus, const LanguageGroups& groups,
                         const std::string& split = "test", std::size_t max_sentences = 0,
                         Decoding decoding = Decoding::kFree);

}  // namespace midalign::evaluation
