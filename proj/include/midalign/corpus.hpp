#pragma once

// Multiway-parallel corpora over synthetic "cipher" languages.
//
// A template grammar produces base sentences over a base vocabulary of
// carrier words and slot values. Each language renders a base sentence by
// permuting base indices and shifting them into its own disjoint block of
// the model vocabulary, so every sentence has an exact translation in every
// language with identical length and slot layout.
//
// Model vocabulary layout:
//   0 <pad>, 1 <bos>, 2 <eos>, 3 <task>, 4 <none>, 5.. <slot:k> labels,
//   then one block of base_vocab_size ids per language.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "midalign/model.hpp"

namespace midalign::corpus {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kTaskMarker = 3;
inline constexpr TokenId kNone = 4;
inline constexpr TokenId kFirstSlotLabel = 5;

struct GrammarConfig {
  int base_vocab_size = 64;
  int num_carriers = 32;
  int num_slots = 4;
  int values_per_slot = 8;
  int num_templates = 24;
  int min_length = 4;  // template items, slots included
  int max_length = 10;
  int max_slots_per_template = 3;
  int max_value_length = 1;

  int num_terminals() const { return num_carriers + num_slots * values_per_slot; }
  void validate() const;
  bool operator==(const GrammarConfig&) const = default;
};

void to_json(nlohmann::json& j, const GrammarConfig& g);
void from_json(const nlohmann::json& j, GrammarConfig& g);

/// Fractions of the corpus assigned to each split. The alignment split is
/// carved first; train receives the remainder.
struct SplitFractions {
  double align = 0.2;
  double dev = 0.1;
  double test = 0.1;
  // Draw the alignment split from the task-train split instead of a disjoint
  // block (the MT-style setting where task data is itself parallel).
  bool align_overlaps_train = false;

  bool operator==(const SplitFractions&) const = default;
};

void to_json(nlohmann::json& j, const SplitFractions& s);
void from_json(const nlohmann::json& j, SplitFractions& s);

struct LanguageSpec {
  std::string id;
  TokenId vocab_offset = 0;
  std::vector<int> permutation;  // base index -> base index

  TokenId encode(int base) const { return vocab_offset + permutation[static_cast<std::size_t>(base)]; }
  bool operator==(const LanguageSpec&) const = default;
};

struct SlotSpan {
  int slot = 0;
  int start = 0;  // position in the sentence
  int length = 1;
  bool operator==(const SlotSpan&) const = default;
};

/// (slot, value tokens) as emitted in task targets.
struct SlotTuple {
  int slot = 0;
  std::vector<TokenId> value;
  auto operator<=>(const SlotTuple&) const = default;
};

struct MultiwayCorpus {
  std::optional<GrammarConfig> grammar;  // absent for ingested corpora
  std::vector<LanguageSpec> languages;
  std::vector<std::vector<int>> base_sentences;  // empty for ingested corpora
  std::vector<std::vector<SlotSpan>> grammar_meta;  // per sentence, empty for ingested corpora
  std::vector<std::vector<std::vector<TokenId>>> text;  // [language][sentence]
  std::map<std::string, std::vector<std::size_t>> splits;
  std::vector<std::string> token_table;  // name of every model-vocabulary id
  std::size_t skipped_rows = 0;

  std::size_t size() const { return text.empty() ? 0 : text.front().size(); }
  int vocab_size() const { return static_cast<int>(token_table.size()); }
  int num_slots() const { return grammar ? grammar->num_slots : 0; }
  std::size_t language_index(const std::string& tag) const;
  const LanguageSpec& language(const std::string& tag) const {
    return languages[language_index(tag)];
  }
  const std::vector<TokenId>& sentence(std::size_t id, const std::string& tag) const {
    return text[language_index(tag)][id];
  }
  const std::vector<std::size_t>& split(const std::string& name) const;
};

/// Generates `num_sentences` distinct base sentences and renders them in
/// every language. Languages get seeded random permutations and consecutive
/// vocabulary blocks.
MultiwayCorpus gen_corpus(int num_sentences, const GrammarConfig& grammar,
                          const std::vector<std::string>& languages, std::uint64_t seed,
                          const SplitFractions& fractions = {});

/// Same, with explicit language specs (offsets and permutations given).
MultiwayCorpus gen_corpus(int num_sentences, const GrammarConfig& grammar,
                          std::vector<LanguageSpec> languages, std::uint64_t seed,
                          const SplitFractions& fractions = {});

/// Maps a rendered token back to its base index, or nullopt for tokens
/// outside the language's block.
std::optional<int> decipher(const LanguageSpec& language, TokenId token);
std::vector<int> decipher(const LanguageSpec& language, const std::vector<TokenId>& tokens);

std::vector<TokenId> slot_label_tokens(int num_slots);
inline TokenId slot_label(int slot) { return kFirstSlotLabel + slot; }

struct TaskExample {
  std::string language;
  std::size_t sentence_id = 0;
  std::vector<TokenId> prompt_tokens;
  std::vector<TokenId> target_tokens;
  std::vector<bool> loss_mask;  // over prompt ++ target
  std::vector<SlotTuple> gold;

  std::vector<TokenId> sequence() const;
};

/// Prompt = <bos> sentence <task>; target = (<slot:k> value...)* <eos>, or the
/// single <none> token for sentences without slots.
std::vector<TaskExample> make_task_dataset(const MultiwayCorpus& corpus,
                                           const std::vector<std::string>& languages,
                                           const std::string& split);

/// Document mix for base-model pretraining. Every sentence of every language
/// yields <bos> s <eos>. With copy_documents it also yields
/// <bos> s <task> (<slot:k> w)* <eos> over a random subsequence w of s with
/// random labels (<none> when the subsequence is empty). With probability
/// parallel_fraction it also yields <bos> s <eos> t <eos>, t being the same
/// sentence in another random language.
struct PretrainingMix {
  double parallel_fraction = 1.0;
  bool copy_documents = true;
  bool operator==(const PretrainingMix&) const = default;
};

std::vector<std::vector<TokenId>> make_pretraining_documents(const MultiwayCorpus& corpus,
                                                            const std::string& split,
                                                            const PretrainingMix& mix, std::uint64_t seed);

/// Token sequence fed to the model to embed a sentence, and its pooling mask.
struct EmbeddingInput {
  std::vector<TokenId> tokens;  // <bos> sentence
  std::vector<bool> pad_mask;  // <bos> excluded from pooling
};
EmbeddingInput embedding_input(const std::vector<TokenId>& sentence);

struct SentencePair {
  std::string source_lang;
  std::string target_lang;
  std::size_t sentence_id = 0;
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

/// At most `cap_per_pair` parallel pairs per language pair, from the
/// alignment split in split order.
std::vector<SentencePair> make_alignment_dataset(
    const MultiwayCorpus& corpus, const std::vector<std::pair<std::string, std::string>>& pairs,
    std::size_t cap_per_pair);

struct ScheduleEntry {
  std::size_t list = 0;
  std::size_t item = 0;
  bool operator==(const ScheduleEntry&) const = default;
};

/// Round-robin over the nonempty lists with a fresh seeded pair order each
/// round; shorter lists are cycled (reshuffled on every pass) so every list
/// contributes max-size entries. Length = (#nonempty) * max size.
std::vector<ScheduleEntry> resample_uniform(const std::vector<std::size_t>& list_sizes,
                                            std::uint64_t seed);

/// n source/target pairs sharing one language pair.
struct AlignmentBatch {
  std::string source_lang;
  std::string target_lang;
  std::vector<std::size_t> sentence_ids;
  std::vector<std::vector<TokenId>> source_tokens;
  std::vector<std::vector<TokenId>> target_tokens;
  std::vector<std::vector<bool>> source_pad_masks;
  std::vector<std::vector<bool>> target_pad_masks;

  std::size_t size() const { return sentence_ids.size(); }
};

/// Splits each language pair's data into shuffled mini-batches of `batch_size`
/// (a trailing remainder of at least two pairs is kept) and interleaves the
/// pairs with resample_uniform.
std::vector<AlignmentBatch> build_alignment_schedule(const std::vector<SentencePair>& data,
                                                     std::size_t batch_size, std::uint64_t seed);

/// Reads a UTF-8 TSV whose header row must equal `lang_header`. Rows with an
/// empty cell are skipped and counted; all rows land in the "test" split.
MultiwayCorpus ingest_tsv(const std::filesystem::path& path,
                          const std::vector<std::string>& lang_header);

/// Writes the given languages (all when empty) as TSV using token_table names.
void export_tsv(const MultiwayCorpus& corpus, const std::filesystem::path& path,
                std::vector<std::string> languages = {});

/// Directory with manifest.json and one token-id checkpoint per language.
void save_corpus(const MultiwayCorpus& corpus, const std::filesystem::path& dir);
MultiwayCorpus load_corpus(const std::filesystem::path& dir);

}  // namespace midalign::corpus
