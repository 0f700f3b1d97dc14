#include "midalign/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "midalign/checkpoint.hpp"
#include "midalign/errors.hpp"

namespace midalign::corpus {

namespace {

constexpr int kNumFixedSpecials = 5;

int special_count(int num_slots) { return kNumFixedSpecials + num_slots; }

// Uniform integer in [lo, hi] from the raw engine output, so generated
// corpora do not depend on the standard library's distribution code.
int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<std::string> special_names(int num_slots) {
  std::vector<std::string> names = {"<pad>", "<bos>", "<eos>", "<task>", "<none>"};
  for (int s = 0; s < num_slots; ++s) names.push_back("<slot:" + std::to_string(s) + ">");
  return names;
}

struct Template {
  std::vector<int> items;  // >= 0: carrier base index; < 0: slot (-1 - slot)
};

std::vector<Template> make_templates(const GrammarConfig& g, std::mt19937_64& rng) {
  std::vector<Template> templates(static_cast<std::size_t>(g.num_templates));
  for (auto& t : templates) {
    const int len = uniform_int(rng, g.min_length, g.max_length);
    const int max_slots = std::min({g.max_slots_per_template, g.num_slots, len - 1});
    const int k = uniform_int(rng, 0, std::max(0, max_slots));
    std::vector<int> slots(static_cast<std::size_t>(g.num_slots));
    std::iota(slots.begin(), slots.end(), 0);
    shuffle(slots, rng);
    std::vector<int> positions(static_cast<std::size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    shuffle(positions, rng);
    t.items.assign(static_cast<std::size_t>(len), 0);
    for (auto& item : t.items) item = uniform_int(rng, 0, g.num_carriers - 1);
    for (int i = 0; i < k; ++i) t.items[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = -1 - slots[static_cast<std::size_t>(i)];
  }
  return templates;
}

constexpr int kMaxTemplateRedraws = 1000;

// Upper bound on the distinct sentences the templates can produce.
double template_capacity(const std::vector<Template>& templates, const GrammarConfig& g) {
  double per_slot = 0.0;
  for (int len = 1; len <= g.max_value_length; ++len) per_slot += std::pow(static_cast<double>(g.values_per_slot), len);
  double total = 0.0;
  for (const auto& t : templates) {
    double c = 1.0;
    for (int item : t.items) c *= item < 0 ? per_slot : 1.0;
    total += c;
  }
  return total;
}

void assign_splits(MultiwayCorpus& corpus, const SplitFractions& f, std::mt19937_64& rng) {
  for (double x : {f.align, f.dev, f.test}) {
    if (x < 0.0 || x > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
  }
  const double used = f.dev + f.test + (f.align_overlaps_train ? 0.0 : f.align);
  if (used > 1.0 + 1e-12) throw ConfigError("split fractions sum to more than 1");
  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  auto count = [n](double frac) { return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n))); };
  const std::size_t na = count(f.align), nd = count(f.dev), nt = count(f.test);
  std::size_t cursor = 0;
  auto take = [&](std::size_t k) {
    k = std::min(k, n - cursor);
    std::vector<std::size_t> out(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + k));
    cursor += k;
    return out;
  };
  corpus.splits.clear();
  if (!f.align_overlaps_train) corpus.splits["align"] = take(na);
  corpus.splits["dev"] = take(nd);
  corpus.splits["test"] = take(nt);
  corpus.splits["train"] = take(n - cursor);
  if (f.align_overlaps_train) {
    const auto& train = corpus.splits["train"];
    corpus.splits["align"].assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(std::min(na, train.size())));
  }
}

void check_languages(const std::vector<LanguageSpec>& languages, int base_vocab) {
  if (languages.size() < 2) throw ConfigError("a multiway corpus needs at least two languages");
  std::set<std::string> tags;
  for (const auto& l : languages) {
    if (!tags.insert(l.id).second) throw ConfigError("duplicate language tag '" + l.id + "'");
    if (static_cast<int>(l.permutation.size()) != base_vocab) {
      throw ConfigError("language '" + l.id + "': permutation size differs from base vocabulary");
    }
    std::vector<int> sorted = l.permutation;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < base_vocab; ++i) {
      if (sorted[static_cast<std::size_t>(i)] != i) {
        throw ConfigError("language '" + l.id + "': permutation is not a bijection");
      }
    }
    if (l.vocab_offset < 0) throw ConfigError("language '" + l.id + "': negative vocab_offset");
  }
  for (std::size_t i = 0; i < languages.size(); ++i) {
    for (std::size_t j = i + 1; j < languages.size(); ++j) {
      const auto a = languages[i].vocab_offset, b = languages[j].vocab_offset;
      if (a < b + base_vocab && b < a + base_vocab) {
        throw ConfigError("languages '" + languages[i].id + "' and '" + languages[j].id +
                          "' have overlapping vocabulary blocks");
      }
    }
  }
}

}  // namespace

void GrammarConfig::validate() const {
  if (num_templates < 1) throw ConfigError("grammar has zero templates");
  if (num_carriers < 1 || num_slots < 0 || values_per_slot < 1) {
    throw ConfigError("grammar needs at least one carrier and one value per slot");
  }
  if (min_length < 1 || max_length < min_length) throw ConfigError("grammar template lengths invalid");
  if (max_slots_per_template < 0 || max_value_length < 1) throw ConfigError("grammar slot limits invalid");
  if (base_vocab_size < num_terminals()) {
    throw ConfigError("base vocabulary (" + std::to_string(base_vocab_size) +
                      ") is smaller than the number of grammar terminals (" +
                      std::to_string(num_terminals()) + ")");
  }
}

void to_json(nlohmann::json& j, const GrammarConfig& g) {
  j = {{"base_vocab_size", g.base_vocab_size},
       {"num_carriers", g.num_carriers},
       {"num_slots", g.num_slots},
       {"values_per_slot", g.values_per_slot},
       {"num_templates", g.num_templates},
       {"min_length", g.min_length},
       {"max_length", g.max_length},
       {"max_slots_per_template", g.max_slots_per_template},
       {"max_value_length", g.max_value_length}};
}

void from_json(const nlohmann::json& j, GrammarConfig& g) {
  static const std::set<std::string> known = {
      "base_vocab_size", "num_carriers", "num_slots",   "values_per_slot",        "num_templates",
      "min_length",      "max_length",   "max_slots_per_template", "max_value_length"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("grammar: unknown key '" + key + "'");
  }
  g.base_vocab_size = j.value("base_vocab_size", g.base_vocab_size);
  g.num_carriers = j.value("num_carriers", g.num_carriers);
  g.num_slots = j.value("num_slots", g.num_slots);
  g.values_per_slot = j.value("values_per_slot", g.values_per_slot);
  g.num_templates = j.value("num_templates", g.num_templates);
  g.min_length = j.value("min_length", g.min_length);
  g.max_length = j.value("max_length", g.max_length);
  g.max_slots_per_template = j.value("max_slots_per_template", g.max_slots_per_template);
  g.max_value_length = j.value("max_value_length", g.max_value_length);
}

void to_json(nlohmann::json& j, const SplitFractions& s) {
  j = {{"align", s.align}, {"dev", s.dev}, {"test", s.test},
       {"align_overlaps_train", s.align_overlaps_train}};
}

void from_json(const nlohmann::json& j, SplitFractions& s) {
  static const std::set<std::string> known = {"align", "dev", "test", "align_overlaps_train"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("splits: unknown key '" + key + "'");
  }
  s.align = j.value("align", s.align);
  s.dev = j.value("dev", s.dev);
  s.test = j.value("test", s.test);
  s.align_overlaps_train = j.value("align_overlaps_train", s.align_overlaps_train);
}

std::size_t MultiwayCorpus::language_index(const std::string& tag) const {
  for (std::size_t i = 0; i < languages.size(); ++i) {
    if (languages[i].id == tag) return i;
  }
  throw ConfigError("unknown language '" + tag + "'");
}

const std::vector<std::size_t>& MultiwayCorpus::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw ConfigError("corpus has no split named '" + name + "'");
  return it->second;
}

MultiwayCorpus gen_corpus(int num_sentences, const GrammarConfig& grammar,
                          const std::vector<std::string>& languages, std::uint64_t seed,
                          const SplitFractions& fractions) {
  grammar.validate();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<LanguageSpec> specs;
  const int specials = special_count(grammar.num_slots);
  for (std::size_t k = 0; k < languages.size(); ++k) {
    LanguageSpec spec;
    spec.id = languages[k];
    spec.vocab_offset = specials + static_cast<int>(k) * grammar.base_vocab_size;
    spec.permutation.resize(static_cast<std::size_t>(grammar.base_vocab_size));
    std::iota(spec.permutation.begin(), spec.permutation.end(), 0);
    shuffle(spec.permutation, rng);
    specs.push_back(std::move(spec));
  }
  return gen_corpus(num_sentences, grammar, std::move(specs), seed, fractions);
}

MultiwayCorpus gen_corpus(int num_sentences, const GrammarConfig& grammar,
                          std::vector<LanguageSpec> languages, std::uint64_t seed,
                          const SplitFractions& fractions) {
  grammar.validate();
  if (num_sentences < 1) throw ConfigError("num_sentences must be at least 1");
  check_languages(languages, grammar.base_vocab_size);

  std::mt19937_64 rng(seed);
  // Redraw until the templates leave headroom over the requested size, so
  // rejection of duplicates terminates quickly.
  auto templates = make_templates(grammar, rng);
  for (int redraw = 0; template_capacity(templates, grammar) < 1.2 * num_sentences; ++redraw) {
    if (redraw == kMaxTemplateRedraws) {
      throw ConfigError("grammar cannot produce " + std::to_string(num_sentences) + " distinct sentences");
    }
    templates = make_templates(grammar, rng);
  }

  MultiwayCorpus corpus;
  corpus.grammar = grammar;
  std::set<std::vector<int>> seen;
  const long max_attempts = 200L * num_sentences + 1000;
  long attempts = 0;
  while (static_cast<int>(corpus.base_sentences.size()) < num_sentences) {
    if (++attempts > max_attempts) {
      throw ConfigError("grammar cannot produce " + std::to_string(num_sentences) +
                        " distinct sentences");
    }
    const auto& t = templates[static_cast<std::size_t>(uniform_int(rng, 0, grammar.num_templates - 1))];
    std::vector<int> sentence;
    std::vector<SlotSpan> spans;
    for (int item : t.items) {
      if (item >= 0) {
        sentence.push_back(item);
        continue;
      }
      const int slot = -1 - item;
      const int len = uniform_int(rng, 1, grammar.max_value_length);
      spans.push_back({slot, static_cast<int>(sentence.size()), len});
      for (int v = 0; v < len; ++v) {
        sentence.push_back(grammar.num_carriers + slot * grammar.values_per_slot +
                           uniform_int(rng, 0, grammar.values_per_slot - 1));
      }
    }
    if (!seen.insert(sentence).second) continue;
    corpus.base_sentences.push_back(std::move(sentence));
    corpus.grammar_meta.push_back(std::move(spans));
  }

  int vocab = special_count(grammar.num_slots);
  for (const auto& l : languages) vocab = std::max(vocab, l.vocab_offset + grammar.base_vocab_size);
  corpus.token_table.assign(static_cast<std::size_t>(vocab), "");
  for (std::size_t i = 0; i < corpus.token_table.size(); ++i) corpus.token_table[i] = "<unused:" + std::to_string(i) + ">";
  const auto specials = special_names(grammar.num_slots);
  std::copy(specials.begin(), specials.end(), corpus.token_table.begin());
  for (const auto& l : languages) {
    for (int b = 0; b < grammar.base_vocab_size; ++b) {
      corpus.token_table[static_cast<std::size_t>(l.vocab_offset + b)] = l.id + ":" + std::to_string(b);
    }
  }

  corpus.languages = std::move(languages);
  for (const auto& l : corpus.languages) {
    std::vector<std::vector<TokenId>> rendered;
    rendered.reserve(corpus.base_sentences.size());
    for (const auto& s : corpus.base_sentences) {
      std::vector<TokenId> r(s.size());
      std::transform(s.begin(), s.end(), r.begin(), [&l](int b) { return l.encode(b); });
      rendered.push_back(std::move(r));
    }
    corpus.text.push_back(std::move(rendered));
  }
  assign_splits(corpus, fractions, rng);
  return corpus;
}

std::optional<int> decipher(const LanguageSpec& language, TokenId token) {
  const int local = token - language.vocab_offset;
  if (local < 0 || local >= static_cast<int>(language.permutation.size())) return std::nullopt;
  const auto it = std::find(language.permutation.begin(), language.permutation.end(), local);
  return static_cast<int>(it - language.permutation.begin());
}

std::vector<int> decipher(const LanguageSpec& language, const std::vector<TokenId>& tokens) {
  std::vector<int> inverse(language.permutation.size());
  for (std::size_t b = 0; b < language.permutation.size(); ++b) {
    inverse[static_cast<std::size_t>(language.permutation[b])] = static_cast<int>(b);
  }
  std::vector<int> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    const int local = t - language.vocab_offset;
    if (local < 0 || local >= static_cast<int>(inverse.size())) {
      out.push_back(-1 - t);  // tokens outside the block pass through, negated
    } else {
      out.push_back(inverse[static_cast<std::size_t>(local)]);
    }
  }
  return out;
}

std::vector<TokenId> slot_label_tokens(int num_slots) {
  std::vector<TokenId> out;
  for (int s = 0; s < num_slots; ++s) out.push_back(slot_label(s));
  return out;
}

std::vector<TokenId> TaskExample::sequence() const {
  std::vector<TokenId> out = prompt_tokens;
  out.insert(out.end(), target_tokens.begin(), target_tokens.end());
  return out;
}

std::vector<TaskExample> make_task_dataset(const MultiwayCorpus& corpus,
                                           const std::vector<std::string>& languages,
                                           const std::string& split) {
  if (languages.empty()) throw ConfigError("task dataset needs at least one language");
  if (!corpus.grammar) throw ConfigError("task datasets need a synthetic corpus with slot annotations");
  const auto& ids = corpus.split(split);
  const int specials = special_count(corpus.grammar->num_slots);
  std::vector<TaskExample> out;
  for (const auto& tag : languages) {
    const auto li = corpus.language_index(tag);
    if (corpus.languages[li].vocab_offset < specials) {
      throw ConfigError("language '" + tag + "' overlaps the special-token block");
    }
    for (auto id : ids) {
      const auto& sentence = corpus.text[li][id];
      TaskExample ex;
      ex.language = tag;
      ex.sentence_id = id;
      ex.prompt_tokens.push_back(kBos);
      ex.prompt_tokens.insert(ex.prompt_tokens.end(), sentence.begin(), sentence.end());
      ex.prompt_tokens.push_back(kTaskMarker);
      auto spans = corpus.grammar_meta[id];
      std::sort(spans.begin(), spans.end(), [](const SlotSpan& a, const SlotSpan& b) { return a.start < b.start; });
      for (const auto& span : spans) {
        SlotTuple tuple;
        tuple.slot = span.slot;
        tuple.value.assign(sentence.begin() + span.start, sentence.begin() + span.start + span.length);
        ex.target_tokens.push_back(slot_label(span.slot));
        ex.target_tokens.insert(ex.target_tokens.end(), tuple.value.begin(), tuple.value.end());
        ex.gold.push_back(std::move(tuple));
      }
      ex.target_tokens.push_back(spans.empty() ? kNone : kEos);
      ex.loss_mask.assign(ex.prompt_tokens.size(), false);
      ex.loss_mask.resize(ex.prompt_tokens.size() + ex.target_tokens.size(), true);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<std::vector<TokenId>> make_pretraining_documents(const MultiwayCorpus& corpus,
                                                            const std::string& split,
                                                            const PretrainingMix& mix, std::uint64_t seed) {
  if (!(mix.parallel_fraction >= 0.0 && mix.parallel_fraction <= 1.0)) {
    throw ConfigError("parallel_fraction must lie in [0, 1]");
  }
  const auto& ids = corpus.split(split);
  const std::size_t n = corpus.languages.size();
  const int num_slots = corpus.num_slots();
  const auto threshold = static_cast<std::uint64_t>(std::llround(mix.parallel_fraction * 1000.0));
  std::mt19937_64 rng(seed + 17);
  std::vector<std::vector<TokenId>> docs;
  for (std::size_t li = 0; li < n; ++li) {
    for (auto id : ids) {
      const auto& s = corpus.text[li][id];
      std::vector<TokenId> doc{kBos};
      doc.insert(doc.end(), s.begin(), s.end());
      doc.push_back(kEos);
      docs.push_back(doc);
      if (mix.copy_documents && num_slots > 0) {
        auto copy = doc;
        copy.back() = kTaskMarker;
        bool any = false;
        for (TokenId t : s) {
          if (rng() % 3 != 0) continue;
          copy.push_back(slot_label(static_cast<int>(rng() % static_cast<std::uint64_t>(num_slots))));
          copy.push_back(t);
          any = true;
        }
        copy.push_back(any ? kEos : kNone);
        docs.push_back(std::move(copy));
      }
      if (n > 1 && rng() % 1000 < threshold) {
        std::size_t lj = rng() % (n - 1);
        if (lj >= li) ++lj;
        auto pair = doc;
        const auto& t = corpus.text[lj][id];
        pair.insert(pair.end(), t.begin(), t.end());
        pair.push_back(kEos);
        docs.push_back(std::move(pair));
      }
    }
  }
  return docs;
}

EmbeddingInput embedding_input(const std::vector<TokenId>& sentence) {
  EmbeddingInput in;
  in.tokens.reserve(sentence.size() + 1);
  in.tokens.push_back(kBos);
  in.tokens.insert(in.tokens.end(), sentence.begin(), sentence.end());
  in.pad_mask.assign(in.tokens.size(), false);
  in.pad_mask[0] = true;
  return in;
}

std::vector<SentencePair> make_alignment_dataset(
    const MultiwayCorpus& corpus, const std::vector<std::pair<std::string, std::string>>& pairs,
    std::size_t cap_per_pair) {
  if (cap_per_pair < 1) throw ConfigError("cap_per_pair must be at least 1");
  const auto& ids = corpus.split("align");
  std::vector<SentencePair> out;
  for (const auto& [src, tgt] : pairs) {
    if (src == tgt) throw ConfigError("alignment pair uses the same language twice: '" + src + "'");
    const auto si = corpus.language_index(src);
    const auto ti = corpus.language_index(tgt);
    const std::size_t n = std::min(cap_per_pair, ids.size());
    for (std::size_t k = 0; k < n; ++k) {
      out.push_back({src, tgt, ids[k], corpus.text[si][ids[k]], corpus.text[ti][ids[k]]});
    }
  }
  return out;
}

std::vector<ScheduleEntry> resample_uniform(const std::vector<std::size_t>& list_sizes,
                                            std::uint64_t seed) {
  std::vector<std::size_t> active;
  std::size_t longest = 0;
  for (std::size_t i = 0; i < list_sizes.size(); ++i) {
    if (list_sizes[i] == 0) continue;
    active.push_back(i);
    longest = std::max(longest, list_sizes[i]);
  }
  if (active.empty()) throw ConfigError("resample_uniform: every list is empty");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> order(list_sizes.size());
  std::vector<std::size_t> cursor(list_sizes.size(), 0);
  auto refill = [&](std::size_t list) {
    auto& o = order[list];
    o.resize(list_sizes[list]);
    std::iota(o.begin(), o.end(), std::size_t{0});
    shuffle(o, rng);
    cursor[list] = 0;
  };
  for (auto list : active) refill(list);

  std::vector<ScheduleEntry> schedule;
  schedule.reserve(active.size() * longest);
  std::vector<std::size_t> round = active;
  for (std::size_t r = 0; r < longest; ++r) {
    shuffle(round, rng);
    for (auto list : round) {
      if (cursor[list] == order[list].size()) refill(list);
      schedule.push_back({list, order[list][cursor[list]++]});
    }
  }
  return schedule;
}

std::vector<AlignmentBatch> build_alignment_schedule(const std::vector<SentencePair>& data,
                                                     std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("contrastive batch size must be at least 1");
  std::vector<std::pair<std::string, std::string>> keys;
  std::vector<std::vector<const SentencePair*>> groups;
  for (const auto& p : data) {
    const auto key = std::make_pair(p.source_lang, p.target_lang);
    auto it = std::find(keys.begin(), keys.end(), key);
    if (it == keys.end()) {
      keys.push_back(key);
      groups.emplace_back();
      it = keys.end() - 1;
    }
    groups[static_cast<std::size_t>(it - keys.begin())].push_back(&p);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<AlignmentBatch>> chunks(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto items = groups[g];
    shuffle(items, rng);
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
      const std::size_t end = std::min(items.size(), start + batch_size);
      if (end - start < std::min<std::size_t>(2, batch_size)) break;
      AlignmentBatch batch;
      batch.source_lang = keys[g].first;
      batch.target_lang = keys[g].second;
      for (std::size_t i = start; i < end; ++i) {
        const auto src = embedding_input(items[i]->source);
        const auto tgt = embedding_input(items[i]->target);
        batch.sentence_ids.push_back(items[i]->sentence_id);
        batch.source_tokens.push_back(src.tokens);
        batch.source_pad_masks.push_back(src.pad_mask);
        batch.target_tokens.push_back(tgt.tokens);
        batch.target_pad_masks.push_back(tgt.pad_mask);
      }
      chunks[g].push_back(std::move(batch));
    }
  }
  std::vector<std::size_t> sizes;
  for (const auto& c : chunks) sizes.push_back(c.size());
  std::vector<AlignmentBatch> schedule;
  if (std::all_of(sizes.begin(), sizes.end(), [](std::size_t s) { return s == 0; })) return schedule;
  for (const auto& e : resample_uniform(sizes, rng())) schedule.push_back(chunks[e.list][e.item]);
  return schedule;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    cells.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cells;
}

std::vector<std::string> split_whitespace(const std::string& cell) {
  std::istringstream in(cell);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

}  // namespace

MultiwayCorpus ingest_tsv(const std::filesystem::path& path,
                          const std::vector<std::string>& lang_header) {
  const std::string contents = io::read_file(path);
  std::vector<std::string> lines;
  {
    std::istringstream in(contents);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
    }
  }
  const std::string where = path.string();
  if (lines.empty()) throw FormatError(where + ": missing header row");
  const auto header = split_tabs(lines.front());
  for (std::size_t c = 0; c < std::max(header.size(), lang_header.size()); ++c) {
    const std::string got = c < header.size() ? header[c] : "<missing>";
    const std::string want = c < lang_header.size() ? lang_header[c] : "<none>";
    if (got != want) {
      throw FormatError(where + ": row 1, column " + std::to_string(c + 1) + ": header tag '" +
                        got + "' does not match expected '" + want + "'");
    }
  }
  if (lang_header.size() < 2) throw ConfigError("ingest_tsv needs at least two languages");

  MultiwayCorpus corpus;
  corpus.token_table = special_names(0);
  std::map<std::string, TokenId> ids;
  for (const auto& tag : lang_header) corpus.languages.push_back({tag, 0, {}});
  corpus.text.resize(lang_header.size());
  for (std::size_t r = 1; r < lines.size(); ++r) {
    if (lines[r].empty()) continue;
    const auto cells = split_tabs(lines[r]);
    if (cells.size() != lang_header.size()) {
      throw FormatError(where + ": row " + std::to_string(r + 1) + ": expected " +
                        std::to_string(lang_header.size()) + " columns, found " +
                        std::to_string(cells.size()));
    }
    std::vector<std::vector<std::string>> words;
    bool empty = false;
    for (const auto& cell : cells) {
      words.push_back(split_whitespace(cell));
      empty = empty || words.back().empty();
    }
    if (empty) {
      ++corpus.skipped_rows;
      continue;
    }
    for (std::size_t c = 0; c < words.size(); ++c) {
      std::vector<TokenId> tokens;
      for (const auto& w : words[c]) {
        auto [it, inserted] = ids.emplace(w, static_cast<TokenId>(corpus.token_table.size()));
        if (inserted) corpus.token_table.push_back(w);
        tokens.push_back(it->second);
      }
      corpus.text[c].push_back(std::move(tokens));
    }
  }
  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  corpus.splits["test"] = std::move(all);
  return corpus;
}

void export_tsv(const MultiwayCorpus& corpus, const std::filesystem::path& path,
                std::vector<std::string> languages) {
  if (languages.empty()) {
    for (const auto& l : corpus.languages) languages.push_back(l.id);
  }
  std::vector<std::size_t> idx;
  for (const auto& tag : languages) idx.push_back(corpus.language_index(tag));
  std::string out;
  for (std::size_t c = 0; c < languages.size(); ++c) out += (c ? "\t" : "") + languages[c];
  out += '\n';
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    for (std::size_t c = 0; c < idx.size(); ++c) {
      if (c) out += '\t';
      const auto& sentence = corpus.text[idx[c]][s];
      for (std::size_t t = 0; t < sentence.size(); ++t) {
        if (t) out += ' ';
        out += corpus.token_table.at(static_cast<std::size_t>(sentence[t]));
      }
    }
    out += '\n';
  }
  io::write_file(path, out);
}

void save_corpus(const MultiwayCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "midalign-corpus";
  manifest["version"] = 1;
  manifest["grammar"] = corpus.grammar ? nlohmann::json(*corpus.grammar) : nlohmann::json(nullptr);
  manifest["languages"] = nlohmann::json::array();
  for (std::size_t k = 0; k < corpus.languages.size(); ++k) {
    const auto& l = corpus.languages[k];
    const std::string file = "lang" + std::to_string(k) + ".tokens";
    manifest["languages"].push_back(
        {{"id", l.id}, {"vocab_offset", l.vocab_offset}, {"permutation", l.permutation}, {"file", file}});
    io::Checkpoint ckpt;
    ckpt.config = {{"kind", "corpus-tokens"}, {"language", l.id}};
    io::TensorRecord lengths{"lengths", {static_cast<std::int64_t>(corpus.size())}, {}};
    io::TensorRecord tokens{"tokens", {0}, {}};
    for (const auto& s : corpus.text[k]) {
      lengths.data.push_back(static_cast<float>(s.size()));
      for (TokenId t : s) tokens.data.push_back(static_cast<float>(t));
    }
    tokens.shape[0] = static_cast<std::int64_t>(tokens.data.size());
    ckpt.tensors = {std::move(lengths), std::move(tokens)};
    io::write_checkpoint(dir / file, ckpt);
  }
  manifest["splits"] = corpus.splits;
  manifest["token_table"] = corpus.token_table;
  manifest["skipped_rows"] = corpus.skipped_rows;
  manifest["base_sentences"] = corpus.base_sentences;
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& spans : corpus.grammar_meta) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& s : spans) row.push_back({s.slot, s.start, s.length});
    meta.push_back(std::move(row));
  }
  manifest["slots"] = std::move(meta);
  io::write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

MultiwayCorpus load_corpus(const std::filesystem::path& dir) {
  const auto where = (dir / "manifest.json").string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  MultiwayCorpus corpus;
  try {
    if (manifest.at("format") != "midalign-corpus") throw FormatError(where + ": not a corpus manifest");
    if (!manifest.at("grammar").is_null()) corpus.grammar = manifest.at("grammar").get<GrammarConfig>();
    corpus.splits = manifest.at("splits").get<std::map<std::string, std::vector<std::size_t>>>();
    corpus.token_table = manifest.at("token_table").get<std::vector<std::string>>();
    corpus.skipped_rows = manifest.at("skipped_rows").get<std::size_t>();
    corpus.base_sentences = manifest.at("base_sentences").get<std::vector<std::vector<int>>>();
    for (const auto& row : manifest.at("slots")) {
      std::vector<SlotSpan> spans;
      for (const auto& s : row) spans.push_back({s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()});
      corpus.grammar_meta.push_back(std::move(spans));
    }
    for (const auto& l : manifest.at("languages")) {
      LanguageSpec spec{l.at("id").get<std::string>(), l.at("vocab_offset").get<TokenId>(),
                        l.at("permutation").get<std::vector<int>>()};
      const auto ckpt = io::read_checkpoint(dir / l.at("file").get<std::string>());
      const auto& lengths = ckpt.at("lengths").data;
      const auto& tokens = ckpt.at("tokens").data;
      std::vector<std::vector<TokenId>> text;
      std::size_t cursor = 0;
      for (float len : lengths) {
        const auto n = static_cast<std::size_t>(len);
        if (cursor + n > tokens.size()) throw FormatError(where + ": token file shorter than its lengths");
        std::vector<TokenId> s;
        for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<TokenId>(tokens[cursor + i]));
        cursor += n;
        text.push_back(std::move(s));
      }
      if (cursor != tokens.size()) throw FormatError(where + ": token file has trailing tokens");
      corpus.languages.push_back(std::move(spec));
      corpus.text.push_back(std::move(text));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  for (const auto& t : corpus.text) {
    if (t.size() != corpus.size()) throw FormatError(where + ": languages disagree on sentence count");
  }
  return corpus;
}

}  // namespace midalign::corpus
