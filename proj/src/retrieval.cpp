#include "midalign/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>

#include "midalign/parallel.hpp"

namespace midalign::retrieval {

namespace {

template <typename Scalar>
Matrix<Scalar> normalized_rows(const Matrix<Scalar>& x, const char* side) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar norm = x.row(i).norm();
    if (!(norm > Scalar(0))) {
      throw InputError(std::string("margin_scores: zero ") + side + " row " + std::to_string(i));
    }
    out.row(i) = x.row(i) / norm;
  }
  return out;
}

/// Mean of the k largest entries of each row.
template <typename Scalar>
std::vector<Scalar> top_k_means(const Matrix<Scalar>& cos, int k) {
  std::vector<Scalar> out(static_cast<std::size_t>(cos.rows()));
  std::vector<Scalar> row(static_cast<std::size_t>(cos.cols()));
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    for (Eigen::Index j = 0; j < cos.cols(); ++j) row[static_cast<std::size_t>(j)] = cos(i, j);
    std::partial_sort(row.begin(), row.begin() + k, row.end(), std::greater<>());
    Scalar sum = 0;
    for (int t = 0; t < k; ++t) sum += row[static_cast<std::size_t>(t)];
    out[static_cast<std::size_t>(i)] = sum / static_cast<Scalar>(k);
  }
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> margin_scores(const Matrix<Scalar>& queries, const Matrix<Scalar>& candidates, int k) {
  if (k < 1) throw ConfigError("margin_scores: k must be at least 1");
  if (queries.cols() != candidates.cols()) throw InputError("margin_scores: embedding widths differ");
  if (queries.rows() <= k || candidates.rows() <= k) {
    throw ConfigError("margin_scores: need more than k = " + std::to_string(k) + " rows on each side, got " +
                      std::to_string(queries.rows()) + " queries and " + std::to_string(candidates.rows()) +
                      " candidates");
  }
  const Matrix<Scalar> q = normalized_rows(queries, "query");
  const Matrix<Scalar> c = normalized_rows(candidates, "candidate");
  const Matrix<Scalar> cos = q * c.transpose();
  const auto query_knn = top_k_means<Scalar>(cos, k);
  const auto candidate_knn = top_k_means<Scalar>(cos.transpose(), k);
  Matrix<Scalar> scores(cos.rows(), cos.cols());
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    for (Eigen::Index j = 0; j < cos.cols(); ++j) {
      const Scalar denom =
          (query_knn[static_cast<std::size_t>(i)] + candidate_knn[static_cast<std::size_t>(j)]) / Scalar(2);
      scores(i, j) = cos(i, j) / denom;
    }
  }
  return scores;
}

template Matrix<float> margin_scores(const Matrix<float>&, const Matrix<float>&, int);
template Matrix<double> margin_scores(const Matrix<double>&, const Matrix<double>&, int);

void EmbeddingBank::validate() const {
  if (embeddings.size() != languages.size()) throw InputError("embedding bank: one entry per language required");
  for (std::size_t l = 0; l < embeddings.size(); ++l) {
    if (embeddings[l].size() != num_layers()) throw InputError("embedding bank: layer counts differ");
    for (const auto& m : embeddings[l]) {
      if (static_cast<std::size_t>(m.rows()) != sentence_ids.size()) {
        throw InputError("embedding bank: language " + languages[l] + " has " + std::to_string(m.rows()) +
                         " rows for " + std::to_string(sentence_ids.size()) + " sentences");
      }
    }
  }
}

EmbeddingBank embed_corpus(const Transformer<float>& model, const AdapterSet<float>* adapters,
                           const corpus::MultiwayCorpus& corpus, const std::vector<std::string>& languages,
                           const std::vector<std::size_t>& sentence_ids, std::size_t batch_size) {
  const auto layers = static_cast<std::size_t>(model.config().num_layers) + 1;
  const auto m = static_cast<Eigen::Index>(sentence_ids.size());
  const auto d = static_cast<Eigen::Index>(model.config().hidden_dim);
  EmbeddingBank bank;
  bank.languages = languages;
  bank.sentence_ids = sentence_ids;
  bank.embeddings.assign(languages.size(), std::vector<Matrix<double>>(layers, Matrix<double>(m, d)));
  const std::size_t chunks = (sentence_ids.size() + batch_size - 1) / batch_size;
  parallel_for(languages.size() * chunks, [&](std::size_t job) {
    const std::size_t lang = job / chunks;
    const std::size_t start = (job % chunks) * batch_size;
    const std::size_t end = std::min(sentence_ids.size(), start + batch_size);
    std::vector<std::vector<TokenId>> seqs;
    std::vector<std::vector<bool>> masks;
    for (std::size_t r = start; r < end; ++r) {
      auto input = corpus::embedding_input(corpus.sentence(sentence_ids[r], languages[lang]));
      seqs.push_back(std::move(input.tokens));
      masks.push_back(std::move(input.pad_mask));
    }
    const auto traces = model.traces(seqs, masks, adapters);
    for (std::size_t r = start; r < end; ++r) {
      for (std::size_t layer = 0; layer < layers; ++layer) {
        bank.embeddings[lang][layer].row(static_cast<Eigen::Index>(r)) =
            pool_mean(traces[r - start], static_cast<int>(layer)).vector.cast<double>();
      }
    }
  });
  return bank;
}

double RetrievalReport::layer_mean(std::size_t layer) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < languages.size(); ++s) {
    for (std::size_t t = 0; t < languages.size(); ++t) {
      if (s == t) continue;
      sum += at(layer, s, t);
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

nlohmann::json RetrievalReport::to_json() const {
  nlohmann::json acc = nlohmann::json::array();
  nlohmann::json tie = nlohmann::json::array();
  for (std::size_t layer = 0; layer < num_layers; ++layer) {
    nlohmann::json a = nlohmann::json::array(), t = nlohmann::json::array();
    for (std::size_t s = 0; s < languages.size(); ++s) {
      nlohmann::json ar = nlohmann::json::array(), tr = nlohmann::json::array();
      for (std::size_t g = 0; g < languages.size(); ++g) {
        if (s == g) {
          ar.push_back(nullptr);
          tr.push_back(nullptr);
        } else {
          ar.push_back(at(layer, s, g));
          tr.push_back(ties[index(layer, s, g)]);
        }
      }
      a.push_back(std::move(ar));
      t.push_back(std::move(tr));
    }
    acc.push_back(std::move(a));
    tie.push_back(std::move(t));
  }
  nlohmann::json layer_means = nlohmann::json::array();
  for (std::size_t layer = 0; layer < num_layers; ++layer) layer_means.push_back(layer_mean(layer));
  nlohmann::json j = {{"languages", languages}, {"num_layers", num_layers},
                      {"k", k},                 {"num_sentences", num_sentences},
                      {"corpus_id", corpus_id}, {"model_id", model_id},
                      {"accuracy", acc},        {"ties", tie},
                      {"layer_mean", layer_means}};
  if (num_layers >= 3 && (num_layers - 1) % 2 == 0 && languages.size() >= 2) j["aggregate"] = aggregate(*this);
  return j;
}

RetrievalReport RetrievalReport::from_json(const nlohmann::json& j) {
  RetrievalReport r;
  try {
    r.languages = j.at("languages").get<std::vector<std::string>>();
    r.num_layers = j.at("num_layers").get<std::size_t>();
    r.k = j.at("k").get<int>();
    r.num_sentences = j.at("num_sentences").get<std::size_t>();
    r.corpus_id = j.value("corpus_id", "");
    r.model_id = j.value("model_id", "");
    const auto n = r.languages.size();
    r.accuracy.assign(r.num_layers * n * n, std::numeric_limits<double>::quiet_NaN());
    r.ties.assign(r.num_layers * n * n, 0);
    for (std::size_t layer = 0; layer < r.num_layers; ++layer) {
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t t = 0; t < n; ++t) {
          if (s == t) continue;
          r.accuracy[r.index(layer, s, t)] = j.at("accuracy").at(layer).at(s).at(t).get<double>();
          r.ties[r.index(layer, s, t)] = j.at("ties").at(layer).at(s).at(t).get<std::size_t>();
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("retrieval report: ") + e.what());
  }
  return r;
}

std::string RetrievalReport::to_csv() const {
  std::ostringstream out;
  out << "layer,src,tgt,accuracy,ties\n";
  for (std::size_t layer = 0; layer < num_layers; ++layer) {
    for (std::size_t s = 0; s < languages.size(); ++s) {
      for (std::size_t t = 0; t < languages.size(); ++t) {
        if (s == t) continue;
        out << layer << ',' << languages[s] << ',' << languages[t] << ',' << format_double(at(layer, s, t)) << ','
            << ties[index(layer, s, t)] << '\n';
      }
    }
  }
  return out.str();
}

RetrievalReport report_from_bank(const EmbeddingBank& bank, int k) {
  bank.validate();
  const auto n = bank.languages.size();
  if (n < 2) throw ConfigError("retrieval report: need at least two languages");
  if (bank.sentence_ids.size() < static_cast<std::size_t>(k) + 2) {
    throw ConfigError("retrieval report: need at least k + 2 = " + std::to_string(k + 2) + " sentences, got " +
                      std::to_string(bank.sentence_ids.size()));
  }
  RetrievalReport report;
  report.languages = bank.languages;
  report.num_layers = bank.num_layers();
  report.k = k;
  report.num_sentences = bank.sentence_ids.size();
  report.accuracy.assign(report.num_layers * n * n, std::numeric_limits<double>::quiet_NaN());
  report.ties.assign(report.num_layers * n * n, 0);
  parallel_for(report.num_layers * n * n, [&](std::size_t job) {
    const std::size_t layer = job / (n * n);
    const std::size_t s = (job / n) % n;
    const std::size_t t = job % n;
    if (s == t) return;
    const auto result = retrieve_accuracy(margin_scores(bank.at(s, layer), bank.at(t, layer), k));
    report.accuracy[job] = result.accuracy;
    report.ties[job] = result.ties;
  });
  return report;
}

RetrievalReport layerwise_report(const Transformer<float>& model, const AdapterSet<float>* adapters,
                                 const corpus::MultiwayCorpus& corpus, const std::vector<std::string>& languages,
                                 int k, const std::string& split, std::size_t max_sentences) {
  std::vector<std::size_t> ids = corpus.split(split);
  if (max_sentences > 0 && ids.size() > max_sentences) ids.resize(max_sentences);
  return report_from_bank(embed_corpus(model, adapters, corpus, languages, ids), k);
}

double aggregate(const RetrievalReport& report) {
  if (report.num_layers < 3 || (report.num_layers - 1) % 2 != 0) {
    throw ConfigError("aggregate: report must cover layers 0..L with L even and at least 2");
  }
  const auto n = report.languages.size();
  if (n < 2) throw ConfigError("aggregate: need at least two languages");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t layer = 2; layer < report.num_layers; layer += 2) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = 0; t < n; ++t) {
        if (s == t) continue;
        sum += report.at(layer, s, t);
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace midalign::retrieval
