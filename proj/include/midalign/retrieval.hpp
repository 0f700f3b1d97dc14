#pragma once

// Layer-wise many-to-many translation retrieval with ratio margin scoring.

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "midalign/corpus.hpp"
#include "midalign/errors.hpp"
#include "midalign/model.hpp"

namespace midalign::retrieval {

inline constexpr int kDefaultNeighbours = 4;

/// score(i, j) = cos(q_i, c_j) / ((knn(q_i) + knn(c_j)) / 2) where knn(x) is
/// the mean cosine of x to its k nearest rows on the opposite side.
template <typename Scalar>
Matrix<Scalar> margin_scores(const Matrix<Scalar>& queries, const Matrix<Scalar>& candidates,
                             int k = kDefaultNeighbours);

struct RetrievalResult {
  double accuracy = 0.0;
  std::size_t rows = 0;
  std::size_t ties = 0;  // rows whose maximum is attained more than once
};

/// Fraction of rows whose argmax (lowest index on ties) is the diagonal.
template <typename Derived>
RetrievalResult retrieve_accuracy(const Eigen::MatrixBase<Derived>& scores) {
  if (scores.rows() != scores.cols()) throw InputError("retrieve_accuracy: score matrix must be square");
  RetrievalResult out;
  out.rows = static_cast<std::size_t>(scores.rows());
  if (scores.rows() == 0) return out;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    bool tied = false;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) {
        best = j;
        tied = false;
      } else if (scores(i, j) == scores(i, best)) {
        tied = true;
      }
    }
    if (best == i) ++hits;
    if (tied) ++out.ties;
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(scores.rows());
  return out;
}

/// Mean-pooled sentence embeddings per (language, layer); row r of every
/// array belongs to sentence_ids[r].
struct EmbeddingBank {
  std::vector<std::string> languages;
  std::vector<std::size_t> sentence_ids;
  std::vector<std::vector<Matrix<double>>> embeddings;  // [language][layer] -> [m, d]

  std::size_t num_layers() const { return embeddings.empty() ? 0 : embeddings.front().size(); }
  const Matrix<double>& at(std::size_t language, std::size_t layer) const {
    return embeddings[language][layer];
  }
  void validate() const;
};

/// Embeds `sentence_ids` of every language at every layer 0..L.
EmbeddingBank embed_corpus(const Transformer<float>& model, const AdapterSet<float>* adapters,
                           const corpus::MultiwayCorpus& corpus,
                           const std::vector<std::string>& languages,
                           const std::vector<std::size_t>& sentence_ids, std::size_t batch_size = 64);

struct RetrievalReport {
  std::vector<std::string> languages;
  std::size_t num_layers = 0;  // L + 1 entries, layer 0 = embeddings
  int k = kDefaultNeighbours;
  std::size_t num_sentences = 0;
  std::string corpus_id;
  std::string model_id;
  std::vector<double> accuracy;  // [layer][src][tgt], NaN on the diagonal
  std::vector<std::size_t> ties;

  std::size_t index(std::size_t layer, std::size_t src, std::size_t tgt) const {
    return (layer * languages.size() + src) * languages.size() + tgt;
  }
  double at(std::size_t layer, std::size_t src, std::size_t tgt) const {
    return accuracy[index(layer, src, tgt)];
  }
  /// Mean accuracy over ordered pairs at one layer.
  double layer_mean(std::size_t layer) const;

  nlohmann::json to_json() const;
  static RetrievalReport from_json(const nlohmann::json& j);
  /// Columns: layer,src,tgt,accuracy,ties.
  std::string to_csv() const;
};

RetrievalReport report_from_bank(const EmbeddingBank& bank, int k = kDefaultNeighbours);

/// Retrieval accuracy for every layer and ordered pair over the given split.
RetrievalReport layerwise_report(const Transformer<float>& model, const AdapterSet<float>* adapters,
                                 const corpus::MultiwayCorpus& corpus,
                                 const std::vector<std::string>& languages, int k = kDefaultNeighbours,
                                 const std::string& split = "test", std::size_t max_sentences = 0);

/// Mean over layers 2, 4, ..., L and all ordered pairs.
double aggregate(const RetrievalReport& report);

}  // namespace midalign::retrieval
