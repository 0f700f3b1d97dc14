#pragma once

// Small pre-norm decoder-only transformer with learned absolute positions,
// SwiGLU feed-forward blocks, tied input/output embeddings and optional
// low-rank adapters on every projection.
//
// Hidden-state indexing: layer 0 is the embedding output (token + position),
// layer i is the residual stream after block i, before the final norm.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "midalign/autodiff.hpp"
#include "midalign/checkpoint.hpp"
#include "midalign/errors.hpp"
#include "midalign/ops.hpp"

namespace midalign {

using TokenId = std::int32_t;

template <typename Scalar>
using Matrix = ad::Matrix<Scalar>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

enum class Mode { kTrain, kEval };

struct ModelConfig {
  int num_layers = 8;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_seq_len = 64;
  double dropout = 0.0;
  // Initialisation scales, in units of 1/sqrt(hidden_dim).
  double embedding_scale = 1.0;
  double position_scale = 0.25;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Projection names that may carry an adapter, in block order.
inline constexpr std::array<std::string_view, 7> kAdapterTargets = {
    "query", "key", "value", "output", "gate", "up", "down"};

/// Canonical adapter entry name, e.g. "layers.3.value".
std::string adapter_entry_name(int layer, std::string_view target);

/// [out, in] shape of a projection weight.
std::pair<int, int> projection_shape(const ModelConfig& config, std::string_view target);

template <typename Scalar>
struct LayerWeights {
  Matrix<Scalar> attn_norm;  // [1, d]
  Matrix<Scalar> query, key, value, output;  // [d, d]
  Matrix<Scalar> ffn_norm;  // [1, d]
  Matrix<Scalar> gate, up;  // [ffn, d]
  Matrix<Scalar> down;  // [d, ffn]

  Matrix<Scalar>& projection(std::string_view target);
  const Matrix<Scalar>& projection(std::string_view target) const;
};

template <typename Scalar>
struct BaseWeights {
  Matrix<Scalar> token_embedding;  // [vocab, d], also the output projection
  Matrix<Scalar> position_embedding;  // [max_seq_len, d]
  std::vector<LayerWeights<Scalar>> layers;
  Matrix<Scalar> final_norm;  // [1, d]

  static BaseWeights zeros(const ModelConfig& config);
  static BaseWeights random(const ModelConfig& config, std::uint64_t seed);

  /// Visits every array as (name, array) in a fixed order.
  template <typename Fn>
  void for_each(Fn&& fn);
  template <typename Fn>
  void for_each(Fn&& fn) const;

  template <typename Other>
  BaseWeights<Other> cast() const;
};

template <typename Scalar>
struct AdapterFactors {
  Matrix<Scalar> a;  // [r, in]
  Matrix<Scalar> b;  // [out, r]
};

/// Low-rank deltas W + (alpha / rank) * B * A for a set of projections.
template <typename Scalar>
struct AdapterSet {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.1;
  std::map<std::string, AdapterFactors<Scalar>> entries;

  Scalar scaling() const { return static_cast<Scalar>(alpha / rank); }

  /// A ~ N(0, 1/rank), B = 0 on every projection of every layer.
  static AdapterSet initialize(const ModelConfig& config, int rank, double alpha, double dropout,
                               std::uint64_t seed);
  /// Same shapes, all factors zero (gradient accumulators).
  static AdapterSet zeros_like(const AdapterSet& other);

  template <typename Other>
  AdapterSet<Other> cast() const;

  /// Throws FormatError naming the first entry whose shape disagrees with
  /// `config`, or that is missing/unexpected.
  void check_compatible(const ModelConfig& config) const;

  std::size_t parameter_count() const;
};

/// Token sequences packed row-wise for a single forward pass.
struct PackedBatch {
  std::vector<std::int64_t> tokens;
  std::vector<std::int64_t> positions;
  std::vector<ad::Segment> segments;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(tokens.size()); }
};

PackedBatch pack_sequences(std::span<const std::vector<TokenId>> sequences,
                           const ModelConfig& config);

/// Base and adapter arrays bound to a tape as leaves.
template <typename Scalar>
struct BoundLayer {
  ad::Var<Scalar> attn_norm, query, key, value, output, ffn_norm, gate, up, down;
  const ad::Var<Scalar>& projection(std::string_view target) const;
};

template <typename Scalar>
struct BoundBase {
  ad::Var<Scalar> token_embedding, position_embedding, final_norm;
  std::vector<BoundLayer<Scalar>> layers;
};

template <typename Scalar>
struct BoundAdapters {
  std::map<std::string, std::pair<ad::Var<Scalar>, ad::Var<Scalar>>> entries;
  Scalar scaling = 1;
  double dropout = 0.0;
};

/// Frozen when `grads` is null, trainable (gradients added into `grads`) otherwise.
template <typename Scalar>
BoundBase<Scalar> bind(ad::Tape<Scalar>& tape, const BaseWeights<Scalar>& weights,
                       BaseWeights<Scalar>* grads = nullptr);
template <typename Scalar>
BoundAdapters<Scalar> bind(ad::Tape<Scalar>& tape, const AdapterSet<Scalar>& adapters,
                           AdapterSet<Scalar>* grads = nullptr);

struct ForwardOptions {
  Mode mode = Mode::kEval;
  std::mt19937_64* rng = nullptr;  // required when mode == kTrain and any dropout > 0
  int last_layer = -1;  // stop after this block; -1 runs the whole stack
  bool compute_logits = true;  // ignored when last_layer < num_layers
};

template <typename Scalar>
struct ForwardResult {
  std::optional<ad::Var<Scalar>> logits;  // [rows, vocab]
  std::vector<ad::Var<Scalar>> hidden;  // hidden[i]: [rows, d] for layers 0..last
};

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelConfig& config, const BoundBase<Scalar>& base,
                              const BoundAdapters<Scalar>* adapters, const PackedBatch& batch,
                              const ForwardOptions& options);

/// Per-layer hidden states of one sequence.
template <typename Scalar>
struct HiddenTrace {
  std::vector<Matrix<Scalar>> states;  // [L + 1] arrays of [positions, d]
  std::vector<bool> pad_mask;  // true where the position is excluded from pooling

  std::size_t num_layers() const { return states.size(); }
  Eigen::Index num_positions() const { return states.empty() ? 0 : states.front().rows(); }
};

template <typename Scalar>
struct PooledEmbedding {
  RowVector<Scalar> vector;
  int layer = 0;
  std::string language;
  std::int64_t sentence_id = -1;
};

/// Arithmetic mean of states[layer] over non-pad positions.
template <typename Scalar>
PooledEmbedding<Scalar> pool_mean(const HiddenTrace<Scalar>& trace, int layer);

/// Concrete (non-differentiable) model: weights plus convenience inference.
template <typename Scalar>
class Transformer {
 public:
  Transformer(ModelConfig config, BaseWeights<Scalar> weights);
  static Transformer random(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const BaseWeights<Scalar>& weights() const { return weights_; }
  BaseWeights<Scalar>& mutable_weights() { return weights_; }

  struct Output {
    Matrix<Scalar> logits;  // [positions, vocab]
    HiddenTrace<Scalar> trace;
  };

  /// Single-sequence forward. Dropout needs `rng` in train mode.
  Output run(std::span<const TokenId> tokens, const AdapterSet<Scalar>* adapters = nullptr,
             Mode mode = Mode::kEval, std::mt19937_64* rng = nullptr) const;

  /// Batched forward without logits. `pad_masks[i]` marks positions of
  /// sequence i excluded from pooling; returns one trace per sequence.
  std::vector<HiddenTrace<Scalar>> traces(std::span<const std::vector<TokenId>> sequences,
                                          std::span<const std::vector<bool>> pad_masks,
                                          const AdapterSet<Scalar>* adapters = nullptr,
                                          int last_layer = -1) const;

  /// Batched eval-mode logits of the last position of each sequence.
  Matrix<Scalar> last_logits(std::span<const std::vector<TokenId>> sequences,
                             const AdapterSet<Scalar>* adapters = nullptr) const;

 private:
  ModelConfig config_;
  BaseWeights<Scalar> weights_;
};

// Checkpoint conversion. Arrays are stored as 32-bit floats.
template <typename Scalar>
io::Checkpoint to_checkpoint(const ModelConfig& config, const BaseWeights<Scalar>& weights);
template <typename Scalar>
io::Checkpoint to_checkpoint(const ModelConfig& config, const AdapterSet<Scalar>& adapters);

Transformer<float> load_model(const std::filesystem::path& path);
void save_model(const std::filesystem::path& path, const Transformer<float>& model);
AdapterSet<float> load_adapters(const std::filesystem::path& path, const ModelConfig& config);
void save_adapters(const std::filesystem::path& path, const ModelConfig& config,
                   const AdapterSet<float>& adapters);

// ---------------------------------------------------------------------------

namespace detail {

template <typename Weights, typename Fn>
void visit_base(Weights& w, Fn&& fn) {
  fn(std::string("token_embedding"), w.token_embedding);
  fn(std::string("position_embedding"), w.position_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "attn_norm", l.attn_norm);
    for (std::size_t t = 0; t < 4; ++t) fn(p + std::string(kAdapterTargets[t]), l.projection(kAdapterTargets[t]));
    fn(p + "ffn_norm", l.ffn_norm);
    for (std::size_t t = 4; t < 7; ++t) fn(p + std::string(kAdapterTargets[t]), l.projection(kAdapterTargets[t]));
  }
  fn(std::string("final_norm"), w.final_norm);
}

}  // namespace detail

template <typename Scalar>
template <typename Fn>
void BaseWeights<Scalar>::for_each(Fn&& fn) {
  detail::visit_base(*this, std::forward<Fn>(fn));
}

template <typename Scalar>
template <typename Fn>
void BaseWeights<Scalar>::for_each(Fn&& fn) const {
  detail::visit_base(*this, std::forward<Fn>(fn));
}

template <typename Scalar>
template <typename Other>
BaseWeights<Other> BaseWeights<Scalar>::cast() const {
  BaseWeights<Other> out;
  out.layers.resize(layers.size());
  std::map<std::string, const Matrix<Scalar>*> src;
  for_each([&src](const std::string& name, const Matrix<Scalar>& m) { src[name] = &m; });
  out.for_each([&src](const std::string& name, Matrix<Other>& m) {
    m = src.at(name)->template cast<Other>();
  });
  return out;
}

template <typename Scalar>
template <typename Other>
AdapterSet<Other> AdapterSet<Scalar>::cast() const {
  AdapterSet<Other> out;
  out.rank = rank;
  out.alpha = alpha;
  out.dropout = dropout;
  for (const auto& [name, f] : entries) {
    out.entries[name] = {f.a.template cast<Other>(), f.b.template cast<Other>()};
  }
  return out;
}

}  // namespace midalign
