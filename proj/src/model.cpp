#include "midalign/model.hpp"

#include <cmath>
#include <set>

namespace midalign {

void ModelConfig::validate() const {
  if (num_layers < 2) throw ConfigError("model: num_layers must be at least 2");
  if (hidden_dim <= 0 || num_heads <= 0 || ffn_dim <= 0 || max_seq_len <= 0) {
    throw ConfigError("model: dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("model: hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (vocab_size <= 0) throw ConfigError("model: vocab_size must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_layers", c.num_layers},         {"hidden_dim", c.hidden_dim},
       {"num_heads", c.num_heads},           {"ffn_dim", c.ffn_dim},
       {"vocab_size", c.vocab_size},         {"max_seq_len", c.max_seq_len},
       {"dropout", c.dropout},               {"embedding_scale", c.embedding_scale},
       {"position_scale", c.position_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {"num_layers", "hidden_dim",      "num_heads",
                                              "ffn_dim",    "vocab_size",      "max_seq_len",
                                              "dropout",    "embedding_scale", "position_scale"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("model: unknown key '" + key + "'");
  }
  c.num_layers = j.value("num_layers", c.num_layers);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.dropout = j.value("dropout", c.dropout);
  c.embedding_scale = j.value("embedding_scale", c.embedding_scale);
  c.position_scale = j.value("position_scale", c.position_scale);
}

std::string adapter_entry_name(int layer, std::string_view target) {
  return "layers." + std::to_string(layer) + "." + std::string(target);
}

std::pair<int, int> projection_shape(const ModelConfig& config, std::string_view target) {
  const int d = config.hidden_dim;
  if (target == "gate" || target == "up") return {config.ffn_dim, d};
  if (target == "down") return {d, config.ffn_dim};
  if (target == "query" || target == "key" || target == "value" || target == "output") return {d, d};
  throw ConfigError("unknown projection '" + std::string(target) + "'");
}

template <typename Scalar>
Matrix<Scalar>& LayerWeights<Scalar>::projection(std::string_view target) {
  return const_cast<Matrix<Scalar>&>(std::as_const(*this).projection(target));
}

template <typename Scalar>
const Matrix<Scalar>& LayerWeights<Scalar>::projection(std::string_view target) const {
  if (target == "query") return query;
  if (target == "key") return key;
  if (target == "value") return value;
  if (target == "output") return output;
  if (target == "gate") return gate;
  if (target == "up") return up;
  if (target == "down") return down;
  throw ConfigError("unknown projection '" + std::string(target) + "'");
}

template <typename Scalar>
const ad::Var<Scalar>& BoundLayer<Scalar>::projection(std::string_view target) const {
  if (target == "query") return query;
  if (target == "key") return key;
  if (target == "value") return value;
  if (target == "output") return output;
  if (target == "gate") return gate;
  if (target == "up") return up;
  if (target == "down") return down;
  throw ConfigError("unknown projection '" + std::string(target) + "'");
}

namespace {

template <typename Scalar>
Matrix<Scalar> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

}  // namespace

template <typename Scalar>
BaseWeights<Scalar> BaseWeights<Scalar>::zeros(const ModelConfig& config) {
  config.validate();
  BaseWeights w;
  const int d = config.hidden_dim;
  w.token_embedding = Matrix<Scalar>::Zero(config.vocab_size, d);
  w.position_embedding = Matrix<Scalar>::Zero(config.max_seq_len, d);
  w.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : w.layers) {
    layer.attn_norm = Matrix<Scalar>::Zero(1, d);
    layer.ffn_norm = Matrix<Scalar>::Zero(1, d);
    for (auto target : kAdapterTargets) {
      const auto [out, in] = projection_shape(config, target);
      layer.projection(target) = Matrix<Scalar>::Zero(out, in);
    }
  }
  w.final_norm = Matrix<Scalar>::Zero(1, d);
  return w;
}

template <typename Scalar>
BaseWeights<Scalar> BaseWeights<Scalar>::random(const ModelConfig& config, std::uint64_t seed) {
  BaseWeights w = zeros(config);
  std::mt19937_64 rng(seed);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_layers);
  w.token_embedding = gaussian<Scalar>(config.vocab_size, config.hidden_dim,
                                       config.embedding_scale * inv_sqrt_d, rng);
  w.position_embedding = gaussian<Scalar>(config.max_seq_len, config.hidden_dim,
                                          config.position_scale * inv_sqrt_d, rng);
  for (auto& layer : w.layers) {
    layer.attn_norm.setOnes();
    layer.ffn_norm.setOnes();
    for (auto target : kAdapterTargets) {
      const auto [out, in] = projection_shape(config, target);
      double stddev = 1.0 / std::sqrt(static_cast<double>(in));
      if (target == "output" || target == "down") stddev *= residual_scale;
      layer.projection(target) = gaussian<Scalar>(out, in, stddev, rng);
    }
  }
  w.final_norm.setOnes();
  return w;
}

template <typename Scalar>
AdapterSet<Scalar> AdapterSet<Scalar>::initialize(const ModelConfig& config, int rank,
                                                  double alpha, double dropout,
                                                  std::uint64_t seed) {
  config.validate();
  if (rank <= 0) throw ConfigError("adapter rank must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("adapter dropout must lie in [0, 1)");
  AdapterSet set;
  set.rank = rank;
  set.alpha = alpha;
  set.dropout = dropout;
  std::mt19937_64 rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  for (int layer = 0; layer < config.num_layers; ++layer) {
    for (auto target : kAdapterTargets) {
      const auto [out, in] = projection_shape(config, target);
      auto& e = set.entries[adapter_entry_name(layer, target)];
      e.a = gaussian<Scalar>(rank, in, stddev, rng);
      e.b = Matrix<Scalar>::Zero(out, rank);
    }
  }
  return set;
}

template <typename Scalar>
AdapterSet<Scalar> AdapterSet<Scalar>::zeros_like(const AdapterSet& other) {
  AdapterSet set;
  set.rank = other.rank;
  set.alpha = other.alpha;
  set.dropout = other.dropout;
  for (const auto& [name, f] : other.entries) {
    set.entries[name] = {Matrix<Scalar>::Zero(f.a.rows(), f.a.cols()),
                         Matrix<Scalar>::Zero(f.b.rows(), f.b.cols())};
  }
  return set;
}

template <typename Scalar>
void AdapterSet<Scalar>::check_compatible(const ModelConfig& config) const {
  std::size_t matched = 0;
  for (int layer = 0; layer < config.num_layers; ++layer) {
    for (auto target : kAdapterTargets) {
      const auto name = adapter_entry_name(layer, target);
      const auto it = entries.find(name);
      if (it == entries.end()) throw FormatError("adapter set has no entry '" + name + "'");
      ++matched;
      const auto [out, in] = projection_shape(config, target);
      const auto& f = it->second;
      if (f.a.rows() != rank || f.a.cols() != in || f.b.rows() != out || f.b.cols() != rank) {
        throw FormatError("adapter entry '" + name + "' has shapes A " +
                          std::to_string(f.a.rows()) + "x" + std::to_string(f.a.cols()) + ", B " +
                          std::to_string(f.b.rows()) + "x" + std::to_string(f.b.cols()) +
                          "; model expects A " + std::to_string(rank) + "x" + std::to_string(in) +
                          ", B " + std::to_string(out) + "x" + std::to_string(rank));
      }
    }
  }
  if (matched != entries.size()) {
    for (const auto& [name, _] : entries) {
      bool known = false;
      for (int layer = 0; layer < config.num_layers && !known; ++layer) {
        for (auto target : kAdapterTargets) known = known || name == adapter_entry_name(layer, target);
      }
      if (!known) throw FormatError("adapter entry '" + name + "' has no matching projection");
    }
  }
}

template <typename Scalar>
std::size_t AdapterSet<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, f] : entries) n += static_cast<std::size_t>(f.a.size() + f.b.size());
  return n;
}

PackedBatch pack_sequences(std::span<const std::vector<TokenId>> sequences,
                           const ModelConfig& config) {
  PackedBatch batch;
  for (const auto& seq : sequences) {
    if (seq.empty()) throw InputError("empty token sequence");
    if (static_cast<int>(seq.size()) > config.max_seq_len) {
      throw InputError("sequence of length " + std::to_string(seq.size()) +
                       " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    batch.segments.push_back({batch.rows(), static_cast<Eigen::Index>(seq.size())});
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (seq[p] < 0 || seq[p] >= config.vocab_size) {
        throw InputError("token id " + std::to_string(seq[p]) + " at position " +
                         std::to_string(p) + " is outside the vocabulary of " +
                         std::to_string(config.vocab_size));
      }
      batch.tokens.push_back(seq[p]);
      batch.positions.push_back(static_cast<std::int64_t>(p));
    }
  }
  return batch;
}

template <typename Scalar>
BoundBase<Scalar> bind(ad::Tape<Scalar>& tape, const BaseWeights<Scalar>& weights,
                       BaseWeights<Scalar>* grads) {
  auto leaf = [&](const Matrix<Scalar>& value, Matrix<Scalar>* grad) {
    return grads ? tape.parameter(value, grad) : tape.reference(value);
  };
  BoundBase<Scalar> b;
  b.token_embedding = leaf(weights.token_embedding, grads ? &grads->token_embedding : nullptr);
  b.position_embedding =
      leaf(weights.position_embedding, grads ? &grads->position_embedding : nullptr);
  b.final_norm = leaf(weights.final_norm, grads ? &grads->final_norm : nullptr);
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    const auto& w = weights.layers[i];
    auto* g = grads ? &grads->layers[i] : nullptr;
    BoundLayer<Scalar> l;
    l.attn_norm = leaf(w.attn_norm, g ? &g->attn_norm : nullptr);
    l.query = leaf(w.query, g ? &g->query : nullptr);
    l.key = leaf(w.key, g ? &g->key : nullptr);
    l.value = leaf(w.value, g ? &g->value : nullptr);
    l.output = leaf(w.output, g ? &g->output : nullptr);
    l.ffn_norm = leaf(w.ffn_norm, g ? &g->ffn_norm : nullptr);
    l.gate = leaf(w.gate, g ? &g->gate : nullptr);
    l.up = leaf(w.up, g ? &g->up : nullptr);
    l.down = leaf(w.down, g ? &g->down : nullptr);
    b.layers.push_back(l);
  }
  return b;
}

template <typename Scalar>
BoundAdapters<Scalar> bind(ad::Tape<Scalar>& tape, const AdapterSet<Scalar>& adapters,
                           AdapterSet<Scalar>* grads) {
  BoundAdapters<Scalar> b;
  b.scaling = adapters.scaling();
  b.dropout = adapters.dropout;
  for (const auto& [name, f] : adapters.entries) {
    if (grads) {
      auto& g = grads->entries.at(name);
      b.entries[name] = {tape.parameter(f.a, &g.a), tape.parameter(f.b, &g.b)};
    } else {
      b.entries[name] = {tape.reference(f.a), tape.reference(f.b)};
    }
  }
  return b;
}

namespace {

template <typename Scalar>
ad::Var<Scalar> project(const ad::Var<Scalar>& x, const ad::Var<Scalar>& weight,
                        const BoundAdapters<Scalar>* adapters, const std::string& entry,
                        const ForwardOptions& options) {
  ad::Var<Scalar> y = ad::matmul_nt(x, weight);
  if (adapters == nullptr) return y;
  const auto it = adapters->entries.find(entry);
  if (it == adapters->entries.end()) return y;
  ad::Var<Scalar> in = x;
  if (options.mode == Mode::kTrain && adapters->dropout > 0.0) {
    if (options.rng == nullptr) throw ConfigError("train-mode forward needs an rng for dropout");
    in = ad::dropout(x, adapters->dropout, *options.rng);
  }
  const auto& [a, b] = it->second;
  ad::Var<Scalar> delta = ad::matmul_nt(ad::matmul_nt(in, a), b);
  return ad::add(y, ad::scale(delta, adapters->scaling));
}

template <typename Scalar>
ad::Var<Scalar> residual_dropout(const ad::Var<Scalar>& x, const ModelConfig& config,
                                 const ForwardOptions& options) {
  if (options.mode != Mode::kTrain || config.dropout <= 0.0) return x;
  if (options.rng == nullptr) throw ConfigError("train-mode forward needs an rng for dropout");
  return ad::dropout(x, config.dropout, *options.rng);
}

}  // namespace

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelConfig& config, const BoundBase<Scalar>& base,
                              const BoundAdapters<Scalar>* adapters, const PackedBatch& batch,
                              const ForwardOptions& options) {
  const int last = options.last_layer < 0 ? config.num_layers : options.last_layer;
  if (last > config.num_layers) throw ConfigError("last_layer exceeds num_layers");

  ForwardResult<Scalar> result;
  ad::Var<Scalar> h = ad::add(ad::gather_rows(base.token_embedding, batch.tokens),
                              ad::gather_rows(base.position_embedding, batch.positions));
  h = residual_dropout(h, config, options);
  result.hidden.push_back(h);

  for (int i = 0; i < last; ++i) {
    const auto& layer = base.layers[static_cast<std::size_t>(i)];
    auto name = [i](std::string_view target) { return adapter_entry_name(i, target); };

    ad::Var<Scalar> a = ad::rms_norm(h, layer.attn_norm);
    ad::Var<Scalar> q = project(a, layer.query, adapters, name("query"), options);
    ad::Var<Scalar> k = project(a, layer.key, adapters, name("key"), options);
    ad::Var<Scalar> v = project(a, layer.value, adapters, name("value"), options);
    ad::Var<Scalar> att = ad::causal_attention(q, k, v, batch.segments, config.num_heads);
    ad::Var<Scalar> attn_out = project(att, layer.output, adapters, name("output"), options);
    h = ad::add(h, residual_dropout(attn_out, config, options));

    ad::Var<Scalar> f = ad::rms_norm(h, layer.ffn_norm);
    ad::Var<Scalar> gate = ad::silu(project(f, layer.gate, adapters, name("gate"), options));
    ad::Var<Scalar> up = project(f, layer.up, adapters, name("up"), options);
    ad::Var<Scalar> ffn_out = project(ad::mul(gate, up), layer.down, adapters, name("down"), options);
    h = ad::add(h, residual_dropout(ffn_out, config, options));
    result.hidden.push_back(h);
  }

  if (last == config.num_layers && options.compute_logits) {
    result.logits = ad::matmul_nt(ad::rms_norm(h, base.final_norm), base.token_embedding);
  }
  return result;
}

template <typename Scalar>
PooledEmbedding<Scalar> pool_mean(const HiddenTrace<Scalar>& trace, int layer) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= trace.states.size()) {
    throw InputError("pool_mean: layer " + std::to_string(layer) + " outside 0.." +
                     std::to_string(static_cast<int>(trace.states.size()) - 1));
  }
  const auto& states = trace.states[static_cast<std::size_t>(layer)];
  PooledEmbedding<Scalar> out;
  out.layer = layer;
  out.vector = RowVector<Scalar>::Zero(states.cols());
  Eigen::Index count = 0;
  for (Eigen::Index p = 0; p < states.rows(); ++p) {
    const bool pad = static_cast<std::size_t>(p) < trace.pad_mask.size() &&
                     trace.pad_mask[static_cast<std::size_t>(p)];
    if (pad) continue;
    out.vector += states.row(p);
    ++count;
  }
  if (count == 0) throw InputError("pool_mean: every position is padding");
  out.vector /= static_cast<Scalar>(count);
  return out;
}

template <typename Scalar>
Transformer<Scalar>::Transformer(ModelConfig config, BaseWeights<Scalar> weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.layers.size() != static_cast<std::size_t>(config_.num_layers) ||
      weights_.token_embedding.rows() != config_.vocab_size ||
      weights_.token_embedding.cols() != config_.hidden_dim) {
    throw FormatError("base weights do not match the model configuration");
  }
}

template <typename Scalar>
Transformer<Scalar> Transformer<Scalar>::random(const ModelConfig& config, std::uint64_t seed) {
  return Transformer(config, BaseWeights<Scalar>::random(config, seed));
}

template <typename Scalar>
typename Transformer<Scalar>::Output Transformer<Scalar>::run(std::span<const TokenId> tokens,
                                                              const AdapterSet<Scalar>* adapters,
                                                              Mode mode,
                                                              std::mt19937_64* rng) const {
  std::vector<std::vector<TokenId>> one{std::vector<TokenId>(tokens.begin(), tokens.end())};
  const PackedBatch batch = pack_sequences(one, config_);
  ad::Tape<Scalar> tape;
  const auto base = bind(tape, weights_);
  std::optional<BoundAdapters<Scalar>> bound;
  if (adapters) {
    adapters->check_compatible(config_);
    bound = bind(tape, *adapters);
  }
  ForwardOptions options;
  options.mode = mode;
  options.rng = rng;
  const auto result = forward(config_, base, bound ? &*bound : nullptr, batch, options);
  Output out;
  out.logits = result.logits->value();
  for (const auto& h : result.hidden) out.trace.states.push_back(h.value());
  out.trace.pad_mask.assign(tokens.size(), false);
  return out;
}

template <typename Scalar>
std::vector<HiddenTrace<Scalar>> Transformer<Scalar>::traces(
    std::span<const std::vector<TokenId>> sequences, std::span<const std::vector<bool>> pad_masks,
    const AdapterSet<Scalar>* adapters, int last_layer) const {
  const PackedBatch batch = pack_sequences(sequences, config_);
  ad::Tape<Scalar> tape;
  const auto base = bind(tape, weights_);
  std::optional<BoundAdapters<Scalar>> bound;
  if (adapters) bound = bind(tape, *adapters);
  ForwardOptions options;
  options.last_layer = last_layer;
  options.compute_logits = false;
  const auto result = forward(config_, base, bound ? &*bound : nullptr, batch, options);
  std::vector<HiddenTrace<Scalar>> out(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seg = batch.segments[s];
    for (const auto& h : result.hidden) {
      out[s].states.push_back(h.value().middleRows(seg.offset, seg.length));
    }
    if (s < pad_masks.size()) {
      out[s].pad_mask = pad_masks[s];
    } else {
      out[s].pad_mask.assign(sequences[s].size(), false);
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> Transformer<Scalar>::last_logits(std::span<const std::vector<TokenId>> sequences,
                                                const AdapterSet<Scalar>* adapters) const {
  const PackedBatch batch = pack_sequences(sequences, config_);
  ad::Tape<Scalar> tape;
  const auto base = bind(tape, weights_);
  std::optional<BoundAdapters<Scalar>> bound;
  if (adapters) bound = bind(tape, *adapters);
  const auto result = forward(config_, base, bound ? &*bound : nullptr, batch, ForwardOptions{});
  const auto& logits = result.logits->value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(sequences.size()), logits.cols());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seg = batch.segments[s];
    out.row(static_cast<Eigen::Index>(s)) = logits.row(seg.offset + seg.length - 1);
  }
  return out;
}

namespace {

template <typename Scalar>
io::TensorRecord to_record(const std::string& name, const Matrix<Scalar>& m) {
  io::TensorRecord t;
  t.name = name;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

Matrix<float> from_record(const io::TensorRecord& t, Eigen::Index rows, Eigen::Index cols,
                          const std::string& what) {
  if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    std::string got;
    for (auto s : t.shape) got += (got.empty() ? "" : "x") + std::to_string(s);
    throw FormatError(what + " '" + t.name + "' has shape " + got + ", expected " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix<float> m(rows, cols);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

}  // namespace

template <typename Scalar>
io::Checkpoint to_checkpoint(const ModelConfig& config, const BaseWeights<Scalar>& weights) {
  io::Checkpoint ckpt;
  ckpt.config = {{"kind", "base"}, {"model", config}};
  weights.for_each([&ckpt](const std::string& name, const Matrix<Scalar>& m) {
    ckpt.tensors.push_back(to_record(name, m));
  });
  return ckpt;
}

template <typename Scalar>
io::Checkpoint to_checkpoint(const ModelConfig& config, const AdapterSet<Scalar>& adapters) {
  io::Checkpoint ckpt;
  ckpt.config = {{"kind", "adapters"},
                 {"model", config},
                 {"rank", adapters.rank},
                 {"alpha", adapters.alpha},
                 {"dropout", adapters.dropout}};
  for (const auto& [name, f] : adapters.entries) {
    ckpt.tensors.push_back(to_record(name + ".A", f.a));
    ckpt.tensors.push_back(to_record(name + ".B", f.b));
  }
  return ckpt;
}

Transformer<float> load_model(const std::filesystem::path& path) {
  const auto ckpt = io::read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "base") {
    throw FormatError(path.string() + ": not a base-weight checkpoint");
  }
  ModelConfig config;
  try {
    config = ckpt.config.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad model config: " + e.what());
  }
  auto weights = BaseWeights<float>::zeros(config);
  weights.for_each([&ckpt](const std::string& name, Matrix<float>& m) {
    m = from_record(ckpt.at(name), m.rows(), m.cols(), "base tensor");
  });
  return Transformer<float>(config, std::move(weights));
}

void save_model(const std::filesystem::path& path, const Transformer<float>& model) {
  io::write_checkpoint(path, to_checkpoint(model.config(), model.weights()));
}

AdapterSet<float> load_adapters(const std::filesystem::path& path, const ModelConfig& config) {
  const auto ckpt = io::read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "adapters") {
    throw FormatError(path.string() + ": not an adapter checkpoint");
  }
  AdapterSet<float> set;
  try {
    set.rank = ckpt.config.at("rank").get<int>();
    set.alpha = ckpt.config.at("alpha").get<double>();
    set.dropout = ckpt.config.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad adapter metadata: " + e.what());
  }
  for (std::size_t i = 0; i + 1 < ckpt.tensors.size(); i += 2) {
    const auto& ta = ckpt.tensors[i];
    const auto& tb = ckpt.tensors[i + 1];
    if (ta.name.size() < 2 || ta.name.substr(ta.name.size() - 2) != ".A" ||
        tb.name != ta.name.substr(0, ta.name.size() - 2) + ".B") {
      throw FormatError(path.string() + ": adapter tensors must come in (.A, .B) pairs near '" +
                        ta.name + "'");
    }
    const std::string entry = ta.name.substr(0, ta.name.size() - 2);
    if (ta.shape.size() != 2 || tb.shape.size() != 2) {
      throw FormatError(path.string() + ": adapter entry '" + entry + "' is not two-dimensional");
    }
    set.entries[entry] = {from_record(ta, ta.shape[0], ta.shape[1], "adapter tensor"),
                          from_record(tb, tb.shape[0], tb.shape[1], "adapter tensor")};
  }
  if (ckpt.tensors.size() % 2 != 0) throw FormatError(path.string() + ": odd adapter tensor count");
  set.check_compatible(config);
  return set;
}

void save_adapters(const std::filesystem::path& path, const ModelConfig& config,
                   const AdapterSet<float>& adapters) {
  adapters.check_compatible(config);
  io::write_checkpoint(path, to_checkpoint(config, adapters));
}

#define MIDALIGN_INSTANTIATE(S)                                                                  \
  template struct LayerWeights<S>;                                                               \
  template struct BoundLayer<S>;                                                                 \
  template struct BaseWeights<S>;                                                                \
  template struct AdapterSet<S>;                                                                 \
  template class Transformer<S>;                                                                 \
  template BoundBase<S> bind(ad::Tape<S>&, const BaseWeights<S>&, BaseWeights<S>*);              \
  template BoundAdapters<S> bind(ad::Tape<S>&, const AdapterSet<S>&, AdapterSet<S>*);            \
  template ForwardResult<S> forward(const ModelConfig&, const BoundBase<S>&,                     \
                                    const BoundAdapters<S>*, const PackedBatch&,                 \
                                    const ForwardOptions&);                                      \
  template PooledEmbedding<S> pool_mean(const HiddenTrace<S>&, int);                             \
  template io::Checkpoint to_checkpoint(const ModelConfig&, const BaseWeights<S>&);              \
  template io::Checkpoint to_checkpoint(const ModelConfig&, const AdapterSet<S>&);

MIDALIGN_INSTANTIATE(float)
MIDALIGN_INSTANTIATE(double)

#undef MIDALIGN_INSTANTIATE

}  // namespace midalign
