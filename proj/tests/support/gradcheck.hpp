#pragma once

// Central finite differences against reverse-mode gradients of the composed
// task + alignment objective on a small double-precision model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "midalign/corpus.hpp"
#include "midalign/model.hpp"
#include "midalign/objectives.hpp"
#include "midalign/ops.hpp"

namespace midalign::gradcheck {

struct GradCheckStats {
  std::size_t checked = 0;
  std::size_t within = 0;  // coordinates under the per-coordinate tolerance
  double max_rel = 0.0;
  std::string worst;

  double fraction() const { return checked == 0 ? 0.0 : static_cast<double>(within) / static_cast<double>(checked); }
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `grad` with central differences of `loss` over the arrays listed
/// in `params`. `stride` > 1 checks every stride-th coordinate only.
inline GradCheckStats check_arrays(const std::function<double()>& loss,
                                   const std::vector<std::pair<std::string, Matrix<double>*>>& params,
                                   const std::vector<const Matrix<double>*>& grads, double h, double tol,
                                   std::size_t stride = 1) {
  GradCheckStats stats;
  for (std::size_t a = 0; a < params.size(); ++a) {
    Matrix<double>& p = *params[a].second;
    const Matrix<double>& g = *grads[a];
    for (Eigen::Index i = 0; i < p.size(); i += static_cast<Eigen::Index>(stride)) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double up = loss();
      p.data()[i] = saved - h;
      const double down = loss();
      p.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = relative_error(g.data()[i], numeric);
      ++stats.checked;
      if (rel < tol) ++stats.within;
      if (rel > stats.max_rel) {
        stats.max_rel = rel;
        stats.worst = params[a].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return stats;
}

/// A two-objective problem: task examples plus one contrastive batch of
/// parallel sentences pooled at `align_layers` (position 0 excluded).
struct ComposedProblem {
  ModelConfig config;
  BaseWeights<double> base;
  AdapterSet<double> adapters;
  std::vector<corpus::TaskExample> examples;
  std::vector<std::vector<TokenId>> sources, targets;
  std::set<int> align_layers;
  double tau = 0.1;
  std::uint64_t dropout_seed = 7;

  static ComposedProblem make(int num_layers, int hidden_dim, std::uint64_t seed) {
    ComposedProblem p;
    p.config.num_layers = num_layers;
    p.config.hidden_dim = hidden_dim;
    p.config.num_heads = 2;
    p.config.ffn_dim = 2 * hidden_dim;
    p.config.vocab_size = 24;
    p.config.max_seq_len = 16;
    p.base = BaseWeights<double>::random(p.config, seed);
    p.adapters = AdapterSet<double>::initialize(p.config, 4, 8.0, 0.1, seed + 1);
    std::mt19937_64 rng(seed + 2);
    std::normal_distribution<double> normal(0.0, 0.2);
    for (auto& [name, f] : p.adapters.entries) {
      for (Eigen::Index i = 0; i < f.b.size(); ++i) f.b.data()[i] = normal(rng);
    }
    std::uniform_int_distribution<TokenId> word(8, p.config.vocab_size - 1);
    std::uniform_int_distribution<int> length(3, 6);
    for (int e = 0; e < 3; ++e) {
      corpus::TaskExample ex;
      ex.prompt_tokens.push_back(corpus::kBos);
      for (int i = length(rng); i > 0; --i) ex.prompt_tokens.push_back(word(rng));
      ex.prompt_tokens.push_back(corpus::kTaskMarker);
      ex.target_tokens = {corpus::kFirstSlotLabel, word(rng), corpus::kEos};
      ex.loss_mask.assign(ex.prompt_tokens.size(), false);
      ex.loss_mask.resize(ex.prompt_tokens.size() + ex.target_tokens.size(), true);
      p.examples.push_back(ex);
    }
    for (int i = 0; i < 4; ++i) {
      std::vector<TokenId> s{corpus::kBos}, t{corpus::kBos};
      for (int n = length(rng); n > 0; --n) {
        s.push_back(word(rng));
        t.push_back(word(rng));
      }
      p.sources.push_back(s);
      p.targets.push_back(t);
    }
    p.align_layers = {num_layers / 2, num_layers};
    return p;
  }

  /// Task loss + summed alignment loss in train mode with a fixed dropout
  /// stream. Gradients are added into the sinks when given.
  double loss(BaseWeights<double>* base_grad = nullptr, AdapterSet<double>* adapter_grad = nullptr) const {
    ad::Tape<double> tape;
    const auto bb = bind(tape, base, base_grad);
    const auto ba = bind(tape, adapters, adapter_grad);
    std::mt19937_64 rng(dropout_seed);
    const ForwardOptions options{Mode::kTrain, &rng, -1, true};

    std::vector<std::vector<TokenId>> seqs;
    for (const auto& ex : examples) seqs.push_back(ex.sequence());
    const auto packed = pack_sequences(seqs, config);
    const auto fwd = forward(config, bb, &ba, packed, options);
    std::vector<const corpus::TaskExample*> ptrs;
    for (const auto& ex : examples) ptrs.push_back(&ex);
    auto total = objectives::task_loss<double>(*fwd.logits, ptrs, packed.segments);

    std::vector<std::vector<TokenId>> pair_seqs = sources;
    pair_seqs.insert(pair_seqs.end(), targets.begin(), targets.end());
    const auto pp = pack_sequences(pair_seqs, config);
    const auto af = forward(config, bb, &ba, pp, ForwardOptions{Mode::kTrain, &rng, -1, false});
    const std::size_t n = sources.size();
    std::vector<std::vector<Eigen::Index>> src_rows(n), tgt_rows(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (Eigen::Index r = 1; r < pp.segments[i].length; ++r) src_rows[i].push_back(pp.segments[i].offset + r);
      for (Eigen::Index r = 1; r < pp.segments[n + i].length; ++r) {
        tgt_rows[i].push_back(pp.segments[n + i].offset + r);
      }
    }
    for (int layer : align_layers) {
      const auto& h = af.hidden[static_cast<std::size_t>(layer)];
      total = ad::add(total, objectives::alignment_loss<double>(ad::mean_rows(h, src_rows),
                                                                ad::mean_rows(h, tgt_rows), tau));
    }
    if (base_grad || adapter_grad) tape.backward(total);
    return total.item();
  }

  /// Finite differences over every base and adapter coordinate.
  GradCheckStats check(double h, double tol, std::size_t stride = 1) {
    auto base_grad = BaseWeights<double>::zeros(config);
    auto adapter_grad = AdapterSet<double>::zeros_like(adapters);
    loss(&base_grad, &adapter_grad);

    std::vector<std::pair<std::string, Matrix<double>*>> params;
    std::vector<const Matrix<double>*> grads;
    base.for_each([&](const std::string& name, Matrix<double>& m) { params.emplace_back(name, &m); });
    base_grad.for_each([&](const std::string&, Matrix<double>& m) { grads.push_back(&m); });
    for (auto& [name, f] : adapters.entries) {
      params.emplace_back(name + ".a", &f.a);
      params.emplace_back(name + ".b", &f.b);
      grads.push_back(&adapter_grad.entries.at(name).a);
      grads.push_back(&adapter_grad.entries.at(name).b);
    }
    return check_arrays([this] { return loss(); }, params, grads, h, tol, stride);
  }
};

}  // namespace midalign::gradcheck
