#pragma once

#include <span>
#include <vector>

#include "midalign/autodiff.hpp"
#include "midalign/corpus.hpp"
#include "midalign/model.hpp"
#include "midalign/ops.hpp"

namespace midalign::objectives {

/// Next-token cross-entropy averaged over the target positions of each
/// example, then over examples. `logits` holds the packed rows of
/// `examples[i].sequence()` laid out as `segments[i]`.
template <typename Scalar>
ad::Var<Scalar> task_loss(const ad::Var<Scalar>& logits,
                          std::span<const corpus::TaskExample* const> examples,
                          std::span<const ad::Segment> segments);

/// Single-example task loss from concrete logits [positions, vocab] where
/// row p scores token p + 1 of example.sequence().
double task_loss(const Matrix<double>& logits, const corpus::TaskExample& example);

/// Contrastive alignment loss over n parallel pairs:
///   mean_i -log( exp(cos(s_i, t_i) / tau) / sum_j exp(cos(s_i, t_j) / tau) ).
/// Negatives are the other target-side rows of the batch. `symmetric`
/// averages with the target-to-source direction.
template <typename Scalar>
ad::Var<Scalar> alignment_loss(const ad::Var<Scalar>& source, const ad::Var<Scalar>& target,
                               Scalar tau, bool symmetric = false);

double alignment_loss(std::span<const PooledEmbedding<double>> source,
                      std::span<const PooledEmbedding<double>> target, double tau,
                      bool symmetric = false);

/// Linear warmup to `peak` over `warmup_steps`, then peak * sqrt(W / step).
double lr_at(long step, double peak, double warmup_steps);

}  // namespace midalign::objectives
