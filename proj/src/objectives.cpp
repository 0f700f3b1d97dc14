#include "midalign/objectives.hpp"

#include <cmath>
#include <numeric>

namespace midalign::objectives {

template <typename Scalar>
ad::Var<Scalar> task_loss(const ad::Var<Scalar>& logits,
                          std::span<const corpus::TaskExample* const> examples,
                          std::span<const ad::Segment> segments) {
  if (examples.empty() || examples.size() != segments.size()) {
    throw InputError("task_loss: need one segment per example");
  }
  std::vector<std::int64_t> targets(static_cast<std::size_t>(logits.rows()), 0);
  std::vector<Scalar> weights(static_cast<std::size_t>(logits.rows()), Scalar(0));
  const Scalar per_example = Scalar(1) / static_cast<Scalar>(examples.size());
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = *examples[e];
    const auto seq = ex.sequence();
    const auto& seg = segments[e];
    if (static_cast<std::size_t>(seg.length) != seq.size() || ex.loss_mask.size() != seq.size()) {
      throw InputError("task_loss: logits do not cover prompt and target positions");
    }
    const auto count = std::count(ex.loss_mask.begin() + 1, ex.loss_mask.end(), true);
    if (count == 0) throw InputError("task_loss: example has an empty target");
    for (std::size_t p = 1; p < seq.size(); ++p) {
      if (!ex.loss_mask[p]) continue;
      const auto row = static_cast<std::size_t>(seg.offset) + p - 1;
      targets[row] = seq[p];
      weights[row] = per_example / static_cast<Scalar>(count);
    }
  }
  return ad::cross_entropy(logits, std::move(targets), std::move(weights));
}

double task_loss(const Matrix<double>& logits, const corpus::TaskExample& example) {
  ad::Tape<double> tape;
  const auto v = tape.reference(logits);
  const corpus::TaskExample* ptr = &example;
  const ad::Segment seg{0, logits.rows()};
  return task_loss<double>(v, std::span(&ptr, 1), std::span(&seg, 1)).item();
}

template <typename Scalar>
ad::Var<Scalar> alignment_loss(const ad::Var<Scalar>& source, const ad::Var<Scalar>& target,
                               Scalar tau, bool symmetric) {
  if (!(tau > Scalar(0))) throw ConfigError("temperature must be positive");
  if (source.rows() < 1 || source.rows() != target.rows() || source.cols() != target.cols()) {
    throw InputError("alignment_loss: need n >= 1 source and target rows of equal width");
  }
  const auto n = static_cast<std::size_t>(source.rows());
  std::vector<std::int64_t> diag(n);
  std::iota(diag.begin(), diag.end(), std::int64_t{0});
  const std::vector<Scalar> weights(n, Scalar(1) / static_cast<Scalar>(n));

  const auto s = ad::l2_normalize_rows(source);
  const auto t = ad::l2_normalize_rows(target);
  const auto logits = ad::scale(ad::matmul_nt(s, t), Scalar(1) / tau);
  auto loss = ad::cross_entropy(logits, diag, weights);
  if (!symmetric) return loss;
  const auto reverse = ad::scale(ad::matmul_nt(t, s), Scalar(1) / tau);
  return ad::scale(ad::add(loss, ad::cross_entropy(reverse, diag, weights)), Scalar(0.5));
}

double alignment_loss(std::span<const PooledEmbedding<double>> source,
                      std::span<const PooledEmbedding<double>> target, double tau,
                      bool symmetric) {
  if (source.empty() || source.size() != target.size()) {
    throw InputError("alignment_loss: need n >= 1 parallel pairs");
  }
  const auto d = source.front().vector.size();
  Matrix<double> s(static_cast<Eigen::Index>(source.size()), d);
  Matrix<double> t(static_cast<Eigen::Index>(target.size()), d);
  for (std::size_t i = 0; i < source.size(); ++i) {
    s.row(static_cast<Eigen::Index>(i)) = source[i].vector;
    t.row(static_cast<Eigen::Index>(i)) = target[i].vector;
  }
  ad::Tape<double> tape;
  return alignment_loss<double>(tape.reference(s), tape.reference(t), tau, symmetric).item();
}

double lr_at(long step, double peak, double warmup_steps) {
  if (step < 1) throw InputError("lr_at: step must be at least 1");
  const double w = std::max(warmup_steps, 1e-12);
  const auto t = static_cast<double>(step);
  if (t <= w) return peak * t / w;
  return peak * std::sqrt(w / t);
}

template ad::Var<float> task_loss(const ad::Var<float>&, std::span<const corpus::TaskExample* const>,
                                  std::span<const ad::Segment>);
template ad::Var<double> task_loss(const ad::Var<double>&, std::span<const corpus::TaskExample* const>,
                                   std::span<const ad::Segment>);
template ad::Var<float> alignment_loss(const ad::Var<float>&, const ad::Var<float>&, float, bool);
template ad::Var<double> alignment_loss(const ad::Var<double>&, const ad::Var<double>&, double, bool);

}  // namespace midalign::objectives
