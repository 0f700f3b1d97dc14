#pragma once

// Differentiable primitives. Each function evaluates eagerly, records the
// result on the inputs' tape and registers the vector-Jacobian product.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "midalign/autodiff.hpp"
#include "midalign/errors.hpp"

namespace midalign::ad {

/// Contiguous block of rows belonging to one sequence in a packed batch.
struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw InputError("operands live on different tapes");
}

template <typename Scalar>
void require_shape(const Var<Scalar>& v, Eigen::Index rows, Eigen::Index cols, const char* op) {
  if (v.rows() != rows || v.cols() != cols) {
    throw InputError(std::string(op) + ": shape mismatch, got " + std::to_string(v.rows()) + "x" +
                     std::to_string(v.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(b, a.rows(), a.cols(), "add");
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  return tape.record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(b, a.rows(), a.cols(), "sub");
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  return tape.record("sub", a.value() - b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, -g);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.record("scale", a.value() * factor, {a}, [ia, factor](Tape<Scalar>& t, const auto& g) {
    t.accumulate(ia, g * factor);
  });
}

/// Element-wise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  detail::require_shape(b, a.rows(), a.cols(), "mul");
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return tape.record("mul", std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

/// x * sigmoid(x)
template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const auto ix = x.id();
  const auto& xv = x.value();
  Matrix<Scalar> sig = (Scalar(1) + (-xv.array()).exp()).inverse().matrix();
  Matrix<Scalar> out = xv.cwiseProduct(sig);
  return tape.record("silu", std::move(out), {x},
                     [ix, sig = std::move(sig)](Tape<Scalar>& t, const auto& g) {
                       const auto& xv = t.value(ix);
                       auto d = sig.array() * (Scalar(1) + xv.array() * (Scalar(1) - sig.array()));
                       t.accumulate(ix, (g.array() * d).matrix());
                     });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimensions differ");
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  return tape.record("matmul", std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// x * w^T for x: [n, in], w: [out, in]. The layout of every projection weight.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& x, const Var<Scalar>& w) {
  detail::require_same_tape(x, w);
  if (x.cols() != w.cols()) {
    throw InputError("matmul_nt: input width " + std::to_string(x.cols()) +
                     " does not match weight width " + std::to_string(w.cols()));
  }
  auto& tape = x.tape();
  const auto ix = x.id(), iw = w.id();
  Matrix<Scalar> out;
  out.noalias() = x.value() * w.value().transpose();
  return tape.record("matmul_nt", std::move(out), {x, w}, [ix, iw](Tape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ix)) t.accumulate(ix, g * t.value(iw));
    if (t.requires_grad(iw)) t.accumulate(iw, g.transpose() * t.value(ix));
  });
}

/// Root-mean-square normalisation of each row followed by a learned gain.
template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& gain, Scalar eps = Scalar(1e-5)) {
  detail::require_same_tape(x, gain);
  detail::require_shape(gain, 1, x.cols(), "rms_norm gain");
  auto& tape = x.tape();
  const auto ix = x.id(), ig = gain.id();
  const auto& xv = x.value();
  const auto d = static_cast<Scalar>(xv.cols());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms =
      ((xv.rowwise().squaredNorm().array() / d + eps).rsqrt()).matrix();
  Matrix<Scalar> normed = inv_rms.asDiagonal() * xv;
  Matrix<Scalar> out = normed * gain.value().row(0).asDiagonal();
  return tape.record(
      "rms_norm", std::move(out), {x, gain},
      [ix, ig, inv_rms = std::move(inv_rms), normed = std::move(normed)](Tape<Scalar>& t,
                                                                          const auto& g) {
        if (t.requires_grad(ig)) t.grad(ig).row(0) += g.cwiseProduct(normed).colwise().sum();
        if (t.requires_grad(ix)) {
          Matrix<Scalar> gn = g * t.value(ig).row(0).asDiagonal();
          const auto d = static_cast<Scalar>(normed.cols());
          Eigen::Matrix<Scalar, Eigen::Dynamic, 1> proj =
              gn.cwiseProduct(normed).rowwise().sum() / d;
          t.accumulate(ix, inv_rms.asDiagonal() * (gn - proj.asDiagonal() * normed));
        }
      });
}

/// Row gather: out[n] = table[ids[n]]. Gradients scatter-add back into the table.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::vector<std::int64_t> ids) {
  auto& tape = table.tape();
  const auto& tv = table.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || ids[n] >= tv.rows()) {
      throw InputError("gather_rows: index " + std::to_string(ids[n]) + " outside table of " +
                       std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(n)) = tv.row(ids[n]);
  }
  const auto it = table.id();
  return tape.record("gather_rows", std::move(out), {table},
                     [it, ids = std::move(ids)](Tape<Scalar>& t, const auto& g) {
                       auto& gt = t.grad(it);
                       for (std::size_t n = 0; n < ids.size(); ++n) {
                         gt.row(ids[n]) += g.row(static_cast<Eigen::Index>(n));
                       }
                     });
}

/// Multiplies by a fixed mask of {0, 1/(1-p)} entries. Identity when p == 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be below 1");
  auto& tape = x.tape();
  const auto ix = x.id();
  const Scalar keep_scale = Scalar(1.0 / (1.0 - p));
  Matrix<Scalar> mask(x.rows(), x.cols());
  // Two 32-bit uniforms per raw engine output keep masks identical across
  // standard library implementations.
  const auto threshold = static_cast<std::uint64_t>(p * 0x1.0p32);
  Scalar* m = mask.data();
  const Eigen::Index size = mask.size();
  for (Eigen::Index i = 0; i < size; i += 2) {
    const std::uint64_t bits = rng();
    m[i] = (bits >> 32) < threshold ? Scalar(0) : keep_scale;
    if (i + 1 < size) m[i + 1] = (bits & 0xffffffffULL) < threshold ? Scalar(0) : keep_scale;
  }
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  return tape.record("dropout", std::move(out), {x},
                     [ix, mask = std::move(mask)](Tape<Scalar>& t, const auto& g) {
                       t.accumulate(ix, g.cwiseProduct(mask));
                     });
}

/// Multi-head causal self-attention over packed sequences. q, k, v: [rows, d];
/// each segment attends only within itself and only to earlier or equal
/// positions.
template <typename Scalar>
Var<Scalar> causal_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                             std::vector<Segment> segments, int num_heads) {
  detail::require_same_tape(q, k);
  detail::require_same_tape(q, v);
  detail::require_shape(k, q.rows(), q.cols(), "causal_attention keys");
  detail::require_shape(v, q.rows(), q.cols(), "causal_attention values");
  const Eigen::Index width = q.cols();
  if (num_heads <= 0 || width % num_heads != 0) {
    throw ConfigError("causal_attention: width not divisible by head count");
  }
  const Eigen::Index head_dim = width / num_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();

  // probs[s * num_heads + h] holds the [len, len] attention matrix.
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>();
  probs->reserve(segments.size() * static_cast<std::size_t>(num_heads));
  Matrix<Scalar> out = Matrix<Scalar>::Zero(qv.rows(), width);
  for (const auto& seg : segments) {
    const Eigen::Index n = seg.length;
    for (int h = 0; h < num_heads; ++h) {
      const Eigen::Index c0 = h * head_dim;
      Matrix<Scalar> p;
      p.noalias() = qv.block(seg.offset, c0, n, head_dim) *
                    kv.block(seg.offset, c0, n, head_dim).transpose();
      p *= inv_sqrt;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar mx = p.row(i).head(i + 1).maxCoeff();
        Scalar total = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          total += p(i, j);
        }
        p.row(i).head(i + 1) /= total;
        p.row(i).tail(n - i - 1).setZero();
      }
      out.block(seg.offset, c0, n, head_dim).noalias() = p * vv.block(seg.offset, c0, n, head_dim);
      probs->push_back(std::move(p));
    }
  }
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      "causal_attention", std::move(out), {q, k, v},
      [iq, ik, iv, probs, segments = std::move(segments), num_heads, head_dim, inv_sqrt](
          Tape<Scalar>& t, const auto& g) {
        const bool need_q = t.requires_grad(iq);
        const bool need_k = t.requires_grad(ik);
        const bool need_v = t.requires_grad(iv);
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        std::size_t slot = 0;
        for (const auto& seg : segments) {
          const Eigen::Index n = seg.length;
          for (int h = 0; h < num_heads; ++h, ++slot) {
            const Eigen::Index c0 = h * head_dim;
            const auto& p = (*probs)[slot];
            auto go = g.block(seg.offset, c0, n, head_dim);
            if (need_v) t.grad(iv).block(seg.offset, c0, n, head_dim).noalias() += p.transpose() * go;
            if (!need_q && !need_k) continue;
            Matrix<Scalar> dp;
            dp.noalias() = go * vv.block(seg.offset, c0, n, head_dim).transpose();
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<Scalar> ds = p.cwiseProduct(dp - row_dot.replicate(1, n));
            ds *= inv_sqrt;
            if (need_q) {
              t.grad(iq).block(seg.offset, c0, n, head_dim).noalias() +=
                  ds * kv.block(seg.offset, c0, n, head_dim);
            }
            if (need_k) {
              t.grad(ik).block(seg.offset, c0, n, head_dim).noalias() +=
                  ds.transpose() * qv.block(seg.offset, c0, n, head_dim);
            }
          }
        }
      });
}

/// Weighted negative log-likelihood of `targets` under row-wise softmax of
/// `logits`: sum_r weights[r] * (logsumexp(logits[r]) - logits[r, targets[r]]).
/// Rows with zero weight are skipped entirely.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::vector<std::int64_t> targets,
                          std::vector<Scalar> weights) {
  const auto& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows() || targets.size() != weights.size()) {
    throw InputError("cross_entropy: targets and weights must have one entry per row");
  }
  Scalar total = 0;
  Matrix<Scalar> grad_rows = Matrix<Scalar>::Zero(lv.rows(), lv.cols());
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const Scalar w = weights[static_cast<std::size_t>(r)];
    if (w == Scalar(0)) continue;
    const auto y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= lv.cols()) throw InputError("cross_entropy: target id out of range");
    const Scalar mx = lv.row(r).maxCoeff();
    auto shifted = (lv.row(r).array() - mx).exp();
    const Scalar z = shifted.sum();
    total += w * (std::log(z) + mx - lv(r, y));
    grad_rows.row(r) = (shifted / z).matrix() * w;
    grad_rows(r, y) -= w;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total;
  const auto il = logits.id();
  return logits.tape().record("cross_entropy", std::move(out), {logits},
                              [il, grad_rows = std::move(grad_rows)](Tape<Scalar>& t, const auto& g) {
                                t.accumulate(il, grad_rows * g(0, 0));
                              });
}

/// out[g] = mean of x over rows listed in groups[g].
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& x, std::vector<std::vector<Eigen::Index>> groups) {
  const auto& xv = x.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), xv.cols());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].empty()) throw InputError("mean_rows: empty group (no content positions)");
    for (const auto r : groups[gi]) out.row(static_cast<Eigen::Index>(gi)) += xv.row(r);
    out.row(static_cast<Eigen::Index>(gi)) /= static_cast<Scalar>(groups[gi].size());
  }
  const auto ix = x.id();
  return x.tape().record("mean_rows", std::move(out), {x},
                         [ix, groups = std::move(groups)](Tape<Scalar>& t, const auto& g) {
                           auto& gx = t.grad(ix);
                           for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                             const Scalar inv = Scalar(1) / static_cast<Scalar>(groups[gi].size());
                             for (const auto r : groups[gi]) {
                               gx.row(r) += g.row(static_cast<Eigen::Index>(gi)) * inv;
                             }
                           }
                         });
}

/// Divides every row by its Euclidean norm. A zero row has no direction, so
/// cosine similarity is undefined and this throws.
template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x) {
  const auto& xv = x.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > Scalar(0))) {
      throw NumericError("cosine similarity undefined: row " + std::to_string(r) +
                         " is the zero vector");
    }
  }
  Matrix<Scalar> out = norms.cwiseInverse().asDiagonal() * xv;
  const auto ix = x.id();
  return x.tape().record(
      "l2_normalize_rows", out, {x},
      [ix, norms = std::move(norms), unit = out](Tape<Scalar>& t, const auto& g) {
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> radial = g.cwiseProduct(unit).rowwise().sum();
        t.accumulate(ix, norms.cwiseInverse().asDiagonal() * (g - radial.asDiagonal() * unit));
      });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  const auto ix = x.id();
  return x.tape().record("sum", std::move(out), {x}, [ix](Tape<Scalar>& t, const auto& g) {
    t.grad(ix).array() += g(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

}  // namespace midalign::ad
