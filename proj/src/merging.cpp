#include "midalign/merging.hpp"

#include <sstream>

namespace midalign::merging {

MergeSpace parse_merge_space(const std::string& name) {
  if (name == "factor") return MergeSpace::kFactor;
  if (name == "delta") return MergeSpace::kDelta;
  throw ConfigError("unknown merge space '" + name + "' (expected factor or delta)");
}

const char* to_string(MergeSpace space) { return space == MergeSpace::kFactor ? "factor" : "delta"; }

template <typename Scalar>
void check_mergeable(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align) {
  if (task.rank != align.rank) {
    throw FormatError("merge: rank mismatch (" + std::to_string(task.rank) + " vs " + std::to_string(align.rank) + ")");
  }
  if (task.alpha != align.alpha) throw FormatError("merge: alpha mismatch");
  for (const auto& [name, f] : task.entries) {
    const auto it = align.entries.find(name);
    if (it == align.entries.end()) throw FormatError("merge: entry " + name + " missing from alignment adapters");
    if (f.a.rows() != it->second.a.rows() || f.a.cols() != it->second.a.cols() ||
        f.b.rows() != it->second.b.rows() || f.b.cols() != it->second.b.cols()) {
      throw FormatError("merge: shape mismatch at entry " + name);
    }
  }
  for (const auto& [name, _] : align.entries) {
    if (!task.entries.contains(name)) throw FormatError("merge: entry " + name + " missing from task adapters");
  }
}

namespace {

template <typename Scalar>
Matrix<Scalar> blend(const Matrix<Scalar>& t, const Matrix<Scalar>& a, double w) {
  Matrix<Scalar> out(t.rows(), t.cols());
  const double wc = 1.0 - w;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const Scalar x = t.data()[i], y = a.data()[i];
    out.data()[i] = x == y ? x
                           : static_cast<Scalar>(w * static_cast<double>(x) + wc * static_cast<double>(y));
  }
  return out;
}

}  // namespace

template <typename Scalar>
AdapterSet<Scalar> merge(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align, double w,
                         MergeSpace space) {
  if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("merge: weight must lie in [0, 1], got " + std::to_string(w));
  check_mergeable(task, align);
  if (space == MergeSpace::kFactor) {
    if (w == 1.0) return task;
    if (w == 0.0) return align;
    AdapterSet<Scalar> out;
    out.rank = task.rank;
    out.alpha = task.alpha;
    out.dropout = task.dropout;
    for (const auto& [name, f] : task.entries) {
      const auto& g = align.entries.at(name);
      out.entries[name] = {blend(f.a, g.a, w), blend(f.b, g.b, w)};
    }
    return out;
  }
  // Rank 2r with alpha doubled keeps the scaling alpha / r unchanged.
  AdapterSet<Scalar> out;
  out.rank = 2 * task.rank;
  out.alpha = 2.0 * task.alpha;
  out.dropout = task.dropout;
  const auto r = static_cast<Eigen::Index>(task.rank);
  for (const auto& [name, f] : task.entries) {
    const auto& g = align.entries.at(name);
    AdapterFactors<Scalar> m;
    m.a.resize(2 * r, f.a.cols());
    m.a.topRows(r) = f.a;
    m.a.bottomRows(r) = g.a;
    m.b.resize(f.b.rows(), 2 * r);
    m.b.leftCols(r) = f.b * static_cast<Scalar>(w);
    m.b.rightCols(r) = g.b * static_cast<Scalar>(1.0 - w);
    out.entries[name] = std::move(m);
  }
  return out;
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "weight,metric,best\n";
  for (const auto& row : table) {
    out << row.weight << ',' << row.metric << ',' << (row.weight == best_weight ? 1 : 0) << '\n';
  }
  return out.str();
}

template <typename Scalar>
SweepResult sweep(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align, const std::vector<double>& grid,
                  const std::function<double(const AdapterSet<Scalar>&)>& dev_eval, MergeSpace space) {
  if (grid.empty()) throw ConfigError("sweep: empty weight grid");
  SweepResult result;
  bool have_best = false;
  double best_metric = 0.0;
  for (double w : grid) {
    const auto merged = merge(task, align, w, space);
    double metric = 0.0;
    try {
      metric = dev_eval(merged);
    } catch (const std::exception& e) {
      throw SweepError(w, "sweep: evaluation failed at w=" + std::to_string(w) + ": " + e.what());
    }
    result.table.push_back({w, metric});
    if (!have_best || metric > best_metric || (metric == best_metric && w > result.best_weight)) {
      have_best = true;
      best_metric = metric;
      result.best_weight = w;
    }
  }
  return result;
}

#define MIDALIGN_INSTANTIATE(S)                                                                        \
  template void check_mergeable(const AdapterSet<S>&, const AdapterSet<S>&);                           \
  template AdapterSet<S> merge(const AdapterSet<S>&, const AdapterSet<S>&, double, MergeSpace);        \
  template SweepResult sweep(const AdapterSet<S>&, const AdapterSet<S>&, const std::vector<double>&,   \
                             const std::function<double(const AdapterSet<S>&)>&, MergeSpace);

MIDALIGN_INSTANTIATE(float)
MIDALIGN_INSTANTIATE(double)

#undef MIDALIGN_INSTANTIATE

}  // namespace midalign::merging
