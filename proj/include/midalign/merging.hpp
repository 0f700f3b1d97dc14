#pragma once

// Weighted averaging of two adapter sets and a dev-set weight sweep.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "midalign/model.hpp"

namespace midalign::merging {

/// kFactor averages the stored A and B factors. kDelta stacks both sets so
/// the merged delta is exactly w * dT + (1 - w) * dA (rank doubles).
enum class MergeSpace { kFactor, kDelta };

MergeSpace parse_merge_space(const std::string& name);
const char* to_string(MergeSpace space);

inline const std::vector<double> kDefaultGrid = {0.5, 0.7, 0.9};

/// Throws FormatError naming the first entry whose shape differs, or when
/// rank or alpha differ.
template <typename Scalar>
void check_mergeable(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align);

/// Factor space: every element becomes w * task + (1 - w) * align; elements
/// that already agree are copied, so w = 1, w = 0 and equal inputs are exact.
template <typename Scalar>
AdapterSet<Scalar> merge(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align, double w,
                         MergeSpace space = MergeSpace::kFactor);

/// Raised when the dev callback fails; carries the offending weight.
class SweepError : public std::runtime_error {
 public:
  SweepError(double weight, const std::string& what) : std::runtime_error(what), weight_(weight) {}
  double weight() const { return weight_; }

 private:
  double weight_;
};

struct SweepRow {
  double weight = 0.0;
  double metric = 0.0;
};

struct SweepResult {
  double best_weight = 0.0;
  std::vector<SweepRow> table;  // grid order

  /// Columns: weight,metric,best.
  std::string to_csv() const;
};

/// Evaluates `dev_eval` (higher is better) on each merged set of the grid.
/// Ties go to the larger weight.
template <typename Scalar>
SweepResult sweep(const AdapterSet<Scalar>& task, const AdapterSet<Scalar>& align,
                  const std::vector<double>& grid,
                  const std::function<double(const AdapterSet<Scalar>&)>& dev_eval,
                  MergeSpace space = MergeSpace::kFactor);

}  // namespace midalign::merging
