// SPDX-License-Identifier: Apache-2.0
//
// Reference interpreter: executes the original graph sequentially and any
// compiled plan as interleaved device contexts, on small concrete tensors.
// Serves as the semantic oracle for every transformation.

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "planc/simulate.hpp"

namespace planc {

// Dense row-major tensor. Values are doubles but the test regime is exact
// integers so reduction order cannot mask bugs.
struct ConcreteTensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  static ConcreteTensor zeros(std::vector<std::int64_t> shape);
  std::int64_t volume() const;
  double at(const std::vector<std::int64_t>& idx) const;
  double& at(const std::vector<std::int64_t>& idx);
  ConcreteTensor extract(const Region& region) const;
  void insert(const Region& region, const ConcreteTensor& piece);
  bool operator==(const ConcreteTensor& o) const {
    return shape == o.shape && data == o.data;
  }
};

using TensorMap = std::map<int, ConcreteTensor>;  // pTensor id -> value

// Sequential topological execution of the original graph. `inputs` binds
// every graph-input pTensor; the result holds every produced pTensor.
TensorMap run_reference(const PlanGraph& g, const TensorMap& inputs);

// Executes the plan's device lanes as interleaved sequential contexts,
// honoring send/recv pairing and collective synchronization, then
// reassembles produced pTensors from the final pieces per their masks.
TensorMap run_plan(const ExecutionPlan& plan, const TensorMap& inputs);

// Deterministic integer inputs for every graph-input pTensor.
TensorMap random_integer_inputs(const PlanGraph& g, std::uint64_t seed,
                                int magnitude = 4);

struct MismatchReport {
  bool ok = true;
  int ptensor = -1;
  std::vector<std::int64_t> index;
  double expected = 0;
  double actual = 0;
  std::string to_string() const;
};

MismatchReport compare_outputs(const TensorMap& expected,
                               const TensorMap& actual,
                               double rel_tol = 0.0);

}  // namespace planc
