// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures: model-document builders, abstract scheduling graphs, and
// brute-force oracles the unit and acceptance suites check against.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "planc/compile.hpp"
#include "planc/rvd.hpp"

namespace planc::testutil {

ClusterSpec make_cluster(int devices, int group_size = 0,
                         double throughput = 1e9);

// Two-op identity chain A -> B over one 4x4 activation.
std::string chain_doc();

// L matmul layers [batch, hidden] with full backward ops (transposed
// matmuls) and one optimizer add per weight.
struct MlpSpec {
  int layers = 2;
  std::int64_t batch = 4;
  std::int64_t hidden = 4;
  bool optimizer = true;
  bool bias = false;  // adds an elementwise add with a second activation
  // When false, only the activation-gradient backward is emitted, making
  // forward and backward tasks cost the same (pipeline analytics fixtures).
  bool weight_grads = true;
};
std::string mlp_doc(const MlpSpec& spec);

// Cluster whose links transfer instantly; isolates compute timing.
ClusterSpec zero_comm_cluster(int devices, double throughput = 1e9);

// A -> op1 -> T -> op2 -> C chain whose middle tensor dominates memory;
// op1 splits spatially and op2 by partial value, so co-sharding both keeps
// the shards exactly chained.
struct CoshardSpec {
  std::int64_t batch = 4;
  std::int64_t hidden = 4;
  std::int64_t middle = 16;  // middle tensor columns (the big one)
};
std::string coshard_doc(const CoshardSpec& spec);

// Vocabulary embedding feeding a chain of matmul stage layers, with
// backwards and optimizers; roles mark embedding vs stage ops.
struct EmbedSpec {
  int stage_layers = 2;
  std::int64_t batch = 4;
  std::int64_t vocab = 4;
  std::int64_t hidden = 4;
};
std::string embed_doc(const EmbedSpec& spec);

// Three chained forward passes and one backward, per layer.
struct ThreePassSpec {
  int layers = 2;
  std::int64_t batch = 4;
  std::int64_t hidden = 4;
};
std::string three_pass_doc(const ThreePassSpec& spec);

// Full pipeline: strategy -> validate -> order -> materialize -> pattern
// match -> frees -> lower.
struct Compiled {
  ExecutionPlan plan;
  StrategyInfo info;
  int replaced_families = 0;
};
Compiled compile_doc(const std::string& document, const ClusterSpec& cluster,
                     const StrategyConfig& config,
                     bool pattern_match = true);

// Oracle equality of a compiled plan against the original document.
bool oracle_ok(const std::string& document, const Compiled& compiled,
               std::uint64_t seed, std::string* message = nullptr);

// Abstract graphs for scheduling tests: ops producing/consuming whole or
// replicated views with optional happen-before edges.
struct SchedulingGraph {
  PlanGraph g;
  ClusterSpec cluster;
};
SchedulingGraph random_scheduling_graph(std::mt19937_64& rng, int max_ops,
                                        int max_any_of_groups);

// Exhaustive feasibility: tries every any-of choice combination with a
// simple DFS cycle check.
bool brute_force_feasible(const PlanGraph& g);

// Random compatible (document, strategy) pair for the oracle corpus.
struct CorpusCase {
  std::string document;
  StrategyConfig config;
  int devices;
  std::string label;
};
CorpusCase random_corpus_case(std::mt19937_64& rng);

// Bounded exhaustive minimum plan cost over step sequences of length
// <= max_steps, enumerating transition_rules directly (plus the final
// relabel); the oracle for search optimality. Unreachable -> infinity.
double exhaustive_min_cost(const RvdDescriptor& src, const RvdDescriptor& dst,
                           const ClusterSpec& cluster, int max_steps,
                           const std::vector<int>* peer_group = nullptr);

// All descriptor shapes (r, v, d1..dk) whose counts multiply to n.
std::vector<RvdDescriptor> all_shapes(int n, int dims,
                                      const std::vector<std::int64_t>& shape,
                                      const std::vector<int>& group);

}  // namespace planc::testutil
