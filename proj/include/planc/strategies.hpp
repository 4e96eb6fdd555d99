// SPDX-License-Identifier: Apache-2.0
//
// Built-in plan programs expressed against the transform and schedule
// primitives: data parallelism, pipelines (GPipe / 1F1B / 3F1B / interlaced)
// and co-shard.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "planc/schedule.hpp"
#include "planc/transform.hpp"

namespace planc {

enum class PipelineVariant { gpipe, one_f_one_b };

struct StrategyConfig {
  std::string strategy;  // data_parallel|gpipe|1f1b|coshard|interlaced|3f1b|none
  int devices = 1;
  int micro_batches = 1;  // K
  int stages = 1;         // S
  int shards = 1;         // co-shard fan-out
  std::vector<std::string> target_ops;        // co-shard targets
  int inner_dp = 1;                           // per-stage data parallelism
  std::optional<std::vector<int>> stage_layers;  // explicit stage grouping
};

// Constructed schedule metadata exposed for tests and reporting.
struct StrategyInfo {
  // Per stage, the ordered task groups the constructor serialized.
  std::vector<std::vector<std::vector<std::string>>> stage_task_sequences;
  int schedule_steps = 0;  // barrier loop length, when the strategy has one
};

// Batch-split forward ops across devices, replicate optimizer ops, adapt
// the paired backward ops, round-robin assignment.
StrategyInfo plan_data_parallel(PlanGraph& g, const ClusterSpec& env,
                                int ndevs);

// Micro-batch split, contiguous stage grouping onto disjoint devices, and
// GPipe or 1F1B happen-before ordering. inner_dp > 1 additionally splits
// every op across that many devices within each stage.
StrategyInfo plan_pipeline(PlanGraph& g, const ClusterSpec& env,
                           PipelineVariant variant, int stages,
                           int micro_batches, int inner_dp = 1,
                           const std::optional<std::vector<int>>&
                               stage_layers = std::nullopt);

// Splits the target ops n ways, co-locates all shards on one device,
// serializes them, and marks shard activations for free-and-recompute.
StrategyInfo plan_coshard(PlanGraph& g, const ClusterSpec& env,
                          const std::vector<std::string>& ops_to_shard, int n,
                          int device = 0);

// Interlaced pipeline: 1F1B over stage ops with the embedding ops sharded
// across all stage devices and inserted as barriers at even steps.
StrategyInfo plan_interlaced(PlanGraph& g, const ClusterSpec& env,
                             int micro_batches);

// Three chained forward passes and one backward per micro-batch, pipelined
// with the steady state interleaving three forwards per backward.
StrategyInfo plan_3f1b(PlanGraph& g, const ClusterSpec& env, int stages,
                       int micro_batches);

// Applies the named strategy from a config. Custom programs registered via
// register_strategy are looked up by name.
StrategyInfo apply_strategy(PlanGraph& g, const ClusterSpec& env,
                            const StrategyConfig& config);

using StrategyFn = std::function<StrategyInfo(
    PlanGraph&, const ClusterSpec&, const StrategyConfig&)>;
void register_strategy(const std::string& name, StrategyFn fn);
std::vector<std::string> registered_strategies();

StrategyConfig parse_strategy_yaml(const std::string& text);
ClusterSpec parse_cluster_yaml(const std::string& text);

}  // namespace planc
