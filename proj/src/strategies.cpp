// SPDX-License-Identifier: Apache-2.0

#include "planc/strategies.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "yaml-cpp/yaml.h"

namespace planc {

namespace {

std::vector<int> first_devices(const ClusterSpec& env, int n) {
  if (n > static_cast<int>(env.devices.size())) {
    throw UsageError("strategy needs " + std::to_string(n) +
                     " devices, cluster has " +
                     std::to_string(env.devices.size()));
  }
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(env.devices[i].id);
  return out;
}

int batch_dim_of(const OpNode& op) {
  if (op.attrs.batch_dim) return *op.attrs.batch_dim;
  if (op.dim_annotation && op.dim_annotation->batch_dim) {
    return *op.dim_annotation->batch_dim;
  }
  throw UsageError("op " + op.id + " has no batch dim annotation");
}

bool has_backward(const PlanGraph& g, const std::string& fwd) {
  for (const auto& o : g.ops) {
    if (o.backward_of && *o.backward_of == fwd) return true;
  }
  return false;
}

// adapt_backward (when pairs exist) followed by the forward transform.
std::vector<std::string> trans_op(PlanGraph& g, const std::string& op_id,
                                  const TransformAlgo& algo,
                                  std::vector<std::string>* backward_ids) {
  if (has_backward(g, op_id)) {
    auto bids = adapt_backward(g, op_id, algo);
    if (backward_ids) {
      backward_ids->insert(backward_ids->end(), bids.begin(), bids.end());
    }
  }
  return op_trans(g, op_id, algo);
}

// Serialize two task groups: every op of `before` precedes every op of
// `after`.
void order_groups(PlanGraph& g, const std::vector<std::string>& before,
                  const std::vector<std::string>& after) {
  for (const auto& a : before) {
    for (const auto& b : after) op_order(g, a, b);
  }
}

std::vector<int> sorted_layers(const PlanGraph& g) {
  std::set<int> layers;
  for (const auto& op : g.ops) {
    if (op.attrs.layer && op.direction == OpDirection::forward) {
      layers.insert(*op.attrs.layer);
    }
  }
  return {layers.begin(), layers.end()};
}

// layer id -> pipeline stage, contiguous equal-count by default.
std::map<int, int> stage_of_layer(const PlanGraph& g, int stages,
                                  const std::optional<std::vector<int>>&
                                      override_list) {
  auto layers = sorted_layers(g);
  if (layers.empty()) {
    throw UsageError("pipeline strategy: no op carries a layer attribute");
  }
  if (stages > static_cast<int>(layers.size())) {
    throw UsageError("pipeline strategy: " + std::to_string(stages) +
                     " stages exceed " + std::to_string(layers.size()) +
                     " layers");
  }
  std::map<int, int> out;
  if (override_list) {
    if (override_list->size() != layers.size()) {
      throw UsageError("stage_layers override must list one stage per layer");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out[layers[i]] = (*override_list)[i];
    }
    return out;
  }
  auto n = static_cast<int>(layers.size());
  for (int i = 0; i < n; ++i) {
    out[layers[i]] = static_cast<int>(
        (static_cast<long long>(i) * stages) / n);
  }
  return out;
}

int layer_of(const PlanGraph& g, const OpNode& op) {
  if (op.attrs.layer) return *op.attrs.layer;
  if (op.backward_of && g.has_op(*op.backward_of)) {
    return layer_of(g, g.op(*op.backward_of));
  }
  throw UsageError("op " + op.id + " has no layer attribute");
}

struct TaskKey {
  int stage;
  bool backward;
  int pass;  // 1..3 forward, 0 for backward
  int mb;
};

}  // namespace

StrategyInfo plan_data_parallel(PlanGraph& g, const ClusterSpec& env,
                                int ndevs) {
  auto devices = first_devices(env, ndevs);
  std::vector<std::string> snapshot;
  for (const auto& op : g.ops) snapshot.push_back(op.id);

  for (const auto& oid : snapshot) {
    if (!g.has_op(oid)) continue;  // consumed by an earlier adapt
    const OpNode& op = g.op(oid);
    if (op.direction == OpDirection::backward) continue;  // via pairing
    std::vector<std::string> new_ids, bwd_ids;
    if (op.direction == OpDirection::forward) {
      int dim = batch_dim_of(op);
      new_ids = trans_op(g, oid, split_algo(dim, ndevs), &bwd_ids);
    } else {
      new_ids = trans_op(g, oid, replica_algo(ndevs), &bwd_ids);
    }
    for (std::size_t i = 0; i < new_ids.size(); ++i) {
      op_assign(g, env, new_ids[i], devices[i % devices.size()]);
    }
    for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
      op_assign(g, env, bwd_ids[i], devices[i % devices.size()]);
    }
  }
  return {};
}

namespace {

// Per-stage 1F1B task phases: warmup forwards, steady forward/backward
// alternation, cooldown backwards.
std::vector<std::pair<bool, int>> one_f_one_b_sequence(int stage, int stages,
                                                       int micro_batches) {
  int warmup = std::min(stages - stage - 1, micro_batches);
  std::vector<std::pair<bool, int>> seq;  // (is_backward, mb)
  for (int i = 0; i < warmup; ++i) seq.push_back({false, i});
  int steady = micro_batches - warmup;
  for (int t = 0; t < steady; ++t) {
    seq.push_back({false, warmup + t});
    seq.push_back({true, t});
  }
  for (int i = steady; i < micro_batches; ++i) seq.push_back({true, i});
  return seq;
}

}  // namespace

StrategyInfo plan_pipeline(PlanGraph& g, const ClusterSpec& env,
                           PipelineVariant variant, int stages,
                           int micro_batches, int inner_dp,
                           const std::optional<std::vector<int>>&
                               stage_layers) {
  if (micro_batches < 1 || stages < 1 || inner_dp < 1) {
    throw UsageError("pipeline strategy: bad parameters");
  }
  auto devices = first_devices(env, stages * inner_dp);
  auto layer_stage = stage_of_layer(g, stages, stage_layers);

  // Micro-batch split, then per-stage data parallelism when requested.
  std::vector<std::string> snapshot;
  for (const auto& op : g.ops) snapshot.push_back(op.id);
  for (const auto& oid : snapshot) {
    if (!g.has_op(oid)) continue;
    const OpNode& op = g.op(oid);
    if (op.direction != OpDirection::forward) continue;
    int dim = batch_dim_of(op);
    std::vector<std::string> bwd_ids;
    auto mb_ids = trans_op(g, oid, split_algo(dim, micro_batches), &bwd_ids);
    for (std::size_t i = 0; i < mb_ids.size(); ++i) {
      g.op(mb_ids[i]).micro_batch = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
      g.op(bwd_ids[i]).micro_batch =
          static_cast<int>(i % micro_batches);
    }
    if (inner_dp > 1) {
      for (const auto& mb_id : mb_ids) {
        int mb = *g.op(mb_id).micro_batch;
        std::vector<std::string> inner_bwd;
        auto dp_ids = trans_op(g, mb_id, split_algo(dim, inner_dp),
                               &inner_bwd);
        for (const auto& id : dp_ids) g.op(id).micro_batch = mb;
        for (const auto& id : inner_bwd) g.op(id).micro_batch = mb;
      }
    }
  }

  // Optimizer ops replicate across the stage's data-parallel devices.
  std::vector<std::string> opt_snapshot;
  for (const auto& op : g.ops) {
    if (op.direction == OpDirection::optimizer) opt_snapshot.push_back(op.id);
  }
  for (const auto& oid : opt_snapshot) {
    if (inner_dp > 1) {
      auto ids = op_trans(g, oid, replica_algo(inner_dp));
      for (std::size_t j = 0; j < ids.size(); ++j) {
        int stage = layer_stage.at(layer_of(g, g.op(ids[j])));
        op_assign(g, env, ids[j],
                  devices[stage * inner_dp + static_cast<int>(j)]);
      }
    }
  }

  // Assignment: stage base device plus the data-parallel offset.
  std::map<std::string, int> dp_offset;  // forward op -> inner replica
  for (const auto& op : g.ops) {
    if (g.assignment.count(op.id)) continue;
    if (op.is_reserved_kind()) continue;
    int stage = layer_stage.at(layer_of(g, op));
    int offset = 0;
    if (inner_dp > 1) {
      // Replacement ids end with "/<mb>/<dp>" for split ops.
      auto pos = op.id.rfind('/');
      if (pos != std::string::npos) {
        offset = std::stoi(op.id.substr(pos + 1)) % inner_dp;
      }
    }
    op_assign(g, env, op.id, devices[stage * inner_dp + offset]);
  }
  (void)dp_offset;

  // Temporal ordering per stage.
  StrategyInfo info;
  info.stage_task_sequences.resize(stages);
  auto group_ops = [&](int stage, bool backward, int mb) {
    std::vector<std::string> out;
    for (const auto& op : g.ops) {
      if (op.is_reserved_kind()) continue;
      if (op.direction == OpDirection::optimizer) continue;
      bool is_b = op.direction == OpDirection::backward;
      if (is_b != backward) continue;
      if (!op.micro_batch || *op.micro_batch != mb) continue;
      if (layer_stage.at(layer_of(g, op)) != stage) continue;
      out.push_back(op.id);
    }
    return out;
  };
  for (int s = 0; s < stages; ++s) {
    std::vector<std::pair<bool, int>> seq;
    if (variant == PipelineVariant::gpipe) {
      for (int i = 0; i < micro_batches; ++i) seq.push_back({false, i});
      for (int i = 0; i < micro_batches; ++i) seq.push_back({true, i});
    } else {
      seq = one_f_one_b_sequence(s, stages, micro_batches);
    }
    std::vector<std::string> prev;
    for (const auto& [backward, mb] : seq) {
      auto ops = group_ops(s, backward, mb);
      if (ops.empty()) continue;
      if (!prev.empty()) order_groups(g, prev, ops);
      prev = ops;
      info.stage_task_sequences[s].push_back(std::move(ops));
    }
  }
  return info;
}

StrategyInfo plan_coshard(PlanGraph& g, const ClusterSpec& env,
                          const std::vector<std::string>& ops_to_shard, int n,
                          int device) {
  if (ops_to_shard.empty()) {
    throw UsageError("coshard: no target ops");
  }
  StrategyInfo info;
  info.stage_task_sequences.resize(1);
  std::vector<std::vector<std::string>> fwd_shards(n), bwd_shards(n);
  // Output slicing recorded per tensor so downstream targets pick the algo
  // that keeps shard i consuming exactly shard i's piece.
  std::map<int, int> sliced_dim;
  for (const auto& target : ops_to_shard) {
    const OpNode& op = g.op(target);
    if (op.direction != OpDirection::forward) {
      throw UsageError("coshard: target " + target + " is not a forward op");
    }
    int batch = -1;
    if (op.attrs.batch_dim) batch = *op.attrs.batch_dim;
    if (op.dim_annotation && op.dim_annotation->batch_dim) {
      batch = *op.dim_annotation->batch_dim;
    }

    // Candidate algos: chained-input match first, then spatial dims from
    // the highest down.
    std::vector<TransformAlgo> candidates;
    candidates.push_back(value_split_algo(n));
    int rank = g.pt(g.vt(op.outputs.at(0)).ptensor).rank();
    for (int d = rank - 1; d >= 0; --d) {
      if (d != batch) candidates.push_back(split_algo(d, n));
    }
    const TransformAlgo* chosen = nullptr;
    // Prefer an algo whose input slicing follows an upstream shard.
    for (const auto& algo : candidates) {
      if (!algo.applicable(g, op)) continue;
      auto spec = algo.specs(g, op, 0);
      bool chained = false;
      bool mismatched = false;
      for (std::size_t j = 0; j < op.inputs.size(); ++j) {
        auto it = sliced_dim.find(g.vt(op.inputs[j]).ptensor);
        if (it == sliced_dim.end()) continue;
        if (spec.inputs[j].kind == PartitionKind::dim_slice &&
            spec.inputs[j].dim == it->second) {
          chained = true;
        } else {
          mismatched = true;
        }
      }
      if (chained && !mismatched) {
        chosen = &algo;
        break;
      }
    }
    if (!chosen) {
      for (const auto& algo : candidates) {
        bool consumes_sharded = false;
        for (std::size_t j = 0; j < op.inputs.size(); ++j) {
          consumes_sharded |=
              sliced_dim.count(g.vt(op.inputs[j]).ptensor) > 0;
        }
        if (algo.applicable(g, op) &&
            (!consumes_sharded ||
             algo.name.rfind("value-split", 0) != 0)) {
          // Spatial fallback; skip the value split unless it chains.
          if (algo.name.rfind("value-split", 0) == 0) continue;
          chosen = &algo;
          break;
        }
      }
    }
    if (!chosen) {
      throw UsageError("coshard: no splittable dim annotation on " + target);
    }
    TransformAlgo algo = *chosen;

    // Record how this target's outputs end up sliced.
    auto spec0 = algo.specs(g, op, 0);
    std::vector<std::pair<int, int>> produced;  // (ptensor, dim)
    for (std::size_t j = 0; j < op.outputs.size(); ++j) {
      if (spec0.outputs[j].kind == PartitionKind::dim_slice) {
        produced.push_back({g.vt(op.outputs[j]).ptensor,
                            spec0.outputs[j].dim});
      }
    }

    std::vector<std::string> bwd_ids;
    auto ids = trans_op(g, target, algo, &bwd_ids);
    for (int i = 0; i < n; ++i) {
      g.op(ids[i]).attrs.recompute = true;
      fwd_shards[i].push_back(ids[i]);
      op_assign(g, env, ids[i], device);
    }
    for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
      bwd_shards[i % n].push_back(bwd_ids[i]);
      op_assign(g, env, bwd_ids[i], device);
    }
    for (const auto& [pt_id, d] : produced) sliced_dim[pt_id] = d;
  }
  // Everything else in the graph runs on the same device.
  for (const auto& op : g.ops) {
    if (!g.assignment.count(op.id) && !op.is_reserved_kind()) {
      op_assign(g, env, op.id, device);
    }
  }
  // Shards execute sequentially: shard i fully precedes shard i+1.
  for (int i = 0; i + 1 < n; ++i) {
    if (n > 1) {
      order_groups(g, fwd_shards[i], fwd_shards[i + 1]);
      order_groups(g, bwd_shards[i], bwd_shards[i + 1]);
    }
  }
  for (int i = 0; i < n; ++i) {
    info.stage_task_sequences[0].push_back(fwd_shards[i]);
  }
  for (int i = 0; i < n; ++i) {
    info.stage_task_sequences[0].push_back(bwd_shards[i]);
  }
  return info;
}

StrategyInfo plan_interlaced(PlanGraph& g, const ClusterSpec& env,
                             int micro_batches) {
  int stages = static_cast<int>(env.devices.size());
  auto devices = first_devices(env, stages);
  int K = micro_batches;

  // Classification comes from the graph metadata.
  std::vector<std::string> embed_fwd, stage_fwd;
  for (const auto& op : g.ops) {
    if (op.direction != OpDirection::forward) continue;
    if (!op.attrs.role) {
      throw UsageError("interlaced: op " + op.id + " lacks a role attribute");
    }
    (*op.attrs.role == "embedding" ? embed_fwd : stage_fwd).push_back(op.id);
  }
  auto layer_stage = stage_of_layer(g, stages, std::nullopt);

  // Micro-batch split of every forward op.
  std::map<std::string, std::vector<std::string>> mb_of;  // original -> ids
  for (const auto& oid : embed_fwd) {
    std::vector<std::string> bwd_ids;
    auto ids = trans_op(g, oid, split_algo(batch_dim_of(g.op(oid)), K),
                        &bwd_ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.op(ids[i]).micro_batch = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
      g.op(bwd_ids[i]).micro_batch = static_cast<int>(i % K);
    }
    mb_of[oid] = ids;
  }
  for (const auto& oid : stage_fwd) {
    std::vector<std::string> bwd_ids;
    auto ids = trans_op(g, oid, split_algo(batch_dim_of(g.op(oid)), K),
                        &bwd_ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.op(ids[i]).micro_batch = static_cast<int>(i);
      op_assign(g, env, ids[i],
                devices[layer_stage.at(layer_of(g, g.op(ids[i])))]);
    }
    for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
      auto& bop = g.op(bwd_ids[i]);
      bop.micro_batch = static_cast<int>(i % K);
      op_assign(g, env, bwd_ids[i],
                devices[layer_stage.at(layer_of(g, bop))]);
    }
  }

  // Embedding ops shard across all stage devices.
  std::map<int, std::vector<std::string>> embed_group;  // mb -> fwd shard ops
  for (const auto& [orig, mb_ids] : mb_of) {
    for (const auto& mb_id : mb_ids) {
      int mb = *g.op(mb_id).micro_batch;
      std::vector<std::string> bwd_ids;
      auto shards = trans_op(g, mb_id, shard_embed_algo(stages), &bwd_ids);
      for (std::size_t j = 0; j < shards.size(); ++j) {
        g.op(shards[j]).micro_batch = mb;
        op_assign(g, env, shards[j], devices[j]);
        embed_group[mb].push_back(shards[j]);
      }
      for (std::size_t j = 0; j < bwd_ids.size(); ++j) {
        auto& bop = g.op(bwd_ids[j]);
        bop.micro_batch = mb;
        op_assign(g, env, bwd_ids[j], devices[j % stages]);
      }
    }
  }

  // Optimizer ops: embedding-table optimizers shard across devices by the
  // table dimension; stage optimizers co-locate with their stage.
  std::vector<std::string> opt_snapshot;
  for (const auto& op : g.ops) {
    if (op.direction == OpDirection::optimizer) opt_snapshot.push_back(op.id);
  }
  for (const auto& oid : opt_snapshot) {
    const OpNode& op = g.op(oid);
    bool is_embed = op.attrs.role && *op.attrs.role == "embedding";
    if (is_embed) {
      auto ids = op_trans(g, oid, split_algo(0, stages));
      for (std::size_t j = 0; j < ids.size(); ++j) {
        op_assign(g, env, ids[j], devices[j]);
      }
    } else {
      op_assign(g, env, oid, devices[layer_stage.at(layer_of(g, op))]);
    }
  }

  // Interlaced temporal scheduling: the 1F1B diagonal with embedding groups
  // inserted as barriers at even steps.
  auto stage_group = [&](int step) {
    std::vector<std::string> out;  // 1-based step
    for (const auto& op : g.ops) {
      if (op.is_reserved_kind() || !op.micro_batch) continue;
      if (op.attrs.role && *op.attrs.role == "embedding") continue;
      bool is_b = op.direction == OpDirection::backward;
      if (op.direction == OpDirection::optimizer) continue;
      int s = layer_stage.at(layer_of(g, op));
      int i = *op.micro_batch;
      int at = is_b ? 2 * stages - s + 2 * i : s + 2 * i + 1;
      if (at == step) out.push_back(op.id);
    }
    return out;
  };

  StrategyInfo info;
  info.schedule_steps = 2 * (stages + K - 1);
  info.stage_task_sequences.resize(stages);
  std::vector<std::string> previous =
      embed_group.count(0) ? embed_group[0] : std::vector<std::string>{};
  for (int step = 1; step <= info.schedule_steps; ++step) {
    auto tasks = stage_group(step);
    if (!tasks.empty()) {
      if (!previous.empty()) order_groups(g, previous, tasks);
      previous = tasks;
    }
    if (step % 2 == 0) {
      int mb = step / 2;
      if (mb < K && embed_group.count(mb)) {
        if (!previous.empty()) order_groups(g, previous, embed_group[mb]);
        previous = embed_group[mb];
      }
    }
  }
  return info;
}

StrategyInfo plan_3f1b(PlanGraph& g, const ClusterSpec& env, int stages,
                       int micro_batches) {
  auto devices = first_devices(env, stages);
  auto layer_stage = stage_of_layer(g, stages, std::nullopt);
  int K = micro_batches;

  // The graph must declare the three chained forward passes.
  std::set<int> passes;
  for (const auto& op : g.ops) {
    if (op.direction == OpDirection::forward) {
      if (!op.attrs.pass_index) {
        throw UsageError("3f1b: forward op " + op.id +
                         " lacks a pass attribute");
      }
      passes.insert(*op.attrs.pass_index);
    }
  }
  if (passes != std::set<int>{1, 2, 3}) {
    throw UsageError("3f1b: graph does not declare three forward passes");
  }

  std::vector<std::string> snapshot;
  for (const auto& op : g.ops) snapshot.push_back(op.id);
  for (const auto& oid : snapshot) {
    if (!g.has_op(oid)) continue;
    const OpNode& op = g.op(oid);
    if (op.direction == OpDirection::forward) {
      std::vector<std::string> bwd_ids;
      auto ids = trans_op(g, oid, split_algo(batch_dim_of(op), K), &bwd_ids);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        g.op(ids[i]).micro_batch = static_cast<int>(i);
        op_assign(g, env, ids[i],
                  devices[layer_stage.at(layer_of(g, g.op(ids[i])))]);
      }
      for (std::size_t i = 0; i < bwd_ids.size(); ++i) {
        auto& bop = g.op(bwd_ids[i]);
        bop.micro_batch = static_cast<int>(i % K);
        op_assign(g, env, bwd_ids[i],
                  devices[layer_stage.at(layer_of(g, bop))]);
      }
    } else if (op.direction == OpDirection::optimizer) {
      op_assign(g, env, oid, devices[layer_stage.at(layer_of(g, op))]);
    }
  }

  // Steady-state priority list scheduling: backward first, then third,
  // second, first forward; lower micro-batch first.
  struct TaskId {
    int pass;  // 0 = backward
    int mb;
    bool operator<(const TaskId& o) const {
      return std::tie(pass, mb) < std::tie(o.pass, o.mb);
    }
  };
  std::vector<std::set<TaskId>> done(stages);
  std::vector<std::vector<TaskId>> sequence(stages);
  auto ready = [&](int s, const TaskId& t) {
    if (t.pass == 0) {
      if (s + 1 < stages && !done[s + 1].count(t)) return false;
      return done[s].count({3, t.mb}) > 0;
    }
    if (s > 0) return done[s - 1].count(t) > 0;
    if (t.pass == 1) return true;
    return done[stages - 1].count({t.pass - 1, t.mb}) > 0;
  };
  int total = stages * 4 * K;
  int scheduled = 0;
  int rounds_guard = total * 4 + 16;
  while (scheduled < total && rounds_guard-- > 0) {
    std::vector<TaskId> picked(stages, {-1, -1});
    for (int s = 0; s < stages; ++s) {
      // Priority: backward, then passes 3, 2, 1; lower micro-batch first.
      for (int pass : {0, 3, 2, 1}) {
        bool found = false;
        for (int mb = 0; mb < K && !found; ++mb) {
          TaskId t{pass, mb};
          if (!done[s].count(t) && ready(s, t)) {
            picked[s] = t;
            found = true;
          }
        }
        if (found) break;
      }
    }
    for (int s = 0; s < stages; ++s) {
      if (picked[s].pass >= 0) {
        done[s].insert(picked[s]);
        sequence[s].push_back(picked[s]);
        ++scheduled;
      }
    }
  }
  if (scheduled < total) {
    throw InternalError("3f1b: schedule construction stalled");
  }

  auto group_ops = [&](int s, const TaskId& t) {
    std::vector<std::string> out;
    for (const auto& op : g.ops) {
      if (op.is_reserved_kind() || !op.micro_batch) continue;
      if (op.direction == OpDirection::optimizer) continue;
      if (*op.micro_batch != t.mb) continue;
      if (layer_stage.at(layer_of(g, op)) != s) continue;
      bool is_b = op.direction == OpDirection::backward;
      if (t.pass == 0) {
        if (!is_b) continue;
      } else {
        if (is_b || op.attrs.pass_index.value_or(-1) != t.pass) continue;
      }
      out.push_back(op.id);
    }
    return out;
  };

  StrategyInfo info;
  info.stage_task_sequences.resize(stages);
  for (int s = 0; s < stages; ++s) {
    std::vector<std::string> prev;
    for (const auto& t : sequence[s]) {
      auto ops = group_ops(s, t);
      if (ops.empty()) {
        throw InternalError("3f1b: empty task group");
      }
      if (!prev.empty()) order_groups(g, prev, ops);
      prev = ops;
      info.stage_task_sequences[s].push_back(std::move(ops));
    }
  }
  return info;
}

// ---------------------------------------------------------------------------
// Registry and config plumbing.

namespace {

std::map<std::string, StrategyFn>& registry() {
  static std::map<std::string, StrategyFn> r;
  return r;
}

}  // namespace

void register_strategy(const std::string& name, StrategyFn fn) {
  registry()[name] = std::move(fn);
}

std::vector<std::string> registered_strategies() {
  std::vector<std::string> out{"none",       "data_parallel", "gpipe",
                               "1f1b",       "coshard",       "interlaced",
                               "3f1b"};
  for (const auto& [name, fn] : registry()) out.push_back(name);
  return out;
}

StrategyInfo apply_strategy(PlanGraph& g, const ClusterSpec& env,
                            const StrategyConfig& config) {
  const std::string& s = config.strategy;
  if (s == "none") {
    for (const auto& op : g.ops) {
      if (!op.is_reserved_kind() && !g.assignment.count(op.id)) {
        op_assign(g, env, op.id, env.devices.at(0).id);
      }
    }
    return {};
  }
  if (s == "data_parallel") {
    return plan_data_parallel(g, env, config.devices);
  }
  if (s == "gpipe" || s == "1f1b") {
    return plan_pipeline(g, env,
                         s == "gpipe" ? PipelineVariant::gpipe
                                      : PipelineVariant::one_f_one_b,
                         config.stages, config.micro_batches, config.inner_dp,
                         config.stage_layers);
  }
  if (s == "coshard") {
    return plan_coshard(g, env, config.target_ops, config.shards);
  }
  if (s == "interlaced") {
    return plan_interlaced(g, env, config.micro_batches);
  }
  if (s == "3f1b") {
    return plan_3f1b(g, env, config.stages, config.micro_batches);
  }
  auto it = registry().find(s);
  if (it != registry().end()) return it->second(g, env, config);
  throw UsageError("unknown strategy '" + s + "'");
}

StrategyConfig parse_strategy_yaml(const std::string& text) {
  YAML::Node y;
  try {
    y = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw SchemaError(std::string("strategy document: ") + e.what());
  }
  StrategyConfig c;
  if (!y["strategy"]) throw SchemaError("strategy document needs 'strategy'");
  c.strategy = y["strategy"].as<std::string>();
  if (y["devices"]) c.devices = y["devices"].as<int>();
  if (y["micro_batches"]) c.micro_batches = y["micro_batches"].as<int>();
  if (y["stages"]) c.stages = y["stages"].as<int>();
  if (y["shards"]) c.shards = y["shards"].as<int>();
  if (y["inner_dp"]) c.inner_dp = y["inner_dp"].as<int>();
  if (y["target_ops"]) {
    for (const auto& t : y["target_ops"]) {
      c.target_ops.push_back(t.as<std::string>());
    }
  }
  if (y["stage_layers"]) {
    std::vector<int> sl;
    for (const auto& t : y["stage_layers"]) sl.push_back(t.as<int>());
    c.stage_layers = sl;
  }
  if (c.micro_batches < 1 || c.stages < 1 || c.shards < 1 || c.devices < 1) {
    throw SchemaError("strategy parameters must be >= 1");
  }
  return c;
}

ClusterSpec parse_cluster_yaml(const std::string& text) {
  YAML::Node y;
  try {
    y = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw SchemaError(std::string("cluster document: ") + e.what());
  }
  int n = y["devices"] ? y["devices"].as<int>() : 1;
  int group_size = y["group_size"] ? y["group_size"].as<int>() : n;
  auto memory = y["memory_capacity"]
                    ? static_cast<std::int64_t>(
                          y["memory_capacity"].as<double>())
                    : std::int64_t{32} * (1 << 30);
  // Defaults model an NVLink-class intra-server link and a 100 Gbps
  // inter-server network.
  LinkParams intra{150e9, 3e-6};
  LinkParams inter{12.5e9, 10e-6};
  if (y["intra_link"]) {
    intra.bandwidth = y["intra_link"]["bandwidth"].as<double>();
    intra.latency = y["intra_link"]["latency"].as<double>();
  }
  if (y["inter_link"]) {
    inter.bandwidth = y["inter_link"]["bandwidth"].as<double>();
    inter.latency = y["inter_link"]["latency"].as<double>();
  }
  double throughput =
      y["device_throughput"] ? y["device_throughput"].as<double>() : 100e12;
  if (n < 1 || group_size < 1) throw SchemaError("bad cluster sizes");
  return ClusterSpec::uniform(n, group_size, memory, intra, inter,
                              throughput);
}

}  // namespace planc
