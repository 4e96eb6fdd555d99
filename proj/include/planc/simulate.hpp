// SPDX-License-Identifier: Apache-2.0
//
// Lowering to per-device task lists and deterministic discrete-event
// simulation under the cost model: makespan, compute/communication/bubble
// breakdown, and peak memory.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "planc/materialize.hpp"

namespace planc {

enum class TaskKind { compute, send, recv, collective, free_buffer };

struct Task {
  TaskKind kind = TaskKind::compute;
  std::string op;
  double duration = 0;  // seconds
  std::int64_t bytes = 0;
  int channel = -1;      // send/recv pairing
  int coll_group = -1;   // collective instance
  int peer_device = -1;  // send/recv
  std::vector<int> alloc_vtensors;
  std::vector<int> free_vtensors;
};

struct DeviceLane {
  int device = 0;
  std::vector<Task> tasks;
};

// Self-contained executable plan: the materialized graph for semantics plus
// totally ordered per-device task lists. Cross-device happen-before edges
// without a data path are kept as sync edges so the simulator enforces
// them.
struct ExecutionPlan {
  PlanGraph graph;
  std::map<int, int> feeds;
  std::map<int, CollectiveGroup> coll_groups;
  std::vector<DeviceLane> lanes;
  std::vector<std::pair<std::string, std::string>> sync_edges;
  ClusterSpec cluster;
};

struct TraceEvent {
  int device = 0;
  std::string op;
  TaskKind kind = TaskKind::compute;
  double start = 0;
  double end = 0;
};

struct DeviceReport {
  int device = 0;
  double busy_compute = 0;
  double busy_comm = 0;
  double idle = 0;  // makespan - compute - comm, trailing idle included
  std::int64_t peak_memory = 0;
  std::int64_t peak_activation = 0;  // activation-kind buffers only
  double peak_time = 0;
};

struct SimReport {
  double makespan = 0;
  std::vector<DeviceReport> devices;
  std::map<int, std::int64_t> ptensor_peak;  // peak live bytes per pTensor
  std::vector<TraceEvent> trace;
  bool deadlock = false;
  std::vector<std::string> waiting_tasks;  // populated on deadlock

  std::string summary() const;
  std::string to_json() const;         // machine-readable report
  std::string timeline_json() const;   // per-device lanes with start/end
  std::string timeline_svg() const;    // Gantt rendering
};

// Compute durations from flops / device throughput, comm durations from the
// cost model, buffers from mask regions times element size.
ExecutionPlan lower(const MaterializedPlan& plan, const ClusterSpec& cluster);

SimReport simulate(const ExecutionPlan& plan);

std::string save_plan(const ExecutionPlan& plan);
ExecutionPlan load_plan(const std::string& document);

}  // namespace planc
