// SPDX-License-Identifier: Apache-2.0

#include "planc/simulate.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "nlohmann/json.hpp"
#include "planc/rvd.hpp"

namespace planc {

namespace {

using ordered_json = nlohmann::ordered_json;

std::int64_t vt_bytes(const PlanGraph& g, int vt) {
  const VTensor& v = g.vt(vt);
  return v.bytes(g.pt(v.ptensor));
}

}  // namespace

ExecutionPlan lower(const MaterializedPlan& plan, const ClusterSpec& cluster) {
  ExecutionPlan ep;
  ep.graph = plan.graph;
  ep.feeds = plan.feeds;
  ep.coll_groups = plan.coll_groups;
  ep.cluster = cluster;
  const PlanGraph& g = ep.graph;

  // Channel peers, for link selection and reporting.
  std::map<int, std::pair<int, int>> channel_devs;  // channel -> (src, dst)
  for (const auto& op : g.ops) {
    if (op.kind == OpKind::send) {
      channel_devs[op.channel].first = g.assignment.at(op.id);
    } else if (op.kind == OpKind::recv) {
      channel_devs[op.channel].second = g.assignment.at(op.id);
    }
  }

  for (const auto& [dev, op_ids] : plan.device_order()) {
    DeviceLane lane;
    lane.device = dev;
    for (const auto& oid : op_ids) {
      const OpNode& op = g.op(oid);
      Task t;
      t.op = oid;
      if (op.kind == OpKind::send || op.kind == OpKind::recv) {
        t.kind = op.kind == OpKind::send ? TaskKind::send : TaskKind::recv;
        t.channel = op.channel;
        auto [src, dst] = channel_devs.at(op.channel);
        t.peer_device = op.kind == OpKind::send ? dst : src;
        int piece_vt =
            op.kind == OpKind::send ? op.inputs.at(0) : op.outputs.at(0);
        t.bytes = vt_bytes(g, piece_vt);
        if (op.kind == OpKind::send) {
          const LinkParams& link = cluster.link_between(src, dst);
          t.duration = static_cast<double>(t.bytes) / link.bandwidth +
                       link.latency;
        }
      } else if (op.kind == OpKind::collective) {
        t.kind = TaskKind::collective;
        t.coll_group = op.coll_group;
        const CollectiveGroup& grp = plan.coll_groups.at(op.coll_group);
        CommPrimitive prim = CommPrimitive::all_reduce;
        for (int p = 0; p <= static_cast<int>(CommPrimitive::relabel); ++p) {
          if (grp.primitive == to_string(static_cast<CommPrimitive>(p))) {
            prim = static_cast<CommPrimitive>(p);
          }
        }
        const LinkParams& link =
            grp.inter_group ? cluster.inter_link : cluster.intra_link;
        t.duration = primitive_cost(prim, grp.k, grp.message_bytes, link);
        t.bytes = grp.message_bytes;
      } else if (op.kind == OpKind::free_buffer) {
        t.kind = TaskKind::free_buffer;
        t.free_vtensors = {op.free_vtensor};
      } else {
        t.kind = TaskKind::compute;
        t.duration = op.flops / cluster.device_throughput;
      }
      for (int out : op.outputs) t.alloc_vtensors.push_back(out);
      lane.tasks.push_back(std::move(t));
    }
    ep.lanes.push_back(std::move(lane));
  }
  // Happen-before edges across devices have no lane to encode them in.
  for (const auto& hb : plan.graph.happen_before) {
    auto a = plan.graph.assignment.find(hb.before);
    auto b = plan.graph.assignment.find(hb.after);
    if (a != plan.graph.assignment.end() &&
        b != plan.graph.assignment.end() && a->second != b->second) {
      ep.sync_edges.push_back({hb.before, hb.after});
    }
  }
  return ep;
}

SimReport simulate(const ExecutionPlan& plan) {
  const PlanGraph& g = plan.graph;
  SimReport report;

  struct LaneState {
    std::size_t next = 0;
    double clock = 0;
    double busy_compute = 0;
    double busy_comm = 0;
    std::int64_t mem = 0;
    std::int64_t peak = 0;
    std::int64_t act_mem = 0;
    std::int64_t act_peak = 0;
    double peak_time = 0;
  };
  std::vector<LaneState> st(plan.lanes.size());

  struct MemEvent {
    double time;
    int ptensor;
    std::int64_t delta;
  };
  std::vector<MemEvent> pt_events;

  auto device_index = [&](int dev) {
    for (std::size_t i = 0; i < plan.lanes.size(); ++i) {
      if (plan.lanes[i].device == dev) return i;
    }
    throw InternalError("simulate: unknown device " + std::to_string(dev));
  };

  auto bump = [&](std::size_t l, std::int64_t delta, double time,
                  TensorKind kind) {
    st[l].mem += delta;
    if (st[l].mem > st[l].peak) {
      st[l].peak = st[l].mem;
      st[l].peak_time = time;
    }
    if (kind == TensorKind::activation) {
      st[l].act_mem += delta;
      st[l].act_peak = std::max(st[l].act_peak, st[l].act_mem);
    }
  };
  auto bump_vt = [&](std::size_t l, int vt, std::int64_t sign, double time) {
    std::int64_t bytes = vt_bytes(g, vt);
    bump(l, sign * bytes, time, g.pt(g.vt(vt).ptensor).kind);
    pt_events.push_back({time, g.vt(vt).ptensor, sign * bytes});
  };

  // Initial placement: every graph-input region consumed on a device is
  // resident there from t = 0 (weights, inputs, optimizer state).
  {
    std::map<std::size_t, std::set<std::string>> placed;
    for (const auto& op : g.ops) {
      auto dev_it = g.assignment.find(op.id);
      if (dev_it == g.assignment.end()) continue;
      std::size_t l = device_index(dev_it->second);
      for (int in : op.inputs) {
        const VTensor& vt = g.vt(in);
        if (!g.is_graph_input(vt.ptensor)) continue;
        std::string key = std::to_string(vt.ptensor) + "@" +
                          region_to_string(vt.mask.region);
        if (!placed[l].insert(key).second) continue;
        bump_vt(l, in, 1, 0);
      }
    }
  }

  std::map<int, double> channel_done;
  struct CollState {
    std::set<std::string> arrived;
    double latest = 0;
    double done = -1;
  };
  std::map<int, CollState> coll;

  // Cross-device order-only constraints: target op -> source ops.
  std::map<std::string, std::vector<std::string>> sync_in;
  for (const auto& [before, after] : plan.sync_edges) {
    sync_in[after].push_back(before);
  }
  std::map<std::string, double> op_done;

  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
      const DeviceLane& lane = plan.lanes[l];
      while (st[l].next < lane.tasks.size()) {
        const Task& task = lane.tasks[st[l].next];
        double start = st[l].clock;
        double end = start;
        bool blocked = false;

        auto sync = sync_in.find(task.op);
        if (sync != sync_in.end()) {
          for (const auto& src : sync->second) {
            auto it = op_done.find(src);
            if (it == op_done.end()) {
              blocked = true;
              break;
            }
            start = std::max(start, it->second);
          }
          if (blocked) break;
          end = start;
        }

        switch (task.kind) {
          case TaskKind::compute: {
            end = start + task.duration;
            st[l].busy_compute += task.duration;
            for (int out : task.alloc_vtensors) bump_vt(l, out, 1, start);
            break;
          }
          case TaskKind::send: {
            end = start + task.duration;
            st[l].busy_comm += task.duration;
            channel_done[task.channel] = end;
            break;
          }
          case TaskKind::recv: {
            auto it = channel_done.find(task.channel);
            if (it == channel_done.end()) {
              blocked = true;
              break;
            }
            end = std::max(start, it->second);
            for (int out : task.alloc_vtensors) bump_vt(l, out, 1, end);
            break;
          }
          case TaskKind::collective: {
            const CollectiveGroup& grp = plan.coll_groups.at(task.coll_group);
            CollState& cs = coll[task.coll_group];
            if (!cs.arrived.count(task.op)) {
              cs.arrived.insert(task.op);
              cs.latest = std::max(cs.latest, start);
              if (cs.arrived.size() == grp.ops.size()) {
                cs.done = cs.latest + task.duration;
              }
            }
            if (cs.done < 0) {
              blocked = true;
              break;
            }
            end = cs.done;
            st[l].busy_comm += task.duration;
            for (int out : task.alloc_vtensors) bump_vt(l, out, 1, end);
            break;
          }
          case TaskKind::free_buffer: {
            for (int v : task.free_vtensors) bump_vt(l, v, -1, start);
            break;
          }
        }
        if (blocked) break;

        report.trace.push_back(
            {lane.device, task.op, task.kind, start, end});
        op_done[task.op] = end;
        st[l].clock = end;
        st[l].next++;
        progress = true;
      }
    }
  }

  bool all_done = true;
  for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
    all_done &= st[l].next == plan.lanes[l].tasks.size();
  }
  if (!all_done) {
    report.deadlock = true;
    for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
      if (st[l].next < plan.lanes[l].tasks.size()) {
        report.waiting_tasks.push_back(
            "device " + std::to_string(plan.lanes[l].device) + " at " +
            plan.lanes[l].tasks[st[l].next].op);
      }
    }
    return report;
  }

  for (const auto& s : st) report.makespan = std::max(report.makespan, s.clock);
  for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
    DeviceReport dr;
    dr.device = plan.lanes[l].device;
    dr.busy_compute = st[l].busy_compute;
    dr.busy_comm = st[l].busy_comm;
    dr.idle = report.makespan - st[l].busy_compute - st[l].busy_comm;
    dr.peak_memory = st[l].peak;
    dr.peak_activation = st[l].act_peak;
    dr.peak_time = st[l].peak_time;
    report.devices.push_back(dr);
  }

  // Per-pTensor peak across devices. The stable sort keeps equal-time
  // events in generation order, which per device is lane order (a free
  // preceding the next allocation happens before it).
  std::stable_sort(pt_events.begin(), pt_events.end(),
                   [](const MemEvent& a, const MemEvent& b) {
                     return a.time < b.time;
                   });
  std::map<int, std::int64_t> live;
  for (const auto& e : pt_events) {
    live[e.ptensor] += e.delta;
    auto& peak = report.ptensor_peak[e.ptensor];
    peak = std::max(peak, live[e.ptensor]);
  }

  std::stable_sort(report.trace.begin(), report.trace.end(),
                   [](const TraceEvent& a, const TraceEvent& b) {
                     if (a.device != b.device) return a.device < b.device;
                     return a.start < b.start;
                   });
  return report;
}

namespace {

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::compute: return "compute";
    case TaskKind::send: return "send";
    case TaskKind::recv: return "recv";
    case TaskKind::collective: return "collective";
    case TaskKind::free_buffer: return "free";
  }
  return "?";
}

}  // namespace

std::string SimReport::summary() const {
  std::ostringstream os;
  if (deadlock) {
    os << "DEADLOCK\n";
    for (const auto& w : waiting_tasks) os << "  waiting: " << w << "\n";
    return os.str();
  }
  os << "makespan: " << makespan << " s\n";
  os << "device  compute       comm          bubble        peak-mem\n";
  for (const auto& d : devices) {
    os << d.device << "       " << d.busy_compute << "  " << d.busy_comm
       << "  " << d.idle << "  " << d.peak_memory << "\n";
  }
  return os.str();
}

std::string SimReport::to_json() const {
  ordered_json j;
  j["makespan"] = makespan;
  j["deadlock"] = deadlock;
  j["devices"] = ordered_json::array();
  for (const auto& d : devices) {
    j["devices"].push_back({{"device", d.device},
                            {"compute", d.busy_compute},
                            {"comm", d.busy_comm},
                            {"bubble", d.idle},
                            {"peak_memory", d.peak_memory},
                            {"peak_activation", d.peak_activation},
                            {"peak_time", d.peak_time}});
  }
  ordered_json peaks = ordered_json::object();
  for (const auto& [pt, bytes] : ptensor_peak) {
    peaks[std::to_string(pt)] = bytes;
  }
  j["ptensor_peak"] = peaks;
  return j.dump(2);
}

std::string SimReport::timeline_json() const {
  ordered_json j = ordered_json::array();
  for (const auto& e : trace) {
    j.push_back({{"device", e.device},
                 {"op", e.op},
                 {"kind", task_kind_name(e.kind)},
                 {"start", e.start},
                 {"end", e.end}});
  }
  return j.dump(2);
}

std::string SimReport::timeline_svg() const {
  const double width = 1000.0;
  const double lane_h = 28.0;
  const double left = 60.0;
  std::set<int> devs;
  for (const auto& e : trace) devs.insert(e.device);
  double scale = makespan > 0 ? (width - left - 10) / makespan : 1.0;
  std::ostringstream os;
  double height = lane_h * static_cast<double>(devs.size()) + 40;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n";
  std::map<int, int> lane_of;
  int li = 0;
  for (int d : devs) lane_of[d] = li++;
  for (int d : devs) {
    double y = 20 + lane_of[d] * lane_h;
    os << "<text x=\"4\" y=\"" << y + 14
       << "\" font-size=\"11\" font-family=\"monospace\">dev" << d
       << "</text>\n";
  }
  for (const auto& e : trace) {
    if (e.end <= e.start) continue;
    const char* color = e.kind == TaskKind::compute ? "#4caf50"
                        : e.kind == TaskKind::collective ? "#7e57c2"
                                                         : "#42a5f5";
    double x = left + e.start * scale;
    double w = std::max(0.5, (e.end - e.start) * scale);
    double y = 20 + lane_of[e.device] * lane_h;
    os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w
       << "\" height=\"" << lane_h - 8 << "\" fill=\"" << color
       << "\" stroke=\"#333\" stroke-width=\"0.3\"><title>" << e.op << " ["
       << e.start << ", " << e.end << ")</title></rect>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << height - 8
     << "\" font-size=\"11\" font-family=\"monospace\">makespan " << makespan
     << " s</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Plan document (JSON) round trip.

namespace {

const char* op_kind_doc_name(const OpNode& op) {
  switch (op.kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::elementwise:
      return op.ew == EwFn::add ? "add" : op.ew == EwFn::mul ? "mul" : "max";
    case OpKind::reduce_op: return "reduce-sum";
    case OpKind::embedding_lookup: return "embedding-lookup";
    case OpKind::embedding_grad: return "embedding-grad";
    case OpKind::identity: return "identity";
    case OpKind::split: return "split";
    case OpKind::concat: return "concat";
    case OpKind::reduce_assemble: return "reduce-assemble";
    case OpKind::send: return "send";
    case OpKind::recv: return "recv";
    case OpKind::collective: return "collective";
    case OpKind::free_buffer: return "free";
  }
  return "?";
}

std::pair<OpKind, EwFn> op_kind_from_doc(const std::string& s) {
  if (s == "matmul") return {OpKind::matmul, EwFn::add};
  if (s == "add") return {OpKind::elementwise, EwFn::add};
  if (s == "mul") return {OpKind::elementwise, EwFn::mul};
  if (s == "max") return {OpKind::elementwise, EwFn::max};
  if (s == "reduce-sum") return {OpKind::reduce_op, EwFn::add};
  if (s == "embedding-lookup") return {OpKind::embedding_lookup, EwFn::add};
  if (s == "embedding-grad") return {OpKind::embedding_grad, EwFn::add};
  if (s == "identity") return {OpKind::identity, EwFn::add};
  if (s == "split") return {OpKind::split, EwFn::add};
  if (s == "concat") return {OpKind::concat, EwFn::add};
  if (s == "reduce-assemble") return {OpKind::reduce_assemble, EwFn::add};
  if (s == "send") return {OpKind::send, EwFn::add};
  if (s == "recv") return {OpKind::recv, EwFn::add};
  if (s == "collective") return {OpKind::collective, EwFn::add};
  if (s == "free") return {OpKind::free_buffer, EwFn::add};
  throw SchemaError("plan document: unknown op kind " + s);
}

const char* tensor_kind_name(TensorKind k) { return to_string(k); }

TensorKind tensor_kind_from(const std::string& s) {
  if (s == "weight") return TensorKind::weight;
  if (s == "activation") return TensorKind::activation;
  if (s == "gradient") return TensorKind::gradient;
  if (s == "optimizer-state") return TensorKind::optimizer_state;
  throw SchemaError("plan document: unknown tensor kind " + s);
}

const char* task_kind_doc(TaskKind k) { return task_kind_name(k); }

TaskKind task_kind_from(const std::string& s) {
  if (s == "compute") return TaskKind::compute;
  if (s == "send") return TaskKind::send;
  if (s == "recv") return TaskKind::recv;
  if (s == "collective") return TaskKind::collective;
  if (s == "free") return TaskKind::free_buffer;
  throw SchemaError("plan document: unknown task kind " + s);
}

}  // namespace

std::string save_plan(const ExecutionPlan& plan) {
  const PlanGraph& g = plan.graph;
  ordered_json j;

  ordered_json pts = ordered_json::array();
  for (const auto& [id, pt] : g.ptensors) {
    ordered_json p{{"id", id},
                   {"shape", pt.shape},
                   {"elem_size", pt.elem_size},
                   {"kind", tensor_kind_name(pt.kind)}};
    if (pt.grad_of) p["grad_of"] = *pt.grad_of;
    pts.push_back(p);
  }
  j["ptensors"] = pts;

  ordered_json vts = ordered_json::array();
  for (const auto& [id, vt] : g.vtensors) {
    ordered_json region = ordered_json::array();
    for (const auto& iv : vt.mask.region) {
      region.push_back({iv.lo, iv.hi});
    }
    vts.push_back({{"id", id},
                   {"ptensor", vt.ptensor},
                   {"region", region},
                   {"value", {vt.mask.value_index, vt.mask.value_count}},
                   {"replica", {vt.mask.replica_index, vt.mask.replica_count}},
                   {"side",
                    vt.side == TensorSide::producer_output ? "out" : "in"},
                   {"owner", vt.owner_op}});
  }
  j["vtensors"] = vts;

  ordered_json ops = ordered_json::array();
  for (const auto& op : g.ops) {
    ordered_json o{{"id", op.id},
                   {"kind", op_kind_doc_name(op)},
                   {"inputs", op.inputs},
                   {"outputs", op.outputs},
                   {"direction", to_string(op.direction)},
                   {"flops", op.flops},
                   {"doc_order", op.doc_order},
                   {"inserted", op.inserted}};
    if (op.attrs.axis) o["axis"] = *op.attrs.axis;
    if (op.attrs.transpose_a) o["transpose_a"] = true;
    if (op.attrs.transpose_b) o["transpose_b"] = true;
    if (op.micro_batch) o["micro_batch"] = *op.micro_batch;
    if (op.channel >= 0) o["channel"] = op.channel;
    if (op.coll_group >= 0) o["coll_group"] = op.coll_group;
    if (op.free_vtensor >= 0) o["free_vtensor"] = op.free_vtensor;
    if (!op.comm_primitive.empty()) o["primitive"] = op.comm_primitive;
    ops.push_back(o);
  }
  j["ops"] = ops;

  ordered_json assignment = ordered_json::object();
  for (const auto& [op, dev] : g.assignment) assignment[op] = dev;
  j["assignment"] = assignment;

  ordered_json feeds = ordered_json::array();
  for (const auto& [c, p] : plan.feeds) feeds.push_back({c, p});
  j["feeds"] = feeds;

  ordered_json groups = ordered_json::array();
  for (const auto& [id, grp] : plan.coll_groups) {
    groups.push_back({{"id", id},
                      {"primitive", grp.primitive},
                      {"k", grp.k},
                      {"bytes", grp.message_bytes},
                      {"inter", grp.inter_group},
                      {"ops", grp.ops}});
  }
  j["coll_groups"] = groups;

  ordered_json syncs = ordered_json::array();
  for (const auto& [a, b] : plan.sync_edges) syncs.push_back({a, b});
  j["sync_edges"] = syncs;

  ordered_json lanes = ordered_json::array();
  for (const auto& lane : plan.lanes) {
    ordered_json tasks = ordered_json::array();
    for (const auto& t : lane.tasks) {
      ordered_json tj{{"kind", task_kind_doc(t.kind)},
                      {"op", t.op},
                      {"duration", t.duration},
                      {"bytes", t.bytes}};
      if (t.channel >= 0) tj["channel"] = t.channel;
      if (t.coll_group >= 0) tj["coll_group"] = t.coll_group;
      if (t.peer_device >= 0) tj["peer"] = t.peer_device;
      if (!t.alloc_vtensors.empty()) tj["alloc"] = t.alloc_vtensors;
      if (!t.free_vtensors.empty()) tj["free"] = t.free_vtensors;
      tasks.push_back(tj);
    }
    lanes.push_back({{"device", lane.device}, {"tasks", tasks}});
  }
  j["lanes"] = lanes;

  ordered_json devices = ordered_json::array();
  for (const auto& d : plan.cluster.devices) {
    devices.push_back(
        {{"id", d.id}, {"group", d.group}, {"memory", d.memory_capacity}});
  }
  j["cluster"] = {{"devices", devices},
                  {"intra_link",
                   {{"bandwidth", plan.cluster.intra_link.bandwidth},
                    {"latency", plan.cluster.intra_link.latency}}},
                  {"inter_link",
                   {{"bandwidth", plan.cluster.inter_link.bandwidth},
                    {"latency", plan.cluster.inter_link.latency}}},
                  {"device_throughput", plan.cluster.device_throughput}};
  return j.dump(2);
}

ExecutionPlan load_plan(const std::string& document) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(document);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("plan document is not valid JSON: ") +
                      e.what());
  }
  ExecutionPlan plan;
  PlanGraph& g = plan.graph;
  try {
    for (const auto& p : j.at("ptensors")) {
      PTensor pt;
      pt.id = p.at("id").get<int>();
      pt.shape = p.at("shape").get<std::vector<std::int64_t>>();
      pt.elem_size = p.at("elem_size").get<std::int64_t>();
      pt.kind = tensor_kind_from(p.at("kind").get<std::string>());
      if (p.contains("grad_of")) pt.grad_of = p["grad_of"].get<int>();
      g.ptensors[pt.id] = pt;
    }
    for (const auto& v : j.at("vtensors")) {
      VTensor vt;
      vt.id = v.at("id").get<int>();
      vt.ptensor = v.at("ptensor").get<int>();
      for (const auto& iv : v.at("region")) {
        vt.mask.region.push_back(
            {iv.at(0).get<std::int64_t>(), iv.at(1).get<std::int64_t>()});
      }
      vt.mask.value_index = v.at("value").at(0).get<int>();
      vt.mask.value_count = v.at("value").at(1).get<int>();
      vt.mask.replica_index = v.at("replica").at(0).get<int>();
      vt.mask.replica_count = v.at("replica").at(1).get<int>();
      vt.side = v.at("side").get<std::string>() == "out"
                    ? TensorSide::producer_output
                    : TensorSide::consumer_input;
      vt.owner_op = v.at("owner").get<std::string>();
      g.vtensors[vt.id] = vt;
      g.next_vtensor_id = std::max(g.next_vtensor_id, vt.id + 1);
    }
    for (const auto& o : j.at("ops")) {
      OpNode op;
      op.id = o.at("id").get<std::string>();
      auto [kind, ew] = op_kind_from_doc(o.at("kind").get<std::string>());
      op.kind = kind;
      op.ew = ew;
      op.inputs = o.at("inputs").get<std::vector<int>>();
      op.outputs = o.at("outputs").get<std::vector<int>>();
      std::string dir = o.at("direction").get<std::string>();
      op.direction = dir == "backward" ? OpDirection::backward
                     : dir == "optimizer" ? OpDirection::optimizer
                                          : OpDirection::forward;
      op.flops = o.at("flops").get<double>();
      op.doc_order = o.at("doc_order").get<int>();
      op.inserted = o.at("inserted").get<bool>();
      if (o.contains("axis")) op.attrs.axis = o["axis"].get<int>();
      if (o.contains("transpose_a")) op.attrs.transpose_a = true;
      if (o.contains("transpose_b")) op.attrs.transpose_b = true;
      if (o.contains("micro_batch")) {
        op.micro_batch = o["micro_batch"].get<int>();
      }
      if (o.contains("channel")) op.channel = o["channel"].get<int>();
      if (o.contains("coll_group")) op.coll_group = o["coll_group"].get<int>();
      if (o.contains("free_vtensor")) {
        op.free_vtensor = o["free_vtensor"].get<int>();
      }
      if (o.contains("primitive")) {
        op.comm_primitive = o["primitive"].get<std::string>();
      }
      g.ops.push_back(op);
    }
    for (const auto& [op, dev] : j.at("assignment").items()) {
      g.assignment[op] = dev.get<int>();
    }
    for (const auto& f : j.at("feeds")) {
      plan.feeds[f.at(0).get<int>()] = f.at(1).get<int>();
    }
    for (const auto& grp_j : j.at("coll_groups")) {
      CollectiveGroup grp;
      grp.id = grp_j.at("id").get<int>();
      grp.primitive = grp_j.at("primitive").get<std::string>();
      grp.k = grp_j.at("k").get<int>();
      grp.message_bytes = grp_j.at("bytes").get<std::int64_t>();
      grp.inter_group = grp_j.at("inter").get<bool>();
      grp.ops = grp_j.at("ops").get<std::vector<std::string>>();
      plan.coll_groups[grp.id] = grp;
      g.next_coll_group = std::max(g.next_coll_group, grp.id + 1);
    }
    if (j.contains("sync_edges")) {
      for (const auto& s : j["sync_edges"]) {
        plan.sync_edges.push_back(
            {s.at(0).get<std::string>(), s.at(1).get<std::string>()});
      }
    }
    for (const auto& lane_j : j.at("lanes")) {
      DeviceLane lane;
      lane.device = lane_j.at("device").get<int>();
      for (const auto& tj : lane_j.at("tasks")) {
        Task t;
        t.kind = task_kind_from(tj.at("kind").get<std::string>());
        t.op = tj.at("op").get<std::string>();
        t.duration = tj.at("duration").get<double>();
        t.bytes = tj.at("bytes").get<std::int64_t>();
        if (tj.contains("channel")) t.channel = tj["channel"].get<int>();
        if (tj.contains("coll_group")) {
          t.coll_group = tj["coll_group"].get<int>();
        }
        if (tj.contains("peer")) t.peer_device = tj["peer"].get<int>();
        if (tj.contains("alloc")) {
          t.alloc_vtensors = tj["alloc"].get<std::vector<int>>();
        }
        if (tj.contains("free")) {
          t.free_vtensors = tj["free"].get<std::vector<int>>();
        }
        lane.tasks.push_back(t);
      }
      plan.lanes.push_back(lane);
    }
    const auto& c = j.at("cluster");
    for (const auto& d : c.at("devices")) {
      plan.cluster.devices.push_back({d.at("id").get<int>(),
                                      d.at("group").get<int>(),
                                      d.at("memory").get<std::int64_t>()});
    }
    plan.cluster.intra_link = {
        c.at("intra_link").at("bandwidth").get<double>(),
        c.at("intra_link").at("latency").get<double>()};
    plan.cluster.inter_link = {
        c.at("inter_link").at("bandwidth").get<double>(),
        c.at("inter_link").at("latency").get<double>()};
    plan.cluster.device_throughput =
        c.at("device_throughput").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed plan document: ") + e.what());
  }
  return plan;
}

}  // namespace planc
