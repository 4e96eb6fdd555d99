// SPDX-License-Identifier: Apache-2.0

#include "planc/rvd.hpp"

#include <algorithm>
#include <climits>
#include <map>
#include <queue>
#include <set>
#include <sstream>

namespace planc {

const char* to_string(CommPrimitive p) {
  switch (p) {
    case CommPrimitive::local_split: return "local-split";
    case CommPrimitive::all_gather: return "all-gather";
    case CommPrimitive::all_reduce: return "all-reduce";
    case CommPrimitive::reduce_scatter: return "reduce-scatter";
    case CommPrimitive::all_to_all: return "all-to-all";
    case CommPrimitive::group_copy: return "group-copy";
    case CommPrimitive::rd_scatter: return "rd-scatter";
    case CommPrimitive::relabel: return "relabel";
  }
  return "?";
}

int RvdDescriptor::slots() const {
  int p = r * v;
  for (int x : d) p *= x;
  return p;
}

std::int64_t RvdDescriptor::piece_bytes() const {
  std::int64_t vol = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) vol *= shape[i] / d[i];
  return vol * elem_size;
}

void RvdDescriptor::slot_coords(int slot, int& replica, int& value,
                                std::vector<int>& coords) const {
  int p = 1;
  for (int x : d) p *= x;
  int cell = slot % p;
  int rest = slot / p;
  value = rest % v;
  replica = rest / v;
  coords.assign(d.size(), 0);
  for (int i = static_cast<int>(d.size()) - 1; i >= 0; --i) {
    coords[i] = cell % d[i];
    cell /= d[i];
  }
}

Region RvdDescriptor::slot_region(int slot) const {
  int ri, vi;
  std::vector<int> coords;
  slot_coords(slot, ri, vi, coords);
  Region reg(shape.size());
  for (std::size_t i = 0; i < shape.size(); ++i) {
    std::int64_t w = shape[i] / d[i];
    reg[i] = {coords[i] * w, (coords[i] + 1) * w};
  }
  return reg;
}

std::string RvdDescriptor::to_string() const {
  std::ostringstream os;
  os << "R(" << r << ")V(" << v << ")D(";
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) os << ",";
    os << d[i];
  }
  os << ")@[";
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (i) os << ",";
    os << group[i];
  }
  os << "]";
  return os.str();
}

double primitive_cost(CommPrimitive p, int k, std::int64_t n_bytes,
                      const LinkParams& link) {
  double n = static_cast<double>(n_bytes);
  double b = link.bandwidth;
  double a = link.latency;
  double kk = static_cast<double>(k);
  switch (p) {
    case CommPrimitive::local_split:
      return 0;
    case CommPrimitive::all_reduce:
      return 2.0 * (kk - 1) / kk * n / b + a;
    case CommPrimitive::all_gather:
    case CommPrimitive::reduce_scatter:
    case CommPrimitive::all_to_all:
    case CommPrimitive::rd_scatter:
      return (kk - 1) / kk * n / b + a;
    case CommPrimitive::group_copy:
      return n / b + a;  // per tensor; pairs transfer in parallel
    case CommPrimitive::relabel:
      return n / b + a;  // per moved tensor
  }
  return 0;
}

namespace {

int slot_index(const RvdDescriptor& s, int ri, int vi,
               const std::vector<int>& coords) {
  int cell = 0;
  for (std::size_t i = 0; i < s.d.size(); ++i) cell = cell * s.d[i] + coords[i];
  int p = 1;
  for (int x : s.d) p *= x;
  return (ri * s.v + vi) * p + cell;
}

std::vector<int> divisors_ge2(int n) {
  std::vector<int> out;
  for (int k = 2; k <= n; ++k) {
    if (n % k == 0) out.push_back(k);
  }
  return out;
}

bool spans_groups(const ClusterSpec& cluster, const std::vector<int>& devs) {
  for (std::size_t i = 1; i < devs.size(); ++i) {
    if (cluster.group_of(devs[i]) != cluster.group_of(devs[0])) return true;
  }
  return false;
}

// Device holding the data a successor slot needs, for intra transitions.
// Each case inverts the step's slot arithmetic.
struct SuccessorMap {
  RvdDescriptor next;
  // subgroup id -> devices, for cost/link and lowering
  std::vector<std::vector<int>> subgroups;
};

}  // namespace

std::vector<CommStep> transition_rules(const RvdDescriptor& s,
                                       const ClusterSpec& cluster,
                                       const std::vector<int>* peer_group) {
  std::vector<CommStep> out;
  int rank = static_cast<int>(s.d.size());
  std::int64_t piece = s.piece_bytes();

  auto finish_step = [&](CommStep& step) {
    const LinkParams* link = &cluster.intra_link;
    bool inter = false;
    for (const auto& sg : step.subgroups) {
      if (spans_groups(cluster, sg)) {
        inter = true;
        link = &cluster.inter_link;
        break;
      }
    }
    step.inter_group = inter;
    step.cost = primitive_cost(step.primitive, step.k, step.message_bytes,
                               *link);
    out.push_back(step);
  };

  // local-split: R(r*k)D(..di..) -> R(r)D(..di*k..), zero communication.
  for (int k : divisors_ge2(s.r)) {
    for (int i = 0; i < rank; ++i) {
      if (s.shape[i] % (static_cast<std::int64_t>(s.d[i]) * k) != 0) continue;
      RvdDescriptor n = s;
      n.r = s.r / k;
      n.d[i] = s.d[i] * k;
      n.group.assign(s.group.size(), -1);
      for (int slot = 0; slot < n.slots(); ++slot) {
        int ri, vi;
        std::vector<int> c;
        n.slot_coords(slot, ri, vi, c);
        int b = c[i] % k;
        std::vector<int> oc = c;
        oc[i] = c[i] / k;
        n.group[slot] = s.group[slot_index(s, ri * k + b, vi, oc)];
      }
      CommStep step;
      step.primitive = CommPrimitive::local_split;
      step.k = k;
      step.axis = i;
      step.message_bytes = piece;
      for (int dev : s.group) step.subgroups.push_back({dev});
      step.result = n;
      finish_step(step);
    }
  }

  // all-gather: R(r)D(..di*k..) -> R(r*k)D(..di..).
  for (int i = 0; i < rank; ++i) {
    for (int k : divisors_ge2(s.d[i])) {
      RvdDescriptor n = s;
      n.r = s.r * k;
      n.d[i] = s.d[i] / k;
      n.group.assign(s.group.size(), -1);
      std::map<std::vector<int>, std::vector<int>> groups;
      for (int slot = 0; slot < n.slots(); ++slot) {
        int ri, vi;
        std::vector<int> c;
        n.slot_coords(slot, ri, vi, c);
        int cpos = ri % k;
        std::vector<int> oc = c;
        oc[i] = c[i] * k + cpos;
        int dev = s.group[slot_index(s, ri / k, vi, oc)];
        n.group[slot] = dev;
        std::vector<int> gkey = {ri / k, vi};
        for (std::size_t q = 0; q < c.size(); ++q) gkey.push_back(c[q]);
        groups[gkey].push_back(dev);
      }
      CommStep step;
      step.primitive = CommPrimitive::all_gather;
      step.k = k;
      step.axis = i;
      step.message_bytes = piece * k;  // gathered tensor size
      for (auto& [key, devs] : groups) step.subgroups.push_back(devs);
      step.result = n;
      finish_step(step);
    }
  }

  // all-reduce: R(r)V(v*k) -> R(r*k)V(v).
  for (int k : divisors_ge2(s.v)) {
    RvdDescriptor n = s;
    n.r = s.r * k;
    n.v = s.v / k;
    n.group.assign(s.group.size(), -1);
    std::map<std::vector<int>, std::vector<int>> groups;
    for (int slot = 0; slot < n.slots(); ++slot) {
      int ri, vi;
      std::vector<int> c;
      n.slot_coords(slot, ri, vi, c);
      int cpos = ri % k;
      int dev = s.group[slot_index(s, ri / k, vi * k + cpos, c)];
      n.group[slot] = dev;
      std::vector<int> gkey = {ri / k, vi};
      for (std::size_t q = 0; q < c.size(); ++q) gkey.push_back(c[q]);
      groups[gkey].push_back(dev);
    }
    CommStep step;
    step.primitive = CommPrimitive::all_reduce;
    step.k = k;
    step.message_bytes = piece;
    for (auto& [key, devs] : groups) step.subgroups.push_back(devs);
    step.result = n;
    finish_step(step);
  }

  // reduce-scatter: R(r)V(v*k)D(..di..) -> R(r)V(v)D(..di*k..).
  for (int k : divisors_ge2(s.v)) {
    for (int i = 0; i < rank; ++i) {
      if (s.shape[i] % (static_cast<std::int64_t>(s.d[i]) * k) != 0) continue;
      RvdDescriptor n = s;
      n.v = s.v / k;
      n.d[i] = s.d[i] * k;
      n.group.assign(s.group.size(), -1);
      std::map<std::vector<int>, std::vector<int>> groups;
      for (int slot = 0; slot < n.slots(); ++slot) {
        int ri, vi;
        std::vector<int> c;
        n.slot_coords(slot, ri, vi, c);
        int cpos = c[i] % k;
        std::vector<int> oc = c;
        oc[i] = c[i] / k;
        int dev = s.group[slot_index(s, ri, vi * k + cpos, oc)];
        n.group[slot] = dev;
        std::vector<int> gkey = {ri, vi};
        for (std::size_t q = 0; q < oc.size(); ++q) gkey.push_back(oc[q]);
        groups[gkey].push_back(dev);
      }
      CommStep step;
      step.primitive = CommPrimitive::reduce_scatter;
      step.k = k;
      step.axis = i;
      step.message_bytes = piece;
      for (auto& [key, devs] : groups) step.subgroups.push_back(devs);
      step.result = n;
      finish_step(step);
    }
  }

  // all-to-all: D(..di*k..dj..) -> D(..di..dj*k..), i coarsens, j refines.
  for (int i = 0; i < rank; ++i) {
    for (int j = 0; j < rank; ++j) {
      if (i == j) continue;
      for (int k : divisors_ge2(s.d[i])) {
        if (s.shape[j] % (static_cast<std::int64_t>(s.d[j]) * k) != 0) {
          continue;
        }
        RvdDescriptor n = s;
        n.d[i] = s.d[i] / k;
        n.d[j] = s.d[j] * k;
        n.group.assign(s.group.size(), -1);
        std::map<std::vector<int>, std::vector<int>> groups;
        for (int slot = 0; slot < n.slots(); ++slot) {
          int ri, vi;
          std::vector<int> c;
          n.slot_coords(slot, ri, vi, c);
          int cpos = c[j] % k;
          std::vector<int> oc = c;
          oc[j] = c[j] / k;
          oc[i] = c[i] * k + cpos;
          int dev = s.group[slot_index(s, ri, vi, oc)];
          n.group[slot] = dev;
          std::vector<int> gkey = {ri, vi};
          for (std::size_t q = 0; q < c.size(); ++q) {
            gkey.push_back(q == static_cast<std::size_t>(j) ? c[j] / k
                          : q == static_cast<std::size_t>(i) ? c[i] : c[q]);
          }
          groups[gkey].push_back(dev);
        }
        CommStep step;
        step.primitive = CommPrimitive::all_to_all;
        step.k = k;
        step.axis = j;
        step.message_bytes = piece;
        for (auto& [key, devs] : groups) step.subgroups.push_back(devs);
        step.result = n;
        finish_step(step);
      }
    }
  }

  // Cross-group edges toward the peer group.
  if (peer_group && !peer_group->empty()) {
    int slots = s.slots();
    int peer_n = static_cast<int>(peer_group->size());
    if (peer_n == slots) {
      RvdDescriptor n = s;
      n.group = *peer_group;
      CommStep step;
      step.primitive = CommPrimitive::group_copy;
      step.k = 1;
      step.message_bytes = piece;
      for (int slot = 0; slot < slots; ++slot) {
        step.subgroups.push_back({s.group[slot], (*peer_group)[slot]});
      }
      step.result = n;
      // group-copy always crosses groups by construction here.
      step.inter_group = true;
      step.cost = primitive_cost(CommPrimitive::group_copy, 1, piece,
                                 cluster.inter_link);
      out.push_back(step);
    } else if (peer_n % slots == 0 && peer_n / slots >= 2) {
      int k = peer_n / slots;
      for (int i = 0; i < rank; ++i) {
        if (s.shape[i] % (static_cast<std::int64_t>(s.d[i]) * k) != 0) {
          continue;
        }
        RvdDescriptor n = s;
        n.d[i] = s.d[i] * k;
        n.group = *peer_group;  // canonical landing on the peer group
        CommStep step;
        step.primitive = CommPrimitive::rd_scatter;
        step.k = k;
        step.axis = i;
        step.message_bytes = piece;
        // Each source slot scatters its k chunks to k peer devices.
        for (int slot = 0; slot < slots; ++slot) {
          int ri, vi;
          std::vector<int> c;
          s.slot_coords(slot, ri, vi, c);
          std::vector<int> devs = {s.group[slot]};
          for (int cpos = 0; cpos < k; ++cpos) {
            std::vector<int> nc = c;
            nc[i] = c[i] * k + cpos;
            devs.push_back(n.group[slot_index(n, ri, vi, nc)]);
          }
          step.subgroups.push_back(devs);
        }
        step.result = n;
        step.inter_group = true;
        step.cost = primitive_cost(CommPrimitive::rd_scatter, k, piece,
                                   cluster.inter_link);
        out.push_back(step);
      }
    }
  }
  return out;
}

namespace {

// (region, value part) a device holds; replica index is interchangeable.
struct Content {
  std::vector<std::int64_t> region_key;
  int vi = 0;
  int vc = 1;
  bool operator==(const Content&) const = default;
  bool operator<(const Content& o) const {
    return std::tie(region_key, vi, vc) < std::tie(o.region_key, o.vi, o.vc);
  }
};

std::map<int, Content> content_map(const RvdDescriptor& s) {
  std::map<int, Content> out;
  for (int slot = 0; slot < s.slots(); ++slot) {
    int ri, vi;
    std::vector<int> c;
    s.slot_coords(slot, ri, vi, c);
    Region reg = s.slot_region(slot);
    Content ct;
    for (const auto& iv : reg) {
      ct.region_key.push_back(iv.lo);
      ct.region_key.push_back(iv.hi);
    }
    ct.vi = vi;
    ct.vc = s.v;
    out[s.group[slot]] = ct;
  }
  return out;
}

std::optional<CommStep> relabel_step(const RvdDescriptor& state,
                                     const RvdDescriptor& dst,
                                     const ClusterSpec& cluster) {
  auto have = content_map(state);
  auto want = content_map(dst);
  if (have.size() != want.size()) return std::nullopt;
  std::vector<std::array<int, 2>> moves;
  for (const auto& [dev, ct] : want) {
    auto it = have.find(dev);
    if (it == have.end()) return std::nullopt;
    if (it->second == ct) continue;
    int src = -1;
    for (const auto& [d2, c2] : have) {
      if (c2 == ct) {
        src = d2;
        break;
      }
    }
    if (src < 0) return std::nullopt;
    moves.push_back({src, dev});
  }
  CommStep step;
  step.primitive = CommPrimitive::relabel;
  step.k = 1;
  step.message_bytes = state.piece_bytes();
  step.result = dst;
  step.moves = moves;
  if (moves.empty()) {
    step.cost = 0;
    return step;
  }
  std::map<int, int> load;
  double per_move = 0;
  for (const auto& m : moves) {
    step.subgroups.push_back({m[0], m[1]});
    load[m[0]]++;
    per_move = std::max(per_move,
                        primitive_cost(CommPrimitive::relabel, 1,
                                       step.message_bytes,
                                       cluster.link_between(m[0], m[1])));
  }
  int max_load = 0;
  for (const auto& [dev, n] : load) max_load = std::max(max_load, n);
  step.cost = max_load * per_move;
  return step;
}

std::set<int> device_set(const std::vector<int>& v) {
  return std::set<int>(v.begin(), v.end());
}

}  // namespace

std::optional<CommStep> goal_relabel(const RvdDescriptor& state,
                                     const RvdDescriptor& dst,
                                     const ClusterSpec& cluster) {
  return relabel_step(state, dst, cluster);
}

namespace {

std::optional<RvdPath> dijkstra(const RvdDescriptor& src,
                                const RvdDescriptor& dst,
                                const ClusterSpec& cluster,
                                const std::vector<int>* peer_group) {
  if (src.shape != dst.shape || src.elem_size != dst.elem_size) {
    throw UsageError("rvd search: descriptors view different tensors");
  }
  auto goal_content = content_map(dst);
  auto is_goal = [&](const RvdDescriptor& s) {
    return s.same_shape(dst) && content_map(s) == goal_content;
  };
  if (is_goal(src)) return RvdPath{};

  struct NodeInfo {
    double cost;
    std::string parent;
    CommStep via;
    RvdDescriptor desc;
    bool done = false;
  };
  std::map<std::string, NodeInfo> nodes;
  using QItem = std::pair<double, std::string>;
  std::priority_queue<QItem, std::vector<QItem>, std::greater<QItem>> pq;

  std::string src_key = src.to_string();
  nodes[src_key] = {0.0, "", {}, src, false};
  pq.push({0.0, src_key});
  const std::set<int> src_set = device_set(src.group);

  int pops = 0;
  const int budget = 50000;
  std::string goal_key;
  while (!pq.empty()) {
    auto [cost, key] = pq.top();
    pq.pop();
    auto& node = nodes.at(key);
    if (node.done || cost > node.cost) continue;
    node.done = true;
    if (++pops > budget) return std::nullopt;

    if (is_goal(node.desc)) {
      goal_key = key;
      break;
    }

    auto relax = [&](const CommStep& step) {
      double ncost = node.cost + step.cost;
      std::string nkey = step.result.to_string();
      auto it = nodes.find(nkey);
      if (it == nodes.end() || ncost < it->second.cost) {
        nodes[nkey] = {ncost, key, step, step.result, false};
        pq.push({ncost, nkey});
      }
    };

    bool on_src_side = device_set(node.desc.group) == src_set;
    auto steps = transition_rules(node.desc, cluster,
                                  peer_group && on_src_side ? peer_group
                                                            : nullptr);
    for (const auto& step : steps) relax(step);

    // Slot relabeling once the shape matches on the destination side.
    if (node.desc.same_shape(dst) &&
        device_set(node.desc.group) == device_set(dst.group)) {
      if (auto rl = relabel_step(node.desc, dst, cluster)) {
        if (!rl->moves.empty()) relax(*rl);
      }
    }
  }
  if (goal_key.empty()) return std::nullopt;

  RvdPath path;
  path.cost = nodes.at(goal_key).cost;
  std::string cur = goal_key;
  while (cur != src_key) {
    const auto& node = nodes.at(cur);
    path.steps.push_back(node.via);
    cur = node.parent;
  }
  std::reverse(path.steps.begin(), path.steps.end());
  return path;
}

}  // namespace

std::optional<RvdDescriptor> to_rvd(const PlanGraph& g,
                                    const std::vector<int>& vtensors,
                                    const std::map<int, int>& device_of_vt) {
  if (vtensors.empty()) return std::nullopt;
  const VTensor& first = g.vt(vtensors[0]);
  int pt_id = first.ptensor;
  const PTensor& pt = g.pt(pt_id);
  if (pt.rank() > 4) return std::nullopt;

  int vc = first.mask.value_count;
  std::vector<std::set<std::pair<std::int64_t, std::int64_t>>> intervals(
      pt.rank());
  for (int v : vtensors) {
    const VTensor& vt = g.vt(v);
    if (vt.ptensor != pt_id) {
      throw UsageError("to_rvd: views of different ptensors");
    }
    if (vt.mask.value_count != vc) return std::nullopt;
    for (int i = 0; i < pt.rank(); ++i) {
      intervals[i].insert({vt.mask.region[i].lo, vt.mask.region[i].hi});
    }
  }

  // Each dimension must be evenly partitioned by the distinct intervals.
  std::vector<int> d(pt.rank(), 1);
  for (int i = 0; i < pt.rank(); ++i) {
    int parts = static_cast<int>(intervals[i].size());
    if (pt.shape[i] % parts != 0) return std::nullopt;
    std::int64_t w = pt.shape[i] / parts;
    int t = 0;
    for (const auto& [lo, hi] : intervals[i]) {
      if (lo != t * w || hi != (t + 1) * w) return std::nullopt;
      ++t;
    }
    d[i] = parts;
  }

  // Group pieces by (value part, cell); multiplicity is the replica count.
  std::map<std::vector<int>, std::vector<int>> cells;  // key -> vts
  for (int v : vtensors) {
    const VTensor& vt = g.vt(v);
    std::vector<int> key{vt.mask.value_index};
    for (int i = 0; i < pt.rank(); ++i) {
      std::int64_t w = pt.shape[i] / d[i];
      key.push_back(static_cast<int>(vt.mask.region[i].lo / w));
    }
    cells[key].push_back(v);
  }
  std::int64_t expected_cells = vc;
  for (int x : d) expected_cells *= x;
  if (static_cast<std::int64_t>(cells.size()) != expected_cells) {
    return std::nullopt;
  }
  int r = static_cast<int>(cells.begin()->second.size());
  for (auto& [key, vts] : cells) {
    if (static_cast<int>(vts.size()) != r) return std::nullopt;
    // Deterministic replica ordering: replica index, then device id.
    std::sort(vts.begin(), vts.end(), [&](int a, int b) {
      const Mask& ma = g.vt(a).mask;
      const Mask& mb = g.vt(b).mask;
      if (ma.replica_index != mb.replica_index) {
        return ma.replica_index < mb.replica_index;
      }
      return device_of_vt.at(a) < device_of_vt.at(b);
    });
  }

  RvdDescriptor desc;
  desc.r = r;
  desc.v = vc;
  desc.d = d;
  desc.shape = pt.shape;
  desc.elem_size = pt.elem_size;
  desc.group.assign(static_cast<std::size_t>(r) * expected_cells, -1);
  desc.slot_vts.assign(desc.group.size(), -1);

  std::set<int> used_devices;
  for (int slot = 0; slot < desc.slots(); ++slot) {
    int ri, vi;
    std::vector<int> coords;
    desc.slot_coords(slot, ri, vi, coords);
    std::vector<int> key{vi};
    for (int c : coords) key.push_back(c);
    auto it = cells.find(key);
    if (it == cells.end()) return std::nullopt;
    int vt = it->second[ri];
    int dev = device_of_vt.at(vt);
    if (!used_devices.insert(dev).second) {
      return std::nullopt;  // one vtensor per device slot
    }
    desc.group[slot] = dev;
    desc.slot_vts[slot] = vt;
  }
  return desc;
}

std::optional<RvdPath> search_intra(const RvdDescriptor& src,
                                    const RvdDescriptor& dst,
                                    const ClusterSpec& cluster) {
  if (device_set(src.group) != device_set(dst.group)) {
    throw UsageError("search_intra: descriptors on different device groups");
  }
  return dijkstra(src, dst, cluster, nullptr);
}

std::optional<RvdPath> search_inter(const RvdDescriptor& src,
                                    const RvdDescriptor& dst,
                                    const ClusterSpec& cluster) {
  auto s1 = device_set(src.group);
  auto s2 = device_set(dst.group);
  if (s1 == s2) return search_intra(src, dst, cluster);
  for (int dev : s2) {
    if (s1.count(dev)) {
      throw UsageError("search_inter: groups overlap but differ");
    }
  }
  // Cross edges land canonically on the ascending destination device list.
  std::vector<int> peer(s2.begin(), s2.end());
  return dijkstra(src, dst, cluster, &peer);
}

std::string dump_transition_graph(const RvdDescriptor& src,
                                  const ClusterSpec& cluster,
                                  int max_states) {
  std::ostringstream os;
  std::set<std::string> seen{src.to_string()};
  std::vector<RvdDescriptor> frontier{src};
  while (!frontier.empty() && static_cast<int>(seen.size()) < max_states) {
    std::vector<RvdDescriptor> next;
    for (const auto& s : frontier) {
      for (const auto& step : transition_rules(s, cluster)) {
        os << s.to_string() << " -> " << to_string(step.primitive) << "(k="
           << step.k;
        if (step.axis >= 0) os << ",axis=" << step.axis;
        os << ", cost=" << step.cost << ") -> " << step.result.to_string()
           << "\n";
        if (seen.insert(step.result.to_string()).second &&
            static_cast<int>(seen.size()) < max_states) {
          next.push_back(step.result);
        }
      }
    }
    frontier = std::move(next);
  }
  return os.str();
}

std::string dump_path(const RvdDescriptor& src, const RvdPath& path) {
  std::ostringstream os;
  os << src.to_string() << "\n";
  for (const auto& step : path.steps) {
    os << "  -> " << to_string(step.primitive) << "(k=" << step.k;
    if (step.axis >= 0) os << ",axis=" << step.axis;
    os << ") cost=" << step.cost << " -> " << step.result.to_string() << "\n";
  }
  os << "total cost " << path.cost << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Pattern matching on the materialized graph.

namespace {

struct Family {
  int ptensor;
  std::vector<int> producer_vts;
  std::vector<int> consumer_vts;
  std::vector<std::string> naive_ops;
};

// Consumer-input view of an existing piece, with the feed recorded.
int mg_add_input(PlanGraph& g, MaterializedPlan& plan, int ptensor,
                 int source_vt, const std::string& owner) {
  int vt = g.add_vtensor(ptensor, g.vt(source_vt).mask,
                         TensorSide::consumer_input, owner);
  plan.feeds[vt] = source_vt;
  return vt;
}

struct Weaver {
  std::vector<std::string>& order;

  int position(const std::string& id) const {
    auto it = std::find(order.begin(), order.end(), id);
    if (it == order.end()) {
      throw InternalError("weave: op " + id + " not in order");
    }
    return static_cast<int>(it - order.begin());
  }
  void insert_after(const std::string& anchor, const std::string& id) {
    order.insert(order.begin() + position(anchor) + 1, id);
  }
};

}  // namespace

double naive_family_cost(const MaterializedPlan& plan,
                         const ClusterSpec& cluster,
                         const std::vector<std::string>& ops) {
  double cost = 0;
  const PlanGraph& g = plan.graph;
  for (const auto& oid : ops) {
    const OpNode& op = g.op(oid);
    if (op.kind != OpKind::send) continue;
    const VTensor& vt = g.vt(op.inputs.at(0));
    std::int64_t bytes = vt.bytes(g.pt(vt.ptensor));
    // Find the matching recv's device for the link class.
    int peer = -1;
    for (const auto& other : g.ops) {
      if (other.kind == OpKind::recv && other.channel == op.channel) {
        peer = g.assignment.at(other.id);
        break;
      }
    }
    int self = g.assignment.at(oid);
    const LinkParams& link =
        peer < 0 ? cluster.intra_link : cluster.link_between(self, peer);
    cost += static_cast<double>(bytes) / link.bandwidth + link.latency;
  }
  return cost;
}

int pattern_match_collectives(MaterializedPlan& plan,
                              const ClusterSpec& cluster) {
  PlanGraph& g = plan.graph;

  // Families: per ptensor, the original producers/consumers plus every
  // inserted op touching it.
  std::map<int, Family> families;
  for (const auto& op : g.ops) {
    for (int v : op.outputs) {
      int pt = g.vt(v).ptensor;
      families[pt].ptensor = pt;
      if (!op.inserted) {
        families[pt].producer_vts.push_back(v);
      }
    }
    for (int v : op.inputs) {
      int pt = g.vt(v).ptensor;
      families[pt].ptensor = pt;
      if (!op.inserted) {
        families[pt].consumer_vts.push_back(v);
      }
    }
    if (op.inserted) {
      std::set<int> pts;
      for (int v : op.inputs) pts.insert(g.vt(v).ptensor);
      for (int v : op.outputs) pts.insert(g.vt(v).ptensor);
      for (int pt : pts) families[pt].naive_ops.push_back(op.id);
    }
  }

  auto global_pos = [&](const std::string& id) {
    auto it = std::find(plan.global_order.begin(), plan.global_order.end(), id);
    return static_cast<int>(it - plan.global_order.begin());
  };

  int replaced = 0;
  for (auto& [pt_id, fam] : families) {
    if (fam.producer_vts.empty() || fam.consumer_vts.empty()) continue;
    if (fam.naive_ops.empty()) continue;  // nothing to improve

    std::map<int, int> dev_of_vt;
    bool assigned = true;
    for (int v : fam.producer_vts) {
      auto it = g.assignment.find(g.vt(v).owner_op);
      if (it == g.assignment.end()) { assigned = false; break; }
      dev_of_vt[v] = it->second;
    }
    for (int v : fam.consumer_vts) {
      auto it = g.assignment.find(g.vt(v).owner_op);
      if (it == g.assignment.end()) { assigned = false; break; }
      dev_of_vt[v] = it->second;
    }
    if (!assigned) continue;

    auto src = to_rvd(g, fam.producer_vts, dev_of_vt);
    auto dst = to_rvd(g, fam.consumer_vts, dev_of_vt);
    if (!src || !dst) continue;  // irregular; keep the naive plan

    // The collective couples every producer with every consumer; all
    // producers must precede all consumers in the woven order.
    int last_prod = -1, first_cons = INT_MAX;
    for (int v : fam.producer_vts) {
      last_prod = std::max(last_prod, global_pos(g.vt(v).owner_op));
    }
    for (int v : fam.consumer_vts) {
      first_cons = std::min(first_cons, global_pos(g.vt(v).owner_op));
    }
    if (last_prod >= first_cons) continue;

    auto s1 = device_set(src->group);
    auto s2 = device_set(dst->group);
    std::optional<RvdPath> path;
    if (s1 == s2) {
      path = search_intra(*src, *dst, cluster);
    } else {
      bool disjoint = true;
      for (int dev : s2) disjoint &= !s1.count(dev);
      if (!disjoint) continue;
      path = search_inter(*src, *dst, cluster);
    }
    if (!path || path->steps.empty()) continue;

    double naive_cost = naive_family_cost(plan, cluster, fam.naive_ops);
    if (path->cost > naive_cost) continue;

    // Drop the naive chain.
    std::set<std::string> removed(fam.naive_ops.begin(), fam.naive_ops.end());
    for (const auto& oid : fam.naive_ops) {
      const OpNode& op = g.op(oid);
      for (int v : op.inputs) plan.feeds.erase(v);
      g.erase_op(oid);
    }
    plan.global_order.erase(
        std::remove_if(plan.global_order.begin(), plan.global_order.end(),
                       [&](const std::string& id) { return removed.count(id); }),
        plan.global_order.end());

    // Lower the step sequence; each device's held piece starts at the
    // producer output and advances step by step.
    std::map<int, int> held;  // device -> vtensor
    for (int slot = 0; slot < src->slots(); ++slot) {
      held[src->group[slot]] = src->slot_vts[slot];
    }

    // Anchor: the family's last producer in the woven order (positions may
    // have shifted after removing the naive chain).
    Weaver weave{plan.global_order};
    std::string anchor;
    {
      int best = -1;
      for (int v : fam.producer_vts) {
        int pos = weave.position(g.vt(v).owner_op);
        if (pos > best) {
          best = pos;
          anchor = g.vt(v).owner_op;
        }
      }
    }

    int step_no = 0;
    for (const auto& step : path->steps) {
      const RvdDescriptor& next = step.result;
      std::map<int, int> next_held;
      std::map<int, Mask> next_mask;
      for (int slot = 0; slot < next.slots(); ++slot) {
        Mask m;
        m.region = next.slot_region(slot);
        int ri, vi;
        std::vector<int> coords;
        next.slot_coords(slot, ri, vi, coords);
        m.value_index = vi;
        m.value_count = next.v;
        next_mask[next.group[slot]] = m;
      }

      if (step.primitive == CommPrimitive::local_split) {
        for (const auto& [dev, mask] : next_mask) {
          OpNode sp;
          sp.id = "$rvd" + std::to_string(pt_id) + "." +
                  std::to_string(step_no) + ".ls." + std::to_string(dev);
          sp.kind = OpKind::split;
          sp.inserted = true;
          int in_vt = mg_add_input(g, plan, pt_id, held.at(dev), sp.id);
          int out_vt = g.add_vtensor(pt_id, mask,
                                     TensorSide::producer_output, sp.id);
          sp.inputs = {in_vt};
          sp.outputs = {out_vt};
          g.assignment[sp.id] = dev;
          g.add_op(sp);
          weave.insert_after(anchor, sp.id);
          anchor = sp.id;
          next_held[dev] = out_vt;
        }
      } else if (step.primitive == CommPrimitive::relabel) {
        next_held = held;
        for (const auto& mv : step.moves) {
          int channel = g.next_channel++;
          const Mask piece_mask = g.vt(held.at(mv[0])).mask;
          OpNode snd;
          snd.id = "$rvdmv" + std::to_string(channel) + "s";
          snd.kind = OpKind::send;
          snd.inserted = true;
          snd.channel = channel;
          int snd_in = mg_add_input(g, plan, pt_id, held.at(mv[0]), snd.id);
          snd.inputs = {snd_in};
          g.assignment[snd.id] = mv[0];
          g.add_op(snd);
          weave.insert_after(anchor, snd.id);
          anchor = snd.id;

          OpNode rcv;
          rcv.id = "$rvdmv" + std::to_string(channel) + "r";
          rcv.kind = OpKind::recv;
          rcv.inserted = true;
          rcv.channel = channel;
          int rcv_out = g.add_vtensor(pt_id, piece_mask,
                                      TensorSide::producer_output, rcv.id);
          rcv.outputs = {rcv_out};
          g.assignment[rcv.id] = mv[1];
          g.add_op(rcv);
          weave.insert_after(anchor, rcv.id);
          anchor = rcv.id;
          next_held[mv[1]] = rcv_out;
        }
      } else {
        // Communicating collective: one group per subgroup instance.
        for (const auto& subgroup : step.subgroups) {
          CollectiveGroup grp;
          grp.id = g.next_coll_group++;
          grp.primitive = to_string(step.primitive);
          grp.k = step.k;
          grp.message_bytes = step.message_bytes;
          grp.inter_group = step.inter_group;
          std::set<int> devs(subgroup.begin(), subgroup.end());
          for (int dev : devs) {
            OpNode cop;
            cop.id = "$rvd" + std::to_string(pt_id) + "." +
                     std::to_string(step_no) + "." + std::to_string(grp.id) +
                     "." + std::to_string(dev);
            cop.kind = OpKind::collective;
            cop.inserted = true;
            cop.coll_group = grp.id;
            cop.comm_primitive = grp.primitive;
            if (held.count(dev)) {
              int in_vt = mg_add_input(g, plan, pt_id, held.at(dev), cop.id);
              cop.inputs = {in_vt};
            }
            if (next_mask.count(dev)) {
              int out_vt = g.add_vtensor(pt_id, next_mask.at(dev),
                                         TensorSide::producer_output, cop.id);
              cop.outputs = {out_vt};
              next_held[dev] = out_vt;
            }
            g.assignment[cop.id] = dev;
            grp.ops.push_back(cop.id);
            g.add_op(cop);
            weave.insert_after(anchor, cop.id);
            anchor = cop.id;
          }
          plan.coll_groups[grp.id] = grp;
        }
      }
      held = next_held;
      ++step_no;
    }

    // Feed every consumer from its device's final piece.
    for (int slot = 0; slot < dst->slots(); ++slot) {
      int dev = dst->group[slot];
      int cvt = dst->slot_vts[slot];
      auto it = held.find(dev);
      if (it == held.end()) {
        throw InternalError("pattern match: no final piece on device " +
                            std::to_string(dev));
      }
      plan.feeds[cvt] = it->second;
    }
    ++replaced;
    plan.diagnostics.push_back(
        "collective plan for tensor " + std::to_string(pt_id) + ": " +
        std::to_string(path->steps.size()) + " steps, cost " +
        std::to_string(path->cost) + " vs naive " +
        std::to_string(naive_cost));
  }
  return replaced;
}

}  // namespace planc
