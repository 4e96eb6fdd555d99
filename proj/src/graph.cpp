// SPDX-License-Identifier: Apache-2.0

#include "planc/graph.hpp"

#include <algorithm>

namespace planc {

const char* to_string(TensorKind k) {
  switch (k) {
    case TensorKind::weight: return "weight";
    case TensorKind::activation: return "activation";
    case TensorKind::gradient: return "gradient";
    case TensorKind::optimizer_state: return "optimizer-state";
  }
  return "?";
}

const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::elementwise: return "elementwise";
    case OpKind::reduce_op: return "reduce-op";
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

const char* to_string(OpDirection d) {
  switch (d) {
    case OpDirection::forward: return "forward";
    case OpDirection::backward: return "backward";
    case OpDirection::optimizer: return "optimizer";
  }
  return "?";
}

std::int64_t region_volume(const Region& r) {
  std::int64_t v = 1;
  for (const auto& iv : r) v *= iv.length();
  return v;
}

bool region_contains(const Region& outer, const Region& inner) {
  if (outer.size() != inner.size()) return false;
  for (std::size_t i = 0; i < outer.size(); ++i) {
    if (inner[i].lo < outer[i].lo || inner[i].hi > outer[i].hi) return false;
  }
  return true;
}

std::optional<Region> region_intersect(const Region& a, const Region& b) {
  if (a.size() != b.size()) {
    throw UsageError("region_intersect: rank mismatch");
  }
  Region out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i].lo = std::max(a[i].lo, b[i].lo);
    out[i].hi = std::min(a[i].hi, b[i].hi);
    if (out[i].lo >= out[i].hi) return std::nullopt;
  }
  return out;
}

std::string region_to_string(const Region& r) {
  std::string s;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (i) s += "x";
    s += "[" + std::to_string(r[i].lo) + "," + std::to_string(r[i].hi) + ")";
  }
  return s;
}

Mask full_mask(const std::vector<std::int64_t>& shape) {
  Mask m;
  m.region.reserve(shape.size());
  for (auto e : shape) m.region.push_back({0, e});
  return m;
}

std::optional<Region> mask_intersect(const Mask& a, const Mask& b) {
  return region_intersect(a.region, b.region);
}

std::int64_t PTensor::volume() const {
  std::int64_t v = 1;
  for (auto e : shape) v *= e;
  return v;
}

bool ClusterSpec::has_device(int id) const {
  for (const auto& d : devices) {
    if (d.id == id) return true;
  }
  return false;
}

const Device& ClusterSpec::device(int id) const {
  for (const auto& d : devices) {
    if (d.id == id) return d;
  }
  throw UsageError("unknown device " + std::to_string(id));
}

std::vector<int> ClusterSpec::group_devices(int group) const {
  std::vector<int> out;
  for (const auto& d : devices) {
    if (d.group == group) out.push_back(d.id);
  }
  return out;
}

ClusterSpec ClusterSpec::uniform(int n, int group_size, std::int64_t memory,
                                 LinkParams intra, LinkParams inter,
                                 double throughput) {
  if (n <= 0 || group_size <= 0) throw UsageError("bad cluster sizes");
  ClusterSpec c;
  for (int i = 0; i < n; ++i) {
    c.devices.push_back({i, i / group_size, memory});
  }
  c.intra_link = intra;
  c.inter_link = inter;
  c.device_throughput = throughput;
  return c;
}

bool PlanGraph::has_op(const std::string& id) const {
  for (const auto& o : ops) {
    if (o.id == id) return true;
  }
  return false;
}

OpNode& PlanGraph::op(const std::string& id) {
  for (auto& o : ops) {
    if (o.id == id) return o;
  }
  throw UsageError("unknown op " + id);
}

const OpNode& PlanGraph::op(const std::string& id) const {
  for (const auto& o : ops) {
    if (o.id == id) return o;
  }
  throw UsageError("unknown op " + id);
}

VTensor& PlanGraph::vt(int id) {
  auto it = vtensors.find(id);
  if (it == vtensors.end()) {
    throw UsageError("unknown vtensor " + std::to_string(id));
  }
  return it->second;
}

const VTensor& PlanGraph::vt(int id) const {
  auto it = vtensors.find(id);
  if (it == vtensors.end()) {
    throw UsageError("unknown vtensor " + std::to_string(id));
  }
  return it->second;
}

const PTensor& PlanGraph::pt(int id) const {
  auto it = ptensors.find(id);
  if (it == ptensors.end()) {
    throw UsageError("unknown ptensor " + std::to_string(id));
  }
  return it->second;
}

int PlanGraph::add_vtensor(int ptensor, Mask mask, TensorSide side,
                           const std::string& owner) {
  const PTensor& p = pt(ptensor);
  if (mask.region.size() != p.shape.size()) {
    throw UsageError("vtensor mask rank mismatch on ptensor " +
                     std::to_string(ptensor));
  }
  for (std::size_t i = 0; i < mask.region.size(); ++i) {
    if (mask.region[i].lo < 0 || mask.region[i].hi > p.shape[i] ||
        mask.region[i].lo >= mask.region[i].hi) {
      throw UsageError("vtensor mask outside ptensor " +
                       std::to_string(ptensor));
    }
  }
  int id = next_vtensor_id++;
  vtensors[id] = VTensor{id, ptensor, std::move(mask), side, owner};
  return id;
}

void PlanGraph::add_op(OpNode op) {
  if (has_op(op.id)) throw UsageError("duplicate op id " + op.id);
  ops.push_back(std::move(op));
}

void PlanGraph::erase_op(const std::string& id) {
  const OpNode& o = op(id);
  for (int v : o.inputs) vtensors.erase(v);
  for (int v : o.outputs) vtensors.erase(v);
  assignment.erase(id);
  ops.erase(std::remove_if(ops.begin(), ops.end(),
                           [&](const OpNode& n) { return n.id == id; }),
            ops.end());
}

std::vector<const OpNode*> PlanGraph::producers_of(int ptensor) const {
  std::vector<const OpNode*> out;
  for (const auto& o : ops) {
    for (int v : o.outputs) {
      if (vt(v).ptensor == ptensor) {
        out.push_back(&o);
        break;
      }
    }
  }
  return out;
}

std::vector<const OpNode*> PlanGraph::consumers_of(int ptensor) const {
  std::vector<const OpNode*> out;
  for (const auto& o : ops) {
    for (int v : o.inputs) {
      if (vt(v).ptensor == ptensor) {
        out.push_back(&o);
        break;
      }
    }
  }
  return out;
}

bool PlanGraph::is_graph_input(int ptensor) const {
  for (const auto& o : ops) {
    for (int v : o.outputs) {
      if (vt(v).ptensor == ptensor) return false;
    }
  }
  return true;
}

void PlanGraph::warn(const std::string& msg) {
  warnings.push_back(msg);
  log_info("warning: " + msg);
}

std::optional<Region> mask_intersect_checked(const PlanGraph& g, int vt_a,
                                             int vt_b) {
  const VTensor& a = g.vt(vt_a);
  const VTensor& b = g.vt(vt_b);
  if (a.ptensor != b.ptensor) {
    throw UsageError("mask_intersect: views link to different ptensors");
  }
  return mask_intersect(a.mask, b.mask);
}

}  // namespace planc
