// SPDX-License-Identifier: Apache-2.0

#include "planc/transform.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace planc {

Mask compose_mask(const Mask& current, const PartitionSpec& spec) {
  if (spec.count < 1 || spec.index < 0 || spec.index >= spec.count) {
    throw UsageError("partition spec index/count out of range");
  }
  Mask m = current;
  switch (spec.kind) {
    case PartitionKind::dim_slice: {
      if (spec.dim < 0 ||
          spec.dim >= static_cast<int>(current.region.size())) {
        throw UsageError("dim slice dimension out of range");
      }
      const Interval& iv = current.region[spec.dim];
      std::int64_t len = iv.length();
      if (len % spec.count != 0) {
        throw UsageError("non-divisible interval length " +
                         std::to_string(len) + " by " +
                         std::to_string(spec.count));
      }
      std::int64_t w = len / spec.count;
      m.region[spec.dim] = {iv.lo + spec.index * w,
                            iv.lo + (spec.index + 1) * w};
      break;
    }
    case PartitionKind::value_slice:
      m.value_index = current.value_index * spec.count + spec.index;
      m.value_count = current.value_count * spec.count;
      break;
    case PartitionKind::replica:
      m.replica_index = current.replica_index * spec.count + spec.index;
      m.replica_count = current.replica_count * spec.count;
      break;
  }
  return m;
}

namespace {

struct MatmulDims {
  int a_m, a_k, b_k, b_n;
};

MatmulDims matmul_dims(const OpNode& op) {
  MatmulDims d;
  d.a_m = op.attrs.transpose_a ? 1 : 0;
  d.a_k = op.attrs.transpose_a ? 0 : 1;
  d.b_k = op.attrs.transpose_b ? 1 : 0;
  d.b_n = op.attrs.transpose_b ? 0 : 1;
  return d;
}

// Links derived from the annotation: output dim -> (operand, dim) list.
std::map<int, std::vector<std::array<int, 2>>> co_partition_links(
    const DimAnnotation& a) {
  std::map<int, std::vector<std::array<int, 2>>> links;
  std::set<std::pair<int, int>> seen_out_operand;
  for (const auto& t : a.co_partition) {
    if (!seen_out_operand.insert({t[0], t[1]}).second) {
      throw UsageError(
          "contradictory annotation: output dim co-partitioned with two dims "
          "of one operand");
    }
    links[t[0]].push_back({t[1], t[2]});
  }
  return links;
}

std::vector<std::vector<std::array<int, 2>>> reduction_groups(
    const DimAnnotation& a) {
  auto groups = a.reduce_groups;
  std::set<std::pair<int, int>> grouped;
  for (const auto& g : groups) {
    for (const auto& m : g) grouped.insert({m[0], m[1]});
  }
  // Reduce dims not in any declared group become singleton groups.
  for (int opnd = 0; opnd < static_cast<int>(a.operands.size()); ++opnd) {
    for (int d = 0; d < static_cast<int>(a.operands[opnd].size()); ++d) {
      if (a.operands[opnd][d] == DimClass::reduce &&
          !grouped.count({opnd, d})) {
        groups.push_back({{opnd, d}});
      }
    }
  }
  return groups;
}

bool divisible(std::int64_t len, int n) { return n >= 1 && len % n == 0; }

// Spatial split of the first output's dim `out_dim`, n ways.
bool split_applicable(const PlanGraph& g, const OpNode& op, int out_dim,
                      int n) {
  if (op.is_reserved_kind()) return false;
  if (op.outputs.empty()) return false;
  const VTensor& out = g.vt(op.outputs[0]);
  const Region& reg = out.mask.region;
  if (out_dim < 0 || out_dim >= static_cast<int>(reg.size())) return false;
  if (!divisible(reg[out_dim].length(), n)) return false;

  if (op.dim_annotation) {
    auto links = co_partition_links(*op.dim_annotation);
    auto it = links.find(out_dim);
    if (it == links.end()) return false;
    for (const auto& [opnd, d] : it->second) {
      if (opnd < 0 || opnd >= static_cast<int>(op.inputs.size())) return false;
      const auto& classes = op.dim_annotation->operands[opnd];
      if (d < 0 || d >= static_cast<int>(classes.size())) return false;
      if (classes[d] != DimClass::spatial) return false;
      if (!divisible(g.vt(op.inputs[opnd]).mask.region[d].length(), n)) {
        return false;
      }
    }
    return true;
  }

  switch (op.kind) {
    case OpKind::matmul: {
      if (out_dim != 0 && out_dim != 1) return false;
      auto d = matmul_dims(op);
      int in_dim = out_dim == 0 ? d.a_m : d.b_n;
      int opnd = out_dim == 0 ? 0 : 1;
      return divisible(g.vt(op.inputs[opnd]).mask.region[in_dim].length(), n);
    }
    case OpKind::elementwise:
    case OpKind::identity:
      for (int in : op.inputs) {
        if (!divisible(g.vt(in).mask.region[out_dim].length(), n)) {
          return false;
        }
      }
      return true;
    case OpKind::reduce_op: {
      int axis = op.attrs.axis.value_or(-1);
      int in_dim = out_dim < axis ? out_dim : out_dim + 1;
      const Region& in_reg = g.vt(op.inputs[0]).mask.region;
      if (in_dim >= static_cast<int>(in_reg.size())) return false;
      return divisible(in_reg[in_dim].length(), n);
    }
    case OpKind::embedding_lookup: {
      int opnd = out_dim == 0 ? 0 : 1;
      int in_dim = out_dim == 0 ? 0 : 1;
      return divisible(
          g.vt(op.inputs[opnd]).mask.region[in_dim].length(), n);
    }
    case OpKind::embedding_grad: {
      // Output is the table gradient [v, h]; a vocab split touches no input.
      if (out_dim == 1 &&
          !divisible(g.vt(op.inputs[1]).mask.region[1].length(), n)) {
        return false;
      }
      return out_dim == 0 || out_dim == 1;
    }
    default:
      return false;
  }
}

OperandSpecs split_specs(const PlanGraph& g, const OpNode& op, int out_dim,
                         int n, int i) {
  (void)g;
  OperandSpecs s;
  s.inputs.assign(op.inputs.size(), PartitionSpec::replica(i, n));
  s.outputs.assign(op.outputs.size(), PartitionSpec::dim_slice(out_dim, i, n));

  if (op.dim_annotation) {
    auto links = co_partition_links(*op.dim_annotation);
    for (const auto& [opnd, d] : links.at(out_dim)) {
      s.inputs[opnd] = PartitionSpec::dim_slice(d, i, n);
    }
    return s;
  }
  switch (op.kind) {
    case OpKind::matmul: {
      auto d = matmul_dims(op);
      if (out_dim == 0) {
        s.inputs[0] = PartitionSpec::dim_slice(d.a_m, i, n);
      } else {
        s.inputs[1] = PartitionSpec::dim_slice(d.b_n, i, n);
      }
      break;
    }
    case OpKind::elementwise:
    case OpKind::identity:
      for (auto& in : s.inputs) {
        in = PartitionSpec::dim_slice(out_dim, i, n);
      }
      break;
    case OpKind::reduce_op: {
      int axis = op.attrs.axis.value_or(0);
      int in_dim = out_dim < axis ? out_dim : out_dim + 1;
      s.inputs[0] = PartitionSpec::dim_slice(in_dim, i, n);
      break;
    }
    case OpKind::embedding_lookup:
      if (out_dim == 0) {
        s.inputs[0] = PartitionSpec::dim_slice(0, i, n);
      } else {
        s.inputs[1] = PartitionSpec::dim_slice(1, i, n);
      }
      break;
    case OpKind::embedding_grad:
      if (out_dim == 1) {
        s.inputs[1] = PartitionSpec::dim_slice(1, i, n);
      }
      break;
    default:
      throw InternalError("split_specs: unsupported kind");
  }
  return s;
}

// Value split follows one reduction group: the group's input dims slice
// together and every output becomes a partial-value summand.
bool value_split_applicable(const PlanGraph& g, const OpNode& op, int n) {
  if (op.is_reserved_kind() || op.outputs.empty()) return false;
  if (op.dim_annotation) {
    auto groups = reduction_groups(*op.dim_annotation);
    if (groups.empty()) return false;
    for (const auto& [opnd, d] : groups[0]) {
      if (opnd < 0 || opnd >= static_cast<int>(op.inputs.size())) return false;
      if (!divisible(g.vt(op.inputs[opnd]).mask.region[d].length(), n)) {
        return false;
      }
    }
    return true;
  }
  switch (op.kind) {
    case OpKind::matmul: {
      auto d = matmul_dims(op);
      return divisible(g.vt(op.inputs[0]).mask.region[d.a_k].length(), n) &&
             divisible(g.vt(op.inputs[1]).mask.region[d.b_k].length(), n);
    }
    case OpKind::reduce_op: {
      int axis = op.attrs.axis.value_or(-1);
      if (axis < 0) return false;
      return divisible(g.vt(op.inputs[0]).mask.region[axis].length(), n);
    }
    case OpKind::embedding_lookup:
      return divisible(g.vt(op.inputs[1]).mask.region[0].length(), n);
    case OpKind::embedding_grad:
      return divisible(g.vt(op.inputs[0]).mask.region[0].length(), n);
    default:
      return false;
  }
}

OperandSpecs value_split_specs(const PlanGraph& g, const OpNode& op, int n,
                               int i) {
  (void)g;
  OperandSpecs s;
  s.inputs.assign(op.inputs.size(), PartitionSpec::replica(i, n));
  s.outputs.assign(op.outputs.size(), PartitionSpec::value_slice(i, n));
  if (op.dim_annotation) {
    auto groups = reduction_groups(*op.dim_annotation);
    for (const auto& [opnd, d] : groups[0]) {
      s.inputs[opnd] = PartitionSpec::dim_slice(d, i, n);
    }
    return s;
  }
  switch (op.kind) {
    case OpKind::matmul: {
      auto d = matmul_dims(op);
      s.inputs[0] = PartitionSpec::dim_slice(d.a_k, i, n);
      s.inputs[1] = PartitionSpec::dim_slice(d.b_k, i, n);
      break;
    }
    case OpKind::reduce_op:
      s.inputs[0] = PartitionSpec::dim_slice(op.attrs.axis.value_or(0), i, n);
      break;
    case OpKind::embedding_lookup:
      s.inputs[1] = PartitionSpec::dim_slice(0, i, n);  // vocab shard
      break;
    case OpKind::embedding_grad:
      s.inputs[0] = PartitionSpec::dim_slice(0, i, n);  // index batch
      s.inputs[1] = PartitionSpec::dim_slice(0, i, n);
      break;
    default:
      throw InternalError("value_split_specs: unsupported kind");
  }
  return s;
}

}  // namespace

TransformAlgo split_algo(int out_dim, int n) {
  TransformAlgo a;
  a.name = "split(d" + std::to_string(out_dim) + ",x" + std::to_string(n) + ")";
  a.count = n;
  a.applicable = [out_dim, n](const PlanGraph& g, const OpNode& op) {
    return split_applicable(g, op, out_dim, n);
  };
  a.specs = [out_dim, n](const PlanGraph& g, const OpNode& op, int i) {
    return split_specs(g, op, out_dim, n, i);
  };
  return a;
}

TransformAlgo value_split_algo(int n) {
  TransformAlgo a;
  a.name = "value-split(x" + std::to_string(n) + ")";
  a.count = n;
  a.applicable = [n](const PlanGraph& g, const OpNode& op) {
    return value_split_applicable(g, op, n);
  };
  a.specs = [n](const PlanGraph& g, const OpNode& op, int i) {
    return value_split_specs(g, op, n, i);
  };
  return a;
}

TransformAlgo replica_algo(int n) {
  TransformAlgo a;
  a.name = "replica(x" + std::to_string(n) + ")";
  a.count = n;
  a.applicable = [](const PlanGraph&, const OpNode& op) {
    return !op.is_reserved_kind();
  };
  a.specs = [n](const PlanGraph&, const OpNode& op, int i) {
    OperandSpecs s;
    s.inputs.assign(op.inputs.size(), PartitionSpec::replica(i, n));
    s.outputs.assign(op.outputs.size(), PartitionSpec::replica(i, n));
    return s;
  };
  return a;
}

TransformAlgo shard_embed_algo(int n) {
  TransformAlgo a = value_split_algo(n);
  a.name = "shard-embed(x" + std::to_string(n) + ")";
  auto base = a.applicable;
  a.applicable = [base](const PlanGraph& g, const OpNode& op) {
    return (op.kind == OpKind::embedding_lookup ||
            op.kind == OpKind::embedding_grad) &&
           base(g, op);
  };
  return a;
}

std::vector<std::string> op_trans(PlanGraph& g, const std::string& op_id,
                                  const TransformAlgo& algo) {
  OpNode original = g.op(op_id);  // copy; the node is about to be erased
  if (original.is_reserved_kind()) {
    throw UsageError("op_trans: " + op_id + " is a materialization-phase op");
  }
  if (!algo.applicable(g, original)) {
    throw UsageError("op_trans: algo " + algo.name + " not applicable to " +
                     op_id);
  }

  auto assigned = g.assignment.find(op_id);
  std::optional<int> keep_device;
  if (assigned != g.assignment.end()) {
    if (algo.count > 1) {
      g.warn("op_trans: assignment of " + op_id +
             " cleared by fan-out transform " + algo.name);
    } else {
      keep_device = assigned->second;
    }
  }

  // Precompute specs and whether the transform actually partitions data.
  std::vector<OperandSpecs> all_specs;
  bool real_split = false;
  for (int i = 0; i < algo.count; ++i) {
    OperandSpecs s = algo.specs(g, original, i);
    if (s.inputs.size() != original.inputs.size() ||
        s.outputs.size() != original.outputs.size()) {
      throw InternalError("op_trans: operand spec arity mismatch");
    }
    for (const auto& sp : s.inputs) {
      real_split |= sp.kind != PartitionKind::replica;
    }
    for (const auto& sp : s.outputs) {
      real_split |= sp.kind != PartitionKind::replica;
    }
    all_specs.push_back(std::move(s));
  }

  // Snapshot the original views before they are erased with the op.
  std::vector<VTensor> old_inputs, old_outputs;
  for (int v : original.inputs) old_inputs.push_back(g.vt(v));
  for (int v : original.outputs) old_outputs.push_back(g.vt(v));

  // Re-attach happen-before edges to every replacement.
  std::vector<HappenBefore> edges;
  for (const auto& hb : g.happen_before) {
    if (hb.before == op_id || hb.after == op_id) {
      for (int i = 0; i < algo.count; ++i) {
        std::string rep = op_id + "/" + std::to_string(i);
        edges.push_back({hb.before == op_id ? rep : hb.before,
                         hb.after == op_id ? rep : hb.after});
      }
    } else {
      edges.push_back(hb);
    }
  }
  g.happen_before = std::move(edges);

  g.erase_op(op_id);

  std::vector<std::string> new_ids;
  for (int i = 0; i < algo.count; ++i) {
    OpNode rep = original;
    rep.id = op_id + "/" + std::to_string(i);
    rep.inputs.clear();
    rep.outputs.clear();
    rep.flops = real_split ? original.flops / algo.count : original.flops;
    for (std::size_t j = 0; j < old_inputs.size(); ++j) {
      Mask m = compose_mask(old_inputs[j].mask, all_specs[i].inputs[j]);
      rep.inputs.push_back(g.add_vtensor(old_inputs[j].ptensor, std::move(m),
                                         TensorSide::consumer_input, rep.id));
    }
    for (std::size_t j = 0; j < old_outputs.size(); ++j) {
      Mask m = compose_mask(old_outputs[j].mask, all_specs[i].outputs[j]);
      rep.outputs.push_back(g.add_vtensor(old_outputs[j].ptensor,
                                          std::move(m),
                                          TensorSide::producer_output,
                                          rep.id));
    }
    if (keep_device) g.assignment[rep.id] = *keep_device;
    new_ids.push_back(rep.id);
    g.add_op(std::move(rep));
  }
  return new_ids;
}

std::vector<TransformAlgo> derive_algos_from_annotation(const OpNode& op,
                                                        int n) {
  if (!op.dim_annotation) {
    throw UsageError("derive_algos: op " + op.id + " has no dim_annotation");
  }
  const DimAnnotation& a = *op.dim_annotation;
  if (a.operands.size() != op.inputs.size()) {
    throw UsageError("derive_algos: annotation operand count mismatch on " +
                     op.id);
  }
  auto links = co_partition_links(a);  // validates contradictions
  std::set<std::pair<int, int>> linked_in_dims;
  for (const auto& [out_dim, list] : links) {
    for (const auto& [opnd, d] : list) {
      if (opnd < 0 || opnd >= static_cast<int>(a.operands.size()) || d < 0 ||
          d >= static_cast<int>(a.operands[opnd].size())) {
        throw UsageError("derive_algos: annotation rank mismatch on " + op.id);
      }
      if (!linked_in_dims.insert({opnd, d}).second) {
        throw UsageError(
            "contradictory annotation: input dim co-partitioned with two "
            "output dims on " + op.id);
      }
    }
  }

  std::vector<TransformAlgo> out;
  for (const auto& [out_dim, list] : links) {
    bool all_spatial = true;
    for (const auto& [opnd, d] : list) {
      all_spatial &= a.operands[opnd][d] == DimClass::spatial;
    }
    if (all_spatial) out.push_back(split_algo(out_dim, n));
  }
  if (!reduction_groups(a).empty()) out.push_back(value_split_algo(n));
  out.push_back(replica_algo(n));
  return out;
}

namespace {

PartitionSpec map_gradient_spec(const PartitionSpec& fwd, bool grad_is_output,
                                bool real_split, int i, int n,
                                const std::string& ctx) {
  switch (fwd.kind) {
    case PartitionKind::dim_slice:
      return PartitionSpec::dim_slice(fwd.dim, i, n);
    case PartitionKind::replica:
      if (grad_is_output && real_split) {
        // Several new operators consume the same view; its gradient becomes
        // a partial-value sum.
        return PartitionSpec::value_slice(i, n);
      }
      return PartitionSpec::replica(i, n);
    case PartitionKind::value_slice:
      if (!grad_is_output) {
        // d(sum)/d(part) is the identity: each summand sees the full
        // incoming gradient.
        return PartitionSpec::replica(i, n);
      }
      throw UsageError("adapt_backward: value-split forward input has no "
                       "gradient mapping (" + ctx + ")");
  }
  throw InternalError("map_gradient_spec");
}

}  // namespace

std::vector<std::string> adapt_backward(PlanGraph& g,
                                        const std::string& forward_op,
                                        const TransformAlgo& algo) {
  const OpNode& fwd = g.op(forward_op);
  std::vector<std::string> backward_ids;
  for (const auto& o : g.ops) {
    if (o.backward_of && *o.backward_of == forward_op) {
      backward_ids.push_back(o.id);
    }
  }
  if (backward_ids.empty()) {
    throw UsageError("adapt_backward: no declared pairing for " + forward_op);
  }
  if (!algo.applicable(g, fwd)) {
    throw UsageError("adapt_backward: algo not applicable to " + forward_op);
  }

  // Forward operand ptensor -> spec index, per replacement.
  struct FwdOperand {
    int ptensor;
    bool is_output;
    std::size_t index;
  };
  std::vector<FwdOperand> fwd_operands;
  for (std::size_t j = 0; j < fwd.inputs.size(); ++j) {
    fwd_operands.push_back({g.vt(fwd.inputs[j]).ptensor, false, j});
  }
  for (std::size_t j = 0; j < fwd.outputs.size(); ++j) {
    fwd_operands.push_back({g.vt(fwd.outputs[j]).ptensor, true, j});
  }
  std::vector<OperandSpecs> fwd_specs;
  bool real_split = false;
  for (int i = 0; i < algo.count; ++i) {
    OperandSpecs s = algo.specs(g, fwd, i);
    for (const auto& sp : s.inputs) {
      real_split |= sp.kind != PartitionKind::replica;
    }
    for (const auto& sp : s.outputs) {
      real_split |= sp.kind != PartitionKind::replica;
    }
    fwd_specs.push_back(std::move(s));
  }
  auto fwd_spec_of = [&](const FwdOperand& fo, int i) {
    return fo.is_output ? fwd_specs[i].outputs[fo.index]
                        : fwd_specs[i].inputs[fo.index];
  };
  auto find_operand = [&](int ptensor) -> const FwdOperand* {
    for (const auto& fo : fwd_operands) {
      if (fo.ptensor == ptensor) return &fo;
    }
    return nullptr;
  };

  int n = algo.count;
  std::vector<std::string> new_ids;
  for (const std::string& bid : backward_ids) {
    const OpNode bwd = g.op(bid);
    // Build the derived rewrite rule for this backward op.
    TransformAlgo derived;
    derived.name = "adapted(" + algo.name + ")";
    derived.count = n;
    derived.applicable = [](const PlanGraph&, const OpNode&) { return true; };

    // Resolve per-operand mapping once, outside the closure.
    struct Resolved {
      bool is_input;
      std::size_t index;
      enum class How { direct, gradient, unrelated } how;
      const FwdOperand* fo;
    };
    std::vector<Resolved> resolution;
    for (std::size_t j = 0; j < bwd.inputs.size(); ++j) {
      int pt_id = g.vt(bwd.inputs[j]).ptensor;
      const PTensor& pt = g.pt(pt_id);
      if (const FwdOperand* fo = find_operand(pt_id)) {
        resolution.push_back({true, j, Resolved::How::direct, fo});
      } else if (pt.grad_of && find_operand(*pt.grad_of)) {
        resolution.push_back(
            {true, j, Resolved::How::gradient, find_operand(*pt.grad_of)});
      } else {
        resolution.push_back({true, j, Resolved::How::unrelated, nullptr});
      }
    }
    for (std::size_t j = 0; j < bwd.outputs.size(); ++j) {
      int pt_id = g.vt(bwd.outputs[j]).ptensor;
      const PTensor& pt = g.pt(pt_id);
      if (const FwdOperand* fo = find_operand(pt_id)) {
        resolution.push_back({false, j, Resolved::How::direct, fo});
      } else if (pt.grad_of && find_operand(*pt.grad_of)) {
        resolution.push_back(
            {false, j, Resolved::How::gradient, find_operand(*pt.grad_of)});
      } else if (!real_split) {
        resolution.push_back({false, j, Resolved::How::unrelated, nullptr});
      } else {
        throw UsageError("adapt_backward: cannot infer partition of output "
                         "tensor " + std::to_string(pt_id) + " of " + bid);
      }
    }

    derived.specs = [resolution, fwd_spec_of, real_split, n, bid](
                        const PlanGraph&, const OpNode& op, int i) {
      OperandSpecs s;
      s.inputs.assign(op.inputs.size(), PartitionSpec::replica(i, n));
      s.outputs.assign(op.outputs.size(), PartitionSpec::replica(i, n));
      for (const auto& r : resolution) {
        PartitionSpec spec = PartitionSpec::replica(i, n);
        switch (r.how) {
          case Resolved::How::direct:
            spec = fwd_spec_of(*r.fo, i);
            break;
          case Resolved::How::gradient:
            spec = map_gradient_spec(fwd_spec_of(*r.fo, i), !r.is_input,
                                     real_split, i, n, bid);
            break;
          case Resolved::How::unrelated:
            break;
        }
        if (r.is_input) {
          s.inputs[r.index] = spec;
        } else {
          s.outputs[r.index] = spec;
        }
      }
      return s;
    };

    auto ids = op_trans(g, bid, derived);
    // Re-pair each backward replacement with the forward replacement it
    // corresponds to, so composed transforms keep finding the pairing.
    for (std::size_t i = 0; i < ids.size(); ++i) {
      g.op(ids[i]).backward_of = forward_op + "/" + std::to_string(i);
    }
    new_ids.insert(new_ids.end(), ids.begin(), ids.end());
  }
  return new_ids;
}

}  // namespace planc
