// SPDX-License-Identifier: Apache-2.0

#include "planc/refexec.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace planc {

ConcreteTensor ConcreteTensor::zeros(std::vector<std::int64_t> shape) {
  ConcreteTensor t;
  std::int64_t vol = 1;
  for (auto e : shape) vol *= e;
  t.shape = std::move(shape);
  t.data.assign(static_cast<std::size_t>(vol), 0.0);
  return t;
}

std::int64_t ConcreteTensor::volume() const {
  std::int64_t v = 1;
  for (auto e : shape) v *= e;
  return v;
}

namespace {

std::int64_t flat_index(const std::vector<std::int64_t>& shape,
                        const std::vector<std::int64_t>& idx) {
  std::int64_t f = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    f = f * shape[i] + idx[i];
  }
  return f;
}

// Odometer over all coordinate tuples of a region (global coordinates).
template <typename Fn>
void for_each_coord(const Region& region, Fn&& fn) {
  if (region.empty()) return;
  for (const auto& iv : region) {
    if (iv.length() <= 0) return;
  }
  std::vector<std::int64_t> idx(region.size());
  for (std::size_t i = 0; i < region.size(); ++i) idx[i] = region[i].lo;
  while (true) {
    fn(idx);
    std::size_t d = region.size();
    while (true) {
      --d;
      if (++idx[d] < region[d].hi) break;
      idx[d] = region[d].lo;
      if (d == 0) return;
    }
  }
}

std::vector<std::int64_t> region_shape(const Region& r) {
  std::vector<std::int64_t> s;
  for (const auto& iv : r) s.push_back(iv.length());
  return s;
}

}  // namespace

double ConcreteTensor::at(const std::vector<std::int64_t>& idx) const {
  return data[static_cast<std::size_t>(flat_index(shape, idx))];
}

double& ConcreteTensor::at(const std::vector<std::int64_t>& idx) {
  return data[static_cast<std::size_t>(flat_index(shape, idx))];
}

ConcreteTensor ConcreteTensor::extract(const Region& region) const {
  ConcreteTensor out = zeros(region_shape(region));
  std::vector<std::int64_t> local(region.size());
  for_each_coord(region, [&](const std::vector<std::int64_t>& idx) {
    for (std::size_t i = 0; i < idx.size(); ++i) local[i] = idx[i] - region[i].lo;
    out.at(local) = at(idx);
  });
  return out;
}

void ConcreteTensor::insert(const Region& region, const ConcreteTensor& piece) {
  std::vector<std::int64_t> local(region.size());
  for_each_coord(region, [&](const std::vector<std::int64_t>& idx) {
    for (std::size_t i = 0; i < idx.size(); ++i) local[i] = idx[i] - region[i].lo;
    at(idx) = piece.at(local);
  });
}

namespace {

struct Piece {
  const Mask* mask;
  const ConcreteTensor* value;
};

// Reconstructs the target mask's contents from available pieces of the same
// pTensor: full-value overlaps are copied, partial-value summands added.
ConcreteTensor reconstruct(const Mask& target,
                           const std::vector<Piece>& pieces,
                           const std::string& ctx) {
  ConcreteTensor out = ConcreteTensor::zeros(region_shape(target.region));
  std::int64_t touched = 0;
  std::vector<std::int64_t> local(target.region.size()), plocal;
  for (const Piece& p : pieces) {
    bool copy;
    if (p.mask->value_count == target.value_count &&
        p.mask->value_index == target.value_index) {
      copy = true;
    } else if (target.value_count == 1 && p.mask->value_count > 1) {
      copy = false;  // summand
    } else {
      continue;
    }
    auto overlap = region_intersect(p.mask->region, target.region);
    if (!overlap) continue;
    plocal.assign(overlap->size(), 0);
    for_each_coord(*overlap, [&](const std::vector<std::int64_t>& idx) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        local[i] = idx[i] - target.region[i].lo;
        plocal[i] = idx[i] - p.mask->region[i].lo;
      }
      if (copy) {
        out.at(local) = p.value->at(plocal);
      } else {
        out.at(local) += p.value->at(plocal);
      }
    });
    touched += region_volume(*overlap);
  }
  if (touched < region_volume(target.region)) {
    throw InternalError("reconstruct: region " +
                        region_to_string(target.region) +
                        " not fully covered (" + ctx + ")");
  }
  return out;
}

ConcreteTensor matmul_eval(const OpNode& op, const ConcreteTensor& a,
                           const ConcreteTensor& b) {
  auto dim = [&](const ConcreteTensor& t, bool transposed, int which) {
    // which 0 = rows of the logical operand, 1 = cols
    return transposed ? t.shape[1 - which] : t.shape[which];
  };
  std::int64_t m = dim(a, op.attrs.transpose_a, 0);
  std::int64_t k = dim(a, op.attrs.transpose_a, 1);
  std::int64_t k2 = dim(b, op.attrs.transpose_b, 0);
  std::int64_t n = dim(b, op.attrs.transpose_b, 1);
  if (k != k2) {
    throw InternalError("matmul operand inner extents differ in " + op.id);
  }
  ConcreteTensor c = ConcreteTensor::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::int64_t x = 0; x < k; ++x) {
        double av = op.attrs.transpose_a ? a.at({x, i}) : a.at({i, x});
        double bv = op.attrs.transpose_b ? b.at({j, x}) : b.at({x, j});
        acc += av * bv;
      }
      c.at({i, j}) = acc;
    }
  }
  return c;
}

// Executes one compute op on its input pieces. Masks supply the offsets
// partitioned embedding variants need.
std::vector<ConcreteTensor> eval_compute(
    const OpNode& op, const std::vector<ConcreteTensor>& in,
    const std::vector<Mask>& in_masks, const std::vector<Mask>& out_masks) {
  switch (op.kind) {
    case OpKind::matmul:
      return {matmul_eval(op, in.at(0), in.at(1))};
    case OpKind::elementwise: {
      ConcreteTensor out = in.at(0);
      for (std::size_t i = 1; i < in.size(); ++i) {
        if (in[i].shape != out.shape) {
          throw InternalError("elementwise shape mismatch in " + op.id);
        }
        for (std::size_t j = 0; j < out.data.size(); ++j) {
          switch (op.ew) {
            case EwFn::add: out.data[j] += in[i].data[j]; break;
            case EwFn::mul: out.data[j] *= in[i].data[j]; break;
            case EwFn::max: out.data[j] = std::max(out.data[j], in[i].data[j]); break;
          }
        }
      }
      return {out};
    }
    case OpKind::reduce_op: {
      int axis = op.attrs.axis.value_or(0);
      const ConcreteTensor& a = in.at(0);
      std::vector<std::int64_t> out_shape;
      for (int i = 0; i < static_cast<int>(a.shape.size()); ++i) {
        if (i != axis) out_shape.push_back(a.shape[i]);
      }
      if (out_shape.empty()) out_shape.push_back(1);
      ConcreteTensor out = ConcreteTensor::zeros(out_shape);
      Region full;
      for (auto e : a.shape) full.push_back({0, e});
      std::vector<std::int64_t> oidx;
      for_each_coord(full, [&](const std::vector<std::int64_t>& idx) {
        oidx.clear();
        for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
          if (i != axis) oidx.push_back(idx[i]);
        }
        if (oidx.empty()) oidx.push_back(0);
        out.at(oidx) += a.at(idx);
      });
      return {out};
    }
    case OpKind::embedding_lookup: {
      const ConcreteTensor& idx = in.at(0);
      const ConcreteTensor& table = in.at(1);
      std::int64_t vocab_lo = in_masks.at(1).region[0].lo;
      std::int64_t rows = table.shape[0];
      std::int64_t h = table.shape[1];
      ConcreteTensor out = ConcreteTensor::zeros({idx.shape[0], h});
      for (std::int64_t j = 0; j < idx.shape[0]; ++j) {
        auto id = static_cast<std::int64_t>(idx.at({j}));
        if (id >= vocab_lo && id < vocab_lo + rows) {
          for (std::int64_t c = 0; c < h; ++c) {
            out.at({j, c}) = table.at({id - vocab_lo, c});
          }
        }
      }
      return {out};
    }
    case OpKind::embedding_grad: {
      const ConcreteTensor& idx = in.at(0);
      const ConcreteTensor& gout = in.at(1);
      const Region& out_region = out_masks.at(0).region;
      std::int64_t vocab_lo = out_region[0].lo;
      std::int64_t rows = out_region[0].length();
      std::int64_t h = gout.shape[1];
      ConcreteTensor out = ConcreteTensor::zeros({rows, h});
      for (std::int64_t j = 0; j < idx.shape[0]; ++j) {
        auto id = static_cast<std::int64_t>(idx.at({j}));
        if (id >= vocab_lo && id < vocab_lo + rows) {
          for (std::int64_t c = 0; c < h; ++c) {
            out.at({id - vocab_lo, c}) += gout.at({j, c});
          }
        }
      }
      return {out};
    }
    case OpKind::identity:
      return {in.at(0)};
    default:
      throw UsageError("refexec: unsupported op kind " +
                       std::string(to_string(op.kind)) + " (" + op.id + ")");
  }
}

}  // namespace

// Piece-aware sequential execution: works on the original graph (full
// masks) and on transformed graphs, where an op's input is reconstructed
// from the producers' pieces by mask algebra.
TensorMap run_reference(const PlanGraph& g, const TensorMap& inputs) {
  for (const auto& [id, pt] : g.ptensors) {
    if (g.is_graph_input(id) && !inputs.count(id)) {
      throw UsageError("run_reference: missing input tensor " +
                       std::to_string(id));
    }
  }
  std::map<int, ConcreteTensor> piece_values;  // producer vt -> piece
  std::map<int, std::vector<int>> producer_vts;
  std::map<int, std::set<std::string>> producer_ops;
  for (const auto& op : g.ops) {
    for (int v : op.outputs) {
      producer_vts[g.vt(v).ptensor].push_back(v);
      producer_ops[g.vt(v).ptensor].insert(op.id);
    }
  }

  std::set<std::string> done;
  auto pt_ready = [&](int pt_id) {
    if (g.is_graph_input(pt_id)) return true;
    for (const auto& oid : producer_ops.at(pt_id)) {
      if (!done.count(oid)) return false;
    }
    return true;
  };
  auto input_piece = [&](const VTensor& vt) {
    if (g.is_graph_input(vt.ptensor)) {
      if (vt.mask.value_count != 1) {
        throw UsageError("run_reference: graph input consumed as partial "
                         "value");
      }
      return inputs.at(vt.ptensor).extract(vt.mask.region);
    }
    std::vector<Piece> pieces;
    for (int v : producer_vts.at(vt.ptensor)) {
      pieces.push_back({&g.vt(v).mask, &piece_values.at(v)});
    }
    return reconstruct(vt.mask, pieces, "input of " + vt.owner_op);
  };

  bool progress = true;
  while (progress) {
    progress = false;
    for (const auto& op : g.ops) {
      if (done.count(op.id)) continue;
      bool ready = true;
      for (int v : op.inputs) ready &= pt_ready(g.vt(v).ptensor);
      if (!ready) continue;

      std::vector<ConcreteTensor> in;
      std::vector<Mask> in_masks, out_masks;
      for (int v : op.inputs) {
        in.push_back(input_piece(g.vt(v)));
        in_masks.push_back(g.vt(v).mask);
      }
      for (int v : op.outputs) out_masks.push_back(g.vt(v).mask);
      auto out = eval_compute(op, in, in_masks, out_masks);
      for (std::size_t i = 0; i < op.outputs.size(); ++i) {
        piece_values[op.outputs[i]] = out[i];
      }
      done.insert(op.id);
      progress = true;
    }
  }
  if (done.size() != g.ops.size()) {
    throw UsageError("run_reference: graph has unsatisfiable dependencies");
  }

  // Assemble every produced ptensor, deduplicating replicas.
  TensorMap outputs;
  for (const auto& [pt_id, vts] : producer_vts) {
    std::set<std::string> seen;
    std::vector<Piece> pieces;
    for (int v : vts) {
      const Mask& m = g.vt(v).mask;
      std::string key = region_to_string(m.region) + "#" +
                        std::to_string(m.value_index) + "/" +
                        std::to_string(m.value_count);
      if (!seen.insert(key).second) continue;
      pieces.push_back({&m, &piece_values.at(v)});
    }
    Mask full = full_mask(g.pt(pt_id).shape);
    outputs[pt_id] =
        reconstruct(full, pieces, "output " + std::to_string(pt_id));
  }
  return outputs;
}

namespace {

struct PlanExecState {
  std::map<int, ConcreteTensor> vt_values;
  std::map<int, ConcreteTensor> channel_values;  // channel -> piece
};

}  // namespace

TensorMap run_plan(const ExecutionPlan& plan, const TensorMap& inputs) {
  const PlanGraph& g = plan.graph;
  PlanExecState st;

  // Graph-input views are satisfied by initial placement.
  auto input_value = [&](const VTensor& vt) {
    auto it = inputs.find(vt.ptensor);
    if (it == inputs.end()) {
      throw UsageError("run_plan: missing input tensor " +
                       std::to_string(vt.ptensor));
    }
    if (vt.mask.value_count != 1) {
      throw UsageError("run_plan: graph input consumed as partial value");
    }
    return it->second.extract(vt.mask.region);
  };

  auto feed_ready = [&](int consumer_vt) {
    const VTensor& vt = g.vt(consumer_vt);
    if (g.is_graph_input(vt.ptensor)) return true;
    auto feed = plan.feeds.find(consumer_vt);
    if (feed == plan.feeds.end()) {
      throw InternalError("run_plan: consumer view " +
                          std::to_string(consumer_vt) + " of op " +
                          vt.owner_op + " has no feed");
    }
    return st.vt_values.count(feed->second) > 0;
  };
  auto feed_value = [&](int consumer_vt) -> ConcreteTensor {
    const VTensor& vt = g.vt(consumer_vt);
    auto feed = plan.feeds.find(consumer_vt);
    if (feed != plan.feeds.end()) return st.vt_values.at(feed->second);
    return input_value(vt);
  };

  // Collective groups: device cursor positions required before execution.
  std::map<int, std::set<std::string>> members;
  for (const auto& [id, grp] : plan.coll_groups) {
    members[id] = std::set<std::string>(grp.ops.begin(), grp.ops.end());
  }

  std::vector<std::size_t> cursor(plan.lanes.size(), 0);
  std::map<std::string, std::pair<std::size_t, std::size_t>> op_pos;
  for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
    for (std::size_t t = 0; t < plan.lanes[l].tasks.size(); ++t) {
      op_pos[plan.lanes[l].tasks[t].op] = {l, t};
    }
  }
  auto arrived = [&](const std::string& op_id) {
    auto [l, t] = op_pos.at(op_id);
    return cursor[l] == t;
  };

  auto exec_op = [&](const OpNode& op) {
    switch (op.kind) {
      case OpKind::free_buffer:
        return;  // memory bookkeeping only
      case OpKind::send: {
        st.channel_values[op.channel] = feed_value(op.inputs.at(0));
        return;
      }
      case OpKind::recv: {
        st.vt_values[op.outputs.at(0)] = st.channel_values.at(op.channel);
        return;
      }
      case OpKind::split:
      case OpKind::concat:
      case OpKind::reduce_assemble: {
        std::vector<ConcreteTensor> vals;
        std::vector<Piece> pieces;
        vals.reserve(op.inputs.size());
        for (int v : op.inputs) vals.push_back(feed_value(v));
        for (std::size_t i = 0; i < op.inputs.size(); ++i) {
          pieces.push_back({&g.vt(op.inputs[i]).mask, &vals[i]});
        }
        for (int out : op.outputs) {
          st.vt_values[out] =
              reconstruct(g.vt(out).mask, pieces, "op " + op.id);
        }
        return;
      }
      default: {
        std::vector<ConcreteTensor> in;
        std::vector<Mask> in_masks, out_masks;
        for (int v : op.inputs) {
          in.push_back(feed_value(v));
          in_masks.push_back(g.vt(v).mask);
        }
        for (int v : op.outputs) out_masks.push_back(g.vt(v).mask);
        auto out = eval_compute(op, in, in_masks, out_masks);
        for (std::size_t i = 0; i < op.outputs.size(); ++i) {
          st.vt_values[op.outputs[i]] = out[i];
        }
        return;
      }
    }
  };

  auto exec_collective = [&](const CollectiveGroup& grp) {
    // All participants' pieces are visible to each member's reconstruction.
    std::vector<ConcreteTensor> vals;
    std::vector<Piece> pieces;
    for (const auto& oid : grp.ops) {
      const OpNode& op = g.op(oid);
      for (int v : op.inputs) vals.push_back(feed_value(v));
    }
    std::size_t k = 0;
    for (const auto& oid : grp.ops) {
      const OpNode& op = g.op(oid);
      for (int v : op.inputs) {
        pieces.push_back({&g.vt(v).mask, &vals[k++]});
      }
    }
    for (const auto& oid : grp.ops) {
      const OpNode& op = g.op(oid);
      for (int out : op.outputs) {
        st.vt_values[out] =
            reconstruct(g.vt(out).mask, pieces, "collective " + oid);
      }
    }
  };

  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
      while (cursor[l] < plan.lanes[l].tasks.size()) {
        const Task& task = plan.lanes[l].tasks[cursor[l]];
        const OpNode& op = g.op(task.op);
        bool ready = true;
        if (op.kind == OpKind::recv) {
          ready = st.channel_values.count(op.channel) > 0;
        } else if (op.kind == OpKind::collective) {
          ready = true;
          for (const auto& mid : members.at(op.coll_group)) {
            ready &= arrived(mid);
          }
          if (ready) {
            for (const auto& mid : members.at(op.coll_group)) {
              for (int v : g.op(mid).inputs) ready &= feed_ready(v);
            }
          }
        } else {
          for (int v : op.inputs) ready &= feed_ready(v);
        }
        if (!ready) break;

        if (op.kind == OpKind::collective) {
          exec_collective(plan.coll_groups.at(op.coll_group));
          // Advance every participant cursor past its collective task.
          for (const auto& mid : members.at(op.coll_group)) {
            auto [ml, mt] = op_pos.at(mid);
            cursor[ml] = mt + 1;
          }
        } else {
          exec_op(op);
          cursor[l]++;
        }
        progress = true;
      }
    }
  }
  for (std::size_t l = 0; l < plan.lanes.size(); ++l) {
    if (cursor[l] < plan.lanes[l].tasks.size()) {
      throw InternalError(
          "run_plan: pairing deadlock at task " +
          plan.lanes[l].tasks[cursor[l]].op + " on device " +
          std::to_string(plan.lanes[l].device));
    }
  }

  // Reassemble produced pTensors from the original producers' final pieces,
  // one piece per distinct (region, value part).
  TensorMap outputs;
  std::map<int, std::vector<int>> piece_vts;  // pt -> producer vts
  for (const auto& op : g.ops) {
    if (op.inserted) continue;
    for (int v : op.outputs) piece_vts[g.vt(v).ptensor].push_back(v);
  }
  for (auto& [pt_id, vts] : piece_vts) {
    const PTensor& pt = g.pt(pt_id);
    std::set<std::string> seen;
    std::vector<Piece> pieces;
    for (int v : vts) {
      const Mask& m = g.vt(v).mask;
      std::string key = region_to_string(m.region) + "#" +
                        std::to_string(m.value_index) + "/" +
                        std::to_string(m.value_count);
      if (!seen.insert(key).second) continue;  // replicas are identical
      pieces.push_back({&m, &st.vt_values.at(v)});
    }
    Mask full = full_mask(pt.shape);
    outputs[pt_id] = reconstruct(full, pieces, "output " +
                                 std::to_string(pt_id));
  }
  return outputs;
}

TensorMap random_integer_inputs(const PlanGraph& g, std::uint64_t seed,
                                int magnitude) {
  std::mt19937_64 rng(seed);
  // Index operands of embedding ops must hold valid row ids.
  std::map<int, std::int64_t> index_domain;  // pt -> vocab size
  for (const auto& op : g.ops) {
    if (op.kind == OpKind::embedding_lookup ||
        op.kind == OpKind::embedding_grad) {
      int idx_pt = g.vt(op.inputs[0]).ptensor;
      std::int64_t vocab =
          op.kind == OpKind::embedding_lookup
              ? g.pt(g.vt(op.inputs[1]).ptensor).shape[0]
              : g.pt(g.vt(op.outputs[0]).ptensor).shape[0];
      index_domain[idx_pt] = vocab;
    }
  }
  TensorMap out;
  for (const auto& [id, pt] : g.ptensors) {
    if (!g.is_graph_input(id)) continue;
    ConcreteTensor t = ConcreteTensor::zeros(pt.shape);
    auto dom = index_domain.find(id);
    if (dom != index_domain.end()) {
      std::uniform_int_distribution<std::int64_t> d(0, dom->second - 1);
      for (auto& v : t.data) v = static_cast<double>(d(rng));
    } else {
      std::uniform_int_distribution<int> d(-magnitude, magnitude);
      for (auto& v : t.data) v = static_cast<double>(d(rng));
    }
    out[id] = std::move(t);
  }
  return out;
}

std::string MismatchReport::to_string() const {
  if (ok) return "ok";
  std::string s = "mismatch on tensor " + std::to_string(ptensor) + " at [";
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(index[i]);
  }
  s += "]: expected " + std::to_string(expected) + ", got " +
       std::to_string(actual);
  return s;
}

MismatchReport compare_outputs(const TensorMap& expected,
                               const TensorMap& actual, double rel_tol) {
  for (const auto& [id, exp] : expected) {
    auto it = actual.find(id);
    if (it == actual.end() || it->second.shape != exp.shape) {
      return {false, id, {}, 0, 0};
    }
    for (std::size_t i = 0; i < exp.data.size(); ++i) {
      double e = exp.data[i];
      double a = it->second.data[i];
      bool same = rel_tol == 0.0
                      ? e == a
                      : std::abs(e - a) <=
                            rel_tol * std::max(1.0, std::abs(e));
      if (!same) {
        // Recover the multi-index for the report.
        std::vector<std::int64_t> idx(exp.shape.size());
        std::size_t rem = i;
        for (int d = static_cast<int>(exp.shape.size()) - 1; d >= 0; --d) {
          idx[d] = static_cast<std::int64_t>(rem % exp.shape[d]);
          rem /= exp.shape[d];
        }
        return {false, id, idx, e, a};
      }
    }
  }
  return {};
}

}  // namespace planc
