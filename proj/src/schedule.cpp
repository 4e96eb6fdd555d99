// SPDX-License-Identifier: Apache-2.0

#include "planc/schedule.hpp"

#include <algorithm>
#include <climits>
#include <queue>
#include <set>

namespace planc {

void op_assign(PlanGraph& g, const ClusterSpec& cluster,
               const std::string& op_id, int device) {
  const OpNode& op = g.op(op_id);
  if (op.is_reserved_kind()) {
    throw UsageError("op_assign: " + op_id + " has a reserved kind (" +
                     std::string(to_string(op.kind)) + ")");
  }
  if (!cluster.has_device(device)) {
    throw UsageError("op_assign: unknown device " + std::to_string(device));
  }
  auto it = g.assignment.find(op_id);
  if (it != g.assignment.end() && it->second != device) {
    g.warn("op_assign: reassigning " + op_id + " from device " +
           std::to_string(it->second) + " to " + std::to_string(device));
  }
  g.assignment[op_id] = device;
}

void op_order(PlanGraph& g, const std::string& before,
              const std::string& after) {
  if (before == after) {
    throw UsageError("op_order: self-edge on " + before);
  }
  g.op(before);  // existence checks
  g.op(after);
  g.happen_before.push_back({before, after});
}

std::vector<DepEdge> derive_data_deps(const PlanGraph& g) {
  std::vector<DepEdge> edges;
  int next_group = 0;

  // Producer views per ptensor in deterministic (op order, output order).
  std::map<int, std::vector<std::pair<const OpNode*, const VTensor*>>> prods;
  for (const auto& op : g.ops) {
    for (int v : op.outputs) {
      const VTensor& vt = g.vt(v);
      prods[vt.ptensor].push_back({&op, &vt});
    }
  }

  for (const auto& op : g.ops) {
    for (int v : op.inputs) {
      const VTensor& cvt = g.vt(v);
      auto it = prods.find(cvt.ptensor);
      if (it == prods.end()) continue;

      // Interchangeable producers (identical region and value coordinates)
      // form one any-of group.
      struct Key {
        Region region;
        int vi, vc;
        bool operator<(const Key& o) const {
          if (vi != o.vi) return vi < o.vi;
          if (vc != o.vc) return vc < o.vc;
          for (std::size_t i = 0; i < region.size(); ++i) {
            if (region[i].lo != o.region[i].lo) return region[i].lo < o.region[i].lo;
            if (region[i].hi != o.region[i].hi) return region[i].hi < o.region[i].hi;
          }
          return false;
        }
      };
      std::map<Key, std::vector<DepEdge>> families;
      for (const auto& [pop, pvt] : it->second) {
        if (pop->id == op.id) continue;
        auto overlap = mask_intersect(pvt->mask, cvt.mask);
        if (!overlap) continue;
        DepEdge e;
        e.producer = pop->id;
        e.consumer = op.id;
        e.region = *overlap;
        e.value_index = pvt->mask.value_index;
        e.value_count = pvt->mask.value_count;
        e.producer_vt = pvt->id;
        e.consumer_vt = cvt.id;
        families[{*overlap, e.value_index, e.value_count}].push_back(e);
      }
      for (auto& [key, members] : families) {
        int group = next_group++;
        DepMode mode =
            members.size() > 1 ? DepMode::any_of : DepMode::all_of;
        for (auto& e : members) {
          e.group = group;
          e.mode = mode;
          edges.push_back(e);
        }
      }
    }
  }
  return edges;
}

namespace {

struct TaggedEdge {
  int to;
  bool data;
};

// Returns one cycle (as op-index path) or empty when acyclic.
std::vector<std::pair<int, bool>> find_cycle(
    int n, const std::vector<std::vector<TaggedEdge>>& adj) {
  std::vector<int> color(n, 0);  // 0 white, 1 on stack, 2 done
  std::vector<int> parent(n, -1);
  std::vector<bool> parent_data(n, false);

  for (int root = 0; root < n; ++root) {
    if (color[root] != 0) continue;
    std::vector<std::pair<int, std::size_t>> stack{{root, 0}};
    color[root] = 1;
    while (!stack.empty()) {
      auto& [u, next] = stack.back();
      if (next < adj[u].size()) {
        const TaggedEdge& e = adj[u][next++];
        if (color[e.to] == 0) {
          color[e.to] = 1;
          parent[e.to] = u;
          parent_data[e.to] = e.data;
          stack.push_back({e.to, 0});
        } else if (color[e.to] == 1) {
          // Back edge u -> e.to closes a cycle; walk parents back to e.to.
          int cur = u;
          std::vector<std::pair<int, bool>> chain;
          while (cur != e.to) {
            chain.push_back({cur, parent_data[cur]});
            cur = parent[cur];
          }
          std::reverse(chain.begin(), chain.end());
          // chain holds nodes e.to -> ... -> u annotated with the edge that
          // reached them; rebuild as (from, to, tag) pairs downstream.
          std::vector<std::pair<int, bool>> out;
          int prev = e.to;
          for (auto& [node, via_data] : chain) {
            out.push_back({prev, via_data});
            prev = node;
          }
          out.push_back({prev, e.data});
          return out;  // nodes in cycle order; tag = edge leaving the node
        }
      } else {
        color[u] = 2;
        stack.pop_back();
      }
    }
  }
  return {};
}

}  // namespace

std::string CycleReport::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    if (i) s += ", ";
    s += cycle[i].from + " -[" + (cycle[i].data ? "data" : "order") + "]-> " +
         cycle[i].to;
  }
  if (!choice_vector.empty()) {
    s += " (replica choices: " + join(choice_vector, ",") + ")";
  }
  return s;
}

namespace {

struct GroupInfo {
  int id;
  std::vector<const DepEdge*> alternatives;  // deterministic order
};

struct ValidationContext {
  std::vector<std::string> names;          // index -> op id
  std::map<std::string, int> index;        // op id -> index
  std::vector<std::vector<TaggedEdge>> hb; // happen-before adjacency
  std::vector<GroupInfo> groups;
};

ValidationContext build_context(const PlanGraph& g,
                                const ClusterSpec& cluster,
                                const std::vector<DepEdge>& deps) {
  ValidationContext ctx;
  for (const auto& op : g.ops) {
    ctx.index[op.id] = static_cast<int>(ctx.names.size());
    ctx.names.push_back(op.id);
  }
  ctx.hb.resize(ctx.names.size());
  for (const auto& e : g.happen_before) {
    ctx.hb[ctx.index.at(e.before)].push_back({ctx.index.at(e.after), false});
  }

  std::map<int, GroupInfo> groups;
  for (const auto& e : deps) {
    auto& gi = groups[e.group];
    gi.id = e.group;
    gi.alternatives.push_back(&e);
  }
  for (auto& [id, gi] : groups) {
    // Heuristic priority: producer on the consumer's device, then lowest
    // device id, then lowest op id.
    std::stable_sort(
        gi.alternatives.begin(), gi.alternatives.end(),
        [&](const DepEdge* a, const DepEdge* b) {
          auto dev = [&](const DepEdge* e) {
            auto it = g.assignment.find(e->producer);
            return it == g.assignment.end() ? INT_MAX : it->second;
          };
          auto cdev = [&](const DepEdge* e) {
            auto it = g.assignment.find(e->consumer);
            return it == g.assignment.end() ? INT_MIN : it->second;
          };
          bool a_local = dev(a) == cdev(a);
          bool b_local = dev(b) == cdev(b);
          if (a_local != b_local) return a_local;
          if (dev(a) != dev(b)) return dev(a) < dev(b);
          return a->producer < b->producer;
        });
    ctx.groups.push_back(std::move(gi));
  }
  (void)cluster;
  return ctx;
}

std::vector<std::pair<int, bool>> cycle_for_choice(
    const ValidationContext& ctx, const std::vector<int>& choice) {
  auto adj = ctx.hb;
  for (std::size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    const DepEdge* e = ctx.groups[gi].alternatives[choice[gi]];
    adj[ctx.index.at(e->producer)].push_back(
        {ctx.index.at(e->consumer), true});
  }
  return find_cycle(static_cast<int>(ctx.names.size()), adj);
}

CycleReport make_report(const ValidationContext& ctx,
                        const std::vector<std::pair<int, bool>>& cycle,
                        const std::vector<int>& choice) {
  CycleReport rep;
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    const auto& [node, data] = cycle[i];
    const auto& [next, unused] = cycle[(i + 1) % cycle.size()];
    (void)unused;
    rep.cycle.push_back({ctx.names[node], ctx.names[next], data});
  }
  for (std::size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    if (ctx.groups[gi].alternatives.size() > 1) {
      rep.choice_vector.push_back(
          ctx.groups[gi].alternatives[choice[gi]]->producer);
    }
  }
  return rep;
}

}  // namespace

ValidationResult validate(const PlanGraph& g, const ClusterSpec& cluster) {
  auto deps = derive_data_deps(g);
  auto ctx = build_context(g, cluster, deps);

  std::vector<int> choice(ctx.groups.size(), 0);  // heuristic = first
  auto cycle = cycle_for_choice(ctx, choice);

  ValidationResult res;
  auto record_choice = [&](const std::vector<int>& c) {
    for (std::size_t gi = 0; gi < ctx.groups.size(); ++gi) {
      res.chosen[ctx.groups[gi].id] =
          ctx.groups[gi].alternatives[c[gi]]->producer;
    }
  };
  if (cycle.empty()) {
    res.feasible = true;
    record_choice(choice);
    return res;
  }

  // The heuristic failed; enumerate replica-choice combinations.
  long long combos = 1;
  std::vector<std::size_t> varying;
  for (std::size_t gi = 0; gi < ctx.groups.size(); ++gi) {
    if (ctx.groups[gi].alternatives.size() > 1) {
      varying.push_back(gi);
      combos *= static_cast<long long>(ctx.groups[gi].alternatives.size());
      if (combos > 4096) break;
    }
  }
  if (combos > 4096) {
    res.feasible = false;
    res.budget_exceeded = true;  // "possibly infeasible (search budget)"
    res.report = make_report(ctx, cycle, choice);
    return res;
  }

  std::vector<int> combo(ctx.groups.size(), 0);
  for (long long c = 0; c < combos; ++c) {
    long long rem = c;
    for (std::size_t v : varying) {
      auto n = static_cast<long long>(ctx.groups[v].alternatives.size());
      combo[v] = static_cast<int>(rem % n);
      rem /= n;
    }
    auto cyc = cycle_for_choice(ctx, combo);
    if (cyc.empty()) {
      res.feasible = true;
      record_choice(combo);
      return res;
    }
  }

  res.feasible = false;
  res.report = make_report(ctx, cycle, choice);
  return res;
}

CompletedOrder complete_order(const PlanGraph& g, const ClusterSpec& cluster,
                              const ValidationResult& validation) {
  if (!validation.feasible) {
    throw UsageError("complete_order called on infeasible graph");
  }
  auto deps = derive_data_deps(g);

  std::map<std::string, int> index;
  std::vector<std::string> names;
  for (const auto& op : g.ops) {
    index[op.id] = static_cast<int>(names.size());
    names.push_back(op.id);
  }
  int n = static_cast<int>(names.size());
  std::vector<std::set<int>> adj(n);
  std::vector<int> indeg(n, 0);
  auto add_edge = [&](const std::string& a, const std::string& b) {
    int u = index.at(a), v = index.at(b);
    if (adj[u].insert(v).second) indeg[v]++;
  };
  for (const auto& e : g.happen_before) add_edge(e.before, e.after);
  for (const auto& e : deps) {
    auto it = validation.chosen.find(e.group);
    if (it != validation.chosen.end() && it->second == e.producer) {
      add_edge(e.producer, e.consumer);
    } else if (it == validation.chosen.end()) {
      // Group unknown to the validation (graph changed since): depend on all.
      add_edge(e.producer, e.consumer);
    }
  }

  // Deterministic Kahn: ready set ordered by (micro_batch, doc order, id).
  auto key = [&](int i) {
    const OpNode& op = g.op(names[i]);
    return std::make_tuple(op.micro_batch.value_or(INT_MAX), op.doc_order,
                           op.id);
  };
  auto cmp = [&](int a, int b) { return key(a) > key(b); };
  std::priority_queue<int, std::vector<int>, decltype(cmp)> ready(cmp);
  for (int i = 0; i < n; ++i) {
    if (indeg[i] == 0) ready.push(i);
  }

  CompletedOrder out;
  out.deps = deps;
  out.chosen = validation.chosen;
  while (!ready.empty()) {
    int u = ready.top();
    ready.pop();
    out.global.push_back(names[u]);
    for (int v : adj[u]) {
      if (--indeg[v] == 0) ready.push(v);
    }
  }
  if (static_cast<int>(out.global.size()) != n) {
    throw InternalError("complete_order: cycle on validated graph");
  }

  std::vector<std::string> unassigned;
  for (const auto& id : out.global) {
    auto it = g.assignment.find(id);
    if (it == g.assignment.end()) {
      unassigned.push_back(id);
      continue;
    }
    if (!cluster.has_device(it->second)) {
      throw UsageError("complete_order: op " + id + " on unknown device");
    }
    out.per_device[it->second].push_back(id);
  }
  if (!unassigned.empty()) {
    throw UsageError("complete_order: unassigned ops: " +
                     join(unassigned, ","));
  }
  return out;
}

}  // namespace planc
