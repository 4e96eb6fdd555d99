// SPDX-License-Identifier: Apache-2.0

#include "planc/materialize.hpp"

#include <algorithm>
#include <climits>
#include <map>
#include <set>

namespace planc {

std::map<int, std::vector<std::string>> MaterializedPlan::device_order()
    const {
  std::map<int, std::vector<std::string>> lanes;
  for (const auto& d : graph.assignment) lanes[d.second];
  for (const auto& id : global_order) {
    lanes[graph.assignment.at(id)].push_back(id);
  }
  return lanes;
}

namespace {

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
  void insert_before(const std::string& anchor, const std::string& id) {
    order.insert(order.begin() + position(anchor), id);
  }
};

struct PieceSource {
  std::string producer;
  int producer_vt = 0;
  Region region;
  int value_index = 0;
  int value_count = 1;
};

// Exact-cover check: full-value pieces plus one layer per value family must
// tile the consumer region with no overlap.
void check_coverage(const OpNode& consumer, const VTensor& cvt,
                    const std::vector<PieceSource>& pieces) {
  std::vector<Region> layers;
  std::map<int, std::map<int, std::vector<Region>>> families;
  for (const auto& p : pieces) {
    if (p.value_count == 1) {
      layers.push_back(p.region);
    } else {
      families[p.value_count][p.value_index].push_back(p.region);
    }
  }
  auto region_key = [](const Region& r) {
    std::vector<std::int64_t> k;
    for (const auto& iv : r) {
      k.push_back(iv.lo);
      k.push_back(iv.hi);
    }
    return k;
  };
  for (auto& [vc, parts] : families) {
    if (static_cast<int>(parts.size()) != vc) {
      throw UsageError("uncovered consumer region on op " + consumer.id +
                       ": value family of count " + std::to_string(vc) +
                       " has only " + std::to_string(parts.size()) +
                       " summands for region " +
                       region_to_string(cvt.mask.region));
    }
    std::vector<std::vector<std::int64_t>> reference;
    bool first = true;
    for (auto& [vi, regions] : parts) {
      std::vector<std::vector<std::int64_t>> keys;
      for (const auto& r : regions) keys.push_back(region_key(r));
      std::sort(keys.begin(), keys.end());
      if (first) {
        reference = keys;
        first = false;
        for (const auto& r : regions) layers.push_back(r);
      } else if (keys != reference) {
        throw UsageError("coverage error on op " + consumer.id +
                         ": value summands cover different regions");
      }
    }
  }
  std::int64_t covered = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    covered += region_volume(layers[i]);
    for (std::size_t j = i + 1; j < layers.size(); ++j) {
      if (region_intersect(layers[i], layers[j])) {
        throw UsageError("coverage error on op " + consumer.id + ": region " +
                         region_to_string(layers[i]) + " double-covered");
      }
    }
  }
  std::int64_t want = region_volume(cvt.mask.region);
  if (covered != want) {
    throw UsageError("uncovered consumer region on op " + consumer.id + ": " +
                     std::to_string(covered) + " of " + std::to_string(want) +
                     " elements of " + region_to_string(cvt.mask.region) +
                     " (ptensor " + std::to_string(cvt.ptensor) + ")");
  }
}

}  // namespace

MaterializedPlan materialize(const PlanGraph& g, const ClusterSpec& cluster,
                             const CompletedOrder& order) {
  MaterializedPlan plan;
  plan.graph = g;
  plan.global_order = order.global;
  PlanGraph& mg = plan.graph;
  Weaver weave{plan.global_order};
  int counter = 0;

  std::map<std::pair<std::string, int>, std::vector<PieceSource>> incoming;
  for (const auto& e : order.deps) {
    auto it = order.chosen.find(e.group);
    if (it == order.chosen.end() || it->second != e.producer) continue;
    incoming[{e.consumer, e.consumer_vt}].push_back(
        {e.producer, e.producer_vt, e.region, e.value_index, e.value_count});
  }

  auto device_of = [&](const std::string& op_id) {
    auto it = mg.assignment.find(op_id);
    if (it == mg.assignment.end()) {
      throw InternalError("materialize: unassigned op " + op_id);
    }
    return it->second;
  };

  // Producer-side chains keep creation order via a moving tail anchor.
  std::map<std::string, std::string> tail_after;
  auto place_after_producer = [&](const std::string& producer,
                                  const std::string& id) {
    auto it = tail_after.find(producer);
    weave.insert_after(it == tail_after.end() ? producer : it->second, id);
    tail_after[producer] = id;
  };

  // A piece already extracted or shipped once is reused by later consumers
  // on the same device instead of being transferred again.
  std::map<std::tuple<int, std::string, int>, int> landed_cache;

  for (const std::string& cid : order.global) {
    const OpNode consumer_snapshot = mg.op(cid);
    int cdev = device_of(cid);
    for (int cvt_id : consumer_snapshot.inputs) {
      const VTensor cvt = mg.vt(cvt_id);
      if (mg.is_graph_input(cvt.ptensor)) continue;  // initial placement
      std::vector<PieceSource> pieces;
      auto pieces_it = incoming.find({cid, cvt_id});
      if (pieces_it != incoming.end()) pieces = pieces_it->second;
      check_coverage(consumer_snapshot, cvt, pieces);

      // Lands one piece on the consumer device; returns its vtensor there.
      auto land_piece = [&](const PieceSource& p) -> int {
        auto cache_key = std::make_tuple(p.producer_vt,
                                         region_to_string(p.region), cdev);
        auto cached = landed_cache.find(cache_key);
        if (cached != landed_cache.end()) return cached->second;
        int pdev = device_of(p.producer);
        const VTensor pvt = mg.vt(p.producer_vt);
        int current_vt = p.producer_vt;

        if (p.region != pvt.mask.region) {
          OpNode sp;
          sp.id = "$split" + std::to_string(counter++);
          sp.kind = OpKind::split;
          sp.inserted = true;
          sp.doc_order = mg.op(p.producer).doc_order;
          int in_vt = mg.add_vtensor(cvt.ptensor, pvt.mask,
                                     TensorSide::consumer_input, sp.id);
          Mask out_mask = pvt.mask;
          out_mask.region = p.region;
          int out_vt = mg.add_vtensor(cvt.ptensor, out_mask,
                                      TensorSide::producer_output, sp.id);
          sp.inputs = {in_vt};
          sp.outputs = {out_vt};
          mg.assignment[sp.id] = pdev;
          plan.feeds[in_vt] = current_vt;
          mg.add_op(sp);
          place_after_producer(p.producer, sp.id);
          current_vt = out_vt;
        }

        if (pdev != cdev) {
          int channel = mg.next_channel++;
          Mask piece_mask = mg.vt(current_vt).mask;

          OpNode snd;
          snd.id = "$send" + std::to_string(channel);
          snd.kind = OpKind::send;
          snd.inserted = true;
          snd.channel = channel;
          snd.doc_order = mg.op(p.producer).doc_order;
          int snd_in = mg.add_vtensor(cvt.ptensor, piece_mask,
                                      TensorSide::consumer_input, snd.id);
          snd.inputs = {snd_in};
          mg.assignment[snd.id] = pdev;
          plan.feeds[snd_in] = current_vt;
          mg.add_op(snd);
          place_after_producer(p.producer, snd.id);

          OpNode rcv;
          rcv.id = "$recv" + std::to_string(channel);
          rcv.kind = OpKind::recv;
          rcv.inserted = true;
          rcv.channel = channel;
          rcv.doc_order = consumer_snapshot.doc_order;
          int rcv_out = mg.add_vtensor(cvt.ptensor, piece_mask,
                                       TensorSide::producer_output, rcv.id);
          rcv.outputs = {rcv_out};
          mg.assignment[rcv.id] = cdev;
          mg.add_op(rcv);
          weave.insert_before(cid, rcv.id);
          current_vt = rcv_out;
        }
        landed_cache[cache_key] = current_vt;
        return current_vt;
      };

      struct Landed {
        Region region;
        int vt;
      };
      auto region_key = [](const Region& r) {
        std::vector<std::int64_t> k;
        for (const auto& iv : r) {
          k.push_back(iv.lo);
          k.push_back(iv.hi);
        }
        return k;
      };
      std::map<std::vector<std::int64_t>, std::vector<PieceSource>> by_region;
      for (const auto& p : pieces) {
        by_region[region_key(p.region)].push_back(p);
      }

      std::vector<Landed> landed;
      for (auto& [key, group] : by_region) {
        std::sort(group.begin(), group.end(),
                  [](const PieceSource& a, const PieceSource& b) {
                    return a.value_index < b.value_index;
                  });
        if (group.size() == 1 && group[0].value_count == 1) {
          landed.push_back({group[0].region, land_piece(group[0])});
          continue;
        }
        // Partial-value summands land first, then sum on the consumer side.
        std::vector<int> parts;
        for (const auto& p : group) parts.push_back(land_piece(p));
        OpNode red;
        red.id = "$sum" + std::to_string(counter++);
        red.kind = OpKind::reduce_assemble;
        red.inserted = true;
        red.doc_order = consumer_snapshot.doc_order;
        for (int part : parts) {
          Mask m = mg.vt(part).mask;
          int in_vt = mg.add_vtensor(cvt.ptensor, m,
                                     TensorSide::consumer_input, red.id);
          plan.feeds[in_vt] = part;
          red.inputs.push_back(in_vt);
        }
        Mask out_mask;
        out_mask.region = group[0].region;
        int out_vt = mg.add_vtensor(cvt.ptensor, out_mask,
                                    TensorSide::producer_output, red.id);
        red.outputs = {out_vt};
        mg.assignment[red.id] = cdev;
        mg.add_op(red);
        weave.insert_before(cid, red.id);
        landed.push_back({group[0].region, out_vt});
      }

      if (landed.size() == 1 && landed[0].region == cvt.mask.region) {
        plan.feeds[cvt_id] = landed[0].vt;
        continue;
      }

      // Assemble pieces in ascending region coordinates.
      std::sort(landed.begin(), landed.end(),
                [&](const Landed& a, const Landed& b) {
                  return region_key(a.region) < region_key(b.region);
                });
      OpNode cat;
      cat.id = "$cat" + std::to_string(counter++);
      cat.kind = OpKind::concat;
      cat.inserted = true;
      cat.doc_order = consumer_snapshot.doc_order;
      for (const auto& l : landed) {
        Mask m = mg.vt(l.vt).mask;
        int in_vt =
            mg.add_vtensor(cvt.ptensor, m, TensorSide::consumer_input, cat.id);
        plan.feeds[in_vt] = l.vt;
        cat.inputs.push_back(in_vt);
      }
      Mask out_mask;
      out_mask.region = cvt.mask.region;
      int out_vt = mg.add_vtensor(cvt.ptensor, out_mask,
                                  TensorSide::producer_output, cat.id);
      cat.outputs = {out_vt};
      mg.assignment[cat.id] = cdev;
      mg.add_op(cat);
      weave.insert_before(cid, cat.id);
      plan.feeds[cvt_id] = out_vt;
    }
  }
  (void)cluster;
  return plan;
}

namespace {

std::vector<std::string> readers_of(const MaterializedPlan& plan, int vt) {
  std::vector<std::string> out;
  for (const auto& op : plan.graph.ops) {
    for (int in : op.inputs) {
      auto it = plan.feeds.find(in);
      if (it != plan.feeds.end() && it->second == vt) {
        out.push_back(op.id);
        break;
      }
    }
  }
  return out;
}

}  // namespace

void insert_frees(MaterializedPlan& plan) {
  PlanGraph& g = plan.graph;
  Weaver weave{plan.global_order};

  // Recompute rewrite: clone marked producers in front of their first
  // backward reader and rewire those readers to the clone's outputs.
  std::vector<std::string> marked;
  for (const auto& op : g.ops) {
    if (op.attrs.recompute && !op.inserted) marked.push_back(op.id);
  }
  for (const auto& pid : marked) {
    const OpNode producer = g.op(pid);
    int dev = g.assignment.at(pid);
    std::set<std::string> backward_readers;
    bool supported = true;
    for (int out : producer.outputs) {
      for (const auto& rid : readers_of(plan, out)) {
        const OpNode& r = g.op(rid);
        if (r.direction == OpDirection::backward) {
          if (g.assignment.at(rid) != dev) {
            plan.diagnostics.push_back(
                "recompute: cross-device backward reader " + rid + " of " +
                pid + " not supported; keeping buffer live");
            supported = false;
          }
          backward_readers.insert(rid);
        }
      }
    }
    if (!supported || backward_readers.empty()) continue;

    std::string first_bwd;
    int first_pos = INT_MAX;
    for (const auto& rid : backward_readers) {
      int pos = weave.position(rid);
      if (pos < first_pos) {
        first_pos = pos;
        first_bwd = rid;
      }
    }

    OpNode clone = producer;
    clone.id = pid + "~rc";
    clone.inserted = true;
    clone.attrs.recompute = false;
    clone.inputs.clear();
    clone.outputs.clear();
    for (int in : producer.inputs) {
      const VTensor& vt = g.vt(in);
      int nv = g.add_vtensor(vt.ptensor, vt.mask, TensorSide::consumer_input,
                             clone.id);
      auto feed = plan.feeds.find(in);
      if (feed != plan.feeds.end()) plan.feeds[nv] = feed->second;
      clone.inputs.push_back(nv);
    }
    std::map<int, int> replacement;
    for (int out : producer.outputs) {
      const VTensor& vt = g.vt(out);
      int nv = g.add_vtensor(vt.ptensor, vt.mask, TensorSide::producer_output,
                             clone.id);
      replacement[out] = nv;
      clone.outputs.push_back(nv);
    }
    g.assignment[clone.id] = dev;
    g.add_op(clone);
    weave.insert_before(first_bwd, clone.id);

    for (const auto& rid : backward_readers) {
      for (int in : g.op(rid).inputs) {
        auto feed = plan.feeds.find(in);
        if (feed != plan.feeds.end() && replacement.count(feed->second)) {
          plan.feeds[in] = replacement.at(feed->second);
        }
      }
    }
  }

  // Liveness: free each activation/gradient buffer after its last reader on
  // the producing device.
  struct FreeAt {
    std::string anchor;
    int vt;
    int device;
  };
  std::vector<FreeAt> frees;
  for (const auto& oid : plan.global_order) {
    const OpNode& op = g.op(oid);
    int dev = g.assignment.at(oid);
    for (int out : op.outputs) {
      const VTensor& vt = g.vt(out);
      TensorKind kind = g.pt(vt.ptensor).kind;
      if (kind == TensorKind::weight || kind == TensorKind::optimizer_state) {
        continue;
      }
      auto readers = readers_of(plan, out);
      if (readers.empty()) continue;  // plan output; stays resident
      std::string last;
      int last_pos = -1;
      bool cross = false;
      for (const auto& rid : readers) {
        auto it = g.assignment.find(rid);
        if (it == g.assignment.end() || it->second != dev) {
          cross = true;
          break;
        }
        int pos = weave.position(rid);
        if (pos > last_pos) {
          last_pos = pos;
          last = rid;
        }
      }
      if (cross) continue;
      frees.push_back({last, out, dev});
    }
  }
  for (const auto& f : frees) {
    OpNode fr;
    fr.id = "$free" + std::to_string(f.vt);
    fr.kind = OpKind::free_buffer;
    fr.inserted = true;
    fr.free_vtensor = f.vt;
    g.assignment[fr.id] = f.device;
    g.add_op(fr);
    weave.insert_after(f.anchor, fr.id);
  }
}

}  // namespace planc
