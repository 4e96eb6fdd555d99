// SPDX-License-Identifier: Apache-2.0
//
// JSON graph-document loader. The schema is strict: unknown fields anywhere
// are rejected so fixture typos fail loudly.

#include <set>

#include "nlohmann/json.hpp"
#include "planc/graph.hpp"

namespace planc {
namespace {

using json = nlohmann::json;

void check_fields(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw SchemaError("unknown field '" + it.key() + "' in " + where);
    }
  }
}

TensorKind parse_tensor_kind(const std::string& s) {
  if (s == "weight") return TensorKind::weight;
  if (s == "activation") return TensorKind::activation;
  if (s == "gradient") return TensorKind::gradient;
  if (s == "optimizer-state") return TensorKind::optimizer_state;
  throw SchemaError("unknown tensor kind '" + s + "'");
}

OpDirection parse_direction(const std::string& s) {
  if (s == "forward") return OpDirection::forward;
  if (s == "backward") return OpDirection::backward;
  if (s == "optimizer") return OpDirection::optimizer;
  throw SchemaError("unknown direction '" + s + "'");
}

// Document kind strings name the concrete function; elementwise functions
// are spelled directly (add/mul/max) and reduce-sum carries its axis in
// attrs.
std::pair<OpKind, EwFn> parse_op_kind(const std::string& s) {
  if (s == "matmul") return {OpKind::matmul, EwFn::add};
  if (s == "add") return {OpKind::elementwise, EwFn::add};
  if (s == "mul") return {OpKind::elementwise, EwFn::mul};
  if (s == "max") return {OpKind::elementwise, EwFn::max};
  if (s == "reduce-sum") return {OpKind::reduce_op, EwFn::add};
  if (s == "embedding-lookup") return {OpKind::embedding_lookup, EwFn::add};
  if (s == "embedding-grad") return {OpKind::embedding_grad, EwFn::add};
  if (s == "identity") return {OpKind::identity, EwFn::add};
  throw SchemaError("unknown or reserved op kind '" + s + "'");
}

DimClass parse_dim_class(const std::string& s) {
  if (s == "spatial") return DimClass::spatial;
  if (s == "reduce") return DimClass::reduce;
  if (s == "frozen") return DimClass::frozen;
  throw SchemaError("unknown dim class '" + s + "'");
}

DimAnnotation parse_annotation(const json& j, const std::string& where) {
  check_fields(j, {"operands", "co_partition", "reduce_groups", "batch_dim"},
               where);
  DimAnnotation a;
  for (const auto& operand : j.at("operands")) {
    std::vector<DimClass> dims;
    for (const auto& d : operand) {
      dims.push_back(parse_dim_class(d.get<std::string>()));
    }
    a.operands.push_back(std::move(dims));
  }
  if (j.contains("co_partition")) {
    for (const auto& t : j["co_partition"]) {
      if (!t.is_array() || t.size() != 3) {
        throw SchemaError("co_partition entries are [out_dim, in_operand, "
                          "in_dim] in " + where);
      }
      a.co_partition.push_back({t[0].get<int>(), t[1].get<int>(),
                                t[2].get<int>()});
    }
  }
  if (j.contains("reduce_groups")) {
    for (const auto& grp : j["reduce_groups"]) {
      std::vector<std::array<int, 2>> g;
      for (const auto& t : grp) {
        if (!t.is_array() || t.size() != 2) {
          throw SchemaError("reduce_groups entries are [in_operand, in_dim] "
                            "in " + where);
        }
        g.push_back({t[0].get<int>(), t[1].get<int>()});
      }
      a.reduce_groups.push_back(std::move(g));
    }
  }
  if (j.contains("batch_dim")) a.batch_dim = j["batch_dim"].get<int>();
  return a;
}

OpAttrs parse_attrs(const json& j, const std::string& where) {
  check_fields(j,
               {"axis", "transpose_a", "transpose_b", "layer", "role",
                "pass", "batch_dim", "recompute"},
               where);
  OpAttrs a;
  if (j.contains("axis")) a.axis = j["axis"].get<int>();
  if (j.contains("transpose_a")) a.transpose_a = j["transpose_a"].get<bool>();
  if (j.contains("transpose_b")) a.transpose_b = j["transpose_b"].get<bool>();
  if (j.contains("layer")) a.layer = j["layer"].get<int>();
  if (j.contains("role")) a.role = j["role"].get<std::string>();
  if (j.contains("pass")) a.pass_index = j["pass"].get<int>();
  if (j.contains("batch_dim")) a.batch_dim = j["batch_dim"].get<int>();
  if (j.contains("recompute")) a.recompute = j["recompute"].get<bool>();
  return a;
}

// Declared operand shapes for shape checking against the linked pTensors.
std::vector<std::int64_t> expected_output_shape(const OpNode& op,
                                                const PlanGraph& g) {
  auto in_shape = [&](int i) { return g.pt(g.vt(op.inputs[i]).ptensor).shape; };
  switch (op.kind) {
    case OpKind::matmul: {
      auto a = in_shape(0);
      auto b = in_shape(1);
      if (a.size() != 2 || b.size() != 2) {
        throw SchemaError("op " + op.id + ": matmul operands must be rank 2");
      }
      std::int64_t m = op.attrs.transpose_a ? a[1] : a[0];
      std::int64_t ka = op.attrs.transpose_a ? a[0] : a[1];
      std::int64_t kb = op.attrs.transpose_b ? b[1] : b[0];
      std::int64_t n = op.attrs.transpose_b ? b[0] : b[1];
      if (ka != kb) {
        throw SchemaError("op " + op.id + ": matmul inner extents differ");
      }
      return {m, n};
    }
    case OpKind::elementwise: {
      auto a = in_shape(0);
      for (std::size_t i = 1; i < op.inputs.size(); ++i) {
        if (in_shape(i) != a) {
          throw SchemaError("op " + op.id + ": elementwise shape mismatch");
        }
      }
      return a;
    }
    case OpKind::reduce_op: {
      auto a = in_shape(0);
      if (!op.attrs.axis) {
        throw SchemaError("op " + op.id + ": reduce-sum requires attrs.axis");
      }
      int ax = *op.attrs.axis;
      if (ax < 0 || ax >= static_cast<int>(a.size())) {
        throw SchemaError("op " + op.id + ": reduce axis out of range");
      }
      std::vector<std::int64_t> out;
      for (int i = 0; i < static_cast<int>(a.size()); ++i) {
        if (i != ax) out.push_back(a[i]);
      }
      if (out.empty()) out.push_back(1);
      return out;
    }
    case OpKind::embedding_lookup: {
      auto idx = in_shape(0);
      auto table = in_shape(1);
      if (idx.size() != 1 || table.size() != 2) {
        throw SchemaError("op " + op.id +
                          ": embedding-lookup wants indices[n], table[v,h]");
      }
      return {idx[0], table[1]};
    }
    case OpKind::embedding_grad: {
      auto idx = in_shape(0);
      auto gout = in_shape(1);
      if (idx.size() != 1 || gout.size() != 2 || gout[0] != idx[0]) {
        throw SchemaError("op " + op.id +
                          ": embedding-grad wants indices[n], grad[n,h]");
      }
      // Output is the table gradient; its shape is whatever is declared.
      return {};
    }
    case OpKind::identity:
      return in_shape(0);
    default:
      return {};
  }
}

}  // namespace

PlanGraph load_graph(const std::string& document) {
  json j;
  try {
    j = json::parse(document);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("graph document is not valid JSON: ") +
                      e.what());
  }
  if (!j.is_object()) throw SchemaError("graph document must be an object");
  check_fields(j, {"ptensors", "ops"}, "graph document");

  PlanGraph g;
  if (!j.contains("ptensors") || !j.contains("ops")) {
    throw SchemaError("graph document needs 'ptensors' and 'ops'");
  }
  for (const auto& pj : j["ptensors"]) {
    check_fields(pj, {"id", "shape", "elem_size", "kind", "grad_of"},
                 "ptensor");
    PTensor p;
    p.id = pj.at("id").get<int>();
    for (const auto& e : pj.at("shape")) {
      std::int64_t ext = e.get<std::int64_t>();
      if (ext < 1) throw SchemaError("ptensor extents must be >= 1");
      p.shape.push_back(ext);
    }
    if (p.shape.empty()) throw SchemaError("ptensor shape must be non-empty");
    p.elem_size = pj.at("elem_size").get<std::int64_t>();
    if (p.elem_size < 1) throw SchemaError("elem_size must be >= 1");
    p.kind = parse_tensor_kind(pj.at("kind").get<std::string>());
    if (pj.contains("grad_of")) p.grad_of = pj["grad_of"].get<int>();
    if (g.ptensors.count(p.id)) {
      throw SchemaError("duplicate ptensor id " + std::to_string(p.id));
    }
    g.ptensors[p.id] = std::move(p);
  }
  for (const auto& [id, p] : g.ptensors) {
    if (p.grad_of && !g.ptensors.count(*p.grad_of)) {
      throw SchemaError("ptensor " + std::to_string(id) +
                        " grad_of references undeclared tensor");
    }
  }

  int order = 0;
  for (const auto& oj : j["ops"]) {
    check_fields(oj,
                 {"id", "kind", "inputs", "outputs", "direction", "flops",
                  "dim_annotation", "attrs", "backward_of"},
                 "op");
    OpNode op;
    op.id = oj.at("id").get<std::string>();
    auto [kind, ew] = parse_op_kind(oj.at("kind").get<std::string>());
    op.kind = kind;
    op.ew = ew;
    op.direction = parse_direction(oj.at("direction").get<std::string>());
    op.flops = oj.at("flops").get<double>();
    op.doc_order = order++;
    if (oj.contains("attrs")) {
      op.attrs = parse_attrs(oj["attrs"], "op " + op.id);
    }
    if (oj.contains("dim_annotation")) {
      op.dim_annotation =
          parse_annotation(oj["dim_annotation"], "op " + op.id);
    }
    if (oj.contains("backward_of")) {
      op.backward_of = oj["backward_of"].get<std::string>();
    }

    auto bind = [&](const json& ids, TensorSide side) {
      std::vector<int> out;
      for (const auto& tid_j : ids) {
        int tid = tid_j.get<int>();
        if (!g.ptensors.count(tid)) {
          throw SchemaError("op " + op.id + " references undeclared tensor " +
                            std::to_string(tid));
        }
        out.push_back(
            g.add_vtensor(tid, full_mask(g.pt(tid).shape), side, op.id));
      }
      return out;
    };
    op.inputs = bind(oj.at("inputs"), TensorSide::consumer_input);
    op.outputs = bind(oj.at("outputs"), TensorSide::producer_output);

    auto shape = expected_output_shape(op, g);
    if (!shape.empty()) {
      if (op.outputs.size() != 1) {
        throw SchemaError("op " + op.id + " must have exactly one output");
      }
      const PTensor& out_pt = g.pt(g.vt(op.outputs[0]).ptensor);
      if (out_pt.shape != shape) {
        throw SchemaError("op " + op.id + ": declared output tensor shape " +
                          region_to_string(full_mask(out_pt.shape).region) +
                          " does not match operator result " +
                          region_to_string(full_mask(shape).region));
      }
    }
    g.add_op(std::move(op));
  }

  for (const auto& o : g.ops) {
    if (o.backward_of && !g.has_op(*o.backward_of)) {
      throw SchemaError("op " + o.id + " backward_of references unknown op");
    }
    if (o.dim_annotation &&
        o.dim_annotation->operands.size() != o.inputs.size()) {
      throw SchemaError("op " + o.id +
                        ": dim_annotation operand count mismatch");
    }
    if (o.dim_annotation) {
      for (std::size_t i = 0; i < o.inputs.size(); ++i) {
        const auto& dims = o.dim_annotation->operands[i];
        if (static_cast<int>(dims.size()) !=
            g.pt(g.vt(o.inputs[i]).ptensor).rank()) {
          throw SchemaError("op " + o.id + ": dim_annotation rank mismatch " +
                            "on operand " + std::to_string(i));
        }
      }
    }
  }
  return g;
}

}  // namespace planc
