// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "planc/simulate.hpp"
#include "planc/strategies.hpp"
#include "testutil.hpp"

using namespace planc;

namespace {

// Uniform pipeline fixture: forward and backward tasks cost the same.
testutil::Compiled pipeline_plan(const std::string& variant, int stages,
                                 int micro_batches,
                                 const ClusterSpec& cluster) {
  testutil::MlpSpec m;
  m.layers = stages;
  m.batch = std::max<std::int64_t>(4, micro_batches);
  m.optimizer = false;
  m.weight_grads = false;
  StrategyConfig c;
  c.strategy = variant;
  c.stages = stages;
  c.micro_batches = micro_batches;
  return testutil::compile_doc(testutil::mlp_doc(m), cluster, c);
}

double bubble_fraction(const SimReport& report, int device) {
  for (const auto& d : report.devices) {
    if (d.device == device) return d.idle / report.makespan;
  }
  FAIL("no such device");
  return 0;
}

}  // namespace

TEST_CASE("one op lowers to one task with its compute duration") {
  std::string doc = R"({
    "ptensors": [
      {"id": 0, "shape": [4, 4], "elem_size": 4, "kind": "activation"},
      {"id": 1, "shape": [4, 4], "elem_size": 4, "kind": "activation"}
    ],
    "ops": [{"id": "A", "kind": "identity", "inputs": [0], "outputs": [1],
             "direction": "forward", "flops": 5e8}]
  })";
  auto cluster = testutil::make_cluster(1);  // 1e9 flops/s
  StrategyConfig c;
  c.strategy = "none";
  auto compiled = testutil::compile_doc(doc, cluster, c);
  REQUIRE(compiled.plan.lanes.size() == 1);
  REQUIRE(compiled.plan.lanes[0].tasks.size() == 1);
  auto report = simulate(compiled.plan);
  CHECK(report.makespan == doctest::Approx(0.5));
  CHECK(report.devices[0].busy_compute == doctest::Approx(0.5));
  CHECK(report.devices[0].idle == doctest::Approx(0.0));
}

TEST_CASE("independent devices: makespan 2s, bubble 1s on the faster one") {
  std::string doc = R"({
    "ptensors": [
      {"id": 0, "shape": [2], "elem_size": 4, "kind": "activation"},
      {"id": 1, "shape": [2], "elem_size": 4, "kind": "activation"},
      {"id": 2, "shape": [2], "elem_size": 4, "kind": "activation"},
      {"id": 3, "shape": [2], "elem_size": 4, "kind": "activation"}
    ],
    "ops": [
      {"id": "X", "kind": "identity", "inputs": [0], "outputs": [1],
       "direction": "forward", "flops": 1e9},
      {"id": "Y", "kind": "identity", "inputs": [2], "outputs": [3],
       "direction": "forward", "flops": 2e9}
    ]
  })";
  auto cluster = testutil::make_cluster(2);
  auto g = load_graph(doc);
  op_assign(g, cluster, "X", 0);
  op_assign(g, cluster, "Y", 1);
  auto res = validate(g, cluster);
  auto order = complete_order(g, cluster, res);
  auto mplan = materialize(g, cluster, order);
  auto plan = lower(mplan, cluster);
  auto report = simulate(plan);
  CHECK(report.makespan == doctest::Approx(2.0));
  CHECK(bubble_fraction(report, 0) == doctest::Approx(0.5));  // 1s of 2s
  CHECK(bubble_fraction(report, 1) == doctest::Approx(0.0));
}

TEST_CASE("zero-flops plans are dominated by communication") {
  auto doc = testutil::chain_doc();  // 16-element 4x4 activations
  auto cluster = ClusterSpec::uniform(2, 2, 1 << 30, {64.0, 0.25}, {1.0, 1.0},
                                      1e9);
  auto g = load_graph(doc);
  for (auto& op : g.ops) op.flops = 0;
  op_assign(g, cluster, "A", 0);
  op_assign(g, cluster, "B", 1);
  auto res = validate(g, cluster);
  auto order = complete_order(g, cluster, res);
  auto mplan = materialize(g, cluster, order);
  auto plan = lower(mplan, cluster);
  auto report = simulate(plan);
  // 64 bytes over a 64 B/s link plus 0.25 s latency.
  CHECK(report.makespan == doctest::Approx(1.25));
  CHECK(report.devices[0].busy_compute == doctest::Approx(0.0));
  CHECK(report.devices[0].busy_comm == doctest::Approx(1.25));
}

TEST_CASE("GPipe with two stages and two micro-batches idles one stage-time") {
  auto cluster = testutil::zero_comm_cluster(2);
  auto compiled = pipeline_plan("gpipe", 2, 2, cluster);
  auto report = simulate(compiled.plan);
  REQUIRE_FALSE(report.deadlock);

  // Uniform stage task time t: makespan 6t, each device busy 4t.
  double t = compiled.plan.lanes[0].tasks[0].duration;
  REQUIRE(t > 0);
  CHECK(report.makespan == doctest::Approx(6 * t));
  for (const auto& d : report.devices) {
    CHECK(d.idle == doctest::Approx(2 * t));  // one fwd+bwd stage time
  }
}

TEST_CASE("1F1B bubble fraction approaches (S-1)/(S+K-1)") {
  int S = 4, K = 8;
  auto cluster = testutil::zero_comm_cluster(S);
  auto compiled = pipeline_plan("1f1b", S, K, cluster);
  auto report = simulate(compiled.plan);
  REQUIRE_FALSE(report.deadlock);
  double expected = static_cast<double>(S - 1) / (S + K - 1);
  for (const auto& d : report.devices) {
    CHECK(d.idle / report.makespan ==
          doctest::Approx(expected).epsilon(0.02));
  }
}

TEST_CASE("bubble formula cross-checked by brute schedule at S=2 K=2") {
  auto cluster = testutil::zero_comm_cluster(2);
  auto compiled = pipeline_plan("1f1b", 2, 2, cluster);
  auto report = simulate(compiled.plan);
  double t = compiled.plan.lanes[0].tasks[0].duration;
  // By hand: dev0 F0[0,t] F1[t,2t] B0[3t,4t] B1[5t,6t]; dev1 F0[t,2t]
  // B0[2t,3t] F1[3t,4t]... the optimal interleaving finishes at 6t with
  // 2t idle per device; fraction (S-1)/(S+K-1) = 1/3.
  CHECK(report.makespan == doctest::Approx(6 * t));
  for (const auto& d : report.devices) {
    CHECK(d.idle / report.makespan == doctest::Approx(1.0 / 3));
  }
}

TEST_CASE("per-device accounting always sums to the makespan") {
  std::vector<testutil::Compiled> plans;
  auto cluster2 = testutil::make_cluster(2);
  StrategyConfig dp;
  dp.strategy = "data_parallel";
  dp.devices = 2;
  plans.push_back(testutil::compile_doc(testutil::mlp_doc({}), cluster2, dp));
  plans.push_back(pipeline_plan("1f1b", 2, 4, cluster2));
  StrategyConfig il;
  il.strategy = "interlaced";
  il.micro_batches = 2;
  plans.push_back(
      testutil::compile_doc(testutil::embed_doc({}), cluster2, il));
  for (const auto& compiled : plans) {
    auto report = simulate(compiled.plan);
    REQUIRE_FALSE(report.deadlock);
    for (const auto& d : report.devices) {
      CHECK(d.busy_compute + d.busy_comm + d.idle ==
            doctest::Approx(report.makespan).epsilon(1e-12));
      CHECK(d.idle >= -1e-12);
    }
  }
}

TEST_CASE("identical plans yield identical reports") {
  auto cluster = testutil::make_cluster(2);
  StrategyConfig c;
  c.strategy = "1f1b";
  c.stages = 2;
  c.micro_batches = 4;
  auto doc = testutil::mlp_doc({});
  auto a = simulate(testutil::compile_doc(doc, cluster, c).plan);
  auto b = simulate(testutil::compile_doc(doc, cluster, c).plan);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.timeline_json() == b.timeline_json());
}

TEST_CASE("mismatched pairing deadlocks with a report naming the tasks") {
  // Two lanes whose recvs cross: each waits on a send that never runs.
  ExecutionPlan plan;
  plan.cluster = testutil::make_cluster(2);
  DeviceLane l0, l1;
  l0.device = 0;
  l1.device = 1;
  Task r0;
  r0.kind = TaskKind::recv;
  r0.op = "recv0";
  r0.channel = 0;
  Task s0;
  s0.kind = TaskKind::send;
  s0.op = "send1";
  s0.channel = 1;
  s0.duration = 1;
  Task r1;
  r1.kind = TaskKind::recv;
  r1.op = "recv1";
  r1.channel = 1;
  Task s1;
  s1.kind = TaskKind::send;
  s1.op = "send0";
  s1.channel = 0;
  s1.duration = 1;
  l0.tasks = {r0, s0};
  l1.tasks = {r1, s1};
  plan.lanes = {l0, l1};
  auto report = simulate(plan);
  REQUIRE(report.deadlock);
  REQUIRE(report.waiting_tasks.size() == 2);
  CHECK(report.waiting_tasks[0].find("recv0") != std::string::npos);
  CHECK(report.waiting_tasks[1].find("recv1") != std::string::npos);
}

TEST_CASE("validated plans never deadlock") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 12; ++i) {
    auto kase = testutil::random_corpus_case(rng);
    auto cluster = testutil::make_cluster(kase.devices);
    auto compiled = testutil::compile_doc(kase.document, cluster, kase.config);
    auto report = simulate(compiled.plan);
    CAPTURE(kase.label);
    CHECK_FALSE(report.deadlock);
  }
}

TEST_CASE("1F1B peak activation memory never exceeds GPipe's") {
  for (auto [S, K] : std::vector<std::pair<int, int>>{{2, 4}, {4, 8}}) {
    testutil::MlpSpec m;
    m.layers = S;
    m.batch = std::max<std::int64_t>(4, K);
    auto doc = testutil::mlp_doc(m);
    auto cluster = testutil::zero_comm_cluster(S);
    auto build = [&](const char* variant) {
      StrategyConfig c;
      c.strategy = variant;
      c.stages = S;
      c.micro_batches = K;
      return simulate(testutil::compile_doc(doc, cluster, c).plan);
    };
    auto gp = build("gpipe");
    auto fb = build("1f1b");
    std::int64_t gp_peak = 0, fb_peak = 0;
    for (const auto& d : gp.devices) {
      gp_peak = std::max(gp_peak, d.peak_activation);
    }
    for (const auto& d : fb.devices) {
      fb_peak = std::max(fb_peak, d.peak_activation);
    }
    CAPTURE(S);
    CAPTURE(K);
    CHECK(fb_peak <= gp_peak);
    if (K > S) CHECK(fb_peak < gp_peak);  // strictly fewer live micro-batches
  }
}

TEST_CASE("co-shard with recompute shrinks the middle tensor's peak") {
  testutil::CoshardSpec spec;
  auto doc = testutil::coshard_doc(spec);
  auto cluster = testutil::make_cluster(1);

  StrategyConfig plain;
  plain.strategy = "none";
  auto base = simulate(testutil::compile_doc(doc, cluster, plain).plan);

  StrategyConfig cs;
  cs.strategy = "coshard";
  cs.shards = 4;
  cs.target_ops = {"op1", "op2"};
  auto sharded = simulate(testutil::compile_doc(doc, cluster, cs).plan);

  // Tensor 2 is the middle activation.
  std::int64_t before = base.ptensor_peak.at(2);
  std::int64_t after = sharded.ptensor_peak.at(2);
  CHECK(after * 10 <= before * 3);  // <= 30%
}

TEST_CASE("peak memory covers the resident weights") {
  auto cluster = testutil::make_cluster(2);
  StrategyConfig c;
  c.strategy = "1f1b";
  c.stages = 2;
  c.micro_batches = 2;
  auto compiled = testutil::compile_doc(testutil::mlp_doc({}), cluster, c);
  auto report = simulate(compiled.plan);
  const PlanGraph& g = compiled.plan.graph;
  for (const auto& d : report.devices) {
    std::int64_t resident = 0;
    std::set<std::string> seen;
    for (const auto& op : g.ops) {
      auto it = g.assignment.find(op.id);
      if (it == g.assignment.end() || it->second != d.device) continue;
      for (int in : op.inputs) {
        const VTensor& vt = g.vt(in);
        if (!g.is_graph_input(vt.ptensor)) continue;
        if (g.pt(vt.ptensor).kind != TensorKind::weight) continue;
        std::string key = std::to_string(vt.ptensor) + "@" +
                          region_to_string(vt.mask.region);
        if (seen.insert(key).second) resident += vt.bytes(g.pt(vt.ptensor));
      }
    }
    CHECK(d.peak_memory >= resident);
  }
}

TEST_CASE("report serializations carry the expected structure") {
  auto cluster = testutil::make_cluster(2);
  StrategyConfig c;
  c.strategy = "data_parallel";
  c.devices = 2;
  auto report = simulate(
      testutil::compile_doc(testutil::mlp_doc({}), cluster, c).plan);
  CHECK(report.summary().find("makespan") != std::string::npos);
  CHECK(report.to_json().find("ptensor_peak") != std::string::npos);
  CHECK(report.timeline_svg().rfind("<svg", 0) == 0);
  CHECK(report.timeline_json().find("\"device\"") != std::string::npos);
}

TEST_CASE("plan documents round-trip") {
  auto cluster = testutil::make_cluster(2);
  StrategyConfig c;
  c.strategy = "data_parallel";
  c.devices = 2;
  auto compiled = testutil::compile_doc(testutil::mlp_doc({}), cluster, c);
  auto text = save_plan(compiled.plan);
  auto loaded = load_plan(text);
  CHECK(save_plan(loaded) == text);  // byte-deterministic
  auto r1 = simulate(compiled.plan);
  auto r2 = simulate(loaded);
  CHECK(r1.to_json() == r2.to_json());
}
