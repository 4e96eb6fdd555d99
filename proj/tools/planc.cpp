// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: compile, verify, and simulate parallelization
// plans for dataflow-graph documents.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "planc/compile.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitInfeasible = 2;
constexpr int kExitMismatch = 3;
constexpr int kExitInput = 4;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw planc::SchemaError("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw planc::SchemaError("cannot write " + path);
  out << content;
}

int cmd_compile(const std::string& graph_path, const std::string& cluster_path,
                const std::string& strategy_path, const std::string& out_dir,
                std::uint64_t seed) {
  (void)seed;  // artifacts are deterministic; the seed only matters to verify
  auto graph = planc::load_graph(read_file(graph_path));
  auto cluster = planc::parse_cluster_yaml(read_file(cluster_path));
  auto strategy = planc::parse_strategy_yaml(read_file(strategy_path));

  planc::CompileResult result;
  try {
    result = planc::compile(std::move(graph), cluster, strategy);
  } catch (const planc::InfeasibleError& e) {
    std::cerr << "infeasible schedule\n" << e.report.to_string() << "\n";
    return kExitInfeasible;
  }

  fs::create_directories(out_dir);
  write_file(out_dir + "/plan.json", planc::save_plan(result.plan));
  for (const auto& d : result.diagnostics) std::cerr << d << "\n";
  std::cout << "plan written to " << out_dir << "/plan.json ("
            << result.replaced_families
            << " collective families, modeled comm cost "
            << result.matched_comm_cost << " s, naive "
            << result.naive_comm_cost << " s)\n";
  return 0;
}

int cmd_verify(const std::string& plan_path, const std::string& graph_path,
               std::uint64_t seed) {
  auto plan = planc::load_plan(read_file(plan_path));
  auto graph = planc::load_graph(read_file(graph_path));

  // Interpreter support check up front, listing anything not runnable.
  std::vector<std::string> unsupported;
  for (const auto& op : graph.ops) {
    switch (op.kind) {
      case planc::OpKind::matmul:
      case planc::OpKind::elementwise:
      case planc::OpKind::reduce_op:
      case planc::OpKind::embedding_lookup:
      case planc::OpKind::embedding_grad:
      case planc::OpKind::identity:
        break;
      default:
        unsupported.push_back(op.id + " (" +
                              std::string(to_string(op.kind)) + ")");
    }
  }
  if (!unsupported.empty()) {
    std::cout << "skip: graph contains non-interpretable ops:\n";
    for (const auto& u : unsupported) std::cout << "  " << u << "\n";
    return 0;
  }

  auto inputs = planc::random_integer_inputs(graph, seed);
  auto expected = planc::run_reference(graph, inputs);
  auto actual = planc::run_plan(plan, inputs);
  auto report = planc::compare_outputs(expected, actual);
  if (!report.ok) {
    std::cout << "FAIL: " << report.to_string() << "\n";
    return kExitMismatch;
  }
  std::cout << "PASS: plan matches reference on seed " << seed << "\n";
  return 0;
}

int cmd_simulate(const std::string& plan_path, const std::string& cluster_path,
                 const std::string& svg_path, const std::string& report_path,
                 const std::string& timeline_path) {
  auto plan = planc::load_plan(read_file(plan_path));
  if (!cluster_path.empty()) {
    plan.cluster = planc::parse_cluster_yaml(read_file(cluster_path));
  }
  auto report = planc::simulate(plan);
  std::cout << report.summary();
  if (!report_path.empty()) write_file(report_path, report.to_json());
  if (!timeline_path.empty()) {
    write_file(timeline_path, report.timeline_json());
  }
  if (!svg_path.empty()) write_file(svg_path, report.timeline_svg());
  return report.deadlock ? kExitInfeasible : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parallelization-plan compiler and simulator"};
  app.require_subcommand(1);

  std::string graph_path, cluster_path, strategy_path, out_dir = "out";
  std::string plan_path, svg_path, report_path, timeline_path;
  std::uint64_t seed = 1;

  auto* compile = app.add_subcommand("compile", "compile a plan");
  compile->add_option("--graph", graph_path)->required();
  compile->add_option("--cluster", cluster_path)->required();
  compile->add_option("--strategy", strategy_path)->required();
  compile->add_option("--out", out_dir);
  compile->add_option("--seed", seed);

  auto* verify = app.add_subcommand("verify", "check a plan against the "
                                              "sequential reference");
  verify->add_option("--plan", plan_path)->required();
  verify->add_option("--graph", graph_path)->required();
  verify->add_option("--seed", seed);

  auto* simulate = app.add_subcommand("simulate", "simulate a compiled plan");
  simulate->add_option("--plan", plan_path)->required();
  simulate->add_option("--cluster", cluster_path);
  simulate->add_option("--svg", svg_path);
  simulate->add_option("--report", report_path);
  simulate->add_option("--timeline", timeline_path);

  CLI11_PARSE(app, argc, argv);

  try {
    if (compile->parsed()) {
      return cmd_compile(graph_path, cluster_path, strategy_path, out_dir,
                         seed);
    }
    if (verify->parsed()) return cmd_verify(plan_path, graph_path, seed);
    if (simulate->parsed()) {
      return cmd_simulate(plan_path, cluster_path, svg_path, report_path,
                          timeline_path);
    }
  } catch (const planc::SchemaError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const planc::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
