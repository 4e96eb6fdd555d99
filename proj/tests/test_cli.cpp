// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed binary end to end over the checked-in fixtures.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const std::string kBin = PLANC_BIN;
const fs::path kFixtures = PLANC_FIXTURES;

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run(const std::string& args) {
  fs::path log = fs::temp_directory_path() / "planc_cli_out.txt";
  std::string cmd = kBin + " " + args + " > " + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  int code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return {code, os.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "planc_cli_scratch";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("compile, verify, simulate round trip") {
  auto out = scratch() / "dp";
  auto r = run("compile --graph " + (kFixtures / "mlp.json").string() +
               " --cluster " + (kFixtures / "cluster.yaml").string() +
               " --strategy " + (kFixtures / "dp.yaml").string() + " --out " +
               out.string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out / "plan.json"));

  auto v = run("verify --plan " + (out / "plan.json").string() + " --graph " +
               (kFixtures / "mlp.json").string() + " --seed 7");
  CAPTURE(v.output);
  CHECK(v.exit_code == 0);
  CHECK(v.output.find("PASS") != std::string::npos);

  auto s = run("simulate --plan " + (out / "plan.json").string() + " --svg " +
               (out / "timeline.svg").string() + " --report " +
               (out / "report.json").string() + " --timeline " +
               (out / "timeline.json").string());
  CAPTURE(s.output);
  CHECK(s.exit_code == 0);
  CHECK(s.output.find("makespan") != std::string::npos);
  CHECK(fs::exists(out / "timeline.svg"));
  CHECK(read_file(out / "timeline.svg").rfind("<svg", 0) == 0);
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "timeline.json"));
}

TEST_CASE("compiled artifacts are byte-deterministic") {
  auto out1 = scratch() / "det1";
  auto out2 = scratch() / "det2";
  std::string base = "compile --graph " + (kFixtures / "mlp.json").string() +
                     " --cluster " + (kFixtures / "cluster.yaml").string() +
                     " --strategy " + (kFixtures / "pipeline.yaml").string();
  REQUIRE(run(base + " --out " + out1.string()).exit_code == 0);
  REQUIRE(run(base + " --out " + out2.string()).exit_code == 0);
  CHECK(read_file(out1 / "plan.json") == read_file(out2 / "plan.json"));
}

TEST_CASE("single-device passthrough yields one lane") {
  auto out = scratch() / "single";
  auto r = run("compile --graph " + (kFixtures / "mlp.json").string() +
               " --cluster " + (kFixtures / "cluster.yaml").string() +
               " --strategy " + (kFixtures / "none.yaml").string() +
               " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  auto plan = read_file(out / "plan.json");
  CHECK(plan.find("\"device\": 0") != std::string::npos);
  CHECK(plan.find("\"device\": 1") == std::string::npos);
}

TEST_CASE("infeasible schedules exit 2 with a cycle report") {
  auto r = run("compile --graph " + (kFixtures / "cycle.json").string() +
               " --cluster " + (kFixtures / "cluster.yaml").string() +
               " --strategy " + (kFixtures / "none.yaml").string() +
               " --out " + (scratch() / "cyc").string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("infeasible") != std::string::npos);
  CHECK(r.output.find("-[data]->") != std::string::npos);
}

TEST_CASE("verification mismatch exits 3 naming the tensor") {
  // Compile against the stock model, then verify against a tampered one
  // whose optimizer multiplies instead of adding.
  auto out = scratch() / "mm";
  REQUIRE(run("compile --graph " + (kFixtures / "mlp.json").string() +
              " --cluster " + (kFixtures / "cluster.yaml").string() +
              " --strategy " + (kFixtures / "dp.yaml").string() + " --out " +
              out.string())
              .exit_code == 0);
  auto doc = read_file(kFixtures / "mlp.json");
  auto pos = doc.find("\"id\": \"opt0\"");
  REQUIRE(pos != std::string::npos);
  const std::string add_kind = "\"kind\": \"add\"";
  auto kind_pos = doc.find(add_kind, pos);
  REQUIRE(kind_pos != std::string::npos);
  doc.replace(kind_pos, add_kind.size(), "\"kind\": \"mul\"");
  auto tampered = scratch() / "mlp_tampered.json";
  std::ofstream(tampered) << doc;

  auto v = run("verify --plan " + (out / "plan.json").string() + " --graph " +
               tampered.string() + " --seed 7");
  CHECK(v.exit_code == 3);
  CHECK(v.output.find("mismatch on tensor") != std::string::npos);
}

TEST_CASE("bad inputs exit 4") {
  auto r = run("compile --graph /nonexistent.json --cluster " +
               (kFixtures / "cluster.yaml").string() + " --strategy " +
               (kFixtures / "dp.yaml").string() + " --out " +
               (scratch() / "x").string());
  CHECK(r.exit_code == 4);

  auto bad = scratch() / "bad.yaml";
  std::ofstream(bad) << "stages: 2\n";  // no strategy name
  auto r2 = run("compile --graph " + (kFixtures / "mlp.json").string() +
                " --cluster " + (kFixtures / "cluster.yaml").string() +
                " --strategy " + bad.string() + " --out " +
                (scratch() / "y").string());
  CHECK(r2.exit_code == 4);
}
