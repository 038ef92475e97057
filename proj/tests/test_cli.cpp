#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

Run cli(const std::string& args) {
  const fs::path dir = fs::temp_directory_path();
  const fs::path out = dir / "hybridscan_cli_stdout", err = dir / "hybridscan_cli_stderr";
  const std::string cmd = std::string(HYBRIDSCAN_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hybridscan_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("orders prints the window permutation") {
    const auto r = cli("orders --dims 1,4,4 --k 2 --variant within_slice");
    REQUIRE(r.code == 0);
    const json j = json::parse(r.out);
    CHECK(j["forward"] == json({0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15}));
    CHECK(j["kind"] == "local_f");
    CHECK(j["locality"]["max_window_spread_local"] == 3);
    CHECK(cli("orders --dims 2,4,2 --k 2 --kind local_s").code == 0);
    CHECK(cli("orders --dims 1,4,4 --k 2 --kind slice_f --variant within_slice").code == 2);
  }

  TEST_CASE("missing config file is an I/O error naming the path") {
    const auto r = cli("train --config /nonexistent/desk_run.json");
    CHECK(r.code == 4);
    CHECK(r.err.find("/nonexistent/desk_run.json") != std::string::npos);
  }

  TEST_CASE("config errors exit with 2") {
    const fs::path dir = scratch("badcfg");
    fs::create_directories(dir);
    std::ofstream(dir / "bad.json") << R"({"train": {"epochs": 2, "learning_rate": 1}})";
    const auto r = cli("train --config " + (dir / "bad.json").string() + " --out " + (dir / "out").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("learning_rate") != std::string::npos);
    CHECK(cli("train --preset large").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("").code == 2);
  }

  TEST_CASE("help lists the shared flags") {
    const auto r = cli("train --help");
    CHECK(r.code == 0);
    for (const char* flag : {"--config", "--seed", "--threads", "--out", "--preset"})
      CHECK(r.out.find(flag) != std::string::npos);
  }

  TEST_CASE("gen, train and eval") {
    const fs::path dir = scratch("run");
    fs::create_directories(dir);
    std::ofstream(dir / "run.json") << R"({"seed": 4, "train": {"epochs": 1, "crop_size": 16},
      "model": {"channels": [4, 8], "d_state": 4, "refine_channels": 4},
      "data": {"num_cases": 6, "size": 16, "radius_min": 2, "radius_max": 4}})";
    const std::string cfg = " --config " + (dir / "run.json").string();

    REQUIRE(cli("gen" + cfg + " --out " + (dir / "data").string()).code == 0);
    CHECK(fs::exists(dir / "data" / "dataset.json"));
    CHECK(fs::exists(dir / "data" / "case_005.vseg"));

    REQUIRE(cli("train" + cfg + " --out " + (dir / "train").string()).code == 0);
    for (const char* f : {"config.json", "model.hsck", "curves.csv", "report.json"}) CHECK(fs::exists(dir / "train" / f));
    const json echoed = json::parse(slurp(dir / "train" / "config.json"));
    CHECK(echoed["seed"] == 4);
    CHECK(echoed["train"]["lr0"].is_number());
    CHECK(echoed["model"]["channels"] == json({4, 8}));

    const auto ev = cli("eval --checkpoint " + (dir / "train" / "model.hsck").string() + " --split all");
    REQUIRE(ev.code == 0);
    const json report = json::parse(slurp(dir / "train" / "eval.json"));
    CHECK(report["cases"].size() == 6);
    CHECK(report["fgm"].size() == 2);
    CHECK(report["fgm"][0].contains("f_low"));
    CHECK(report["fgm"][0]["mean_gate"].is_number());

    CHECK(cli("eval --checkpoint " + (dir / "missing.hsck").string()).code == 4);
  }

  TEST_CASE("bench reports throughput") {
    const auto r = cli("bench --lengths 16,64 --rows 4 --seconds 0.01");
    CHECK(r.code == 0);
    CHECK(r.out.find("sequential") != std::string::npos);
  }
}
