#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include <json.hpp>

#include "magscope/features.hpp"
#include "magscope/forest.hpp"
#include "test_util.hpp"

using namespace magscope;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string("MAGSCOPE_THREADS=2 \"") + MAGSCOPE_CLI_PATH + "\" " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("synth --slides 0").code == 2);
    CHECK(run("synth --slides two").code == 2);
    CHECK(run("--threads 0 synth").code == 2);
    CHECK(run("sample").code == 2);
    CHECK(run("--version").code == 0);
    CHECK(run("--help").code == 0);
    testing::TempDir dir("cli");
    CHECK(run("--out " + q(dir.path()) + " synth --slides 1 --width 100 --height 100").code == 2);
    CHECK(run("--out " + q(dir.path()) + " synth --slides 1 --base-power-mix 7-3").code == 2);
  }

  TEST_CASE("runtime errors exit with 1 and name the file") {
    testing::TempDir dir("cli");
    const auto r = run("--out " + q(dir.path()) + " sample --manifest " + q(dir / "missing.jsonl"));
    CHECK(r.code == 1);
    CHECK(r.output.find("missing.jsonl") != std::string::npos);
    const auto e = run("--out " + q(dir.path()) + " eval --features " + q(dir / "f.magf"));
    CHECK(e.code == 1);
    CHECK(e.output.find("f.magf") != std::string::npos);
  }

  TEST_CASE("full pipeline") {
    testing::TempDir dir("cli");
    const auto s = dir / "s";
    const std::string synth = "--seed 7 --out " + q(s) +
                              " synth --slides 4 --width 544 --height 544 --patch-size 32 --base-power-mix 1:1";
    REQUIRE(run(synth).code == 0);
    CHECK(count_lines(s / "manifest.jsonl") == 4);
    const auto manifest = slurp(s / "manifest.jsonl");
    const auto slide0 = slurp(s / "slides" / "slide-000.png");
    std::size_t base20 = 0;
    {
      std::ifstream in(s / "manifest.jsonl");
      for (std::string line; std::getline(in, line);) {
        base20 += nlohmann::json::parse(line)["base_objective_power"] == 20;
      }
    }
    CHECK(base20 == 2);
    const auto run_json = nlohmann::json::parse(slurp(s / "run.json"));
    CHECK(run_json["command"] == "synth");
    CHECK(run_json["seed"] == 7);
    CHECK(run_json["outputs"][0] == "manifest.jsonl");
    CHECK(run_json["versions"].contains("magscope"));
    REQUIRE(run(synth).code == 0);
    CHECK(slurp(s / "manifest.jsonl") == manifest);
    CHECK(slurp(s / "slides" / "slide-000.png") == slide0);

    const auto p = dir / "p";
    REQUIRE(run("--out " + q(p) + " sample --manifest " + q(s / "manifest.jsonl") + " --patch-size 32").code == 0);
    CHECK(count_lines(p / "index.csv") == 1 + 2 * 25 + 2 * 20);

    const auto f = dir / "f";
    REQUIRE(run("--out " + q(f) + " extract lbp --index " + q(p / "index.csv") + " --preset LBP3").code == 0);
    const auto store = load_store(f / "features.magf");
    CHECK(store.dim == 26);
    CHECK(store.size() == 90);
    CHECK(run("--out " + q(f) + " extract lbp --index " + q(p / "index.csv") + " --preset LBP9").code == 2);

    const auto rf = dir / "rf";
    REQUIRE(run("--out " + q(rf) + " train rf --features " + q(f / "features.magf")).code == 0);
    CHECK(forest::load_forest(rf / "model.rf.json").trees.size() == 1000);

    const auto m = dir / "m";
    REQUIRE(run("--out " + q(m) + " train mlp --features " + q(f / "features.magf") + " --batch-size 16 --epochs 3").code == 0);
    CHECK(std::filesystem::exists(m / "model.mlp"));
    CHECK(nlohmann::json::parse(slurp(m / "model.mlp.json"))["loss_history"].size() == 3);
    CHECK(run("--out " + q(m) + " train mlp --features " + q(f / "features.magf")).code == 1);

    const auto e = dir / "e";
    const auto ev = run("--out " + q(e) + " eval --features " + q(f / "features.magf") +
                        " --classifier mlp --folds 5 --batch-size 16 --epochs 3");
    REQUIRE(ev.code == 0);
    CHECK(ev.output.find("Fold 5") != std::string::npos);
    CHECK(ev.output.find("All Folds") != std::string::npos);
    for (const char* name : {"report.json", "confusion.csv", "confusion.svg", "table.txt", "run.json"}) {
      CHECK(std::filesystem::exists(e / name));
    }
    const auto eg = run("--out " + q(dir / "eg") + " eval --features " + q(f / "features.magf") +
                        " --trees 10 --fold-strategy slide --folds 2");
    CHECK(eg.code == 0);

    const auto r = dir / "r";
    const auto rep = run("--out " + q(r) + " report --report " + q(e / "report.json"));
    REQUIRE(rep.code == 0);
    CHECK(slurp(r / "confusion.csv") == slurp(e / "confusion.csv"));
    CHECK(slurp(r / "table.txt") == slurp(e / "table.txt"));
  }
}
