#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exnode/cli.hpp"

using namespace exnode;
using namespace exnode::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("exnode_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const Json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Json tiny_classify() {
  return Json::parse(R"({
    "task": "classify",
    "model": {"hidden": 4, "layers": [{"out": 4}, {"out": 4}]},
    "solver": {"method": "rk4", "steps": 2},
    "data": {"n": 8, "train": 12, "val": 9},
    "optim": {"epochs": 2, "batch": 6}
  })");
}

Json tiny_cnf() {
  return Json::parse(R"({
    "task": "cnf",
    "model": {"layers": [{"out": 6}, {"out": 2, "act": "identity"}]},
    "solver": {"eval": {"method": "dopri5", "rtol": 1e-7, "atol": 1e-7}},
    "data": {"n": 16, "train": 16, "val": 4, "test": 12},
    "optim": {"epochs": 1, "batch": 8}
  })");
}

Json tiny_tvae() {
  return Json::parse(R"({
    "task": "tvae",
    "model": {"embed": 4, "hidden": 4, "latent": 2, "latent_hidden": 4, "decoder": [4]},
    "data": {"rotating": {"n": 6}, "train": 4, "val": 2},
    "optim": {"epochs": 1, "batch": 2}
  })");
}

struct Quiet {
  std::ostringstream log, out;
  Context ctx;
  Quiet() {
    ctx.log = &log;
    ctx.out = &out;
  }
};

int train(const Json& cfg, const fs::path& dir, int seeds = 0) {
  Quiet q;
  return cmd_train({write_config(dir, cfg), (dir / "run").string(), seeds}, q.ctx);
}

Json eval_json(const std::string& ckpt, const std::string& data, int threads = 1) {
  Quiet q;
  q.ctx.threads = threads;
  EvalOptions o;
  o.checkpoint = ckpt;
  o.data = data;
  EXPECT_EQ(cmd_eval(o, q.ctx), 0);
  return Json::parse(q.out.str());
}

// Reverses set order and rotates the points inside every set.
void write_permuted_sets(const fs::path& src, const fs::path& dst) {
  std::vector<std::string> lines;
  io::for_each_line(src.string(), [&](const Json& j, const std::string&) {
    Json k = j;
    auto pts = k["points"].get<std::vector<std::vector<double>>>();
    std::rotate(pts.begin(), pts.begin() + 3, pts.end());
    k["points"] = pts;
    lines.push_back(k.dump());
  });
  std::ofstream os(dst);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) os << *it << '\n';
}

}  // namespace

TEST(Config, UnknownKeyNamesItsPath) {
  Json j = tiny_classify();
  j["optim"]["learning_rate"] = 0.1;
  try {
    config::parse_run_config(j);
    FAIL() << "accepted an unknown key";
  } catch (const config::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("optim.learning_rate"), std::string::npos) << e.what();
  }
}

TEST(Config, RejectsWrongTypesAndMissingSections) {
  Json j = tiny_classify();
  j["optim"]["epochs"] = "ten";
  EXPECT_THROW(config::parse_run_config(j), config::ConfigError);
  j = tiny_classify();
  j.erase("model");
  EXPECT_THROW(config::parse_run_config(j), config::ConfigError);
  j = tiny_cnf();
  j["task"] = "regress";
  EXPECT_THROW(config::parse_run_config(j), config::ConfigError);
}

TEST(Config, ResolvedCopyParsesToItself) {
  for (const Json& j : {tiny_classify(), tiny_cnf(), tiny_tvae()}) {
    auto rc = config::parse_run_config(j);
    EXPECT_EQ(config::parse_run_config(rc.resolved).resolved, rc.resolved);
  }
}

TEST(Config, NestedEvalSolver) {
  auto rc = config::parse_run_config(tiny_cnf());
  EXPECT_EQ(rc.cnf->hyper.eval_solver.method, ode::Method::Dopri5);
  EXPECT_DOUBLE_EQ(rc.cnf->hyper.eval_solver.rtol, 1e-7);
  EXPECT_EQ(rc.cnf->hyper.solver.method, ode::Method::Rk4);
}

TEST(Train, InvalidSolverMethodExitsTwoNamingField) {
  auto dir = scratch("badsolver");
  Json j = tiny_classify();
  j["solver"]["method"] = "euler";
  testing::internal::CaptureStderr();
  EXPECT_EQ(train(j, dir), 2);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("solver.method"), std::string::npos) << err;
  EXPECT_EQ(std::count(err.begin(), err.end(), '\n'), 1) << err;
}

TEST(Train, ClassifyWritesArtifacts) {
  auto dir = scratch("classify");
  ASSERT_EQ(train(tiny_classify(), dir), 0);
  const fs::path run = dir / "run";
  for (const char* f : {"checkpoint.json", "metrics.csv", "run.json", "dataset.json", "val.jsonl"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  std::ifstream csv(run / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "epoch,split,loss,accuracy");
  Json rj = Json::parse(slurp(run / "run.json"));
  EXPECT_EQ(rj["task"], "classify");
  EXPECT_EQ(rj["seed"], 0);
  Json hashed = rj["config"];
  hashed.erase("output");
  EXPECT_EQ(rj["hash"], content_hash(hashed.dump()));
  EXPECT_EQ(rj["config"]["optim"]["patience"], 10);
}

TEST(Train, RerunGivesIdenticalMetrics) {
  auto a = scratch("rerun_a"), b = scratch("rerun_b");
  ASSERT_EQ(train(tiny_cnf(), a), 0);
  ASSERT_EQ(train(tiny_cnf(), b), 0);
  EXPECT_EQ(slurp(a / "run" / "metrics.csv"), slurp(b / "run" / "metrics.csv"));
  const auto pa = load_checkpoint((a / "run" / "checkpoint.json").string()).params;
  const auto pb = load_checkpoint((b / "run" / "checkpoint.json").string()).params;
  ASSERT_EQ(pa.names(), pb.names());
  for (const auto& name : pa.names()) EXPECT_TRUE(pa.at(name) == pb.at(name)) << name;
  Json ra = Json::parse(slurp(a / "run" / "run.json")), rb = Json::parse(slurp(b / "run" / "run.json"));
  EXPECT_EQ(ra["metrics"], rb["metrics"]);
  EXPECT_EQ(ra["hash"], rb["hash"]);
}

TEST(Train, SeedsWriteSummary) {
  auto dir = scratch("seeds");
  ASSERT_EQ(train(tiny_tvae(), dir, 3), 0);
  Json s = Json::parse(slurp(dir / "run" / "summary.json"));
  EXPECT_EQ(s["runs"], 3);
  std::vector<double> v;
  for (int seed : {0, 1, 2}) {
    const fs::path rd = dir / "run" / ("seed-" + std::to_string(seed));
    ASSERT_TRUE(fs::exists(rd / "checkpoint.json"));
    Json rj = Json::parse(slurp(rd / "run.json"));
    EXPECT_EQ(rj["seed"], seed);
    v.push_back(rj["metrics"]["val_elbo"].get<double>());
  }
  const double mean = (v[0] + v[1] + v[2]) / 3;
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  EXPECT_NEAR(s["metrics"]["val_elbo"]["mean"].get<double>(), mean, 1e-9);
  EXPECT_NEAR(s["metrics"]["val_elbo"]["std"].get<double>(), std::sqrt(var / 2), 1e-9);
}

TEST(Train, DivergenceExitsThree) {
  auto dir = scratch("diverge");
  Json j = tiny_cnf();
  j["solver"]["eval"] = {{"method", "rk4"}, {"steps", 4}};
  j["data"]["train"] = 32;
  j["optim"] = {{"epochs", 3}, {"batch", 4}, {"lr", 1000.0}};
  testing::internal::CaptureStderr();
  EXPECT_EQ(train(j, dir), 3);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("diverged"), std::string::npos) << err;
}

TEST(Eval, IdentityFlowGivesStandardNormalPpll) {
  auto dir = scratch("identity");
  Json j = tiny_cnf();
  j["data"] = {{"mixture", {{"kind", "standard_normal"}}}, {"n", 16}, {"train", 4}, {"val", 0}, {"test", 200}};
  j["optim"]["epochs"] = 0;
  ASSERT_EQ(train(j, dir), 0);
  Json m = eval_json((dir / "run" / "checkpoint.json").string(), (dir / "run" / "dataset.json").string());

  // Direct Gaussian log-density of the held-out points.
  double logp = 0, sq = 0;
  std::size_t points = 0;
  std::vector<double> per_point;
  for (const auto& r : io::read_sets((dir / "run" / "test.jsonl").string()))
    for (std::size_t i = 0; i < r.points.size(); i += 2) {
      const double l = -0.5 * (r.points[i] * r.points[i] + r.points[i + 1] * r.points[i + 1]) - cnf::kLog2Pi;
      logp += l;
      per_point.push_back(l);
      ++points;
    }
  EXPECT_NEAR(m["ppll"].get<double>(), logp / points, 1e-9);
  const double mean = logp / points;
  for (double l : per_point) sq += (l - mean) * (l - mean);
  const double se = std::sqrt(sq / (points - 1) / points);
  EXPECT_LE(std::abs(m["ppll"].get<double>() - (-cnf::kLog2Pi - 1.0)), 3 * se);
}

TEST(Eval, PermutedCopyGivesIdenticalMetrics) {
  auto dir = scratch("permuted");
  Json j = tiny_cnf();
  j["optim"]["epochs"] = 2;
  ASSERT_EQ(train(j, dir), 0);
  const fs::path run = dir / "run";
  write_permuted_sets(run / "test.jsonl", dir / "perm.jsonl");
  Json a = eval_json((run / "checkpoint.json").string(), (run / "test.jsonl").string());
  Json b = eval_json((run / "checkpoint.json").string(), (dir / "perm.jsonl").string());
  EXPECT_NEAR(a["ppll"].get<double>(), b["ppll"].get<double>(), 1e-9);
  EXPECT_EQ(a["points"], b["points"]);

  auto cdir = scratch("permuted_classify");
  ASSERT_EQ(train(tiny_classify(), cdir), 0);
  const fs::path crun = cdir / "run";
  write_permuted_sets(crun / "val.jsonl", cdir / "perm.jsonl");
  Json ca = eval_json((crun / "checkpoint.json").string(), (crun / "val.jsonl").string());
  Json cb = eval_json((crun / "checkpoint.json").string(), (cdir / "perm.jsonl").string());
  EXPECT_NEAR(ca["loss"].get<double>(), cb["loss"].get<double>(), 1e-9);
  EXPECT_EQ(ca["accuracy"], cb["accuracy"]);
}

TEST(Eval, ConfusionSumsToCountAndMatchesAccuracy) {
  auto dir = scratch("confusion");
  ASSERT_EQ(train(tiny_classify(), dir), 0);
  Json m = eval_json((dir / "run" / "checkpoint.json").string(), (dir / "run" / "dataset.json").string());
  long total = 0, diag = 0;
  const auto conf = m["confusion"].get<std::vector<std::vector<long>>>();
  ASSERT_EQ(conf.size(), 3u);
  for (std::size_t r = 0; r < conf.size(); ++r)
    for (std::size_t c = 0; c < conf[r].size(); ++c) total += conf[r][c], diag += r == c ? conf[r][c] : 0;
  EXPECT_EQ(total, m["count"].get<long>());
  EXPECT_EQ(total, 9);
  EXPECT_DOUBLE_EQ(m["accuracy"].get<double>(), static_cast<double>(diag) / total);
}

TEST(Eval, ThreadCountDoesNotChangeMetrics) {
  auto dir = scratch("threads");
  Json j = tiny_cnf();
  j["data"] = {{"n", 130}, {"train", 8}, {"val", 0}, {"test", 6}};  // n * d > 256 switches evaluation to probes
  ASSERT_EQ(train(j, dir), 0);
  const std::string ck = (dir / "run" / "checkpoint.json").string(), data = (dir / "run" / "test.jsonl").string();
  EXPECT_EQ(eval_json(ck, data, 1)["ppll"], eval_json(ck, data, 4)["ppll"]);
}

TEST(Eval, MismatchedDataExitsTwo) {
  auto cd = scratch("mismatch_cnf"), td = scratch("mismatch_tvae");
  ASSERT_EQ(train(tiny_cnf(), cd), 0);
  ASSERT_EQ(train(tiny_tvae(), td), 0);
  Quiet q;
  testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_eval({(td / "run" / "checkpoint.json").string(), (cd / "run" / "test.jsonl").string(), "", "", 0}, q.ctx), 2);
  EXPECT_EQ(cmd_eval({(cd / "run" / "checkpoint.json").string(), (td / "run" / "dataset.json").string(), "", "", 0}, q.ctx), 2);
  testing::internal::GetCapturedStderr();
}

TEST(Sample, FixedSeedIsByteIdentical) {
  auto dir = scratch("sample_det");
  ASSERT_EQ(train(tiny_cnf(), dir), 0);
  Quiet q;
  SampleOptions o;
  o.checkpoint = (dir / "run" / "checkpoint.json").string();
  o.count = 3;
  o.seed = 5;
  o.out = (dir / "a.jsonl").string();
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  o.out = (dir / "b.jsonl").string();
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  o.seed = 6;
  o.out = (dir / "c.jsonl").string();
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  EXPECT_NE(slurp(dir / "a.jsonl"), slurp(dir / "c.jsonl"));
}

TEST(Sample, CnfCardinalityAboveTraining) {
  auto dir = scratch("sample_n");
  ASSERT_EQ(train(tiny_cnf(), dir), 0);  // trained at n = 16
  Quiet q;
  SampleOptions o;
  o.checkpoint = (dir / "run" / "checkpoint.json").string();
  o.out = (dir / "big.jsonl").string();
  o.n = 128;
  o.count = 2;
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  auto recs = io::read_sets(o.out);
  ASSERT_EQ(recs.size(), 2u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.points.shape(), (Shape{128, 2}));
    EXPECT_TRUE(r.points.all_finite());
    EXPECT_FALSE(r.t.has_value());
  }
}

TEST(Sample, TvaeTimesAreTagged) {
  auto dir = scratch("sample_tvae");
  ASSERT_EQ(train(tiny_tvae(), dir), 0);
  Quiet q;
  SampleOptions o;
  o.checkpoint = (dir / "run" / "checkpoint.json").string();
  o.out = (dir / "s.jsonl").string();
  o.times = "0.125,1.25";
  o.count = 2;
  o.n = 10;
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  auto series = io::read_series(o.out);
  ASSERT_EQ(series.size(), 2u);
  for (const auto& s : series) {
    EXPECT_EQ(s.times, (std::vector<double>{0.125, 1.25}));
    ASSERT_EQ(s.sets.size(), 2u);
    EXPECT_EQ(s.sets[1].shape(), (Shape{10, 2}));
  }
  o.times = "";
  ASSERT_EQ(cmd_sample(o, q.ctx), 0);
  EXPECT_EQ(io::read_series(o.out)[0].times, (std::vector<double>{0, 0.25, 0.5, 0.75, 1}));
}

TEST(Sample, BadFlagsExitTwo) {
  auto cd = scratch("sample_flags"), kd = scratch("sample_flags_cls");
  ASSERT_EQ(train(tiny_cnf(), cd), 0);
  ASSERT_EQ(train(tiny_classify(), kd), 0);
  const std::string ck = (cd / "run" / "checkpoint.json").string();
  Quiet q;
  testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_sample({ck, (cd / "x.jsonl").string(), 0, 0, "", 0}, q.ctx), 2);
  EXPECT_EQ(cmd_sample({ck, (cd / "x.jsonl").string(), -4, 1, "", 0}, q.ctx), 2);
  EXPECT_EQ(cmd_sample({ck, (cd / "x.jsonl").string(), 0, 1, "0.5", 0}, q.ctx), 2);
  EXPECT_EQ(cmd_sample({(kd / "run" / "checkpoint.json").string(), (cd / "x.jsonl").string(), 0, 1, "", 0}, q.ctx), 2);
  testing::internal::GetCapturedStderr();
  EXPECT_THROW(parse_times("0.5,abc"), UsageError);
  EXPECT_EQ(parse_times("-1,0.125,2e0"), (std::vector<double>{-1, 0.125, 2}));
}

TEST(Check, SuitesPassAndWriteJson) {
  auto dir = scratch("check");
  for (const char* s : {"trace", "gradients"}) {
    Quiet q;
    const std::string out = (dir / (std::string(s) + ".json")).string();
    EXPECT_EQ(cmd_check({s, false, 0, out}, q.ctx), 0) << q.log.str();
    Json r = Json::parse(slurp(out));
    EXPECT_TRUE(r["passed"].get<bool>());
    EXPECT_EQ(r["suites"][0]["suite"], s);
    EXPECT_FALSE(r["suites"][0]["checks"].empty());
  }
}

TEST(Check, SabotageFails) {
  Quiet q;
  EXPECT_EQ(cmd_check({"equivariance", true, 0, ""}, q.ctx), 1);
  Json r = Json::parse(q.out.str());
  EXPECT_FALSE(r["passed"].get<bool>());
  EXPECT_TRUE(r["suites"][0]["sabotage"].get<bool>());
}

TEST(Check, UnknownSuiteExitsTwo) {
  Quiet q;
  testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_check({"symmetry", false, 0, ""}, q.ctx), 2);
  EXPECT_NE(testing::internal::GetCapturedStderr().find("symmetry"), std::string::npos);
}

TEST(Hash, MatchesGitBlobIds) {
  EXPECT_EQ(content_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(content_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Threads, FlagThenEnvironmentThenOne) {
  unsetenv("EXNODE_THREADS");
  EXPECT_EQ(resolve_threads(0), 1);
  setenv("EXNODE_THREADS", "3", 1);
  EXPECT_EQ(resolve_threads(0), 3);
  EXPECT_EQ(resolve_threads(2), 2);
  setenv("EXNODE_THREADS", "many", 1);
  EXPECT_THROW(resolve_threads(0), UsageError);
  unsetenv("EXNODE_THREADS");
}

TEST(Binary, ExitCodes) {
  const std::string bin = EXNODE_BIN;
  auto run = [&](const std::string& args) {
    const int st = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("sample --checkpoint /nonexistent --out x"), 2);
  EXPECT_EQ(run("check nonsense"), 2);
  EXPECT_EQ(run("check trace"), 0);
  EXPECT_EQ(run("--threads 2 check trace --sabotage"), 0);  // trace checks use no equivariant nets
  EXPECT_EQ(run("check invariance --sabotage"), 1);
}
