#include <iostream>

#include <CLI11.hpp>

#include "exnode/cli.hpp"

using namespace exnode::cli;

int main(int argc, char** argv) {
  CLI::App app{"exnode: equivariant neural ODEs on sets"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default EXNODE_THREADS or 1)")->check(CLI::NonNegativeNumber);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "train a model from a JSON config");
  t->add_option("--config", train.config, "run config")->required()->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "output directory (overrides the config)");
  t->add_option("--seeds", train.seeds, "number of seeds; writes summary.json when > 1")->check(CLI::PositiveNumber);

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  e->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "JSON-lines file or dataset.json manifest")->required()->check(CLI::ExistingFile);
  e->add_option("--split", ev.split, "manifest split");
  e->add_option("--out", ev.out, "metrics file");
  e->add_option("--seed", ev.seed, "probe seed for stochastic traces");

  SampleOptions sm;
  auto* s = app.add_subcommand("sample", "draw sets or series from a trained checkpoint");
  s->add_option("--checkpoint", sm.checkpoint)->required()->check(CLI::ExistingFile);
  s->add_option("--out", sm.out, "JSON-lines output")->required();
  s->add_option("--n", sm.n, "points per set");
  s->add_option("--count", sm.count, "sets or series to draw");
  s->add_option("--times", sm.times, "tvae: comma-separated times");
  s->add_option("--seed", sm.seed);

  CheckCliOptions ck;
  auto* c = app.add_subcommand("check", "run a property suite");
  c->add_option("suite", ck.suite, "equivariance, invariance, invertibility, gradients, trace or all")->required();
  c->add_flag("--sabotage", ck.sabotage, "add element-index features to every net");
  c->add_option("--seed", ck.seed);
  c->add_option("--out", ck.out, "JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(kUsage);
  }

  Context ctx;
  try {
    ctx.threads = resolve_threads(threads);
  } catch (const std::exception& err) {
    std::cerr << "exnode: error: " << err.what() << '\n';
    return kUsage;
  }
  if (*t) return cmd_train(train, ctx);
  if (*e) return cmd_eval(ev, ctx);
  if (*s) return cmd_sample(sm, ctx);
  return cmd_check(ck, ctx);
}
