// dran: synth / train / eval / ablate / diagnose / export-relations.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

using namespace dran::cli;

void add_train_options(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--config", a.config, "JSON file with config fields");
  sub->add_option("--preset", a.preset, "dataset preset (weather, nycbike1, ..., pems08)");
  sub->add_option("--data", a.data, "panel CSV (timestamp,node_id,f0,...)");
  sub->add_option("--seeds", a.seeds, "seed list: 31..35 or 31,32")->capture_default_str();
  sub->add_option("--manifest", a.manifest, "re-run a manifest.json");
  sub->add_option("--split", a.split, "train,val,test fractions")->capture_default_str();
  sub->add_option("--stride", a.stride, "window stride")->capture_default_str();
  sub->add_option("--out", a.out, "output directory")->required();
  sub->add_option("--epochs", a.epochs);
  sub->add_option("--batch", a.batch);
  sub->add_option("--lr", a.lr);
  sub->add_option("--alpha", a.alpha);
  sub->add_option("--beta", a.beta);
  sub->add_option("--clip-norm", a.clip_norm, "gradient max-norm, 0 disables");
  sub->add_flag("-v,--verbose", a.verbose);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatio-temporal forecasting with distribution adaptation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic panel");
  s->add_option("--nodes", synth.params.n_nodes)->required();
  s->add_option("--steps", synth.params.steps)->capture_default_str();
  s->add_option("--seed", synth.params.seed)->capture_default_str();
  s->add_option("--noise", synth.params.noise)->capture_default_str();
  s->add_option("--period", synth.params.period)->capture_default_str();
  s->add_option("--shift", synth.shift, "e.g. mean:5@200,var:2@200,trend:0.01")
      ->capture_default_str();
  s->add_option("--out", synth.out, "output directory")->required();

  TrainArgs train, ablate;
  auto* t = app.add_subcommand("train", "train one variant over seeds");
  add_train_options(t, train);
  t->add_option("--ablate", train.ablate, "variant: full, no_sto, no_sta, no_sfl, no_dsfl, no_gate")
      ->capture_default_str();
  auto* ab = app.add_subcommand("ablate", "train all six variants over seeds");
  add_train_options(ab, ablate);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--split", eval.split)->capture_default_str();
  e->add_option("--on", eval.split_name, "train, val or test")->capture_default_str();
  e->add_option("--stride", eval.stride)->capture_default_str();
  e->add_option("--out", eval.out);

  DiagnoseArgs diag;
  auto* d = app.add_subcommand("diagnose", "KDE densities and shift verdict for one node");
  d->add_option("--data", diag.data)->required();
  d->add_option("--node", diag.node)->required();
  d->add_option("--feature", diag.feature)->capture_default_str();
  d->add_option("--window-a", diag.window_a, "begin:end")->required();
  d->add_option("--window-b", diag.window_b, "begin:end")->required();
  d->add_option("--bandwidth", diag.bandwidth)->capture_default_str();
  d->add_option("--delta", diag.delta)->capture_default_str();
  d->add_option("--out", diag.out)->required();

  ExportArgs ex;
  auto* x = app.add_subcommand("export-relations", "write a_dy / a_st matrices");
  x->add_option("--checkpoint", ex.checkpoint)->required();
  x->add_option("--data", ex.data)->required();
  x->add_option("--split", ex.split)->capture_default_str();
  x->add_option("--on", ex.split_name)->capture_default_str();
  x->add_option("--window", ex.window)->capture_default_str();
  x->add_option("--step", ex.step)->capture_default_str();
  x->add_option("--head", ex.head, "single head instead of the head mean");
  x->add_flag("--raw", ex.raw, "raw Gram matrix for a_st");
  x->add_option("--out", ex.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    if (code == 0) return kOk;
    const auto used = app.get_subcommands();
    std::cerr << '\n' << (used.empty() ? app.help() : used.front()->help());
    return kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*ab) return cmd_ablate(ablate);
    if (*e) return cmd_eval(eval);
    if (*d) return cmd_diagnose(diag);
    if (*x) return cmd_export_relations(ex);
  } catch (const UsageError& err) {
    const auto used = app.get_subcommands();
    std::cerr << "usage error: " << err.what() << "\n\n"
              << (used.empty() ? app.help() : used.front()->help());
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
