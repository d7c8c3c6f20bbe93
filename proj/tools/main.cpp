#include <CLI11.hpp>
#include <iostream>

#include "commands.hpp"

using namespace t3::cli;

int main(int argc, char** argv) {
  CLI::App app{"t3: transferable tactile transformers at desk scale"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic multi-sensor dataset");
  s->add_option("--styles", synth.styles, "Number of sensor styles");
  s->add_option("--per-pairing", synth.per_pairing, "Training records per (sensor, task) pairing");
  s->add_option("--val-per-pairing", synth.val_per_pairing, "Validation records per pairing");
  s->add_option("--tasks", synth.tasks, "Comma-separated tasks: object_cls, pose3, vol, unlabeled")->delimiter(',');
  s->add_option("--seed", synth.seed);
  s->add_option("--out", synth.out)->required();

  TrainArgs train;
  std::vector<CLI::App*> stages;
  for (const char* name : {"pretrain1", "pretrain2", "finetune"}) {
    auto* t = app.add_subcommand(name, std::string("Run the ") + name + " stage");
    t->add_option("--config", train.config_path, "JSON config (TrainConfig fields plus data/out/...)");
    t->add_option("--data", train.data, "Dataset directory written by synth");
    t->add_option("--out", train.out, "Run directory");
    t->add_option("--init", train.init, "Start from this checkpoint's weights");
    t->add_option("--resume", train.resume, "Continue a run from its checkpoint");
    t->add_option("--donor-group", train.donor_group, "Route unseen sensors through this encoder group");
    t->add_option("--sensor", train.sensor);
    t->add_option("--task", train.task);
    t->add_option("--freeze", train.freeze, "none | trunk | encoders");
    t->add_option("--size", train.size, "nano | tiny | small | medium | large");
    t->add_option("--weighting", train.weighting, "proportional | uniform | temperature:TAU");
    t->add_option("--steps", train.steps);
    t->add_option("--batch-size", train.batch_size);
    t->add_option("--warmup-steps", train.warmup_steps);
    t->add_option("--eval-every", train.eval_every);
    t->add_option("--checkpoint-every", train.checkpoint_every);
    t->add_option("--limit", train.limit, "Cap on training records per pairing");
    t->add_option("--lr", train.lr);
    t->add_option("--weight-decay", train.weight_decay);
    t->add_option("--mask-ratio", train.mask_ratio);
    t->add_option("--seed", train.seed);
    t->add_flag("--no-augment", train.no_augment);
    stages.push_back(t);
  }

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one task");
  e->add_option("--ckpt", eval.ckpt)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--task", eval.task)->required();
  e->add_option("--sensor", eval.sensor);
  e->add_option("--donor-group", eval.donor_group, "Zero-shot: route unseen sensors through this group");
  e->add_option("--split", eval.split, "val | train");
  e->add_option("--limit", eval.limit);
  e->add_flag("--baseline", eval.baseline, "Also print the dataset-average RMSE");

  AttnvizArgs viz;
  auto* v = app.add_subcommand("attnviz", "Export joint attention masks for one image");
  v->add_option("--ckpt", viz.ckpt)->required();
  v->add_option("--image", viz.image, "JPEG image")->required();
  v->add_option("--sensor", viz.sensor)->required();
  v->add_option("--out", viz.out)->required();

  SweepArgs sweep;
  auto* m = app.add_subcommand("mask-sweep", "Masking-ratio sweep at nano scale");
  m->add_option("--ratios", sweep.ratios)->delimiter(',');
  m->add_option("--steps", sweep.steps, "Reconstruction steps per ratio");
  m->add_option("--finetune-steps", sweep.finetune_steps);
  m->add_option("--batch-size", sweep.batch_size);
  m->add_option("--per-pairing", sweep.per_pairing, "Synthetic records per pairing when --data is absent");
  m->add_option("--seed", sweep.seed);
  m->add_option("--data", sweep.data);
  m->add_option("--out", sweep.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kConfigError;
  }

  if (s->parsed()) return guarded(synth.out, [&] { return cmd_synth(synth); });
  for (auto* t : stages) {
    if (!t->parsed()) continue;
    train.stage = t->get_name();
    return guarded(train.out.value_or(""), [&] { return cmd_train(train); });
  }
  if (e->parsed()) return guarded("", [&] { return cmd_eval(eval); });
  if (v->parsed()) return guarded(viz.out, [&] { return cmd_attnviz(viz); });
  if (m->parsed()) return guarded(sweep.out, [&] { return cmd_mask_sweep(sweep); });
  return kConfigError;
}
