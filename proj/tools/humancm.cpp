// humancm: synthetic data, teacher training, consistency distillation,
// sampling, evaluation and benchmarking from the command line.

#include <CLI11.hpp>

#include "humancm/commands.hpp"

int main(int argc, char** argv) {
  using namespace humancm;
  CLI::App app{"One-step stochastic motion prediction by consistency distillation"};
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic train+test dataset");
  gen_cmd->add_option("--config", gen.config, "Run configuration file")->required();
  gen_cmd->add_option("--out", gen.out, "Dataset file to write")->required();

  TrainOptions teach;
  auto* teach_cmd = app.add_subcommand("train-teacher", "Train the diffusion teacher");
  teach_cmd->add_option("--config", teach.config)->required();
  teach_cmd->add_option("--data", teach.data)->required();
  teach_cmd->add_option("--out", teach.out, "Teacher checkpoint")->required();
  teach_cmd->add_option("--loss-csv", teach.loss_csv, "Per-epoch loss CSV (default <out>.loss.csv)");

  TrainOptions dist;
  auto* dist_cmd = app.add_subcommand("distill", "Distill a one-step consistency student");
  dist_cmd->add_option("--config", dist.config)->required();
  dist_cmd->add_option("--data", dist.data)->required();
  dist_cmd->add_option("--teacher", dist.teacher, "Teacher checkpoint")->required();
  dist_cmd->add_option("--out", dist.out, "Student checkpoint")->required();
  dist_cmd->add_option("--loss-csv", dist.loss_csv, "Per-epoch loss CSV (default <out>.loss.csv)");

  SampleOptions smp;
  auto* smp_cmd = app.add_subcommand("sample", "Draw K futures per test item");
  smp_cmd->add_option("--checkpoint", smp.checkpoint)->required();
  smp_cmd->add_option("--data", smp.data)->required();
  smp_cmd->add_option("--out", smp.out, "Samples file (metadata goes to <out>.meta.json)")->required();
  smp_cmd->add_option("--samples,-k", smp.samples, "K per item");
  smp_cmd->add_option("--steps", smp.steps, "DDIM steps (teacher checkpoints only)");
  smp_cmd->add_option("--seed", smp.seed, "Noise seed");

  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "Score a samples file against the test split");
  ev_cmd->add_option("--samples", ev.samples)->required();
  ev_cmd->add_option("--data", ev.data)->required();
  ev_cmd->add_option("--out", ev.out, "Metrics JSON")->required();
  ev_cmd->add_option("--csv", ev.csv, "Metrics CSV row");
  ev_cmd->add_option("--threshold", ev.threshold, "Multi-modal grouping radius");

  BenchOptions bn;
  auto* bn_cmd = app.add_subcommand("bench", "Time teacher and student sampling in one process");
  bn_cmd->add_option("--teacher", bn.teacher)->required();
  bn_cmd->add_option("--student", bn.student)->required();
  bn_cmd->add_option("--data", bn.data)->required();
  bn_cmd->add_option("--out", bn.out, "Comparison CSV")->required();
  bn_cmd->add_option("--samples,-k", bn.samples, "K per item");
  bn_cmd->add_option("--repetitions", bn.repetitions, "Timed runs per row");
  bn_cmd->add_option("--teacher-steps", bn.teacher_steps, "Teacher step counts")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  return run_guarded([&] {
    if (*gen_cmd) cmd_gen_data(gen);
    else if (*teach_cmd) cmd_train_teacher(teach);
    else if (*dist_cmd) cmd_distill(dist);
    else if (*smp_cmd) cmd_sample(smp);
    else if (*ev_cmd) cmd_eval(ev);
    else if (*bn_cmd) cmd_bench(bn);
  });
}
