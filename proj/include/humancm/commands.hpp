#pragma once

// Subcommand implementations behind the `humancm` tool. Each cmd_* function
// validates all of its inputs before writing anything and reports failures by
// exception; run_guarded() maps those onto process exit codes.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "humancm/formats.hpp"
#include "humancm/sampling.hpp"

namespace humancm {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // I/O and anything unexpected
  kExitConfig = 2,
  kExitArtifact = 3,
  kExitNumerical = 4,
};

template <class Fn>
int run_guarded(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    fn();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArtifactMismatch& e) {
    err << "artifact mismatch: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg = parse_run_config(io::read_file(path));
  cfg.validate();
  return cfg;
}

/// Dataset records split per `cfg`, after checking they have the configured shape.
inline DatasetSplit load_split(const std::string& path, const RunConfig& cfg) {
  auto all = read_dataset(path);
  for (const auto& t : all)
    if (t.joints() != cfg.data.joints || t.history_frames() != cfg.data.history ||
        t.future_frames() != cfg.data.future)
      throw ArtifactMismatch(path + ": record shape (J, H, F) differs from the configuration");
  return split_dataset(std::move(all), cfg.n_test);
}

inline void write_loss_csv(const std::string& path, const TrainHistory& history) {
  std::string out = "epoch,lr,loss\n";
  char line[96];
  for (const auto& e : history.epochs) {
    std::snprintf(line, sizeof line, "%d,%.10g,%.17g\n", e.epoch, e.lr, e.loss);
    out += line;
  }
  io::write_file(path, out);
}

inline std::string default_loss_csv(const std::string& checkpoint) { return checkpoint + ".loss.csv"; }
inline std::string sample_meta_path(const std::string& samples) { return samples + ".meta.json"; }

// ---- gen-data ---------------------------------------------------------------

struct GenDataOptions {
  std::string config;
  std::string out;
};

inline void cmd_gen_data(const GenDataOptions& o, std::ostream& log = std::cout) {
  const RunConfig cfg = load_run_config(o.config);
  const auto total = static_cast<std::uint64_t>(cfg.data.n_sequences) + static_cast<std::uint64_t>(cfg.n_test);
  const auto tasks = generate_synthetic_dataset(cfg.data, 0, total);
  io::write_file(o.out, encode_dataset_file(tasks));
  log << "records=" << tasks.size() << " train=" << cfg.data.n_sequences << " test=" << cfg.n_test << "\n";
}

// ---- train-teacher ----------------------------------------------------------

struct TrainOptions {
  std::string config;
  std::string data;
  std::string out;
  std::string teacher;   // distill only
  std::string loss_csv;  // defaults to <out>.loss.csv
};

inline void cmd_train_teacher(const TrainOptions& o, std::ostream& log = std::cout) {
  const RunConfig cfg = load_run_config(o.config);
  const DatasetSplit split = load_split(o.data, cfg);
  Checkpoint ck;
  ck.kind = CheckpointKind::Teacher;
  ck.config = cfg;
  ck.codec = fit_latent_codec(split.train, cfg.keep);
  const LatentDataset data = encode_dataset(ck.codec, split.train);
  TeacherResult res = train_teacher(data, cfg.schedule(), cfg.arch(), cfg.teacher_config());
  ck.epoch = static_cast<int>(res.history.epochs.size());
  ck.online = std::move(res.params);
  ck.target = ck.online;
  save_checkpoint(o.out, ck);
  write_loss_csv(o.loss_csv.empty() ? default_loss_csv(o.out) : o.loss_csv, res.history);
  log << "teacher epochs=" << ck.epoch << " initial_loss=" << res.history.initial_loss
      << " final_loss=" << res.history.epochs.back().loss << "\n";
}

// ---- distill ----------------------------------------------------------------

/// Throws ArtifactMismatch unless `teacher` was trained for the data shape,
/// latent size, noise schedule and network structure that `cfg` describes.
inline void check_teacher_compatible(const Checkpoint& teacher, const RunConfig& cfg) {
  if (teacher.kind != CheckpointKind::Teacher) throw ArtifactMismatch("expected a teacher checkpoint");
  const RunConfig& t = teacher.config;
  if (t.data.joints != cfg.data.joints || t.data.history != cfg.data.history || t.data.future != cfg.data.future ||
      t.keep != cfg.keep)
    throw ArtifactMismatch("teacher was trained on a different motion or latent shape");
  if (t.schedule_steps != cfg.schedule_steps || t.beta_min != cfg.beta_min || t.beta_max != cfg.beta_max)
    throw ArtifactMismatch("teacher uses a different noise schedule");
  if (!same_structure(t.arch(), cfg.arch())) throw ArtifactMismatch("teacher and student architectures differ");
}

inline void cmd_distill(const TrainOptions& o, std::ostream& log = std::cout) {
  const RunConfig cfg = load_run_config(o.config);
  const Checkpoint teacher = load_checkpoint(o.teacher);
  check_teacher_compatible(teacher, cfg);
  const DatasetSplit split = load_split(o.data, cfg);
  Checkpoint ck;
  ck.kind = CheckpointKind::Student;
  ck.config = cfg;
  ck.codec = teacher.codec;
  const LatentDataset data = encode_dataset(ck.codec, split.train);
  StudentResult res = train_consistency(data, teacher.online, cfg.arch(), cfg.consistency_config(), cfg.schedule());
  ck.epoch = static_cast<int>(res.history.epochs.size());
  ck.online = std::move(res.params.online);
  ck.target = std::move(res.params.target);
  save_checkpoint(o.out, ck);
  write_loss_csv(o.loss_csv.empty() ? default_loss_csv(o.out) : o.loss_csv, res.history);
  log << "student epochs=" << ck.epoch << " first_epoch_loss=" << res.history.initial_loss
      << " final_loss=" << res.history.epochs.back().loss << "\n";
}

// ---- sample -----------------------------------------------------------------

struct SampleOptions {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::optional<int> samples;  // K, defaults to eval.samples
  std::optional<int> steps;    // teacher only, defaults to eval.teacher_steps
  std::optional<std::uint64_t> seed;
};

struct SampleRun {
  std::string model;
  int steps = 0;
  std::size_t k = 0;
  std::vector<PredictionTask> test;
  Checkpoint checkpoint;
  NoiseSchedule schedule;
  ConsistencyConfig consistency;
  std::uint64_t seed = 0;

  /// The returned closure refers to this run and must not outlive it.
  Sampler sampler() const {
    if (checkpoint.kind == CheckpointKind::Teacher)
      return make_teacher_sampler(checkpoint.online, checkpoint.codec, test, schedule, steps, k, seed);
    return make_student_sampler(student, checkpoint.codec, test, schedule, consistency, k, seed);
  }

  StudentParams student;
};

inline void prepare_sample_run(SampleRun& run, const std::string& checkpoint, const std::string& data,
                               std::optional<int> samples, std::optional<int> steps,
                               std::optional<std::uint64_t> seed) {
  run.checkpoint = load_checkpoint(checkpoint);
  const RunConfig& cfg = run.checkpoint.config;
  const bool teacher = run.checkpoint.kind == CheckpointKind::Teacher;
  run.model = kind_name(run.checkpoint.kind);
  if (!teacher && steps && *steps != 1)
    throw ArtifactMismatch("--steps applies to teacher checkpoints; a student samples in one step");
  run.steps = teacher ? steps.value_or(cfg.eval.teacher_steps) : 1;
  if (run.steps < 1 || run.steps > cfg.schedule_steps)
    throw ConfigError("steps must be in [1, " + std::to_string(cfg.schedule_steps) + "]");
  const int k = samples.value_or(cfg.eval.samples);
  if (k < 1) throw ConfigError("samples must be >= 1");
  run.k = static_cast<std::size_t>(k);
  run.seed = seed.value_or(cfg.eval.seed);
  run.schedule = cfg.schedule();
  run.consistency = cfg.consistency_config();
  if (!teacher) run.student = run.checkpoint.student();
  run.test = load_split(data, cfg).test;
}

inline void cmd_sample(const SampleOptions& o, std::ostream& log = std::cout) {
  SampleRun run;
  prepare_sample_run(run, o.checkpoint, o.data, o.samples, o.steps, o.seed);
  const Sampler sampler = run.sampler();
  std::vector<std::vector<Matrix>> out;
  std::int64_t evals = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < run.test.size(); ++i) out.push_back(sampler(i, evals));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_file(o.out, encode_samples_file(out, run.checkpoint.config.data.joints));
  nlohmann::ordered_json meta;
  meta["model"] = run.model;
  meta["steps"] = run.steps;
  meta["samples"] = run.k;
  meta["items"] = run.test.size();
  meta["network_evals"] = evals;
  meta["wall_seconds"] = seconds;
  io::write_file(sample_meta_path(o.out), meta.dump(2) + "\n");
  log << run.model << " steps=" << run.steps << " samples=" << run.k << " items=" << run.test.size()
      << " network_evals=" << evals << "\n";
}

// ---- eval -------------------------------------------------------------------

struct EvalOptions {
  std::string samples;
  std::string data;
  std::string out;  // metrics JSON
  std::string csv;  // optional CSV row
  double threshold = 0.5;
};

inline nlohmann::ordered_json report_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["ade"] = r.ade;
  j["fde"] = r.fde;
  j["mmade"] = r.mmade;
  j["mmfde"] = r.mmfde;
  j["samples"] = r.samples;
  j["network_evals"] = r.network_evals;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

inline std::string report_csv(const MetricReport& r) {
  char row[256];
  std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%lld,%lld,%.17g\n", r.ade, r.fde, r.mmade, r.mmfde,
                static_cast<long long>(r.samples), static_cast<long long>(r.network_evals), r.wall_seconds);
  return std::string("ade,fde,mmade,mmfde,samples,network_evals,wall_seconds\n") + row;
}

/// Test items are the last records of the dataset, one per sample parent.
inline MetricReport evaluate_sample_file(const std::string& samples_path, const std::string& data_path,
                                         double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("threshold must be > 0");
  int joints = 0;
  const auto samples = read_samples(samples_path, &joints);
  auto all = read_dataset(data_path);
  if (samples.size() >= all.size())
    throw ArtifactMismatch(samples_path + ": " + std::to_string(samples.size()) +
                           " sampled items but the dataset has only " + std::to_string(all.size()) + " records");
  const auto test = split_dataset(std::move(all), static_cast<int>(samples.size())).test;
  for (std::size_t i = 0; i < test.size(); ++i)
    for (const auto& s : samples[i])
      if (s.rows() != test[i].future_frames() || test[i].joints() != joints)
        throw ArtifactMismatch(samples_path + ": sample shape differs from test item " + std::to_string(i));
  MetricReport r = evaluate(test, samples, threshold);
  if (std::filesystem::exists(sample_meta_path(samples_path))) {
    const auto meta = nlohmann::json::parse(io::read_file(sample_meta_path(samples_path)));
    r.network_evals = meta.at("network_evals").get<std::int64_t>();
    r.wall_seconds = meta.at("wall_seconds").get<double>();
  }
  return r;
}

inline void cmd_eval(const EvalOptions& o, std::ostream& log = std::cout) {
  const MetricReport r = evaluate_sample_file(o.samples, o.data, o.threshold);
  io::write_file(o.out, report_json(r).dump(2) + "\n");
  if (!o.csv.empty()) io::write_file(o.csv, report_csv(r));
  log << "ade=" << r.ade << " fde=" << r.fde << " mmade=" << r.mmade << " mmfde=" << r.mmfde << "\n";
}

// ---- bench ------------------------------------------------------------------

struct BenchOptions {
  std::string teacher;
  std::string student;
  std::string data;
  std::string out;
  std::optional<int> samples;
  std::optional<int> repetitions;
  std::vector<int> teacher_steps{10, 100};
};

struct BenchRow {
  std::string model;
  int steps = 0;
  MetricReport report;
};

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "model,steps,network_evals,wall_seconds_median,ade\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%d,%lld,%.9g,%.17g\n", r.model.c_str(), r.steps,
                  static_cast<long long>(r.report.network_evals), r.report.wall_seconds, r.report.ade);
    out += line;
  }
  return out;
}

inline std::vector<BenchRow> run_bench(const BenchOptions& o) {
  SampleRun student;
  prepare_sample_run(student, o.student, o.data, o.samples, std::nullopt, std::nullopt);
  if (student.checkpoint.kind != CheckpointKind::Student)
    throw ArtifactMismatch(o.student + ": expected a student checkpoint");
  const Checkpoint teacher_ck = load_checkpoint(o.teacher);
  check_teacher_compatible(teacher_ck, student.checkpoint.config);
  const RunConfig& cfg = student.checkpoint.config;
  const int reps = o.repetitions.value_or(cfg.eval.repetitions);
  if (reps < 1) throw ConfigError("repetitions must be >= 1");

  std::vector<BenchRow> rows;
  for (int steps : o.teacher_steps) {
    SampleRun teacher;
    teacher.checkpoint = teacher_ck;
    teacher.model = "teacher";
    if (steps < 1 || steps > teacher_ck.config.schedule_steps) throw ConfigError("teacher steps out of range");
    teacher.steps = steps;
    teacher.k = student.k;
    teacher.seed = student.seed;
    teacher.schedule = teacher_ck.config.schedule();
    teacher.test = student.test;
    rows.push_back({"teacher", steps, bench(teacher.sampler(), teacher.test, reps, cfg.eval.threshold)});
  }
  rows.push_back({"student", 1, bench(student.sampler(), student.test, reps, cfg.eval.threshold)});
  return rows;
}

inline void cmd_bench(const BenchOptions& o, std::ostream& log = std::cout) {
  const auto rows = run_bench(o);
  const std::string csv = bench_csv(rows);
  io::write_file(o.out, csv);
  log << csv;
}

}  // namespace humancm
