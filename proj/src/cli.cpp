#include "armformer/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "armformer/config.hpp"
#include "armformer/datapipe.hpp"
#include "armformer/errors.hpp"
#include "armformer/gradsuite.hpp"
#include "armformer/metrics.hpp"
#include "armformer/model.hpp"
#include "armformer/ops.hpp"
#include "armformer/profiler.hpp"

namespace armformer::cli {

namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw IoError(what + " '" + path + "' does not exist or is not a file");
}

void require_dir(const std::string& path, const std::string& what) {
  if (!fs::is_directory(path)) throw IoError(what + " '" + path + "' does not exist or is not a directory");
}

void require_parent(const std::string& path, const std::string& what) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent))
    throw IoError(what + " directory '" + parent.string() + "' does not exist");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct SynthArgs {
  std::string out;
  std::int64_t n = 100;
  std::int64_t size = 64;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.n <= 0) throw ConfigError("--n must be positive");
  if (fs::exists(a.out) && !fs::is_directory(a.out)) throw IoError("output '" + a.out + "' exists and is not a directory");
  auto samples = synth_dataset(a.seed, a.n, a.size);
  const auto split = default_split(a.n);
  write_dataset(DatasetLayout{a.out}, samples, split);
  out << "wrote " << a.n << " samples (" << split.train << " train, " << split.val << " val, " << split.test
      << " test) of " << a.size << "x" << a.size << " to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, out, log;
  std::optional<std::int64_t> steps;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  require_file(a.config, "config");
  require_dir(a.data, "dataset");
  require_parent(a.out, "checkpoint");
  const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
  require_parent(log_path, "log");

  auto cfg = load_run_config_file(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();

  const DatasetLayout layout{a.data};
  const std::int64_t size = cfg.model.input_size;
  auto train = load_split(layout, "train", size);
  std::vector<Sample> val;
  if (fs::exists(layout.split_path("val")) && !read_split(layout, "val").empty()) val = load_split(layout, "val", size);

  auto model = Model::create(cfg.model);
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot open log '" + log_path + "' for writing");
  log << "# steps=" << cfg.train.steps << " batch=" << cfg.train.batch_size << " lr=" << cfg.train.learning_rate
      << " wd=" << cfg.train.weight_decay << " seed=" << cfg.train.seed << " train=" << train.size()
      << " val=" << val.size() << "\n";

  EvalHook hook;
  if (!val.empty()) hook = [&](const Model& m) { return evaluate_summary(m, val); };
  const std::int64_t every = std::max<std::int64_t>(1, cfg.train.steps / 10);
  auto history = fit(model, train, cfg.train, hook, [&](const HistoryEntry& e) {
    log << "step=" << e.step << " loss=" << fmt("%.17g", e.loss);
    if (e.eval) log << " val_pixel_acc=" << fmt("%.17g", e.eval->pixel_accuracy) << " val_miou=" << fmt("%.17g", e.eval->mean_iou);
    log << "\n";
    if (e.step % every == 0 || e.step == cfg.train.steps || e.eval) {
      out << "step " << e.step << " loss " << fmt("%.6f", e.loss);
      if (e.eval) out << " val pixel_acc " << fmt("%.4f", e.eval->pixel_accuracy) << " miou " << fmt("%.4f", e.eval->mean_iou);
      out << "\n";
    }
  });
  if (!log) throw IoError("write failed for log '" + log_path + "'");

  write_file_bytes(a.out, checkpoint_save(model));
  const auto train_eval = evaluate_summary(model, train);
  out << "train pixel_acc " << fmt("%.4f", train_eval.pixel_accuracy) << " miou " << fmt("%.4f", train_eval.mean_iou)
      << "\n";
  out << "wrote checkpoint " << a.out << " and history " << log_path << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt, data, split = "test", format = "table";
  bool no_background = false;
  std::int64_t batch = 8;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.ckpt, "checkpoint");
  require_dir(a.data, "dataset");
  const DatasetLayout layout{a.data};
  require_file(layout.split_path(a.split), "split file");
  auto model = checkpoint_load(read_file_bytes(a.ckpt));
  DecodeStats stats;
  auto samples = load_split(layout, a.split, model.config().input_size, &stats);
  auto cm = evaluate_confusion(model, samples, a.batch);
  auto report = compute_metrics(cm, !a.no_background);
  if (a.format == "kv") {
    out << "split=" << a.split << "\nsamples=" << samples.size() << "\npixel_accuracy=" << fmt("%.10g", pixel_accuracy(cm))
        << "\n"
        << format_metric_keyvalues(report);
  } else {
    out << "split " << a.split << ", " << samples.size() << " samples, " << cm.total() << " pixels\n";
    out << format_metric_table(report);
    out << "pixel accuracy " << fmt("%.4f", pixel_accuracy(cm)) << "\n";
  }
  if (stats.off_palette > 0) out << "warning: " << stats.off_palette << " off-palette mask pixels decoded to nearest class\n";
  return kExitOk;
}

struct InferArgs {
  std::string ckpt, image, out;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  require_file(a.ckpt, "checkpoint");
  require_file(a.image, "image");
  require_parent(a.out, "output");
  auto model = checkpoint_load(read_file_bytes(a.ckpt));
  auto raster = read_ppm(a.image);
  const std::int64_t s = model.config().input_size;
  Tensor image;
  {
    NoGradGuard guard;
    image = reshape(raster_to_tensor(raster), {1, 3, raster.height, raster.width});
    if (raster.height != s || raster.width != s) image = bilinear_resize(image, s, s);
  }
  auto labels = model.predict(image);
  auto bytes = encode_mask(labels);
  if (raster.height != s || raster.width != s) bytes = resize_nearest(bytes, s, s, raster.height, raster.width);
  write_pgm(a.out, Raster{raster.width, raster.height, 1, std::move(bytes)});
  out << "wrote " << raster.width << "x" << raster.height << " mask to " << a.out << "\n";
  return kExitOk;
}

struct BenchArgs {
  std::string config, ckpt, format = "table";
  std::int64_t size = 0;
  int warmup = 10, iters = 50, depth = 3;
  bool no_speed = false;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  require_file(a.config, "config");
  if (!a.ckpt.empty()) require_file(a.ckpt, "checkpoint");
  auto cfg = load_run_config_file(a.config);
  std::optional<Model> model;
  if (a.ckpt.empty()) {
    model.emplace(Model::create(cfg.model));
  } else {
    model.emplace(checkpoint_load(read_file_bytes(a.ckpt)));
    if (!(model->config() == cfg.model)) throw ConfigError("checkpoint model config differs from '" + a.config + "'");
  }
  const std::int64_t size = a.size > 0 ? a.size : cfg.model.input_size;
  auto complexity = profile_complexity(*model, size, size);
  if (a.format == "kv") {
    out << format_complexity_keyvalues(complexity);
  } else {
    out << format_complexity(group_modules(complexity, a.depth));
  }
  if (!a.no_speed) {
    auto speed = measure_fps(*model, size, size, a.warmup, a.iters);
    out << (a.format == "kv" ? format_speed_keyvalues(speed) : format_speed(speed));
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& level, std::ostream& out) {
  int failures = 0;
  auto entries = run_grad_suite(level == "full" ? GradSuiteLevel::Full : GradSuiteLevel::Quick,
                                [&](const GradSuiteEntry& e) {
                                  failures += e.report.pass ? 0 : 1;
                                  out << (e.report.pass ? "PASS " : "FAIL ") << e.name << " max_rel "
                                      << fmt("%.3e", e.report.max_rel_error) << " (" << fmt("%.2f", e.seconds) << " s)\n";
                                  if (!e.report.pass) out << e.report.summary() << "\n";
                                });
  out << entries.size() - failures << "/" << entries.size() << " gradient checks passed\n";
  if (failures > 0) throw ContractError(std::to_string(failures) + " gradient check(s) failed");
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ArmFormer segmentation toolkit", "armformer"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  c_synth->add_option("--out", synth.out, "Dataset root")->required();
  c_synth->add_option("--n", synth.n, "Number of samples");
  c_synth->add_option("--size", synth.size, "Image side (multiple of 32)");
  c_synth->add_option("--seed", synth.seed, "Generator seed");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  c_train->add_option("--config", train.config, "Run config file")->required();
  c_train->add_option("--data", train.data, "Dataset root")->required();
  c_train->add_option("--out", train.out, "Checkpoint path")->required();
  c_train->add_option("--log", train.log, "History log (default <out>.log)");
  c_train->add_option("--steps", train.steps, "Override train.steps");
  c_train->add_option("--seed", train.seed, "Override train.seed");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  c_eval->add_option("--ckpt", eval.ckpt, "Checkpoint path")->required();
  c_eval->add_option("--data", eval.data, "Dataset root")->required();
  c_eval->add_option("--split", eval.split, "train, val or test");
  c_eval->add_flag("--no-background", eval.no_background, "Exclude background from the means");
  c_eval->add_option("--format", eval.format, "table or kv")->check(CLI::IsMember({"table", "kv"}));
  c_eval->add_option("--batch", eval.batch, "Images per forward")->check(CLI::PositiveNumber);

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Predict a palette mask for one image");
  c_infer->add_option("--ckpt", infer.ckpt, "Checkpoint path")->required();
  c_infer->add_option("--image", infer.image, "Input PPM")->required();
  c_infer->add_option("--out", infer.out, "Output PGM")->required();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Parameter, FLOP and speed report");
  c_bench->add_option("--config", bench.config, "Run config file")->required();
  c_bench->add_option("--ckpt", bench.ckpt, "Checkpoint to load instead of fresh weights");
  c_bench->add_option("--size", bench.size, "Input side (default model.input_size)");
  c_bench->add_option("--warmup", bench.warmup, "Discarded forwards");
  c_bench->add_option("--iters", bench.iters, "Timed forwards (>= 10)");
  c_bench->add_option("--depth", bench.depth, "Module name depth for the table")->check(CLI::PositiveNumber);
  c_bench->add_option("--format", bench.format, "table or kv")->check(CLI::IsMember({"table", "kv"}));
  c_bench->add_flag("--no-speed", bench.no_speed, "Skip the timing run");

  std::string level = "quick";
  auto* c_grad = app.add_subcommand("gradcheck", "Run the gradient-check suite");
  c_grad->add_option("--level", level, "quick or full")->check(CLI::IsMember({"quick", "full"}));

  if (args.empty()) {
    err << app.help();
    return kExitUsage;
  }
  std::vector<const char*> argv{"armformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (c_synth->parsed()) return cmd_synth(synth, out);
    if (c_train->parsed()) return cmd_train(train, out);
    if (c_eval->parsed()) return cmd_eval(eval, out);
    if (c_infer->parsed()) return cmd_infer(infer, out);
    if (c_bench->parsed()) return cmd_bench(bench, out);
    if (c_grad->parsed()) return cmd_gradcheck(level, out);
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const LoadError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  err << app.help();
  return kExitUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace armformer::cli
