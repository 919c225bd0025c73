#include "tipslab/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tipslab/config.hpp"
#include "tipslab/ema.hpp"
#include "tipslab/errors.hpp"
#include "tipslab/evalsuite.hpp"
#include "tipslab/synthdata.hpp"
#include "tipslab/trainer.hpp"

namespace tipslab::cli {

namespace fs = std::filesystem;

fs::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string usage() {
  return "usage: tipslab <command> [options]\n"
         "\n"
         "commands:\n"
         "  synth    generate the synthetic shapes dataset\n"
         "  train    pretrain a student (contrastive + self-distillation)\n"
         "  distill  distill a student from a frozen teacher checkpoint\n"
         "  eval     evaluate a run directory\n"
         "  params   print the parameter accounting table\n"
         "  report   compare evaluated run directories\n"
         "\n"
         "run `tipslab <command> --help` for command options\n"
         "environment: " +
         std::string(kRunRootEnv) + " overrides the run root (default: runs)\n";
}

namespace {

struct ConfigArgs {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
};

void add_config_args(CLI::App* app, ConfigArgs& a) {
  app->add_option("-c,--config", a.config, "YAML config file (defaults apply when omitted)");
  app->add_option("--set", a.set, "override, key=value (repeatable)");
}

void add_run_args(CLI::App* app, ConfigArgs& a) {
  app->add_option("--seed", a.seed, "random seed");
  app->add_option("--steps", a.steps, "training steps");
}

trainer::RunConfig load_config(const ConfigArgs& a) {
  auto overrides = a.set;
  if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
  if (a.steps) overrides.push_back("steps=" + std::to_string(*a.steps));
  if (a.config.empty()) return config::parse_config_text("", overrides);
  return config::parse_config(a.config, overrides);
}

trainer::RunConfig load_run_config(const fs::path& run_dir) {
  const auto path = run_dir / "config.yaml";
  if (!fs::exists(path)) throw IoError("run directory has no config.yaml: " + run_dir.string());
  return config::parse_config(path);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    os << '|';
    for (std::size_t i = 0; i < cells.size(); ++i) os << ' ' << std::left << std::setw(static_cast<int>(w[i])) << cells[i] << " |";
    os << '\n';
  };
  line(header);
  os << '|';
  for (auto x : w) os << std::string(x + 2, '-') << '|';
  os << '\n';
  for (const auto& r : rows) line(r);
  return os.str();
}

const char* init_name(trainer::InitSource s) { return s == trainer::InitSource::random ? "random" : "checkpoint"; }

}  // namespace

std::string render_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw ValidationError("report needs at least one run directory");
  std::vector<std::vector<std::string>> distill_rows, pretrain_rows;
  for (const auto& dir : run_dirs) {
    const auto cfg = load_run_config(dir);
    const auto rep = eval::read_report(dir / "eval" / "report.json");
    const std::vector<std::string> metrics = {fmt(rep.zero_shot_miou_without_background),
                                              fmt(rep.zero_shot_miou_with_background),
                                              fmt(rep.probe_miou),
                                              fmt(rep.knn_top1),
                                              fmt(rep.i2t_r1),
                                              fmt(rep.t2i_r1)};
    std::vector<std::string> row;
    if (cfg.mode == trainer::Mode::distill) {
      row = {cfg.name, fmt(cfg.mask_ratio), init_name(cfg.init.student_encoder), init_name(cfg.init.text),
             cfg.init.text_frozen ? "frozen" : "trainable"};
      row.insert(row.end(), metrics.begin(), metrics.end());
      distill_rows.push_back(row);
    } else {
      row = {cfg.name, cfg.patch_objective == trainer::PatchObjective::ibot ? "ibot" : "ibot_pp", fmt(cfg.mask_ratio),
             ema::to_string(cfg.ema.scope)};
      row.insert(row.end(), metrics.begin(), metrics.end());
      pretrain_rows.push_back(row);
    }
  }
  const std::vector<std::string> mh = {"zs_miou", "zs_miou_bg", "probe_miou", "knn_top1", "i2t_r1", "t2i_r1"};
  std::string out;
  if (!pretrain_rows.empty()) {
    std::vector<std::string> h = {"run", "objective", "mask_ratio", "ema_scope"};
    h.insert(h.end(), mh.begin(), mh.end());
    out += "pretraining runs\n\n" + table(h, pretrain_rows);
  }
  if (!distill_rows.empty()) {
    std::vector<std::string> h = {"run", "mask_ratio", "student_init", "text_init", "text"};
    h.insert(h.end(), mh.begin(), mh.end());
    out += (out.empty() ? "" : "\n") + std::string("distillation runs\n\n") + table(h, distill_rows);
  }
  return out;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    err << usage();
    return kExitValidation;
  }
  CLI::App app{"tipslab: desk-scale image-text pretraining with patch-level self-distillation"};
  app.require_subcommand(1);

  ConfigArgs synth_args, train_args, distill_args, params_args;
  std::string synth_out, train_out, distill_out, teacher, resume_train, resume_distill, eval_config, report_out,
      figures_dir;
  std::optional<int> synth_count, synth_canvas;
  std::string eval_dir;
  std::vector<std::string> report_dirs;

  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic shapes dataset");
  add_config_args(synth_cmd, synth_args);
  synth_cmd->add_option("--seed", synth_args.seed, "dataset seed");
  synth_cmd->add_option("--count", synth_count, "number of samples");
  synth_cmd->add_option("--canvas", synth_canvas, "canvas size (32, 64 or 128)");
  synth_cmd->add_option("-o,--out", synth_out, "output directory (default: data.dir)");

  auto* train_cmd = app.add_subcommand("train", "pretrain a student");
  add_config_args(train_cmd, train_args);
  add_run_args(train_cmd, train_args);
  train_cmd->add_option("-o,--out", train_out, "run directory (default: <run root>/<name>)");
  train_cmd->add_option("--resume", resume_train, "checkpoint to resume from");

  auto* distill_cmd = app.add_subcommand("distill", "distill from a frozen teacher");
  add_config_args(distill_cmd, distill_args);
  add_run_args(distill_cmd, distill_args);
  distill_cmd->add_option("--teacher", teacher, "teacher checkpoint (default: teacher_checkpoint)");
  distill_cmd->add_option("-o,--out", distill_out, "run directory (default: <run root>/<name>)");
  distill_cmd->add_option("--resume", resume_distill, "checkpoint to resume from");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a run directory");
  eval_cmd->add_option("run_dir", eval_dir, "run directory")->required();
  eval_cmd->add_option("-c,--config", eval_config, "config to use instead of the run snapshot");

  auto* params_cmd = app.add_subcommand("params", "parameter accounting table");
  add_config_args(params_cmd, params_args);

  auto* report_cmd = app.add_subcommand("report", "compare evaluated runs");
  report_cmd->add_option("run_dirs", report_dirs, "run directories")->required();
  report_cmd->add_option("-o,--out", report_out, "also write the tables to this file");
  report_cmd->add_option("--figures", figures_dir, "write comparison figures to this directory");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << usage();
    return kExitValidation;
  }

  try {
    const auto writer = [](const trainer::RunConfig& c) { return config::serialize_config(c); };
    if (synth_cmd->parsed()) {
      auto overrides = synth_args.set;
      if (synth_args.seed) overrides.push_back("data.seed=" + std::to_string(*synth_args.seed));
      if (synth_count) overrides.push_back("data.count=" + std::to_string(*synth_count));
      if (synth_canvas) overrides.push_back("data.canvas=" + std::to_string(*synth_canvas));
      ConfigArgs a{synth_args.config, overrides, std::nullopt, std::nullopt};
      const auto cfg = load_config(a);
      const fs::path dir = synth_out.empty() ? fs::path(cfg.data.dir) : fs::path(synth_out);
      const auto m = synth::generate_dataset(cfg.data.count, cfg.data.canvas, cfg.data.seed, dir);
      out << "wrote " << m.samples.size() << " samples to " << dir.string() << '\n';
    } else if (train_cmd->parsed()) {
      const auto cfg = load_config(train_args);
      if (cfg.mode != trainer::Mode::pretrain) throw ValidationError("mode: `train` requires mode = pretrain");
      const fs::path dir = train_out.empty() ? run_root() / cfg.name : fs::path(train_out);
      trainer::RunOptions opts;
      if (!resume_train.empty()) opts.resume = resume_train;
      const auto r = trainer::run_pretraining(cfg, dir, writer, opts);
      out << "final checkpoint " << r.final_checkpoint.string() << '\n';
    } else if (distill_cmd->parsed()) {
      auto cfg = load_config(distill_args);
      if (cfg.mode != trainer::Mode::distill) throw ValidationError("mode: `distill` requires mode = distill");
      const fs::path tck = teacher.empty() ? fs::path(cfg.teacher_checkpoint) : fs::path(teacher);
      if (tck.empty()) throw ValidationError("teacher_checkpoint: required (or pass --teacher)");
      if (cfg.init.text_frozen && cfg.init.text == trainer::InitSource::random) {
        err << "warning: frozen text tower with random initialization\n";
      }
      const fs::path dir = distill_out.empty() ? run_root() / cfg.name : fs::path(distill_out);
      trainer::RunOptions opts;
      if (!resume_distill.empty()) opts.resume = resume_distill;
      const auto r = trainer::run_distillation(cfg, tck, dir, writer, opts);
      out << "final checkpoint " << r.final_checkpoint.string() << '\n';
    } else if (eval_cmd->parsed()) {
      const fs::path dir = eval_dir;
      const auto cfg = eval_config.empty() ? load_run_config(dir) : config::parse_config(eval_config);
      if (!fs::exists(fs::path(cfg.data.dir) / "manifest.json")) {
        throw IoError("dataset manifest not found under '" + cfg.data.dir + "'");
      }
      const auto ds = synth::load_dataset(cfg.data.dir);
      const auto rep = eval::evaluate_run(dir, cfg, ds);
      out << rep.to_json().dump(2) << '\n';
    } else if (params_cmd->parsed()) {
      const auto cfg = load_config(params_args);
      const auto count = ema::count_trainable_params(cfg.resolved_model(), cfg.ema, cfg.init.text_frozen);
      out << ema::format_param_table(count);
    } else if (report_cmd->parsed()) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto text = render_report(dirs);
      out << text;
      if (!report_out.empty()) std::ofstream(report_out, std::ios::trunc) << text;
      if (!figures_dir.empty()) {
        fs::create_directories(figures_dir);
        std::vector<eval::PatchLossCurve> curves;
        for (const auto& d : dirs) {
          if (fs::exists(d / "metrics.jsonl")) {
            curves.push_back(eval::read_patch_loss_curve(d / "metrics.jsonl", load_run_config(d).name));
          }
        }
        eval::write_patch_loss_svg(curves, fs::path(figures_dir) / "patch_loss.svg");
      }
    }
    return kExitOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace tipslab::cli
