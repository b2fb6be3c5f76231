// uora: run adapter ablation grids, count parameters, verify checkpoints.
//
// Exit codes: 0 ok, 2 invalid config or input, 3 divergence during a run,
// 4 checksum mismatch on replay, 1 anything else.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uora/uora.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitChecksum = 4;

int exit_for(uora_status s) {
  switch (s) {
    case UORA_OK: return kExitOk;
    case UORA_ERR_SHAPE:
    case UORA_ERR_CONFIG:
    case UORA_ERR_BOUNDS:
    case UORA_ERR_DECODE:
    case UORA_ERR_VERSION:
    case UORA_ERR_ARGUMENT: return kExitInvalid;
    case UORA_ERR_DIVERGENCE: return kExitDivergence;
    case UORA_ERR_CHECKSUM: return kExitChecksum;
    default: return kExitOther;
  }
}

int report_error(uora_status s, const std::string& context) {
  std::cerr << "uora: " << context << ": " << uora_last_error() << " ["
            << uora_status_name(s) << "]\n";
  return exit_for(s);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

struct RunArgs {
  std::string config;
  std::string out;
  std::string seeds;
  std::vector<std::string> grid;
  std::string format;
  std::string selection;
  std::size_t jobs = 0;
  bool dry_run = false;
};

int cmd_run(RunArgs a) {
  // Grid flags may also come from UORA_GRID, separated by ';'. Command-line
  // flags win for the same key because they are applied last.
  if (const char* env = std::getenv("UORA_GRID")) {
    auto from_env = split(env, ';');
    from_env.insert(from_env.end(), a.grid.begin(), a.grid.end());
    a.grid = std::move(from_env);
  }

  uora_experiment* exp = nullptr;
  if (auto s = uora_experiment_load(a.config.c_str(), &exp); s != UORA_OK) {
    return report_error(s, "invalid config " + a.config);
  }
  struct Guard {
    uora_experiment* e;
    ~Guard() { uora_experiment_destroy(e); }
  } guard{exp};

  auto apply = [&](uora_status s, const std::string& what) {
    if (s != UORA_OK) throw std::pair<uora_status, std::string>(s, what);
  };
  try {
    if (!a.out.empty()) apply(uora_experiment_set_out(exp, a.out.c_str()), "--out");
    if (!a.seeds.empty()) apply(uora_experiment_set_seeds(exp, a.seeds.c_str()), "--seeds");
    for (const auto& g : a.grid) apply(uora_experiment_add_grid(exp, g.c_str()), "--grid");
    if (!a.format.empty()) apply(uora_experiment_set_format(exp, a.format.c_str()), "--format");
    if (!a.selection.empty()) {
      apply(uora_experiment_set_selection(exp, a.selection.c_str()), "--selection");
    }
    if (a.jobs > 0) apply(uora_experiment_set_jobs(exp, a.jobs), "--jobs");
  } catch (const std::pair<uora_status, std::string>& e) {
    return report_error(e.first, e.second);
  }

  const std::size_t cells = uora_experiment_cell_count(exp);
  if (a.dry_run) {
    char* text = nullptr;
    uora_experiment_config_json(exp, &text);
    std::cout << text << "\n" << cells << " cell(s)\n";
    uora_string_free(text);
    return kExitOk;
  }
  std::size_t completed = 0, diverged = 0;
  const uora_status s = uora_experiment_run(exp, &completed, &diverged);
  std::cerr << "uora: " << cells << " cell(s), " << completed << " run(s) completed, "
            << diverged << " diverged\n";
  if (s != UORA_OK) return report_error(s, "run");
  return kExitOk;
}

int cmd_params(const std::string& method, std::int64_t l_tuned, std::int64_t d_model,
               std::int64_t rank) {
  if (l_tuned <= 0 || d_model <= 0 || rank <= 0) {
    std::cerr << "uora: params: L_tuned, d_model and r must be positive integers\n";
    return kExitInvalid;
  }
  std::uint64_t count = 0;
  if (auto s = uora_count_params(method.c_str(), l_tuned, d_model, rank, &count);
      s != UORA_OK) {
    return report_error(s, "params");
  }
  char* text = nullptr;
  uora_format_count(count, &text);
  std::cout << "method=" << method << " L_tuned=" << l_tuned << " d_model=" << d_model
            << " r=" << rank << "\n"
            << "trainable=" << count << " (" << text << ")\n";
  uora_string_free(text);
  return kExitOk;
}

int cmd_replay(const std::string& path) {
  uora_verify_report* report = nullptr;
  if (auto s = uora_verify_checkpoint(path.c_str(), &report); s != UORA_OK) {
    return report_error(s, "replay " + path);
  }
  const bool compact = uora_verify_mode(report) == 1;
  std::cout << "checkpoint " << path << " mode=" << (compact ? "compact" : "full") << "\n";
  std::optional<std::string> first_failure;
  for (std::size_t i = 0; i < uora_verify_layer_count(report); ++i) {
    std::uint32_t id = 0;
    const char* name = nullptr;
    const char* detail = nullptr;
    int pass = 0, replayed = 0;
    uora_verify_layer(report, i, &id, &name, &pass, &replayed, &detail);
    std::cout << (pass ? "PASS" : "FAIL") << " layer " << id << " " << name
              << (replayed ? " replayed" : " checksum-only");
    if (detail && *detail) std::cout << ": " << detail;
    std::cout << "\n";
    if (!pass && !first_failure) {
      first_failure = "layer " + std::to_string(id) + " (" + name + "): " + detail;
    }
  }
  uora_verify_destroy(report);
  if (first_failure) {
    std::cerr << "uora: replay: checksum mismatch, first divergent " << *first_failure
              << "\n";
    return kExitChecksum;
  }
  return kExitOk;
}

int cmd_report(const std::string& dir) {
  char* csv = nullptr;
  if (auto s = uora_report(dir.c_str(), &csv); s != UORA_OK) {
    return report_error(s, "report " + dir);
  }
  std::cout << csv;
  uora_string_free(csv);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UORA adapter experiments"};
  app.set_version_flag("--version", std::string(uora_version()));
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run every grid cell and seed of a config");
  run_cmd->add_option("--config", run.config, "Experiment JSON")->required()->envname("UORA_CONFIG");
  run_cmd->add_option("--out", run.out, "Output directory")->envname("UORA_OUT");
  run_cmd->add_option("--seeds", run.seeds, "Seeds, e.g. 0,1,2 or 0-4")->envname("UORA_SEEDS");
  run_cmd->add_option("--grid", run.grid, "Axis KEY=V1,V2 (repeatable)");
  run_cmd->add_option("--format", run.format, "Metrics format")
      ->check(CLI::IsMember({"csv", "jsonl"}))
      ->envname("UORA_FORMAT");
  run_cmd->add_option("--selection", run.selection, "Per-run summary value")
      ->check(CLI::IsMember({"final", "best"}))
      ->envname("UORA_SELECTION");
  run_cmd->add_option("--jobs", run.jobs, "Parallel runs")->envname("UORA_JOBS");
  run_cmd->add_flag("--dry-run", run.dry_run, "Print the resolved config and cell count");

  std::string method;
  std::int64_t l_tuned = 0, d_model = 0, rank = 0;
  auto* params_cmd = app.add_subcommand("params", "Trainable adapter parameter count");
  params_cmd->add_option("method", method, "lora, vera or uora")->required();
  params_cmd->add_option("l_tuned", l_tuned, "Adapted projection matrices")->required();
  params_cmd->add_option("d_model", d_model, "Model width")->required();
  params_cmd->add_option("rank", rank, "Adapter rank")->required();

  std::string ckpt;
  auto* replay_cmd = app.add_subcommand("replay", "Verify a checkpoint by replay");
  replay_cmd->add_option("checkpoint", ckpt, "Checkpoint file")->required();

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Recompute summary.csv from run files");
  report_cmd->add_option("--out,dir", report_dir, "Experiment output directory")
      ->required()
      ->envname("UORA_OUT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  if (*run_cmd) return cmd_run(run);
  if (*params_cmd) return cmd_params(method, l_tuned, d_model, rank);
  if (*replay_cmd) return cmd_replay(ckpt);
  if (*report_cmd) return cmd_report(report_dir);
  return kExitOther;
}
