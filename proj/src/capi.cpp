#include "uora/uora.h"

#include <cstring>
#include <fstream>
#include <sstream>

#include "uora/checkpoint.hpp"
#include "uora/errors.hpp"
#include "uora/experiment.hpp"

using uora::ErrorKind;
using nlohmann::json;

struct uora_experiment {
  uora::ExperimentConfig cfg;
};

struct uora_verify_report {
  uora::VerifyReport report;
};

struct uora_layer {
  uora::FrozenLinear base;
  uora::AdapterState state;
  std::optional<uora::ReinitMonitor> monitor;
};

namespace {

thread_local std::string last_error;

uora_status fail(uora_status s, const std::string& msg) {
  last_error = msg;
  return s;
}

template <typename F>
uora_status guard(F&& f) {
  try {
    last_error.clear();
    f();
    return UORA_OK;
  } catch (const uora::Error& e) {
    return fail(static_cast<uora_status>(static_cast<int>(e.kind())), e.what());
  } catch (const json::exception& e) {
    return fail(UORA_ERR_CONFIG, e.what());
  } catch (const std::bad_alloc&) {
    return fail(UORA_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(UORA_ERR_INTERNAL, e.what());
  }
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  if (!p) throw uora::Error(ErrorKind::Config, std::string(what) + " must not be null");
}

}  // namespace

extern "C" {

const char* uora_version(void) { return uora::toolkit_version(); }
const char* uora_last_error(void) { return last_error.c_str(); }

const char* uora_status_name(uora_status status) {
  switch (status) {
    case UORA_OK: return "ok";
    case UORA_ERR_SHAPE: return "shape";
    case UORA_ERR_CONFIG: return "config";
    case UORA_ERR_BOUNDS: return "bounds";
    case UORA_ERR_DECODE: return "decode";
    case UORA_ERR_VERSION: return "version";
    case UORA_ERR_DIVERGENCE: return "divergence";
    case UORA_ERR_CHECKSUM: return "checksum";
    case UORA_ERR_IO: return "io";
    case UORA_ERR_INTERNAL: return "internal";
    case UORA_ERR_ARGUMENT: return "argument";
  }
  return "unknown";
}

void uora_string_free(char* s) { std::free(s); }

uora_status uora_count_params(const char* method, uint64_t l_tuned, uint64_t d_model,
                              uint64_t rank, uint64_t* count) {
  return guard([&] {
    need(method, "method");
    need(count, "count");
    *count = uora::count_params(uora::parse_method(method), l_tuned, d_model, rank)
                 .trainable_count;
  });
}

uora_status uora_format_count(uint64_t count, char** text) {
  return guard([&] {
    need(text, "text");
    *text = dup(uora::format_count(count));
  });
}

uora_status uora_experiment_load(const char* path, uora_experiment** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new uora_experiment{uora::load_experiment(path)};
  });
}

uora_status uora_experiment_parse(const char* json_text, uora_experiment** out) {
  return guard([&] {
    need(json_text, "json_text");
    need(out, "out");
    json j;
    try {
      j = json::parse(json_text, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw uora::ConfigError(e.what());
    }
    *out = new uora_experiment{uora::parse_experiment(j)};
  });
}

void uora_experiment_destroy(uora_experiment* exp) { delete exp; }

uora_status uora_experiment_set_out(uora_experiment* exp, const char* dir) {
  return guard([&] {
    need(exp, "experiment");
    need(dir, "dir");
    exp->cfg.out = dir;
  });
}

uora_status uora_experiment_set_seeds(uora_experiment* exp, const char* list) {
  return guard([&] {
    need(exp, "experiment");
    need(list, "list");
    exp->cfg.seeds = uora::parse_seed_list(list);
  });
}

uora_status uora_experiment_add_grid(uora_experiment* exp, const char* flag) {
  return guard([&] {
    need(exp, "experiment");
    need(flag, "flag");
    uora::GridAxis axis = uora::parse_grid_flag(exp->cfg.base, flag);
    uora::ExperimentConfig next = exp->cfg;
    bool replaced = false;
    for (auto& a : next.grid) {
      if (a.pointer == axis.pointer) {
        a = axis;
        replaced = true;
      }
    }
    if (!replaced) next.grid.push_back(axis);
    for (const auto& cell : uora::expand_grid(next)) {
      try {
        uora::parse_run_spec(cell.config);
      } catch (const uora::ConfigError& e) {
        throw uora::ConfigError("grid." + axis.key + ": " + e.what());
      }
    }
    exp->cfg = std::move(next);
  });
}

uora_status uora_experiment_set_format(uora_experiment* exp, const char* format) {
  return guard([&] {
    need(exp, "experiment");
    need(format, "format");
    const std::string f = format;
    if (f == "csv") exp->cfg.format = uora::MetricsFormat::Csv;
    else if (f == "jsonl") exp->cfg.format = uora::MetricsFormat::Jsonl;
    else throw uora::ConfigError("format: expected 'csv' or 'jsonl', got '" + f + "'");
  });
}

uora_status uora_experiment_set_selection(uora_experiment* exp, const char* sel) {
  return guard([&] {
    need(exp, "experiment");
    need(sel, "selection");
    const std::string s = sel;
    if (s == "final") exp->cfg.selection = uora::Selection::Final;
    else if (s == "best") exp->cfg.selection = uora::Selection::Best;
    else throw uora::ConfigError("selection: expected 'final' or 'best', got '" + s + "'");
  });
}

uora_status uora_experiment_set_jobs(uora_experiment* exp, size_t jobs) {
  return guard([&] {
    need(exp, "experiment");
    if (jobs == 0) throw uora::ConfigError("jobs: expected a positive integer");
    exp->cfg.jobs = jobs;
  });
}

uora_status uora_experiment_config_json(const uora_experiment* exp, char** text) {
  return guard([&] {
    need(exp, "experiment");
    need(text, "text");
    *text = dup(exp->cfg.base.dump(2));
  });
}

size_t uora_experiment_cell_count(const uora_experiment* exp) {
  return exp ? uora::expand_grid(exp->cfg).size() : 0;
}

uora_status uora_experiment_run(uora_experiment* exp, size_t* completed,
                                size_t* diverged) {
  uora::ExperimentOutcome outcome;
  const uora_status s = guard([&] {
    need(exp, "experiment");
    outcome = uora::run_experiment(exp->cfg);
  });
  if (completed) *completed = outcome.runs_completed;
  if (diverged) *diverged = outcome.runs_diverged;
  if (s != UORA_OK) return s;
  if (outcome.runs_diverged > 0) {
    std::string msg = std::to_string(outcome.runs_diverged) + " run(s) diverged";
    for (const auto& m : outcome.messages) msg += "\n  " + m;
    return fail(UORA_ERR_DIVERGENCE, msg);
  }
  return UORA_OK;
}

uora_status uora_report(const char* dir, char** csv) {
  return guard([&] {
    need(dir, "dir");
    need(csv, "csv");
    std::ifstream in(std::filesystem::path(dir) / "manifest.json");
    if (!in) throw uora::IoError(std::string("no manifest.json in ") + dir);
    const json top = json::parse(in);
    std::vector<std::string> keys;
    for (const auto& a : top.at("grid")) keys.push_back(a.at("key").get<std::string>());
    const auto selection = top.value("selection", "final") == "best"
                               ? uora::Selection::Best
                               : uora::Selection::Final;
    std::ostringstream os;
    uora::write_summary_csv(os, keys, uora::summarize_directory(dir), selection);
    *csv = dup(os.str());
  });
}

uora_status uora_verify_checkpoint(const char* path, uora_verify_report** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new uora_verify_report{uora::verify_checkpoint(std::filesystem::path(path))};
  });
}

void uora_verify_destroy(uora_verify_report* report) { delete report; }

int uora_verify_mode(const uora_verify_report* report) {
  return report ? static_cast<int>(report->report.mode) : -1;
}

int uora_verify_all_pass(const uora_verify_report* report) {
  return report && report->report.all_pass() ? 1 : 0;
}

size_t uora_verify_layer_count(const uora_verify_report* report) {
  return report ? report->report.layers.size() : 0;
}

uora_status uora_verify_layer(const uora_verify_report* report, size_t index,
                              uint32_t* layer_id, const char** name, int* pass,
                              int* replayed, const char** detail) {
  return guard([&] {
    need(report, "report");
    if (index >= report->report.layers.size()) {
      throw uora::BoundsError("layer index " + std::to_string(index) + " out of range");
    }
    const auto& l = report->report.layers[index];
    if (layer_id) *layer_id = l.layer_id;
    if (name) *name = l.name.c_str();
    if (pass) *pass = l.pass ? 1 : 0;
    if (replayed) *replayed = l.replayed ? 1 : 0;
    if (detail) *detail = l.detail.c_str();
  });
}

uora_status uora_layer_create(const double* weight, const double* bias, size_t d_out,
                              size_t d_in, const uora_layer_options* options,
                              uora_layer** out) {
  return guard([&] {
    need(weight, "weight");
    need(options, "options");
    need(out, "out");
    const uora::Method method = uora::parse_method(options->method ? options->method : "uora");
    uora::InitKind kind;
    kind.family = uora::parse_init_family(options->init ? options->init : "orthogonal");
    kind.gain = options->gain;
    uora::validate(kind);
    uora::validate_rank(d_out, d_in, options->rank);

    auto layer = std::make_unique<uora_layer>();
    layer->base.weight = uora::Matrix(d_out, d_in);
    std::copy(weight, weight + d_out * d_in, layer->base.weight.values().begin());
    if (bias) {
      uora::Vector b(d_out);
      std::copy(bias, bias + d_out, b.values().begin());
      layer->base.bias = std::move(b);
    }
    if (method == uora::Method::Lora) {
      uora::SeededRng rng(options->seed, uora::streams::kAdapterInit);
      layer->state = uora::make_lora(d_out, d_in, options->rank, kind, rng);
    } else if (method == uora::Method::Vera || method == uora::Method::Uora) {
      const uora::InitRecipe recipe{kind, options->seed, uora::streams::kAdapterInit};
      layer->state = uora::make_uora(method, d_out, d_in, options->rank, recipe);
      uora::ReinitConfig cfg;
      cfg.alpha = options->alpha;
      cfg.rand_kind = kind;
      if (method == uora::Method::Vera) cfg.count_k = 0;
      uora::validate(cfg);
      layer->monitor.emplace(0, options->rank, cfg, options->seed, uora::streams::kReinit);
    } else {
      throw uora::ConfigError("method: a layer needs lora, vera or uora");
    }
    *out = layer.release();
  });
}

void uora_layer_destroy(uora_layer* layer) { delete layer; }

size_t uora_layer_trainable_count(const uora_layer* layer) {
  return layer ? uora::trainable_count(layer->state) : 0;
}

namespace {

uora::Matrix input_rows(const uora_layer* layer, const double* x, size_t n) {
  uora::Matrix m(n, layer->base.d_in());
  std::copy(x, x + n * layer->base.d_in(), m.values().begin());
  return m;
}

void copy_out(const uora::Matrix& y, double* out) {
  std::copy(y.values().begin(), y.values().end(), out);
}

}  // namespace

uora_status uora_layer_forward(const uora_layer* layer, const double* x, size_t n,
                               double* y) {
  return guard([&] {
    need(layer, "layer");
    need(x, "x");
    need(y, "y");
    const uora::Matrix in = input_rows(layer, x, n);
    if (const auto* l = std::get_if<uora::LoraState>(&layer->state)) {
      copy_out(uora::forward_lora(layer->base, *l, in), y);
    } else {
      copy_out(uora::forward_uora(layer->base, std::get<uora::UoraState>(layer->state), in),
               y);
    }
  });
}

uora_status uora_layer_forward_merged(const uora_layer* layer, const double* x, size_t n,
                                      double* y) {
  return guard([&] {
    need(layer, "layer");
    need(x, "x");
    need(y, "y");
    const uora::FrozenLinear merged = uora::merge(layer->base, layer->state);
    copy_out(uora::forward_frozen(merged, input_rows(layer, x, n)), y);
  });
}

uora_status uora_layer_set_vectors(uora_layer* layer, const double* d, const double* b) {
  return guard([&] {
    need(layer, "layer");
    auto* s = std::get_if<uora::UoraState>(&layer->state);
    if (!s) throw uora::ConfigError("scaling vectors exist only on vera/uora layers");
    if (d) std::copy(d, d + s->rank(), s->d_vec.values().begin());
    if (b) std::copy(b, b + s->d_out(), s->b_vec.values().begin());
  });
}

uora_status uora_layer_reinit(uora_layer* layer, size_t dim, int64_t step) {
  return guard([&] {
    need(layer, "layer");
    auto* s = std::get_if<uora::UoraState>(&layer->state);
    if (!s || !layer->monitor) throw uora::ConfigError("reinit needs a vera/uora layer");
    auto& m = *layer->monitor;
    uora::reinit_dimension(*s, dim, m.config(), m.rng(), m, step);
  });
}

size_t uora_layer_event_count(const uora_layer* layer) {
  return layer && layer->monitor ? layer->monitor->events().size() : 0;
}

uora_status uora_layer_save(const uora_layer* layer, const char* path, int compact) {
  return guard([&] {
    need(layer, "layer");
    need(path, "path");
    std::vector<uora::LayerCheckpoint> layers;
    layers.push_back({0, "layer", layer->state, layer->monitor});
    uora::save_checkpoint(layers, path,
                          compact ? uora::CheckpointMode::Compact : uora::CheckpointMode::Full);
  });
}

}  // extern "C"
