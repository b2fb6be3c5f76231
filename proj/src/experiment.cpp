#include "uora/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "uora/errors.hpp"

namespace uora {

using nlohmann::json;
namespace fs = std::filesystem;

const char* toolkit_version() { return UORA_VERSION_STRING; }

namespace {

// Strict reader over one JSON object: typed getters with field-path errors,
// and a final check that no unknown keys were supplied.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError(field(key) + ": expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  double number(const std::string& key, double fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    if (!j_.at(key).is_number()) throw ConfigError(field(key) + ": expected a number");
    return j_.at(key).get<double>();
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(field(k) + ": unknown field");
    }
  }

  template <typename F>
  auto wrap(const std::string& key, F&& f) -> decltype(f()) {
    try {
      return f();
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string axis_value_text(const json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

RunSpec parse_run_spec(const json& j) {
  Section root(j, "");
  RunSpec spec;

  Section m = root.child("model");
  ModelSpec& ms = spec.model;
  ms.arch = m.wrap("arch", [&] { return parse_arch(m.get<std::string>("arch", "mlp")); });
  ms.widths = m.get<std::vector<std::size_t>>("widths", ms.widths);
  ms.n_blocks = m.count("n_blocks", ms.n_blocks);
  ms.d_model = m.count("d_model", ms.d_model);
  ms.n_heads = m.count("n_heads", ms.n_heads);
  ms.ff_mult = m.count("ff_mult", ms.ff_mult);
  ms.seq_len = m.count("seq_len", ms.seq_len);
  ms.vocab = m.count("vocab", ms.vocab);
  {
    auto list = m.get<std::vector<std::string>>(
        "adapted", std::vector<std::string>(ms.adapted.begin(), ms.adapted.end()));
    ms.adapted = std::set<std::string>(list.begin(), list.end());
  }
  ms.method =
      m.wrap("method", [&] { return parse_method(m.get<std::string>("method", "uora")); });
  ms.rank = m.count("rank", ms.rank);
  ms.init.family = m.wrap("init", [&] {
    return parse_init_family(m.get<std::string>("init", "orthogonal"));
  });
  ms.init.gain = m.number("init_gain", 1.0);
  if (m.has("share_matrices") && !m.get<json>("share_matrices", nullptr).is_null()) {
    ms.share_matrices = m.get<bool>("share_matrices", false);
  } else {
    m.get<json>("share_matrices", nullptr);
  }
  ms.head_outputs = m.count("head_outputs", 0);
  m.wrap("adapted", [&] { validate(ms); return 0; });
  m.finish();

  Section t = root.child("task");
  TaskSpec& ts = spec.task;
  ts.kind = t.wrap("kind", [&] {
    return parse_task_kind(t.get<std::string>("kind", "low_rank_recovery"));
  });
  ts.d_out = t.count("d_out", ts.d_out);
  ts.d_in = t.count("d_in", ts.d_in);
  ts.true_rank = t.count("true_rank", ts.true_rank);
  ts.noise_sigma = t.number("noise_sigma", ts.noise_sigma);
  ts.n_classes = t.count("n_classes", ts.n_classes);
  ts.dim = t.count("dim", ts.dim);
  ts.separation = t.number("separation", ts.separation);
  ts.seq_len = t.count("seq_len", ts.seq_len);
  ts.vocab = t.count("vocab", ts.vocab);
  ts.n_train = t.count("n_train", ts.n_train);
  ts.n_eval = t.count("n_eval", ts.n_eval);
  t.wrap("kind", [&] { validate(ts); return 0; });
  t.finish();

  Section tr = root.child("train");
  TrainConfig& tc = spec.train;
  tc.optimizer = tr.wrap("optimizer", [&] {
    return parse_optimizer(tr.get<std::string>("optimizer", "adam"));
  });
  tc.adapter_lr = tr.number("adapter_lr", tc.adapter_lr);
  tc.head_lr = tr.number("head_lr", tc.head_lr);
  tc.beta1 = tr.number("beta1", tc.beta1);
  tc.beta2 = tr.number("beta2", tc.beta2);
  tc.eps = tr.number("eps", tc.eps);
  tc.weight_decay = tr.number("weight_decay", tc.weight_decay);
  tc.d_l1 = tr.number("d_l1", tc.d_l1);
  tc.batch_size = tr.count("batch_size", tc.batch_size);
  tc.steps = tr.count("steps", tc.steps);
  tc.log_interval = tr.count("log_interval", tc.log_interval);
  tc.eval_interval = tr.count("eval_interval", tc.eval_interval);
  Section r = tr.child("reinit");
  ReinitConfig& rc = tc.reinit;
  rc.tau = r.number("tau", rc.tau);
  rc.count_k = static_cast<std::uint32_t>(r.count("k", rc.count_k));
  rc.alpha = r.number("alpha", rc.alpha);
  rc.start_step = static_cast<std::int64_t>(r.count("start_step", 0));
  rc.cadence = r.wrap("cadence", [&] {
    const auto c = r.get<std::string>("cadence", "step");
    if (c == "step") return ReinitCadence::Step;
    if (c == "epoch") return ReinitCadence::Epoch;
    throw ConfigError("expected 'step' or 'epoch'");
  });
  rc.reset_moments = r.get<bool>("reset_moments", false);
  rc.rand_kind = ms.init;
  r.finish();
  tr.wrap("reinit", [&] { validate(tc); return 0; });
  tr.finish();

  root.finish();

  // Model/task compatibility (input widths, token vs vector inputs) is only
  // known once both are built.
  try {
    const SyntheticTask task(spec.task, 0);
    build_model(spec.model, 0, &task);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return spec;
}

json to_json(const RunSpec& spec) {
  const ModelSpec& m = spec.model;
  const TaskSpec& t = spec.task;
  const TrainConfig& c = spec.train;
  json j;
  j["model"] = {
      {"arch", to_string(m.arch)},
      {"widths", m.widths},
      {"n_blocks", m.n_blocks},
      {"d_model", m.d_model},
      {"n_heads", m.n_heads},
      {"ff_mult", m.ff_mult},
      {"seq_len", m.seq_len},
      {"vocab", m.vocab},
      {"adapted", std::vector<std::string>(m.adapted.begin(), m.adapted.end())},
      {"method", to_string(m.method)},
      {"rank", m.rank},
      {"init", to_string(m.init.family)},
      {"init_gain", m.init.gain},
      {"share_matrices", m.share_matrices ? json(*m.share_matrices) : json(nullptr)},
      {"head_outputs", m.head_outputs},
  };
  j["task"] = {
      {"kind", to_string(t.kind)}, {"d_out", t.d_out},
      {"d_in", t.d_in},            {"true_rank", t.true_rank},
      {"noise_sigma", t.noise_sigma}, {"n_classes", t.n_classes},
      {"dim", t.dim},              {"separation", t.separation},
      {"seq_len", t.seq_len},      {"vocab", t.vocab},
      {"n_train", t.n_train},      {"n_eval", t.n_eval},
  };
  j["train"] = {
      {"optimizer", to_string(c.optimizer)},
      {"adapter_lr", c.adapter_lr},
      {"head_lr", c.head_lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"eps", c.eps},
      {"weight_decay", c.weight_decay},
      {"d_l1", c.d_l1},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"log_interval", c.log_interval},
      {"eval_interval", c.eval_interval},
      {"reinit",
       {{"tau", c.reinit.tau},
        {"k", c.reinit.count_k},
        {"alpha", c.reinit.alpha},
        {"start_step", c.reinit.start_step},
        {"cadence", c.reinit.cadence == ReinitCadence::Step ? "step" : "epoch"},
        {"reset_moments", c.reinit.reset_moments}}},
  };
  return j;
}

std::string resolve_axis_key(const json& base, const std::string& key) {
  static const std::map<std::string, std::string> aliases = {
      {"alpha", "/train/reinit/alpha"}, {"tau", "/train/reinit/tau"},
      {"k", "/train/reinit/k"},         {"rank", "/model/rank"},
      {"init", "/model/init"},          {"method", "/model/method"},
      {"lr", "/train/adapter_lr"},      {"steps", "/train/steps"},
  };
  std::string pointer;
  if (auto it = aliases.find(key); it != aliases.end()) {
    pointer = it->second;
  } else {
    pointer = "/" + key;
    for (char& c : pointer)
      if (c == '.') c = '/';
  }
  json::json_pointer ptr;
  try {
    ptr = json::json_pointer(pointer);
  } catch (const json::exception&) {
    throw ConfigError("grid." + key + ": not a valid field path");
  }
  if (!base.contains(ptr)) {
    throw ConfigError("grid." + key + ": no such config field");
  }
  if (base.at(ptr).is_object()) {
    throw ConfigError("grid." + key + ": refers to a section, not a field");
  }
  return pointer;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(item.substr(0, dash));
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("seeds: empty range '" + item + "'");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
      } else {
        std::size_t used = 0;
        seeds.push_back(std::stoull(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      }
    } catch (const std::logic_error&) {
      throw ConfigError("seeds: cannot parse '" + item + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seeds: list must be non-empty");
  return seeds;
}

GridAxis parse_grid_flag(const json& base, const std::string& flag) {
  const auto eq = flag.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("grid flag must look like KEY=V1,V2 (got '" + flag + "')");
  }
  GridAxis axis;
  axis.key = flag.substr(0, eq);
  axis.pointer = resolve_axis_key(base, axis.key);
  const json& current = base.at(json::json_pointer(axis.pointer));
  std::stringstream ss(flag.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (current.is_string()) {
      axis.values.emplace_back(item);
      continue;
    }
    try {
      axis.values.push_back(json::parse(item));
    } catch (const json::exception&) {
      throw ConfigError("grid." + axis.key + ": cannot parse value '" + item + "'");
    }
  }
  if (axis.values.empty()) throw ConfigError("grid." + axis.key + ": no values");
  return axis;
}

ExperimentConfig parse_experiment(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ExperimentConfig cfg;
  json run = json::object();
  for (const char* k : {"model", "task", "train"}) {
    if (j.contains(k)) run[k] = j.at(k);
  }
  cfg.base = to_json(parse_run_spec(run));

  static const std::set<std::string> known = {"name", "model", "task", "train",
                                              "seeds", "out", "grid", "format",
                                              "selection", "checkpoint", "jobs"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError(k + ": unknown field");
  }
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ConfigError("name: expected a string");
    cfg.name = j.at("name").get<std::string>();
  }
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (!s.is_array() || s.empty()) throw ConfigError("seeds: expected a non-empty list");
    cfg.seeds.clear();
    for (const auto& v : s) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError("seeds: expected non-negative integers");
      }
      cfg.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (j.contains("out")) {
    if (!j.at("out").is_string()) throw ConfigError("out: expected a string");
    cfg.out = j.at("out").get<std::string>();
  }
  if (j.contains("format")) {
    const auto f = j.at("format").is_string() ? j.at("format").get<std::string>() : "";
    if (f == "csv") cfg.format = MetricsFormat::Csv;
    else if (f == "jsonl") cfg.format = MetricsFormat::Jsonl;
    else throw ConfigError("format: expected 'csv' or 'jsonl'");
  }
  if (j.contains("selection")) {
    const auto s = j.at("selection").is_string() ? j.at("selection").get<std::string>() : "";
    if (s == "final") cfg.selection = Selection::Final;
    else if (s == "best") cfg.selection = Selection::Best;
    else throw ConfigError("selection: expected 'final' or 'best'");
  }
  if (j.contains("checkpoint")) {
    const auto s = j.at("checkpoint").is_string() ? j.at("checkpoint").get<std::string>() : "";
    if (s == "none") cfg.checkpoint.reset();
    else if (s == "full") cfg.checkpoint = CheckpointMode::Full;
    else if (s == "compact") cfg.checkpoint = CheckpointMode::Compact;
    else throw ConfigError("checkpoint: expected 'none', 'full' or 'compact'");
  }
  if (j.contains("jobs")) {
    if (!j.at("jobs").is_number_integer() || j.at("jobs").get<std::int64_t>() <= 0) {
      throw ConfigError("jobs: expected a positive integer");
    }
    cfg.jobs = j.at("jobs").get<std::size_t>();
  }
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    if (!g.is_object()) throw ConfigError("grid: expected an object of value lists");
    for (const auto& [key, values] : g.items()) {
      if (!values.is_array() || values.empty()) {
        throw ConfigError("grid." + key + ": expected a non-empty list");
      }
      GridAxis axis;
      axis.key = key;
      axis.pointer = resolve_axis_key(cfg.base, key);
      for (const auto& v : values) axis.values.push_back(v);
      cfg.grid.push_back(std::move(axis));
    }
  }
  // Validate every cell up front so a bad grid value fails before any run.
  for (const auto& cell : expand_grid(cfg)) {
    try {
      parse_run_spec(cell.config);
    } catch (const ConfigError& e) {
      throw ConfigError("grid cell " + std::to_string(cell.index) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment(j);
}

std::string config_hash(const json& j) {
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<GridCell> expand_grid(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  std::vector<std::size_t> idx(cfg.grid.size(), 0);
  for (;;) {
    GridCell cell;
    cell.index = cells.size();
    cell.config = cfg.base;
    for (std::size_t a = 0; a < cfg.grid.size(); ++a) {
      const json& v = cfg.grid[a].values[idx[a]];
      cell.axis_values.push_back(v);
      cell.config[json::json_pointer(cfg.grid[a].pointer)] = v;
    }
    cells.push_back(std::move(cell));
    // Odometer increment, last axis fastest.
    std::size_t a = cfg.grid.size();
    while (a > 0) {
      --a;
      if (++idx[a] < cfg.grid[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return cells;
    }
    if (cfg.grid.empty()) return cells;
  }
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

const MetricsRecord& select_record(const std::vector<MetricsRecord>& records,
                                   Selection selection) {
  const MetricsRecord* pick = nullptr;
  for (const auto& r : records) {
    if (r.split != "eval") continue;
    if (!pick || selection == Selection::Final || r.loss < pick->loss) pick = &r;
  }
  if (!pick) throw DecodeError("run has no eval records");
  return *pick;
}

namespace {

struct RunJob {
  std::size_t cell;
  std::uint64_t seed;
};

struct RunResult {
  bool done = false;
  bool diverged = false;
  std::string message;
  MetricsRecord selected;
};

std::string run_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }
std::string cell_dir_name(std::size_t cell) {
  std::ostringstream os;
  os << "cell_" << std::setw(3) << std::setfill('0') << cell;
  return os.str();
}

std::vector<SummaryRow> aggregate(const std::vector<GridCell>& cells,
                                  const std::vector<std::vector<MetricsRecord>>& per_cell) {
  std::vector<SummaryRow> rows;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    SummaryRow row;
    row.cell = c;
    row.axis_values = cells[c].axis_values;
    row.n_runs = per_cell[c].size();
    std::vector<double> losses, accs, reinits;
    for (const auto& r : per_cell[c]) {
      losses.push_back(r.loss);
      if (r.accuracy) accs.push_back(*r.accuracy);
      reinits.push_back(static_cast<double>(r.reinit_events));
    }
    std::tie(row.loss_mean, row.loss_std) = mean_std(losses);
    if (!accs.empty() && accs.size() == losses.size()) {
      auto [m, s] = mean_std(accs);
      row.acc_mean = m;
      row.acc_std = s;
    }
    row.reinit_mean = mean_std(reinits).first;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void write_summary_csv(std::ostream& out, const std::vector<std::string>& axis_keys,
                       const std::vector<SummaryRow>& rows, Selection selection) {
  out << "cell";
  for (const auto& k : axis_keys) out << ',' << k;
  out << ",n_runs,selection,eval_loss_mean,eval_loss_std,eval_acc_mean,eval_acc_std,"
         "reinit_events_mean\n";
  for (const auto& r : rows) {
    out << r.cell;
    for (const auto& v : r.axis_values) out << ',' << axis_value_text(v);
    out << ',' << r.n_runs << ',' << (selection == Selection::Final ? "final" : "best")
        << ',' << fmt(r.loss_mean) << ',' << fmt(r.loss_std) << ','
        << (r.acc_mean ? fmt(*r.acc_mean) : "") << ','
        << (r.acc_std ? fmt(*r.acc_std) : "") << ',' << fmt(r.reinit_mean) << "\n";
  }
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  const auto cells = expand_grid(cfg);
  fs::create_directories(cfg.out);
  const std::string hash = config_hash(cfg.base);

  std::vector<RunJob> jobs;
  for (const auto& cell : cells)
    for (auto seed : cfg.seeds) jobs.push_back({cell.index, seed});
  std::vector<RunResult> results(jobs.size());

  const std::string metrics_name =
      cfg.format == MetricsFormat::Csv ? "metrics.csv" : "metrics.jsonl";

  auto run_one = [&](std::size_t j) {
    const RunJob& job = jobs[j];
    const GridCell& cell = cells[job.cell];
    const fs::path dir = cfg.out / cell_dir_name(job.cell) / run_dir_name(job.seed);
    fs::create_directories(dir);
    const std::string started = iso_now();

    RunSpec spec = parse_run_spec(cell.config);
    spec.train.seed = job.seed;
    json manifest = {
        {"config_hash", config_hash(cell.config)},
        {"experiment_hash", hash},
        {"experiment", cfg.name},
        {"toolkit_version", toolkit_version()},
        {"cell", job.cell},
        {"seed", job.seed},
        {"config", cell.config},
        {"selection", cfg.selection == Selection::Final ? "final" : "best"},
        {"started_at", started},
        {"outputs", {{"metrics", metrics_name}}},
    };
    RunResult& res = results[j];
    try {
      SyntheticTask task(spec.task, job.seed);
      Model model = build_model(spec.model, job.seed, &task);
      TrainResult tr = train(model, task, spec.train);
      {
        std::ofstream out(dir / metrics_name);
        if (cfg.format == MetricsFormat::Csv) write_metrics_csv(out, tr.records);
        else write_metrics_jsonl(out, tr.records);
      }
      if (cfg.checkpoint) {
        std::vector<LayerCheckpoint> layers;
        for (const auto& l : model.linears()) {
          if (!l.has_adapter()) continue;
          layers.push_back({l.id(), l.name(), l.adapter(), l.monitor()});
        }
        if (!layers.empty()) {
          save_checkpoint(layers, dir / "adapter.ckpt", *cfg.checkpoint);
          manifest["outputs"]["checkpoint"] = "adapter.ckpt";
        }
      }
      res.selected = select_record(tr.records, cfg.selection);
      res.done = true;
      manifest["status"] = "ok";
    } catch (const DivergenceError& e) {
      res.diverged = true;
      res.message = cell_dir_name(job.cell) + "/" + run_dir_name(job.seed) + ": " + e.what();
      manifest["status"] = "diverged";
      manifest["error"] = e.what();
    }
    manifest["finished_at"] = iso_now();
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.jobs, jobs.size()));
  if (workers == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_one(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t j; (j = next++) < jobs.size();) {
          try {
            run_one(j);
          } catch (...) {
            std::lock_guard lock(failure_mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  ExperimentOutcome outcome;
  std::vector<std::vector<MetricsRecord>> per_cell(cells.size());
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (results[j].done) {
      per_cell[jobs[j].cell].push_back(results[j].selected);
      ++outcome.runs_completed;
    } else if (results[j].diverged) {
      ++outcome.runs_diverged;
      outcome.messages.push_back(results[j].message);
    }
  }
  outcome.rows = aggregate(cells, per_cell);

  std::vector<std::string> axis_keys;
  for (const auto& a : cfg.grid) axis_keys.push_back(a.key);
  {
    std::ofstream out(cfg.out / "summary.csv");
    write_summary_csv(out, axis_keys, outcome.rows, cfg.selection);
  }
  json top = {
      {"experiment", cfg.name},
      {"config_hash", hash},
      {"toolkit_version", toolkit_version()},
      {"base", cfg.base},
      {"seeds", cfg.seeds},
      {"format", cfg.format == MetricsFormat::Csv ? "csv" : "jsonl"},
      {"selection", cfg.selection == Selection::Final ? "final" : "best"},
      {"summary", "summary.csv"},
  };
  json axes = json::array();
  for (const auto& a : cfg.grid) {
    axes.push_back({{"key", a.key}, {"pointer", a.pointer}, {"values", a.values}});
  }
  top["grid"] = axes;
  json cell_list = json::array();
  for (const auto& c : cells) {
    json runs = json::array();
    for (auto seed : cfg.seeds) {
      runs.push_back(cell_dir_name(c.index) + "/" + run_dir_name(seed));
    }
    cell_list.push_back({{"cell", c.index}, {"axis_values", c.axis_values}, {"runs", runs}});
  }
  top["cells"] = cell_list;
  std::ofstream(cfg.out / "manifest.json") << top.dump(2) << "\n";
  return outcome;
}

std::vector<SummaryRow> summarize_directory(const fs::path& out) {
  std::ifstream in(out / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + out.string());
  const json top = json::parse(in);
  const bool csv = top.value("format", "csv") == "csv";
  const Selection selection =
      top.value("selection", "final") == "best" ? Selection::Best : Selection::Final;

  std::vector<GridCell> cells;
  std::vector<std::vector<MetricsRecord>> per_cell;
  for (const auto& c : top.at("cells")) {
    GridCell cell;
    cell.index = c.at("cell").get<std::size_t>();
    for (const auto& v : c.at("axis_values")) cell.axis_values.push_back(v);
    std::vector<MetricsRecord> picked;
    for (const auto& run : c.at("runs")) {
      const fs::path dir = out / run.get<std::string>();
      std::ifstream m(dir / (csv ? "metrics.csv" : "metrics.jsonl"));
      if (!m) continue;  // diverged or missing run
      const auto records = csv ? read_metrics_csv(m) : read_metrics_jsonl(m);
      picked.push_back(select_record(records, selection));
    }
    cells.push_back(std::move(cell));
    per_cell.push_back(std::move(picked));
  }
  return aggregate(cells, per_cell);
}

}  // namespace uora
