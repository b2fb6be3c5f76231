#include "uora/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "uora/errors.hpp"

namespace uora {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.adapter_lr > 0.0) || !(cfg.head_lr > 0.0)) {
    throw ConfigError("learning rates must be > 0");
  }
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(cfg.d_l1 >= 0.0)) throw ConfigError("d_l1 must be >= 0");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (cfg.log_interval == 0) throw ConfigError("log_interval must be >= 1");
  validate(cfg.reinit);
}

Optimizer::Optimizer(const TrainConfig& cfg, const std::vector<ParamRef>& params)
    : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Optimizer::step(std::vector<ParamRef>& params) {
  if (params.size() != m_.size()) throw ShapeError("optimizer: registry changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& ref = params[p];
    const double lr = ref.group == ParamGroup::Head ? cfg_.head_lr : cfg_.adapter_lr;
    for (std::size_t i = 0; i < ref.value.size(); ++i) {
      const double g = ref.grad[i] + cfg_.weight_decay * ref.value[i];
      if (cfg_.optimizer == OptimizerKind::Sgd) {
        ref.value[i] -= lr * g;
        continue;
      }
      double& m = m_[p][i];
      double& v = v_[p][i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
      ref.value[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
    }
    if (ref.is_scaling_d && cfg_.d_l1 > 0.0) {
      const double shrink = lr * cfg_.d_l1;
      for (double& x : ref.value) x = std::copysign(std::max(std::abs(x) - shrink, 0.0), x);
    }
  }
}

void Optimizer::reset_element(std::size_t param_index, std::size_t element) {
  m_.at(param_index).at(element) = 0.0;
  v_.at(param_index).at(element) = 0.0;
}

void attach_monitors(Model& model, const ReinitConfig& cfg, std::uint64_t seed) {
  for (auto& l : model.linears()) {
    const UoraState* u = l.uora();
    if (!u || l.monitor()) continue;
    ReinitConfig c = cfg;
    c.rand_kind = u->recipe.kind;
    if (u->label == Method::Vera) c.count_k = 0;
    l.monitor().emplace(l.id(), u->rank(), c, seed, streams::kReinit + l.id());
  }
}

namespace {

void d_summary(const Model& model, MetricsRecord& rec) {
  std::vector<double> mags;
  for (const auto& l : model.linears()) {
    if (const auto* u = l.uora()) {
      for (double v : u->d_vec.values()) mags.push_back(std::abs(v));
    }
  }
  if (mags.empty()) {
    rec.d_abs_min = rec.d_abs_median = rec.d_abs_max =
        std::numeric_limits<double>::quiet_NaN();
    return;
  }
  std::sort(mags.begin(), mags.end());
  rec.d_abs_min = mags.front();
  rec.d_abs_max = mags.back();
  const std::size_t n = mags.size();
  rec.d_abs_median = n % 2 ? mags[n / 2] : 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
}

std::uint64_t reinit_total(const Model& model) {
  std::uint64_t n = 0;
  for (const auto& l : model.linears()) {
    if (l.monitor()) n += l.monitor()->events().size() / 2;
  }
  return n;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

void check_finite(double loss, const std::vector<ParamRef>& params, std::int64_t step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("loss became non-finite at step " + std::to_string(step));
  }
  for (const auto& p : params) {
    if (!all_finite(p.grad)) {
      throw DivergenceError("non-finite gradient at step " + std::to_string(step) +
                            " in " + p.name);
    }
  }
}

}  // namespace

MetricsRecord evaluate(const Model& model, const SyntheticTask& task, Split split) {
  const auto start = std::chrono::steady_clock::now();
  const LossResult r = model.loss(task.split(split));
  MetricsRecord rec;
  rec.split = std::string(to_string(split));
  rec.loss = r.loss;
  rec.accuracy = r.accuracy;
  rec.reinit_events = reinit_total(model);
  d_summary(model, rec);
  rec.wall_ms = elapsed_ms(start);
  return rec;
}

MetricsRecord evaluate(const Model& model, const SyntheticTask& task,
                       std::string_view split) {
  return evaluate(model, task, parse_split(split));
}

TrainResult train(Model& model, const SyntheticTask& task, const TrainConfig& cfg) {
  validate(cfg);
  attach_monitors(model, cfg.reinit, cfg.seed);
  const auto start = std::chrono::steady_clock::now();

  model.zero_grad();
  auto params = model.parameters();
  Optimizer opt(cfg, params);

  // Registry index of each layer's d vector, for moment resets.
  std::vector<std::optional<std::size_t>> d_param(model.linears().size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].is_scaling_d) d_param[params[p].linear_index] = p;
  }

  const Dataset& train_split = task.split(Split::Train);
  const std::size_t n_train = train_split.size();
  const std::size_t batch = std::min(cfg.batch_size, n_train);
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
  SeededRng shuffle(cfg.seed, streams::kShuffle);
  std::vector<std::size_t> order(n_train);
  std::size_t cursor = n_train;  // forces a shuffle on the first step

  TrainResult result;
  auto record_eval = [&](std::int64_t step) {
    MetricsRecord rec = evaluate(model, task, Split::Eval);
    rec.step = step;
    rec.wall_ms = elapsed_ms(start);
    result.records.push_back(std::move(rec));
  };
  record_eval(0);

  double interval_loss = 0.0;
  double interval_acc = 0.0;
  bool has_acc = false;
  std::size_t interval_n = 0;

  auto observe = [&](std::int64_t step) {
    for (std::size_t li = 0; li < model.linears().size(); ++li) {
      auto& layer = model.linears()[li];
      UoraState* u = layer.uora();
      if (!u || !layer.monitor()) continue;
      ReinitMonitor& mon = *layer.monitor();
      if (!mon.config().enabled() || step < mon.config().start_step) continue;
      for (std::size_t dim : mon.observe_step(u->d_vec, step)) {
        reinit_dimension(*u, dim, mon.config(), mon.rng(), mon, step);
        ++result.reinit_dimensions;
        if (mon.config().reset_moments && d_param[li]) opt.reset_element(*d_param[li], dim);
      }
    }
  };

  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    const auto step = static_cast<std::int64_t>(s);
    if (cursor + batch > n_train) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = n_train; i > 1; --i) {
        std::swap(order[i - 1], order[shuffle.below(i)]);
      }
      cursor = 0;
    }
    const Dataset mb =
        train_split.gather(std::span<const std::size_t>(order.data() + cursor, batch));
    cursor += batch;

    model.zero_grad();
    const LossResult lr = model.loss_and_grad(mb);
    check_finite(lr.loss, params, step);
    opt.step(params);
    for (const auto& p : params) {
      if (!all_finite(p.value)) {
        throw DivergenceError("non-finite parameter at step " + std::to_string(step) +
                              " in " + p.name);
      }
    }

    const bool epoch_end = s % steps_per_epoch == 0;
    if (cfg.reinit.cadence == ReinitCadence::Step || epoch_end) observe(step);

    interval_loss += lr.loss;
    if (lr.accuracy) {
      interval_acc += *lr.accuracy;
      has_acc = true;
    }
    ++interval_n;
    if (s % cfg.log_interval == 0) {
      MetricsRecord rec;
      rec.step = step;
      rec.split = "train";
      rec.loss = interval_loss / static_cast<double>(interval_n);
      if (has_acc) rec.accuracy = interval_acc / static_cast<double>(interval_n);
      rec.reinit_events = reinit_total(model);
      d_summary(model, rec);
      rec.wall_ms = elapsed_ms(start);
      result.records.push_back(std::move(rec));
      interval_loss = interval_acc = 0.0;
      interval_n = 0;
    }
    if ((cfg.eval_interval > 0 && s % cfg.eval_interval == 0) || s == cfg.steps) {
      record_eval(step);
    }
  }
  return result;
}

namespace {

const char* const kCsvHeader =
    "step,split,loss,accuracy,reinit_events,d_abs_min,d_abs_median,d_abs_max,wall_ms";

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

nlohmann::json num_or_null(double v) {
  return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
}

double num_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records) {
  out << "# schema: " << kMetricsSchema << "\n" << kCsvHeader << "\n";
  for (const auto& r : records) {
    out << r.step << ',' << r.split << ',' << fmt_double(r.loss) << ','
        << (r.accuracy ? fmt_double(*r.accuracy) : std::string()) << ','
        << r.reinit_events << ',' << fmt_double(r.d_abs_min) << ','
        << fmt_double(r.d_abs_median) << ',' << fmt_double(r.d_abs_max) << ','
        << fmt_double(r.wall_ms) << "\n";
  }
}

void write_metrics_jsonl(std::ostream& out, const std::vector<MetricsRecord>& records) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["schema"] = kMetricsSchema;
    j["step"] = r.step;
    j["split"] = r.split;
    j["loss"] = num_or_null(r.loss);
    j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
    j["reinit_events"] = r.reinit_events;
    j["d_abs_min"] = num_or_null(r.d_abs_min);
    j["d_abs_median"] = num_or_null(r.d_abs_median);
    j["d_abs_max"] = num_or_null(r.d_abs_max);
    j["wall_ms"] = r.wall_ms;
    out << j.dump() << "\n";
  }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != std::string("# schema: ") + kMetricsSchema) {
    throw DecodeError("metrics csv: missing or unsupported schema line");
  }
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw DecodeError("metrics csv: unexpected header row");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw DecodeError("metrics csv: malformed row '" + line + "'");
    MetricsRecord r;
    r.step = std::stoll(f[0]);
    r.split = f[1];
    r.loss = parse_double(f[2]);
    if (!f[3].empty()) r.accuracy = parse_double(f[3]);
    r.reinit_events = std::stoull(f[4]);
    r.d_abs_min = parse_double(f[5]);
    r.d_abs_median = parse_double(f[6]);
    r.d_abs_max = parse_double(f[7]);
    r.wall_ms = parse_double(f[8]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<MetricsRecord> read_metrics_jsonl(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.value("schema", "") != kMetricsSchema) {
      throw DecodeError("metrics jsonl: unsupported schema");
    }
    MetricsRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.split = j.at("split").get<std::string>();
    r.loss = num_from(j.at("loss"));
    if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
    r.reinit_events = j.at("reinit_events").get<std::uint64_t>();
    r.d_abs_min = num_from(j.at("d_abs_min"));
    r.d_abs_median = num_from(j.at("d_abs_median"));
    r.d_abs_max = num_from(j.at("d_abs_max"));
    r.wall_ms = j.at("wall_ms").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace uora
