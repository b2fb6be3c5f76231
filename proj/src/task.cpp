#include "uora/task.hpp"

#include <cmath>
#include <set>

#include "uora/errors.hpp"

namespace uora {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::LowRankRecovery: return "low_rank_recovery";
    case TaskKind::GaussianClassification: return "gaussian_classification";
    case TaskKind::SeqCopyClassify: return "seq_copy_classify";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "low_rank_recovery") return TaskKind::LowRankRecovery;
  if (name == "gaussian_classification") return TaskKind::GaussianClassification;
  if (name == "seq_copy_classify") return TaskKind::SeqCopyClassify;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "eval"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "eval") return Split::Eval;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

void validate(const TaskSpec& s) {
  if (s.n_train == 0 || s.n_eval == 0) throw ConfigError("task: empty split");
  switch (s.kind) {
    case TaskKind::LowRankRecovery:
      if (s.d_out == 0 || s.d_in == 0) throw ConfigError("task: zero dimension");
      if (s.true_rank == 0 || s.true_rank > std::min(s.d_out, s.d_in)) {
        throw ConfigError("task.true_rank must lie in [1, min(d_out, d_in)]");
      }
      if (!(s.noise_sigma >= 0.0)) throw ConfigError("task.noise_sigma must be >= 0");
      break;
    case TaskKind::GaussianClassification:
      if (s.n_classes < 2 || s.dim == 0) throw ConfigError("task: need >= 2 classes");
      break;
    case TaskKind::SeqCopyClassify: {
      if (s.seq_len == 0 || s.vocab < 2) throw ConfigError("task: need vocab >= 2");
      const double space = std::pow(static_cast<double>(s.vocab),
                                    static_cast<double>(s.seq_len));
      if (space < 2.0 * static_cast<double>(s.n_train + s.n_eval)) {
        throw ConfigError("task: sequence space too small for disjoint splits");
      }
      break;
    }
  }
}

std::size_t Dataset::size() const {
  if (!tokens.empty()) return tokens.size();
  return inputs.rows();
}

Dataset Dataset::gather(std::span<const std::size_t> indices) const {
  Dataset out;
  if (!tokens.empty()) {
    out.tokens.reserve(indices.size());
    for (auto i : indices) out.tokens.push_back(tokens.at(i));
  } else {
    out.inputs = Matrix(indices.size(), inputs.cols());
    for (std::size_t n = 0; n < indices.size(); ++n) {
      auto src = inputs.row(indices[n]);
      std::copy(src.begin(), src.end(), out.inputs.row(n).begin());
    }
  }
  if (targets.rows() != 0) {
    out.targets = Matrix(indices.size(), targets.cols());
    for (std::size_t n = 0; n < indices.size(); ++n) {
      auto src = targets.row(indices[n]);
      std::copy(src.begin(), src.end(), out.targets.row(n).begin());
    }
  }
  if (!labels.empty()) {
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(i));
  }
  return out;
}

SyntheticTask::SyntheticTask(const TaskSpec& spec, std::uint64_t seed)
    : spec_(spec), seed_(seed) {
  validate(spec_);
  SeededRng teacher(seed, streams::kTaskTeacher);
  if (spec_.kind == TaskKind::LowRankRecovery) {
    const double w_scale = 1.0 / std::sqrt(static_cast<double>(spec_.d_in));
    base_weight_ = Matrix(spec_.d_out, spec_.d_in);
    for (double& v : base_weight_.values()) v = teacher.normal() * w_scale;
    Matrix u(spec_.d_out, spec_.true_rank);
    Matrix vt(spec_.true_rank, spec_.d_in);
    for (double& v : u.values()) v = teacher.normal();
    for (double& v : vt.values()) v = teacher.normal();
    hidden_delta_ = matmul(u, vt);
    const double d_scale =
        1.0 / std::sqrt(static_cast<double>(spec_.d_in * spec_.true_rank));
    for (double& v : hidden_delta_.values()) v *= d_scale;
  } else if (spec_.kind == TaskKind::GaussianClassification) {
    class_means_ = Matrix(spec_.n_classes, spec_.dim);
    for (double& v : class_means_.values()) v = teacher.normal() * spec_.separation;
  }

  SeededRng train_rng(seed, streams::kTrainData);
  SeededRng eval_rng(seed, streams::kEvalData);
  train_ = generate(spec_.n_train, train_rng);
  eval_ = generate(spec_.n_eval, eval_rng);

  if (uses_tokens()) {
    // Discrete inputs can collide; drop eval sequences that also occur in train.
    std::set<std::vector<std::uint32_t>> seen(train_.tokens.begin(), train_.tokens.end());
    for (std::size_t n = 0; n < eval_.tokens.size(); ++n) {
      while (seen.count(eval_.tokens[n])) {
        for (auto& t : eval_.tokens[n]) {
          t = static_cast<std::uint32_t>(eval_rng.below(spec_.vocab));
        }
        eval_.labels[n] = eval_.tokens[n][0];
      }
    }
  }
}

std::size_t SyntheticTask::n_classes() const {
  switch (spec_.kind) {
    case TaskKind::LowRankRecovery: return 0;
    case TaskKind::GaussianClassification: return spec_.n_classes;
    case TaskKind::SeqCopyClassify: return spec_.vocab;
  }
  return 0;
}

std::size_t SyntheticTask::input_dim() const {
  switch (spec_.kind) {
    case TaskKind::LowRankRecovery: return spec_.d_in;
    case TaskKind::GaussianClassification: return spec_.dim;
    case TaskKind::SeqCopyClassify: return spec_.seq_len;
  }
  return 0;
}

std::size_t SyntheticTask::output_dim() const {
  return spec_.kind == TaskKind::LowRankRecovery ? spec_.d_out : n_classes();
}

Dataset SyntheticTask::generate(std::size_t n, SeededRng& rng) const {
  Dataset ds;
  switch (spec_.kind) {
    case TaskKind::LowRankRecovery: {
      ds.inputs = Matrix(n, spec_.d_in);
      for (double& v : ds.inputs.values()) v = rng.normal();
      const Matrix teacher = add(base_weight_, hidden_delta_);
      ds.targets = matmul_nt(ds.inputs, teacher);
      for (double& v : ds.targets.values()) v += spec_.noise_sigma * rng.normal();
      break;
    }
    case TaskKind::GaussianClassification: {
      ds.inputs = Matrix(n, spec_.dim);
      ds.labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<std::uint32_t>(i % spec_.n_classes);
        ds.labels[i] = label;
        auto row = ds.inputs.row(i);
        for (std::size_t j = 0; j < spec_.dim; ++j) {
          row[j] = class_means_(label, j) + rng.normal();
        }
      }
      break;
    }
    case TaskKind::SeqCopyClassify: {
      ds.tokens.resize(n);
      ds.labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto& seq = ds.tokens[i];
        seq.resize(spec_.seq_len);
        for (auto& t : seq) t = static_cast<std::uint32_t>(rng.below(spec_.vocab));
        ds.labels[i] = seq[0];
      }
      break;
    }
  }
  return ds;
}

}  // namespace uora
