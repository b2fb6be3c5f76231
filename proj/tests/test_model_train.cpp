#include "doctest.h"
#include "oracles.hpp"

#include <cmath>
#include <sstream>

#include "uora/errors.hpp"
#include "uora/model.hpp"
#include "uora/train.hpp"

using namespace uora;

namespace {

ModelSpec transformer_spec(Method method) {
  ModelSpec m;
  m.arch = ArchKind::MiniTransformer;
  m.n_blocks = 2;
  m.d_model = 64;
  m.n_heads = 4;
  m.seq_len = 6;
  m.vocab = 8;
  m.adapted = {"query", "value"};
  m.method = method;
  m.rank = 8;
  m.head_outputs = 8;
  return m;
}

TaskSpec lowrank_task() {
  TaskSpec t;
  t.kind = TaskKind::LowRankRecovery;
  t.d_out = 12;
  t.d_in = 10;
  t.true_rank = 3;
  t.n_train = 128;
  t.n_eval = 64;
  return t;
}

ModelSpec lowrank_model(Method method, std::size_t rank = 3) {
  ModelSpec m;
  m.widths = {10, 12};
  m.method = method;
  m.rank = rank;
  return m;
}

std::vector<double> flat_params(Model& model) {
  std::vector<double> out;
  for (auto& p : model.parameters()) out.insert(out.end(), p.value.begin(), p.value.end());
  return out;
}

// Puts every trainable value at a random non-degenerate point so gradients
// flow through every path (b = 0 and a zero head would hide terms).
void randomize(Model& model, std::uint64_t seed) {
  SeededRng rng(seed, 77);
  for (auto& p : model.parameters())
    for (double& v : p.value) v = 0.5 * rng.normal();
}

// Directional derivative check: g . v against a central difference along v.
void check_directional(Model& model, const Dataset& batch, std::uint64_t seed) {
  model.zero_grad();
  model.loss_and_grad(batch);
  auto params = model.parameters();
  SeededRng rng(seed, 5);
  std::vector<std::vector<double>> dir;
  double analytic = 0.0;
  for (auto& p : params) {
    dir.emplace_back(p.value.size());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      dir.back()[i] = rng.normal();
      analytic += p.grad[i] * dir.back()[i];
    }
  }
  auto shifted = [&](double h) {
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].value.size(); ++i) params[k].value[i] += h * dir[k][i];
    const double l = model.loss(batch).loss;
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].value.size(); ++i) params[k].value[i] -= h * dir[k][i];
    return l;
  };
  const double h = 1e-5;
  const double numeric = (shifted(h) - shifted(-h)) / (2 * h);
  CHECK(oracle::rel_err(analytic, numeric) <= 1e-5);
}

TrainConfig short_train(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.log_interval = 25;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("adapter parameter counts for a two-block encoder") {
  CHECK(build_model(transformer_spec(Method::Uora), 1).adapter_param_count() == 288);
  CHECK(build_model(transformer_spec(Method::Vera), 1).adapter_param_count() == 288);
  CHECK(build_model(transformer_spec(Method::Lora), 1).adapter_param_count() == 4096);
  CHECK(build_model(transformer_spec(Method::None), 1).adapter_param_count() == 0);
  CHECK(build_model(transformer_spec(Method::Uora), 1).adapted_layer_count() == 4);
}

TEST_CASE("parameter registry holds exactly the adapter and head tensors") {
  for (auto method : {Method::Uora, Method::Vera, Method::Lora, Method::None}) {
    Model m = build_model(transformer_spec(method), 1);
    std::size_t adapter = 0, head = 0;
    for (const auto& p : m.parameters()) {
      (p.group == ParamGroup::Adapter ? adapter : head) += p.value.size();
    }
    CHECK(adapter == m.adapter_param_count());
    CHECK(head == 8 * 64 + 8);
  }
}

TEST_CASE("vera shares projections across same-shaped layers, uora does not") {
  Model vera = build_model(transformer_spec(Method::Vera), 2);
  Model uora = build_model(transformer_spec(Method::Uora), 2);
  CHECK(vera.linears()[0].uora()->a.get() == vera.linears()[1].uora()->a.get());
  CHECK(uora.linears()[0].uora()->a.get() != uora.linears()[1].uora()->a.get());
}

TEST_CASE("a fresh adapter does not change the model output") {
  TaskSpec t;
  t.kind = TaskKind::SeqCopyClassify;
  t.seq_len = 6;
  t.vocab = 8;
  t.n_train = 32;
  t.n_eval = 32;
  const SyntheticTask task(t, 4);
  const Model plain = build_model(transformer_spec(Method::None), 4, &task);
  const Model adapted = build_model(transformer_spec(Method::Uora), 4, &task);
  CHECK(plain.predict(task.split(Split::Eval)) == adapted.predict(task.split(Split::Eval)));
}

TEST_CASE("end-to-end gradients match a directional central difference") {
  SUBCASE("single-layer regression") {
    const SyntheticTask task(lowrank_task(), 1);
    for (auto method : {Method::Uora, Method::Lora}) {
      Model m = build_model(lowrank_model(method), 1, &task);
      randomize(m, 2);
      check_directional(m, task.split(Split::Train).gather(std::vector<std::size_t>{0, 1, 2, 3}), 3);
    }
  }
  SUBCASE("mlp classifier") {
    TaskSpec t;
    t.kind = TaskKind::GaussianClassification;
    t.dim = 8;
    t.n_train = 32;
    const SyntheticTask task(t, 2);
    ModelSpec ms;
    ms.widths = {8, 16, 8};
    ms.adapted = {"mlp_in", "mlp_out"};
    ms.rank = 4;
    Model m = build_model(ms, 2, &task);
    randomize(m, 3);
    check_directional(m, task.split(Split::Train), 4);
  }
  SUBCASE("mini transformer") {
    TaskSpec t;
    t.kind = TaskKind::SeqCopyClassify;
    t.seq_len = 5;
    t.vocab = 6;
    t.n_train = 8;
    const SyntheticTask task(t, 5);
    ModelSpec ms = transformer_spec(Method::Uora);
    ms.d_model = 16;
    ms.n_heads = 2;
    ms.seq_len = 5;
    ms.vocab = 6;
    ms.head_outputs = 0;
    ms.adapted = {"query", "key", "value", "output", "mlp_in", "mlp_out"};
    ms.rank = 4;
    for (auto method : {Method::Uora, Method::Lora}) {
      ms.method = method;
      Model m = build_model(ms, 5, &task);
      randomize(m, 6);
      check_directional(m, task.split(Split::Train), 7);
    }
  }
}

TEST_CASE("merged model has the same loss") {
  const SyntheticTask task(lowrank_task(), 1);
  for (auto method : {Method::Uora, Method::Lora, Method::Vera}) {
    Model m = build_model(lowrank_model(method), 1, &task);
    randomize(m, 9);
    const Model merged = m.merged();
    CHECK(merged.adapter_param_count() == 0);
    CHECK(std::abs(merged.loss(task.split(Split::Eval)).loss -
                   m.loss(task.split(Split::Eval)).loss) < 1e-9);
  }
}

TEST_CASE("training leaves the frozen backbone untouched") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Uora), 1, &task);
  const auto before = m.frozen_checksum();
  TrainConfig c = short_train(50);
  c.reinit.tau = 0.5;  // force reinit events so A and B change
  train(m, task, c);
  CHECK(m.frozen_checksum() == before);
  CHECK(m.linears()[0].monitor()->events().size() > 0);
}

TEST_CASE("logging cadence") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Uora), 1, &task);
  TrainConfig c = short_train(100);
  c.eval_interval = 50;
  const auto records = train(m, task, c).records;
  std::vector<std::int64_t> train_steps, eval_steps;
  for (const auto& r : records) (r.split == "train" ? train_steps : eval_steps).push_back(r.step);
  CHECK(train_steps == std::vector<std::int64_t>{25, 50, 75, 100});
  CHECK(eval_steps == std::vector<std::int64_t>{0, 50, 100});
}

TEST_CASE("same seed gives the same run") {
  const SyntheticTask task(lowrank_task(), 1);
  TrainConfig c = short_train(80);
  c.reinit.tau = 0.2;
  Model a = build_model(lowrank_model(Method::Uora), 1, &task);
  Model b = build_model(lowrank_model(Method::Uora), 1, &task);
  const auto ra = train(a, task, c).records;
  const auto rb = train(b, task, c).records;
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].loss == rb[i].loss);
    CHECK(ra[i].reinit_events == rb[i].reinit_events);
  }
  CHECK(flat_params(a) == flat_params(b));
  CHECK(a.adapter_matrix_checksum() == b.adapter_matrix_checksum());
}

TEST_CASE("evaluate is pure") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Uora), 1, &task);
  randomize(m, 4);
  const auto before = flat_params(m);
  const auto r1 = evaluate(m, task, Split::Eval);
  const auto r2 = evaluate(m, task, "eval");
  CHECK(r1.loss == r2.loss);
  CHECK(flat_params(m) == before);
  CHECK_THROWS_AS(evaluate(m, task, "test"), ConfigError);
}

TEST_CASE("untrained classifier scores chance, trained one beats it") {
  TaskSpec t;
  t.kind = TaskKind::GaussianClassification;
  t.dim = 16;
  t.n_classes = 4;
  t.separation = 2.0;
  const SyntheticTask task(t, 8);
  ModelSpec ms;
  ms.widths = {16, 32, 16};
  ms.adapted = {"mlp_in", "mlp_out"};
  ms.rank = 4;
  Model m = build_model(ms, 8, &task);
  CHECK(*evaluate(m, task, Split::Eval).accuracy == 0.25);

  TrainConfig c = short_train(300);
  c.head_lr = 1e-2;
  train(m, task, c);
  const double acc = *evaluate(m, task, Split::Eval).accuracy;
  const double se = std::sqrt(0.25 * 0.75 / static_cast<double>(t.n_eval));
  CHECK(acc > 0.25 + 4.0 * se);
}

TEST_CASE("divergence aborts with the step named") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Lora), 1, &task);
  TrainConfig c = short_train(200);
  c.optimizer = OptimizerKind::Sgd;
  c.adapter_lr = 1e6;
  CHECK_THROWS_WITH_AS(train(m, task, c), doctest::Contains("step"), DivergenceError);
}

TEST_CASE("reinit honors the start step") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Uora), 1, &task);
  TrainConfig c = short_train(60);
  c.reinit.tau = 10.0;  // every dimension is always below threshold
  c.reinit.start_step = 40;
  train(m, task, c);
  for (const auto& e : m.linears()[0].monitor()->events()) CHECK(e.step >= 40);
  CHECK(m.linears()[0].monitor()->events().size() == 2 * 3 * 21);
}

TEST_CASE("metrics round trip through csv and jsonl") {
  const SyntheticTask task(lowrank_task(), 1);
  Model m = build_model(lowrank_model(Method::Uora), 1, &task);
  const auto records = train(m, task, short_train(50)).records;
  std::stringstream csv, jsonl;
  write_metrics_csv(csv, records);
  write_metrics_jsonl(jsonl, records);
  CHECK(csv.str().rfind("# schema: uora-metrics/1\n", 0) == 0);
  const auto a = read_metrics_csv(csv);
  const auto b = read_metrics_jsonl(jsonl);
  REQUIRE(a.size() == records.size());
  REQUIRE(b.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(a[i].loss == records[i].loss);
    CHECK(b[i].loss == records[i].loss);
    CHECK(a[i].split == records[i].split);
    CHECK(b[i].step == records[i].step);
  }
}

TEST_CASE("model config validation") {
  ModelSpec ms = lowrank_model(Method::Uora);
  ms.adapted = {"query"};
  CHECK_THROWS_AS(validate(ms), ConfigError);
  ms = transformer_spec(Method::Uora);
  ms.n_heads = 5;
  CHECK_THROWS_AS(validate(ms), ConfigError);
  const SyntheticTask task(lowrank_task(), 1);
  CHECK_THROWS_AS(build_model(lowrank_model(Method::Uora, 20), 1, &task), ConfigError);
}
