#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "uora/uora.h"

namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  uora_string_free(s);
  return out;
}

const char* kTinyConfig = R"({
  "model": {"widths": [6, 6], "method": "uora", "rank": 2},
  "task": {"kind": "low_rank_recovery", "d_out": 6, "d_in": 6, "true_rank": 2,
           "n_train": 32, "n_eval": 16},
  "train": {"steps": 20, "log_interval": 10, "batch_size": 8}
})";

}  // namespace

TEST_CASE("version and status names") {
  CHECK(std::string(uora_version()).size() > 0);
  CHECK(std::string(uora_status_name(UORA_ERR_CHECKSUM)) == "checksum");
}

TEST_CASE("parameter counts through the C API") {
  uint64_t n = 0;
  REQUIRE(uora_count_params("uora", 48, 1024, 32, &n) == UORA_OK);
  CHECK(n == 50688);
  REQUIRE(uora_count_params("lora", 24, 768, 8, &n) == UORA_OK);
  CHECK(n == 294912);
  char* text = nullptr;
  REQUIRE(uora_format_count(294912, &text) == UORA_OK);
  CHECK(take(text) == "294.9K");

  CHECK(uora_count_params("uora", 48, 1024, 0, &n) == UORA_ERR_CONFIG);
  CHECK(std::string(uora_last_error()).find("rank") != std::string::npos);
  CHECK(uora_count_params("dora", 1, 1, 1, &n) == UORA_ERR_CONFIG);
  CHECK(uora_count_params(nullptr, 1, 1, 1, &n) == UORA_ERR_CONFIG);
}

TEST_CASE("layer handle: zero delta, merge, reinit, save and verify") {
  const size_t d_out = 5, d_in = 4, n = 3;
  std::vector<double> w(d_out * d_in), x(n * d_in);
  for (size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i));
  for (size_t i = 0; i < x.size(); ++i) x[i] = std::cos(1.3 * static_cast<double>(i));

  uora_layer_options opt{"uora", "orthogonal", 1.0, 2, 42, 0.7};
  uora_layer* layer = nullptr;
  REQUIRE(uora_layer_create(w.data(), nullptr, d_out, d_in, &opt, &layer) == UORA_OK);
  CHECK(uora_layer_trainable_count(layer) == d_out + 2);

  std::vector<double> y(n * d_out), y_merged(n * d_out);
  REQUIRE(uora_layer_forward(layer, x.data(), n, y.data()) == UORA_OK);
  for (size_t s = 0; s < n; ++s)
    for (size_t i = 0; i < d_out; ++i) {
      double ref = 0.0;
      for (size_t j = 0; j < d_in; ++j) ref += w[i * d_in + j] * x[s * d_in + j];
      CHECK(y[s * d_out + i] == doctest::Approx(ref).epsilon(1e-14));
    }

  const double d[2] = {0.4, -1.1};
  const double b[5] = {1, 2, 3, -1, 0.5};
  REQUIRE(uora_layer_set_vectors(layer, d, b) == UORA_OK);
  REQUIRE(uora_layer_forward(layer, x.data(), n, y.data()) == UORA_OK);
  REQUIRE(uora_layer_forward_merged(layer, x.data(), n, y_merged.data()) == UORA_OK);
  for (size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - y_merged[i]) <= 1e-9);

  REQUIRE(uora_layer_reinit(layer, 1, 3) == UORA_OK);
  CHECK(uora_layer_event_count(layer) == 2);
  CHECK(uora_layer_reinit(layer, 5, 4) == UORA_ERR_BOUNDS);

  const fs::path path = fs::temp_directory_path() / "uora_capi_layer.ckpt";
  REQUIRE(uora_layer_save(layer, path.c_str(), 1) == UORA_OK);
  uora_verify_report* rep = nullptr;
  REQUIRE(uora_verify_checkpoint(path.c_str(), &rep) == UORA_OK);
  CHECK(uora_verify_mode(rep) == 1);
  CHECK(uora_verify_all_pass(rep) == 1);
  REQUIRE(uora_verify_layer_count(rep) == 1);
  int pass = 0, replayed = 0;
  const char* detail = nullptr;
  REQUIRE(uora_verify_layer(rep, 0, nullptr, nullptr, &pass, &replayed, &detail) == UORA_OK);
  CHECK(pass == 1);
  CHECK(replayed == 1);
  CHECK(uora_verify_layer(rep, 1, nullptr, nullptr, &pass, &replayed, &detail) ==
        UORA_ERR_BOUNDS);
  uora_verify_destroy(rep);

  // Corrupt the file: the header magic is no longer recognized.
  if (FILE* f = std::fopen(path.c_str(), "r+b")) {
    std::fputc('Z', f);
    std::fclose(f);
  }
  CHECK(uora_verify_checkpoint(path.c_str(), &rep) == UORA_ERR_DECODE);
  fs::remove(path);
  uora_layer_destroy(layer);
}

TEST_CASE("bad layer options are rejected") {
  std::vector<double> w(16, 1.0);
  uora_layer* layer = nullptr;
  uora_layer_options opt{"uora", "orthogonal", 1.0, 9, 0, 0.7};
  CHECK(uora_layer_create(w.data(), nullptr, 4, 4, &opt, &layer) == UORA_ERR_CONFIG);
  opt.rank = 2;
  opt.alpha = 2.0;
  CHECK(uora_layer_create(w.data(), nullptr, 4, 4, &opt, &layer) == UORA_ERR_CONFIG);
  opt.alpha = 0.5;
  opt.init = "nope";
  CHECK(uora_layer_create(w.data(), nullptr, 4, 4, &opt, &layer) == UORA_ERR_CONFIG);
}

TEST_CASE("experiment handle end to end") {
  uora_experiment* exp = nullptr;
  CHECK(uora_experiment_parse("{not json", &exp) == UORA_ERR_CONFIG);
  REQUIRE(uora_experiment_parse(kTinyConfig, &exp) == UORA_OK);
  const fs::path out = fs::temp_directory_path() / "uora_capi_run";
  fs::remove_all(out);
  CHECK(uora_experiment_set_out(exp, out.c_str()) == UORA_OK);
  CHECK(uora_experiment_set_seeds(exp, "0-2") == UORA_OK);
  CHECK(uora_experiment_add_grid(exp, "alpha=0.5,1.0") == UORA_OK);
  CHECK(uora_experiment_add_grid(exp, "alpha=0.3,0.5,1.0") == UORA_OK);
  CHECK(uora_experiment_cell_count(exp) == 3);
  CHECK(uora_experiment_add_grid(exp, "nonsense=1") == UORA_ERR_CONFIG);
  CHECK(uora_experiment_add_grid(exp, "alpha=2.0") == UORA_ERR_CONFIG);
  CHECK(uora_experiment_set_format(exp, "xml") == UORA_ERR_CONFIG);
  CHECK(uora_experiment_set_seeds(exp, "") == UORA_ERR_CONFIG);

  size_t done = 0, diverged = 0;
  REQUIRE(uora_experiment_run(exp, &done, &diverged) == UORA_OK);
  CHECK(done == 9);
  CHECK(diverged == 0);
  uora_experiment_destroy(exp);

  char* csv = nullptr;
  REQUIRE(uora_report(out.c_str(), &csv) == UORA_OK);
  const std::string text = take(csv);
  CHECK(text.rfind("cell,alpha,n_runs", 0) == 0);
  // Header plus one line per cell.
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  CHECK(uora_report("/nonexistent/dir", &csv) == UORA_ERR_IO);
}
