#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "dmaf/dmaf.h"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dmaf_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

dmaf_corpus* small_corpus(int m = 3, int c = 3, int n = 6) {
  const double rates[4] = {0.2, 0.5, 0.5, 0.5};
  dmaf_corpus* corpus = nullptr;
  REQUIRE(dmaf_corpus_generate(n, 16, 16, c, m, "idt", rates, m, 3, &corpus) == DMAF_OK);
  return corpus;
}

dmaf_config* small_config() {
  dmaf_config* cfg = nullptr;
  REQUIRE(dmaf_config_create(&cfg) == DMAF_OK);
  for (auto [k, v] : {std::pair{"net.height", "16"}, {"net.width", "16"}, {"net.n_levels", "2"},
                      {"net.base_channels", "4"}, {"net.token_h", "4"}, {"net.token_w", "4"},
                      {"val_fraction", "0"}})
    REQUIRE(dmaf_config_set(cfg, k, v) == DMAF_OK);
  return cfg;
}

}  // namespace

TEST_CASE("version and status names") {
  CHECK(dmaf_abi_version() == DMAF_ABI_VERSION);
  CHECK(std::string(dmaf_status_name(DMAF_OK)) == "ok");
  CHECK(std::string(dmaf_status_name(DMAF_ERR_CONFIG)) == "config error");
}

TEST_CASE("null and bad arguments report errors") {
  dmaf_corpus* corpus = nullptr;
  CHECK(dmaf_corpus_generate(4, 16, 16, 3, 3, "idt", nullptr, 0, 1, nullptr) == DMAF_ERR_INVALID_ARGUMENT);
  const double rates[3] = {0.2, 0.5, 0.8};
  CHECK(dmaf_corpus_generate(4, 16, 16, 3, 3, "sometimes", rates, 3, 1, &corpus) == DMAF_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(dmaf_last_error()) > 0);
  CHECK(corpus == nullptr);
  CHECK(dmaf_corpus_load("/nonexistent/dmaf/corpus", &corpus) != DMAF_OK);
  CHECK(dmaf_trainer_step(nullptr, nullptr) == DMAF_ERR_INVALID_ARGUMENT);
}

TEST_CASE("config keys are validated") {
  dmaf_config* cfg = small_config();
  CHECK(dmaf_config_set(cfg, "epochs", "12") == DMAF_OK);
  CHECK(dmaf_config_set(cfg, "epoch", "12") == DMAF_ERR_CONFIG);
  CHECK(std::string(dmaf_last_error()).find("epoch") != std::string::npos);
  CHECK(dmaf_config_set(cfg, "net.nonsense", "1") == DMAF_ERR_CONFIG);
  CHECK(dmaf_config_set(cfg, "epochs", "{bad") != DMAF_OK);
  const size_t n = dmaf_config_to_json(cfg, nullptr, 0);
  std::string buf(n + 1, '\0');
  CHECK(dmaf_config_to_json(cfg, buf.data(), buf.size()) == n);
  buf.erase(std::remove_if(buf.begin(), buf.end(), [](char ch) { return ch == ' ' || ch == '\n'; }), buf.end());
  CHECK(buf.find("\"epochs\":12") != std::string::npos);
  dmaf_config_free(cfg);
}

TEST_CASE("train, checkpoint, evaluate and plot through the C interface") {
  const auto dir = scratch("flow");
  dmaf_corpus* corpus = small_corpus();
  CHECK(dmaf_corpus_size(corpus) == 6);
  CHECK(dmaf_corpus_modalities(corpus) == 3);
  double mr = -1;
  REQUIRE(dmaf_corpus_missing_rate(corpus, 1, &mr) == DMAF_OK);
  CHECK(mr == doctest::Approx(0.5));
  CHECK(dmaf_corpus_missing_rate(corpus, 7, &mr) == DMAF_ERR_INVALID_ARGUMENT);
  REQUIRE(dmaf_corpus_save(corpus, (dir / "corpus").c_str()) == DMAF_OK);

  dmaf_config* cfg = small_config();
  dmaf_trainer* tr = nullptr;
  REQUIRE(dmaf_trainer_create(cfg, corpus, DMAF_SPLIT_TRAIN, &tr) == DMAF_OK);
  CHECK(dmaf_trainer_train_size(tr) == 6);
  double loss = 0;
  REQUIRE(dmaf_trainer_step(tr, &loss) == DMAF_OK);
  CHECK(loss > 0);
  REQUIRE(dmaf_trainer_run_epochs(tr, 1) == DMAF_OK);
  CHECK(dmaf_trainer_steps(tr) == 7);
  const auto ckpt = (dir / "ckpt.bin").string();
  REQUIRE(dmaf_trainer_save(tr, ckpt.c_str()) == DMAF_OK);
  REQUIRE(dmaf_trainer_write_log(tr, (dir / "runlog.csv").c_str()) == DMAF_OK);

  dmaf_trainer* again = nullptr;
  REQUIRE(dmaf_trainer_create(cfg, corpus, DMAF_SPLIT_TRAIN, &again) == DMAF_OK);
  REQUIRE(dmaf_trainer_resume(again, ckpt.c_str()) == DMAF_OK);
  CHECK(dmaf_trainer_steps(again) == 7);
  double a = 0, b = 0;
  REQUIRE(dmaf_trainer_step(tr, &a) == DMAF_OK);
  REQUIRE(dmaf_trainer_step(again, &b) == DMAF_OK);
  CHECK(a == b);

  dmaf_model* model = nullptr;
  REQUIRE(dmaf_model_load(ckpt.c_str(), &model) == DMAF_OK);
  int rows = 0;
  REQUIRE(dmaf_model_evaluate(model, corpus, DMAF_SPLIT_ALL, (dir / "eval").c_str(), &rows) == DMAF_OK);
  CHECK(rows == 7);
  CHECK(fs::exists(dir / "eval" / "combinations.csv"));
  double uni[3];
  REQUIRE(dmaf_model_evaluate_unimodal(model, corpus, DMAF_SPLIT_ALL, uni, 3) == DMAF_OK);
  for (double u : uni) {
    CHECK(u >= 0.0);
    CHECK(u <= 1.0);
  }
  CHECK(dmaf_model_evaluate_unimodal(model, corpus, DMAF_SPLIT_ALL, uni, 2) == DMAF_ERR_INVALID_ARGUMENT);

  dmaf_corpus* wrong_m = small_corpus(4);
  CHECK(dmaf_model_evaluate(model, wrong_m, DMAF_SPLIT_ALL, (dir / "x").c_str(), &rows) == DMAF_ERR_CONFIG);
  dmaf_trainer* bad = nullptr;
  CHECK(dmaf_trainer_create(cfg, wrong_m, DMAF_SPLIT_ALL, &bad) == DMAF_ERR_CONFIG);
  dmaf_corpus* wrong_c = small_corpus(3, 4);
  CHECK(dmaf_model_evaluate(model, wrong_c, DMAF_SPLIT_ALL, (dir / "x").c_str(), &rows) == DMAF_ERR_CONFIG);

  int n_files = 0;
  REQUIRE(dmaf_plot((dir / "runlog.csv").c_str(), (dir / "plots").c_str(), &n_files) == DMAF_OK);
  CHECK(n_files > 4);
  REQUIRE(dmaf_plot((dir / "eval" / "combinations.csv").c_str(), (dir / "plots2").c_str(), &n_files) == DMAF_OK);
  std::ofstream(dir / "junk.csv") << "a,b\n1,2\n";
  CHECK(dmaf_plot((dir / "junk.csv").c_str(), (dir / "plots3").c_str(), &n_files) == DMAF_ERR_FORMAT);

  dmaf_config* stored = nullptr;
  REQUIRE(dmaf_checkpoint_config(ckpt.c_str(), &stored) == DMAF_OK);
  dmaf_config_free(stored);
  CHECK(dmaf_model_load((dir / "junk.csv").c_str(), &model) != DMAF_OK);

  dmaf_corpus_free(wrong_c);
  dmaf_corpus_free(wrong_m);
  dmaf_model_free(model);
  dmaf_trainer_free(again);
  dmaf_trainer_free(tr);
  dmaf_config_free(cfg);
  dmaf_corpus_free(corpus);
}
