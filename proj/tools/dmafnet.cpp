// dmafnet: command line front end over the C interface.
//
//   dmafnet gen-data --out DIR [--n-samples N] [--size S] [--classes C] [--modalities M]
//                    [--mode idt|pdt] [--rates r0,r1,...] [--seed S]
//   dmafnet train    --corpus DIR [--config FILE] [--set key=value]... [--out DIR] [--resume CKPT]
//   dmafnet eval     --checkpoint FILE --corpus DIR --out DIR [--split all|train|val]
//   dmafnet plot     --input CSV --out DIR
//
// Relative output directories are placed under $DMAF_OUTPUT_ROOT when it is set.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmaf/dmaf.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Failure {
  dmaf_status status;
};

void check(dmaf_status s, const char* what) {
  if (s == DMAF_OK) return;
  std::fprintf(stderr, "dmafnet: %s failed (%s): %s\n", what, dmaf_status_name(s), dmaf_last_error());
  throw Failure{s};
}

fs::path output_path(const std::string& p) {
  fs::path path(p);
  const char* root = std::getenv("DMAF_OUTPUT_ROOT");
  if (path.is_relative() && root && *root) path = fs::path(root) / path;
  return path;
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  ~Handle() { Free(p); }
};

using Corpus = Handle<dmaf_corpus, dmaf_corpus_free>;
using Config = Handle<dmaf_config, dmaf_config_free>;
using Trainer = Handle<dmaf_trainer, dmaf_trainer_free>;
using Model = Handle<dmaf_model, dmaf_model_free>;

dmaf_split parse_split(const std::string& s) {
  if (s == "train") return DMAF_SPLIT_TRAIN;
  if (s == "val") return DMAF_SPLIT_VAL;
  return DMAF_SPLIT_ALL;
}

std::string config_json(const dmaf_config* c) {
  std::string s(dmaf_config_to_json(c, nullptr, 0) + 1, '\0');
  dmaf_config_to_json(c, s.data(), s.size());
  s.pop_back();
  return s;
}

struct GenArgs {
  std::string out;
  int n_samples = 64, size = 64, classes = 3, modalities = 3;
  std::string mode = "idt";
  std::vector<double> rates = {0.2, 0.5, 0.8};
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  Corpus c;
  check(dmaf_corpus_generate(a.n_samples, a.size, a.size, a.classes, a.modalities, a.mode.c_str(), a.rates.data(),
                             a.rates.size(), a.seed, &c.p),
        "gen-data");
  const auto out = output_path(a.out);
  check(dmaf_corpus_save(c.p, out.string().c_str()), "gen-data");
  std::printf("wrote %d samples to %s\n", dmaf_corpus_size(c.p), out.string().c_str());
  for (int m = 0; m < dmaf_corpus_modalities(c.p); ++m) {
    double r = 0;
    check(dmaf_corpus_missing_rate(c.p, m, &r), "gen-data");
    std::printf("  modality %d missing rate %.4f\n", m, r);
  }
  return 0;
}

struct TrainArgs {
  std::string config, corpus, out, resume;
  std::vector<std::string> sets;
  int epochs = -1;
  long long seed = -1;
  bool no_dmaf = false, no_distill = false, no_dtm = false;
};

int run_train(const TrainArgs& a) {
  Config cfg;
  if (a.config.empty())
    check(dmaf_config_create(&cfg.p), "config");
  else
    check(dmaf_config_load(a.config.c_str(), &cfg.p), "config");
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "dmafnet: --set expects key=value, got '%s'\n", kv.c_str());
      return 2;
    }
    check(dmaf_config_set(cfg.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "config");
  }
  if (!a.corpus.empty()) check(dmaf_config_set(cfg.p, "corpus", a.corpus.c_str()), "config");
  if (!a.out.empty()) check(dmaf_config_set(cfg.p, "output_dir", a.out.c_str()), "config");
  if (a.epochs >= 0) check(dmaf_config_set(cfg.p, "epochs", std::to_string(a.epochs).c_str()), "config");
  if (a.seed >= 0) check(dmaf_config_set(cfg.p, "seed", std::to_string(a.seed).c_str()), "config");
  if (a.no_dmaf) check(dmaf_config_set(cfg.p, "use_dmaf", "false"), "config");
  if (a.no_distill) check(dmaf_config_set(cfg.p, "use_distill", "false"), "config");
  if (a.no_dtm) check(dmaf_config_set(cfg.p, "use_dtm", "false"), "config");

  const auto j = nlohmann::json::parse(config_json(cfg.p));
  const auto corpus_dir = j.at("corpus").get<std::string>();
  if (corpus_dir.empty()) {
    std::fprintf(stderr, "dmafnet: no corpus given (--corpus or \"corpus\" in the config)\n");
    return 2;
  }
  auto out_dir = j.at("output_dir").get<std::string>();
  if (out_dir.empty()) out_dir = "run";
  const auto out = output_path(out_dir);
  fs::create_directories(out);

  Corpus corpus;
  check(dmaf_corpus_load(corpus_dir.c_str(), &corpus.p), "load corpus");
  Trainer t;
  check(dmaf_trainer_create(cfg.p, corpus.p, DMAF_SPLIT_TRAIN, &t.p), "create trainer");
  if (!a.resume.empty()) check(dmaf_trainer_resume(t.p, a.resume.c_str()), "resume");
  {
    std::FILE* f = std::fopen((out / "config.json").string().c_str(), "wb");
    if (!f) {
      std::fprintf(stderr, "dmafnet: cannot write %s\n", (out / "config.json").string().c_str());
      return 1;
    }
    const auto text = j.dump(2) + "\n";
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }
  const long target = static_cast<long>(j.at("epochs").get<int>()) * dmaf_trainer_train_size(t.p);
  const long report_every = std::max(1L, target / 20);
  while (dmaf_trainer_steps(t.p) < target) {
    double total = 0;
    check(dmaf_trainer_step(t.p, &total), "train step");
    const long s = dmaf_trainer_steps(t.p);
    if (s % report_every == 0 || s == target) std::printf("step %ld/%ld total %.6f\n", s, target, total);
  }
  check(dmaf_trainer_save(t.p, (out / "checkpoint.bin").string().c_str()), "save checkpoint");
  check(dmaf_trainer_write_log(t.p, (out / "runlog.csv").string().c_str()), "write run log");
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& corpus_dir, const std::string& out_dir,
             const std::string& split) {
  Model m;
  check(dmaf_model_load(checkpoint.c_str(), &m.p), "load checkpoint");
  Corpus corpus;
  check(dmaf_corpus_load(corpus_dir.c_str(), &corpus.p), "load corpus");
  const auto out = output_path(out_dir);
  int rows = 0;
  check(dmaf_model_evaluate(m.p, corpus.p, parse_split(split), out.string().c_str(), &rows), "evaluate");
  std::vector<double> uni(static_cast<std::size_t>(dmaf_corpus_modalities(corpus.p)));
  check(dmaf_model_evaluate_unimodal(m.p, corpus.p, parse_split(split), uni.data(), uni.size()), "evaluate");
  std::printf("wrote %d combination rows to %s\n", rows, (out / "combinations.csv").string().c_str());
  for (std::size_t k = 0; k < uni.size(); ++k) std::printf("  modality %zu own-decoder macro DSC %.4f\n", k, uni[k]);
  return 0;
}

int run_plot(const std::string& input, const std::string& out_dir) {
  const auto out = output_path(out_dir);
  int n = 0;
  check(dmaf_plot(input.c_str(), out.string().c_str(), &n), "plot");
  std::printf("wrote %d files to %s\n", n, out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DMAF-Net incomplete multi-modal segmentation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic corpus");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--n-samples", gen.n_samples, "number of samples")->capture_default_str();
  g->add_option("--size", gen.size, "image height and width")->capture_default_str();
  g->add_option("--classes", gen.classes, "classes including background")->capture_default_str();
  g->add_option("--modalities", gen.modalities, "number of modalities")->capture_default_str();
  g->add_option("--mode", gen.mode, "missing protocol")->check(CLI::IsMember({"idt", "pdt"}))->capture_default_str();
  g->add_option("--rates", gen.rates, "per-modality missing rates")->delimiter(',');
  g->add_option("--seed", gen.seed, "seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", tr.config, "JSON config file")->check(CLI::ExistingFile);
  t->add_option("--set", tr.sets, "override a config key (key=value, value as JSON)");
  t->add_option("--corpus", tr.corpus, "corpus directory");
  t->add_option("--out", tr.out, "output directory");
  t->add_option("--epochs", tr.epochs, "epochs");
  t->add_option("--seed", tr.seed, "seed");
  t->add_option("--resume", tr.resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  t->add_flag("--no-dmaf", tr.no_dmaf, "fuse by masked mean instead of DMAF");
  t->add_flag("--no-distill", tr.no_distill, "disable relation and prototype distillation");
  t->add_flag("--no-dtm", tr.no_dtm, "disable training monitoring");

  std::string ckpt, eval_corpus, eval_out, split = "all";
  auto* e = app.add_subcommand("eval", "evaluate every modality combination");
  e->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--corpus", eval_corpus, "corpus directory")->required();
  e->add_option("--out", eval_out, "report directory")->required();
  e->add_option("--split", split, "corpus split")->check(CLI::IsMember({"all", "train", "val"}))->capture_default_str();

  std::string plot_in, plot_out;
  auto* p = app.add_subcommand("plot", "plot a run log or combination table");
  p->add_option("--input", plot_in, "runlog.csv or combinations.csv")->required()->check(CLI::ExistingFile);
  p->add_option("--out", plot_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ckpt, eval_corpus, eval_out, split);
    if (*p) return run_plot(plot_in, plot_out);
  } catch (const Failure&) {
    return 1;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "dmafnet: %s\n", ex.what());
    return 1;
  }
  return 2;
}
