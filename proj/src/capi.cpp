#include "dmaf/dmaf.h"

#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "dmaf/datagen.hpp"
#include "dmaf/error.hpp"
#include "dmaf/report.hpp"
#include "dmaf/train.hpp"

struct dmaf_corpus {
  dmaf::data::Corpus corpus;
};

struct dmaf_config {
  dmaf::train::RunConfig config;
};

struct dmaf_trainer {
  std::unique_ptr<dmaf::train::Trainer> trainer;
};

struct dmaf_model {
  dmaf::train::LoadedModel model;
};

namespace {

thread_local std::string g_last_error;

dmaf_status to_status(dmaf::ErrorCode c) { return static_cast<dmaf_status>(static_cast<int>(c)); }

template <class F>
dmaf_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return DMAF_OK;
  } catch (const dmaf::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return DMAF_ERR_FORMAT;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return DMAF_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return DMAF_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DMAF_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  dmaf::require(p != nullptr, dmaf::ErrorCode::kInvalidArgument, std::string(what) + " must not be null");
}

std::vector<dmaf::data::ModalitySample> select(const dmaf::data::Corpus& c, dmaf_split split, double val_fraction,
                                               std::uint64_t seed) {
  if (split == DMAF_SPLIT_ALL) return c.samples;
  dmaf::require(split == DMAF_SPLIT_TRAIN || split == DMAF_SPLIT_VAL, dmaf::ErrorCode::kInvalidArgument,
                "unknown split");
  const auto [tr, val] = dmaf::train::split_indices(static_cast<int>(c.samples.size()), val_fraction, seed);
  std::vector<dmaf::data::ModalitySample> out;
  for (int i : split == DMAF_SPLIT_TRAIN ? tr : val) out.push_back(c.samples[i]);
  return out;
}

void check_corpus(const dmaf::model::NetConfig& net, const dmaf::data::Corpus& c) {
  dmaf::require(c.spec.n_modalities() == net.n_modalities && c.spec.n_classes == net.n_classes, dmaf::ErrorCode::kConfig,
                "corpus has M=" + std::to_string(c.spec.n_modalities()) + ", C=" + std::to_string(c.spec.n_classes) +
                    " but config expects M=" + std::to_string(net.n_modalities) +
                    ", C=" + std::to_string(net.n_classes));
}

}  // namespace

extern "C" {

uint32_t dmaf_abi_version(void) { return DMAF_ABI_VERSION; }

const char* dmaf_last_error(void) { return g_last_error.c_str(); }

const char* dmaf_status_name(dmaf_status s) {
  switch (s) {
    case DMAF_OK: return "ok";
    case DMAF_ERR_INVALID_ARGUMENT: return "invalid argument";
    case DMAF_ERR_SHAPE: return "shape mismatch";
    case DMAF_ERR_IO: return "i/o error";
    case DMAF_ERR_FORMAT: return "format error";
    case DMAF_ERR_NUMERIC: return "numeric error";
    case DMAF_ERR_CONFIG: return "config error";
    case DMAF_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

dmaf_status dmaf_corpus_generate(int n_samples, int height, int width, int n_classes, int n_modalities,
                                 const char* mode, const double* rates, size_t n_rates, uint64_t seed,
                                 dmaf_corpus** out) {
  return guarded([&] {
    need(out, "out");
    need(mode, "mode");
    dmaf::data::MissingProtocol p;
    p.mode = dmaf::data::parse_mode(mode);
    p.seed = seed;
    if (p.mode == dmaf::data::MissingMode::kPdt) {
      p = dmaf::data::preset_pdt(n_modalities, seed);
    } else {
      dmaf::require(rates != nullptr || n_rates == 0, dmaf::ErrorCode::kInvalidArgument, "rates must not be null");
      p.target_rates.assign(rates, rates + n_rates);
    }
    auto spec = dmaf::data::default_scene(height, width, n_classes, n_modalities);
    auto c = std::make_unique<dmaf_corpus>();
    c->corpus = dmaf::data::generate_corpus(spec, p, n_samples);
    *out = c.release();
  });
}

dmaf_status dmaf_corpus_load(const char* dir, dmaf_corpus** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    auto c = std::make_unique<dmaf_corpus>();
    c->corpus = dmaf::data::read_corpus(dir);
    *out = c.release();
  });
}

dmaf_status dmaf_corpus_save(const dmaf_corpus* corpus, const char* dir) {
  return guarded([&] {
    need(corpus, "corpus");
    need(dir, "dir");
    dmaf::data::write_corpus(corpus->corpus, dir);
  });
}

int dmaf_corpus_size(const dmaf_corpus* corpus) {
  return corpus ? static_cast<int>(corpus->corpus.samples.size()) : 0;
}

int dmaf_corpus_modalities(const dmaf_corpus* corpus) { return corpus ? corpus->corpus.spec.n_modalities() : 0; }

dmaf_status dmaf_corpus_missing_rate(const dmaf_corpus* corpus, int modality, double* out) {
  return guarded([&] {
    need(corpus, "corpus");
    need(out, "out");
    dmaf::require(modality >= 0 && modality < corpus->corpus.presence.n_modalities(),
                  dmaf::ErrorCode::kInvalidArgument, "modality index out of range");
    *out = corpus->corpus.presence.missing_rate(modality);
  });
}

void dmaf_corpus_free(dmaf_corpus* corpus) { delete corpus; }

dmaf_status dmaf_config_create(dmaf_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new dmaf_config{};
  });
}

dmaf_status dmaf_config_load(const char* path, dmaf_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    std::ifstream is(path);
    dmaf::require(is.good(), dmaf::ErrorCode::kIo, std::string("cannot open config ") + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      dmaf::fail(dmaf::ErrorCode::kConfig, std::string("config ") + path + ": " + e.what());
    }
    auto c = std::make_unique<dmaf_config>();
    c->config = dmaf::train::config_from_json(j);
    *out = c.release();
  });
}

dmaf_status dmaf_config_set(dmaf_config* config, const char* key, const char* value) {
  return guarded([&] {
    need(config, "config");
    need(key, "key");
    need(value, "value");
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      v = std::string(value);  // bare strings such as paths
    }
    std::string k(key);
    nlohmann::json patch;
    if (const auto dot = k.find('.'); dot != std::string::npos)
      patch[k.substr(0, dot)][k.substr(dot + 1)] = v;
    else
      patch[k] = v;
    config->config = dmaf::train::config_from_json(patch, config->config);
  });
}

size_t dmaf_config_to_json(const dmaf_config* config, char* buf, size_t size) {
  if (!config) return 0;
  const auto s = dmaf::train::to_json(config->config).dump(2);
  if (buf && size) {
    const size_t n = std::min(size - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
  }
  return s.size();
}

void dmaf_config_free(dmaf_config* config) { delete config; }

dmaf_status dmaf_trainer_create(const dmaf_config* config, const dmaf_corpus* corpus, dmaf_split split,
                                dmaf_trainer** out) {
  return guarded([&] {
    need(config, "config");
    need(corpus, "corpus");
    need(out, "out");
    const auto& cfg = config->config;
    check_corpus(cfg.net, corpus->corpus);
    auto t = std::make_unique<dmaf_trainer>();
    t->trainer = std::make_unique<dmaf::train::Trainer>(cfg, select(corpus->corpus, split, cfg.val_fraction, cfg.seed));
    *out = t.release();
  });
}

dmaf_status dmaf_trainer_step(dmaf_trainer* trainer, double* total_loss) {
  return guarded([&] {
    need(trainer, "trainer");
    const auto r = trainer->trainer->next();
    if (total_loss) *total_loss = r.losses.total;
  });
}

dmaf_status dmaf_trainer_run_epochs(dmaf_trainer* trainer, int epochs) {
  return guarded([&] {
    need(trainer, "trainer");
    dmaf::require(epochs >= 0, dmaf::ErrorCode::kInvalidArgument, "epochs must be >= 0");
    trainer->trainer->train_epochs(epochs);
  });
}

long dmaf_trainer_steps(const dmaf_trainer* trainer) { return trainer ? trainer->trainer->steps_done() : 0; }

int dmaf_trainer_train_size(const dmaf_trainer* trainer) {
  return trainer ? static_cast<int>(trainer->trainer->train_set().size()) : 0;
}

dmaf_status dmaf_trainer_save(const dmaf_trainer* trainer, const char* path) {
  return guarded([&] {
    need(trainer, "trainer");
    need(path, "path");
    trainer->trainer->save_checkpoint(path);
  });
}

dmaf_status dmaf_trainer_resume(dmaf_trainer* trainer, const char* path) {
  return guarded([&] {
    need(trainer, "trainer");
    need(path, "path");
    trainer->trainer->load_checkpoint(path);
  });
}

dmaf_status dmaf_trainer_write_log(const dmaf_trainer* trainer, const char* path) {
  return guarded([&] {
    need(trainer, "trainer");
    need(path, "path");
    dmaf::train::write_runlog(trainer->trainer->log(), trainer->trainer->config().net.n_modalities, path);
  });
}

void dmaf_trainer_free(dmaf_trainer* trainer) { delete trainer; }

dmaf_status dmaf_checkpoint_config(const char* path, dmaf_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto c = std::make_unique<dmaf_config>();
    c->config = dmaf::train::read_checkpoint_config(path);
    *out = c.release();
  });
}

dmaf_status dmaf_model_load(const char* checkpoint, dmaf_model** out) {
  return guarded([&] {
    need(checkpoint, "checkpoint");
    need(out, "out");
    auto m = std::make_unique<dmaf_model>();
    m->model = dmaf::train::load_model(checkpoint);
    *out = m.release();
  });
}

dmaf_status dmaf_model_evaluate(const dmaf_model* model, const dmaf_corpus* corpus, dmaf_split split,
                                const char* out_dir, int* n_rows) {
  return guarded([&] {
    need(model, "model");
    need(corpus, "corpus");
    need(out_dir, "out_dir");
    const auto& cfg = model->model.config;
    check_corpus(cfg.net, corpus->corpus);
    const auto samples = select(corpus->corpus, split, cfg.val_fraction, cfg.seed);
    const auto report = dmaf::train::evaluate(*model->model.net, cfg.switches.use_dmaf, samples,
                                              dmaf::train::all_combinations(cfg.net.n_modalities), cfg.hd_percentile);
    dmaf::train::write_report(report, out_dir);
    if (n_rows) *n_rows = static_cast<int>(report.table.size());
  });
}

dmaf_status dmaf_model_evaluate_unimodal(const dmaf_model* model, const dmaf_corpus* corpus, dmaf_split split,
                                         double* out, size_t n_out) {
  return guarded([&] {
    need(model, "model");
    need(corpus, "corpus");
    need(out, "out");
    const auto& cfg = model->model.config;
    check_corpus(cfg.net, corpus->corpus);
    dmaf::require(n_out >= static_cast<size_t>(cfg.net.n_modalities), dmaf::ErrorCode::kInvalidArgument,
                  "output buffer smaller than the modality count");
    const auto dsc =
        dmaf::train::evaluate_unimodal(*model->model.net, select(corpus->corpus, split, cfg.val_fraction, cfg.seed));
    std::copy(dsc.begin(), dsc.end(), out);
  });
}

void dmaf_model_free(dmaf_model* model) { delete model; }

dmaf_status dmaf_plot(const char* input_csv, const char* out_dir, int* n_files) {
  return guarded([&] {
    need(input_csv, "input_csv");
    need(out_dir, "out_dir");
    const auto files = dmaf::report::plot(input_csv, out_dir);
    if (n_files) *n_files = static_cast<int>(files.size());
  });
}

}  // extern "C"
