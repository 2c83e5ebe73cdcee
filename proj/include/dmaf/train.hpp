#pragma once

// Training and evaluation loops wiring the network, the distillation stage,
// the DTM controller and AdamW together, plus checkpointing and run logs.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dmaf/datagen.hpp"
#include "dmaf/distill.hpp"
#include "dmaf/dtm.hpp"
#include "dmaf/model.hpp"
#include "dmaf/objective.hpp"
#include "dmaf/optimizer.hpp"
#include "json.hpp"

namespace dmaf::train {

inline constexpr int kCheckpointVersion = 1;

struct Switches {
  bool use_dmaf = true;
  bool use_distill = true;
  bool use_dtm = true;
  bool operator==(const Switches&) const = default;
};

struct RunConfig {
  std::string corpus;
  std::string output_dir;
  model::NetConfig net;
  optim::AdamWConfig optimizer;
  int epochs = 300;
  int batch_size = 1;
  objective::Lambdas lambdas;
  double alpha1_init = 0.6;
  std::vector<double> tau;  // per modality; empty means 1.0 for every modality
  double proto_eps = 1e-5;
  double dtm_eps = 1e-8;
  double gap_mean_decay = 0.99;
  Switches switches;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  double hd_percentile = 100.0;
};

nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys are rejected; missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
void validate(const RunConfig& cfg);
std::vector<double> resolved_tau(const RunConfig& cfg);

struct ModalityTelemetry {
  bool present = false;
  double gr = 0, gp = 0;  // raw gaps observed this step
  double ema_gr = 0, ema_gp = 0, g_total = 0;
  double weight = 0, gamma = 0;
  std::optional<double> sim;
  bool damped = false;
  double sep = 0;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  std::string sample_id;
  objective::LossBreakdown losses;
  double alpha1 = 0, alpha2 = 0;
  std::vector<ModalityTelemetry> modalities;
};

// Column contract of the run log CSV.
std::vector<std::string> runlog_columns(int n_modalities);
void write_runlog(const std::vector<StepRecord>& log, int n_modalities, const std::filesystem::path& path);

// Train/validation split of sample indices by seed.
std::pair<std::vector<int>, std::vector<int>> split_indices(int n_samples, double val_fraction, std::uint64_t seed);

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<data::ModalitySample> train_set);

  StepRecord step(const data::ModalitySample& sample);
  // Advances one sample in the seeded epoch order.
  StepRecord next();
  void train_epochs(int epochs);

  const RunConfig& config() const { return cfg_; }
  model::DmafNet& net() { return net_; }
  const model::DmafNet& net() const { return net_; }
  const distill::DistillHead& distill_head() const { return head_; }
  const dtm::GapState& gap_state() const { return gaps_; }
  const std::vector<StepRecord>& log() const { return log_; }
  long steps_done() const { return step_; }
  int epoch() const { return epoch_; }
  const std::vector<data::ModalitySample>& train_set() const { return train_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores weights, optimizer, controller and sampling state. The stored
  // network config must match this trainer's.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  void begin_epoch();

  RunConfig cfg_;
  std::vector<data::ModalitySample> train_;
  model::DmafNet net_;
  model::ParamSet head_params_;
  distill::DistillHead head_;
  optim::AdamW opt_;
  dtm::GapState gaps_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  long step_ = 0;
  int epoch_ = 0;
  std::vector<StepRecord> log_;
};

// Network + config restored from a checkpoint for evaluation.
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<model::DmafNet> net;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);
RunConfig read_checkpoint_config(const std::filesystem::path& checkpoint);

std::vector<double> to_double(const std::vector<float>& v);

// Fused full-resolution prediction for the given presence row.
std::vector<std::uint8_t> predict_fused(const model::DmafNet& net, const data::ModalitySample& sample,
                                        const std::vector<bool>& presence, bool use_dmaf);
std::vector<std::uint8_t> predict_uni(const model::DmafNet& net, const data::ModalitySample& sample, int m);

struct SampleRow {
  std::string sample_id;
  std::vector<bool> combination;
  std::vector<double> dsc;
  std::vector<std::optional<double>> hd;
  double macro_dsc = 0;
};

struct CombinationRow {
  std::vector<bool> combination;
  int n_samples = 0;
  std::vector<double> dsc;      // mean per foreground region
  std::vector<double> hd;       // mean over defined values, NaN if none
  std::vector<int> hd_undefined;
  double macro_dsc = 0;
};

struct MetricsReport {
  int n_modalities = 0;
  int n_classes = 0;
  std::vector<SampleRow> samples;
  std::vector<CombinationRow> table;
};

// Every nonempty subset, ordered by size then lexicographically by modality index.
std::vector<std::vector<bool>> all_combinations(int n_modalities);
std::string combination_name(const std::vector<bool>& c);

MetricsReport evaluate(const model::DmafNet& net, bool use_dmaf, const std::vector<data::ModalitySample>& samples,
                       const std::vector<std::vector<bool>>& combinations, double hd_percentile = 100.0);

// Macro DSC of the shared decoder's per-modality output, over samples where the modality is present.
std::vector<double> evaluate_unimodal(const model::DmafNet& net, const std::vector<data::ModalitySample>& samples);

void write_report(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace dmaf::train
