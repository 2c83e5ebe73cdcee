#pragma once

// Synthetic incomplete multi-modal segmentation corpus: presence sampling,
// nested-ellipse scene rendering and the on-disk corpus format.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace dmaf::data {

inline constexpr int kCorpusFormatVersion = 1;

// Binary N x M availability matrix, row-major.
class PresenceMatrix {
 public:
  PresenceMatrix() = default;
  PresenceMatrix(int n_samples, int n_modalities, std::vector<std::uint8_t> entries);

  int n_samples() const { return n_samples_; }
  int n_modalities() const { return n_modalities_; }
  bool at(int n, int m) const { return entries_[static_cast<std::size_t>(n) * n_modalities_ + m] != 0; }
  std::vector<bool> row(int n) const;
  int column_count(int m) const;
  // (N - sum_n I[n,m]) / N
  double missing_rate(int m) const;
  std::vector<double> missing_rates() const;
  const std::vector<std::uint8_t>& entries() const { return entries_; }

  bool operator==(const PresenceMatrix&) const = default;

 private:
  int n_samples_ = 0;
  int n_modalities_ = 0;
  std::vector<std::uint8_t> entries_;
};

enum class MissingMode { kPdt, kIdt };

struct MissingProtocol {
  MissingMode mode = MissingMode::kIdt;
  std::vector<double> target_rates;
  std::uint64_t seed = 0;
};

std::string to_string(MissingMode mode);
MissingMode parse_mode(const std::string& s);

// Named missing-rate presets used by the experiments tables.
MissingProtocol preset_table1_brats(std::uint64_t seed);  // (0.2, 0.5, 0.8)
MissingProtocol preset_table2(std::uint64_t seed);        // (0.2, 0.4, 0.6, 0.8)
MissingProtocol preset_pdt(int n_modalities, std::uint64_t seed);

// Exact-count presence sampling: column m loses round(rate_m * N) entries,
// chosen by seed; all-absent rows are repaired by count-preserving swaps.
PresenceMatrix sample_presence(const MissingProtocol& protocol, int n_samples, int n_modalities);

struct Ellipse {
  double cy = 0, cx = 0;  // center (pixel units, pixel centers at i + 0.5)
  double ay = 1, ax = 1;  // semi-axes
  double theta = 0;       // rotation (radians)

  bool contains(double y, double x) const;
};

struct ModalityRenderer {
  // Plateau intensity per class; classes outside `visible` fall back to the
  // deepest visible enclosing class, or background.
  std::vector<double> class_intensity;
  std::vector<int> visible;  // visible foreground classes
  double noise_sigma = 0.0;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  int n_classes = 3;
  std::vector<ModalityRenderer> renderers;
  // Geometry sampling ranges for the outermost ellipse, as fractions of image size.
  double outer_axis_min = 0.18, outer_axis_max = 0.32;
  double inner_scale_min = 0.45, inner_scale_max = 0.7;

  int n_modalities() const { return static_cast<int>(renderers.size()); }
};

// Dominant modality 0 sees every class; modality m >= 1 sees one foreground class.
SceneSpec default_scene(int height, int width, int n_classes, int n_modalities);
void validate_scene(const SceneSpec& spec);

struct ModalitySample {
  int height = 0, width = 0;
  std::vector<std::vector<float>> images;  // M planes of H*W
  std::vector<std::uint8_t> label;         // H*W
  std::vector<bool> presence;
  std::string sample_id;
};

// Per-sample geometry, nested: regions[c] (class c+1) contains regions[c+1].
std::vector<Ellipse> sample_geometry(const SceneSpec& spec, std::mt19937_64& rng);
std::vector<std::uint8_t> rasterize(const std::vector<Ellipse>& regions, int height, int width);

ModalitySample render_sample(const SceneSpec& spec, const std::vector<Ellipse>& regions,
                             const std::vector<bool>& presence_row, std::mt19937_64& rng);
ModalitySample render_sample(const SceneSpec& spec, const std::vector<bool>& presence_row, std::mt19937_64& rng);

// In-place per-plane standardization; zero-variance planes are only centered.
void standardize(std::vector<float>& plane);

struct Corpus {
  MissingProtocol protocol;
  SceneSpec spec;
  PresenceMatrix presence;
  std::vector<ModalitySample> samples;
};

// Deterministic corpus: sample n uses its own rng substream derived from seed.
Corpus generate_corpus(const SceneSpec& spec, const MissingProtocol& protocol, int n_samples);

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace dmaf::data
