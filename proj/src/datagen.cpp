#include "dmaf/datagen.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dmaf/error.hpp"
#include "json.hpp"

namespace dmaf::data {

using nlohmann::json;

PresenceMatrix::PresenceMatrix(int n_samples, int n_modalities, std::vector<std::uint8_t> entries)
    : n_samples_(n_samples), n_modalities_(n_modalities), entries_(std::move(entries)) {
  require(n_samples >= 1 && n_modalities >= 1, ErrorCode::kInvalidArgument, "presence matrix: empty dimensions");
  require(entries_.size() == static_cast<std::size_t>(n_samples) * n_modalities, ErrorCode::kShapeMismatch,
          "presence matrix: entry count");
  for (auto e : entries_) require(e <= 1, ErrorCode::kInvalidArgument, "presence matrix: non-binary entry");
}

std::vector<bool> PresenceMatrix::row(int n) const {
  std::vector<bool> r(n_modalities_);
  for (int m = 0; m < n_modalities_; ++m) r[m] = at(n, m);
  return r;
}

int PresenceMatrix::column_count(int m) const {
  int c = 0;
  for (int n = 0; n < n_samples_; ++n) c += at(n, m);
  return c;
}

double PresenceMatrix::missing_rate(int m) const {
  return static_cast<double>(n_samples_ - column_count(m)) / n_samples_;
}

std::vector<double> PresenceMatrix::missing_rates() const {
  std::vector<double> r(n_modalities_);
  for (int m = 0; m < n_modalities_; ++m) r[m] = missing_rate(m);
  return r;
}

std::string to_string(MissingMode mode) { return mode == MissingMode::kPdt ? "pdt" : "idt"; }

MissingMode parse_mode(const std::string& s) {
  if (s == "pdt" || s == "PDT") return MissingMode::kPdt;
  if (s == "idt" || s == "IDT") return MissingMode::kIdt;
  fail(ErrorCode::kInvalidArgument, "unknown missing mode '" + s + "' (expected pdt or idt)");
}

MissingProtocol preset_table1_brats(std::uint64_t seed) { return {MissingMode::kIdt, {0.2, 0.5, 0.8}, seed}; }
MissingProtocol preset_table2(std::uint64_t seed) { return {MissingMode::kIdt, {0.2, 0.4, 0.6, 0.8}, seed}; }
MissingProtocol preset_pdt(int n_modalities, std::uint64_t seed) {
  return {MissingMode::kPdt, std::vector<double>(n_modalities, 0.0), seed};
}

PresenceMatrix sample_presence(const MissingProtocol& protocol, int n_samples, int n_modalities) {
  require(n_samples >= 1, ErrorCode::kInvalidArgument, "sample_presence: n_samples must be >= 1");
  require(n_modalities >= 1, ErrorCode::kInvalidArgument, "sample_presence: n_modalities must be >= 1");
  std::vector<double> rates(n_modalities, 0.0);
  if (protocol.mode == MissingMode::kIdt) {
    require(static_cast<int>(protocol.target_rates.size()) == n_modalities, ErrorCode::kInvalidArgument,
            "sample_presence: expected " + std::to_string(n_modalities) + " target rates, got " +
                std::to_string(protocol.target_rates.size()));
    rates = protocol.target_rates;
  }
  std::vector<int> drop(n_modalities);
  long present_total = 0;
  for (int m = 0; m < n_modalities; ++m) {
    require(rates[m] >= 0.0 && rates[m] < 1.0, ErrorCode::kInvalidArgument,
            "sample_presence: rate for modality " + std::to_string(m) + " outside [0,1)");
    drop[m] = static_cast<int>(std::llround(rates[m] * n_samples));
    require(drop[m] < n_samples, ErrorCode::kInvalidArgument,
            "sample_presence: modality " + std::to_string(m) + " would be missing from every sample at N=" +
                std::to_string(n_samples));
    present_total += n_samples - drop[m];
  }
  if (present_total < n_samples)
    fail(ErrorCode::kInvalidArgument, "sample_presence: rates leave " + std::to_string(present_total) +
                                          " present entries for " + std::to_string(n_samples) +
                                          " samples; every sample needs at least one modality");

  std::mt19937_64 rng(protocol.seed);
  std::vector<std::uint8_t> e(static_cast<std::size_t>(n_samples) * n_modalities, 1);
  auto at = [&](int n, int m) -> std::uint8_t& { return e[static_cast<std::size_t>(n) * n_modalities + m]; };
  std::vector<int> rows(n_samples);
  for (int m = 0; m < n_modalities; ++m) {
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    for (int i = 0; i < drop[m]; ++i) at(rows[i], m) = 0;
  }

  auto row_sum = [&](int n) {
    int s = 0;
    for (int m = 0; m < n_modalities; ++m) s += at(n, m);
    return s;
  };
  // Lowest realized missing rate first; those columns have the most donors.
  std::vector<int> order(n_modalities);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return drop[a] < drop[b]; });

  std::vector<int> failed;
  for (int n = 0; n < n_samples; ++n) {
    if (row_sum(n) > 0) continue;
    bool repaired = false;
    for (int m : order) {
      std::vector<int> donors;
      for (int r = 0; r < n_samples; ++r)
        if (at(r, m) && row_sum(r) >= 2) donors.push_back(r);
      if (donors.empty()) continue;
      int donor = donors[std::uniform_int_distribution<std::size_t>(0, donors.size() - 1)(rng)];
      at(donor, m) = 0;
      at(n, m) = 1;
      repaired = true;
      break;
    }
    if (!repaired) failed.push_back(n);
  }
  if (!failed.empty()) {
    std::ostringstream os;
    os << "sample_presence: could not repair all-absent rows:";
    for (int r : failed) os << ' ' << r;
    fail(ErrorCode::kInvalidArgument, os.str());
  }
  return PresenceMatrix(n_samples, n_modalities, std::move(e));
}

bool Ellipse::contains(double y, double x) const {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return (u / ax) * (u / ax) + (v / ay) * (v / ay) <= 1.0;
}

SceneSpec default_scene(int height, int width, int n_classes, int n_modalities) {
  require(n_classes >= 2, ErrorCode::kInvalidArgument, "scene: need at least one foreground class");
  require(n_modalities >= 1, ErrorCode::kInvalidArgument, "scene: need at least one modality");
  SceneSpec s;
  s.height = height;
  s.width = width;
  s.n_classes = n_classes;
  for (int m = 0; m < n_modalities; ++m) {
    ModalityRenderer r;
    r.class_intensity.assign(n_classes, 0.0);
    if (m == 0) {
      for (int c = 1; c < n_classes; ++c) {
        r.class_intensity[c] = static_cast<double>(c);
        r.visible.push_back(c);
      }
      r.noise_sigma = 0.15;
    } else {
      int c = (m - 1) % (n_classes - 1) + 1;
      r.class_intensity[c] = 1.0 + 0.25 * m;
      r.visible.push_back(c);
      r.noise_sigma = 0.25;
    }
    s.renderers.push_back(std::move(r));
  }
  return s;
}

void validate_scene(const SceneSpec& spec) {
  require(spec.height >= 4 && spec.width >= 4, ErrorCode::kInvalidArgument, "scene: image too small");
  require(spec.n_classes >= 2 && spec.n_classes <= 255, ErrorCode::kInvalidArgument, "scene: class count");
  require(!spec.renderers.empty(), ErrorCode::kInvalidArgument, "scene: no modality renderers");
  require(spec.outer_axis_min > 0 && spec.outer_axis_min <= spec.outer_axis_max && spec.outer_axis_max < 0.5,
          ErrorCode::kInvalidArgument, "scene: outer axis range");
  require(spec.inner_scale_min > 0 && spec.inner_scale_min <= spec.inner_scale_max && spec.inner_scale_max < 1.0,
          ErrorCode::kInvalidArgument, "scene: inner scale range");
  std::vector<bool> covered(spec.n_classes, false);
  for (const auto& r : spec.renderers) {
    require(static_cast<int>(r.class_intensity.size()) == spec.n_classes, ErrorCode::kInvalidArgument,
            "scene: renderer intensity table size");
    require(r.noise_sigma >= 0, ErrorCode::kInvalidArgument, "scene: negative noise");
    for (int c : r.visible) require(c >= 1 && c < spec.n_classes, ErrorCode::kInvalidArgument, "scene: visible class");
  }
  // Some renderer must separate every class: all foreground visible with distinct plateaus.
  bool solvable = false;
  for (const auto& r : spec.renderers) {
    if (static_cast<int>(r.visible.size()) != spec.n_classes - 1) continue;
    std::vector<double> v = r.class_intensity;
    std::sort(v.begin(), v.end());
    if (std::adjacent_find(v.begin(), v.end()) == v.end()) solvable = true;
  }
  require(solvable, ErrorCode::kInvalidArgument, "scene: no modality renders every class with contrast");
}

std::vector<Ellipse> sample_geometry(const SceneSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const double size = std::min(spec.height, spec.width);
  std::vector<Ellipse> regions;
  Ellipse outer;
  outer.ay = uni(spec.outer_axis_min, spec.outer_axis_max) * size;
  outer.ax = uni(spec.outer_axis_min, spec.outer_axis_max) * size;
  outer.theta = uni(0.0, M_PI);
  const double reach = std::max(outer.ay, outer.ax) + 1.0;
  outer.cy = uni(reach, spec.height - reach);
  outer.cx = uni(reach, spec.width - reach);
  regions.push_back(outer);
  for (int c = 2; c < spec.n_classes; ++c) {
    const Ellipse& prev = regions.back();
    const double s = uni(spec.inner_scale_min, spec.inner_scale_max);
    Ellipse in = prev;
    in.ay = prev.ay * s;
    in.ax = prev.ax * s;
    // |offset| <= min_axis * (1 - s) keeps the scaled copy inside prev.
    const double r = uni(0.0, 0.8) * std::min(prev.ay, prev.ax) * (1.0 - s);
    const double phi = uni(0.0, 2.0 * M_PI);
    in.cy = prev.cy + r * std::sin(phi);
    in.cx = prev.cx + r * std::cos(phi);
    regions.push_back(in);
  }
  return regions;
}

std::vector<std::uint8_t> rasterize(const std::vector<Ellipse>& regions, int height, int width) {
  for (const auto& e : regions)
    require(e.ay > 0 && e.ax > 0, ErrorCode::kInvalidArgument, "rasterize: degenerate ellipse (zero axis)");
  std::vector<std::uint8_t> label(static_cast<std::size_t>(height) * width, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      std::uint8_t c = 0;
      for (std::size_t r = 0; r < regions.size(); ++r)
        if (regions[r].contains(y + 0.5, x + 0.5)) c = static_cast<std::uint8_t>(r + 1);
      label[static_cast<std::size_t>(y) * width + x] = c;
    }
  return label;
}

void standardize(std::vector<float>& plane) {
  if (plane.empty()) return;
  double mu = 0.0;
  for (float v : plane) mu += v;
  mu /= static_cast<double>(plane.size());
  double var = 0.0;
  for (float v : plane) var += (v - mu) * (v - mu);
  var /= static_cast<double>(plane.size());
  const double sd = std::sqrt(var);
  const double inv = sd > 1e-8 ? 1.0 / sd : 1.0;
  for (float& v : plane) v = static_cast<float>((v - mu) * inv);
}

ModalitySample render_sample(const SceneSpec& spec, const std::vector<Ellipse>& regions,
                             const std::vector<bool>& presence_row, std::mt19937_64& rng) {
  const int m_count = spec.n_modalities();
  require(static_cast<int>(presence_row.size()) == m_count, ErrorCode::kShapeMismatch,
          "render_sample: presence row length");
  ModalitySample s;
  s.height = spec.height;
  s.width = spec.width;
  s.presence = presence_row;
  s.label = rasterize(regions, spec.height, spec.width);
  const std::size_t px = s.label.size();
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int m = 0; m < m_count; ++m) {
    const auto& r = spec.renderers[m];
    // Intensity of class c: the deepest visible class enclosing it.
    std::vector<double> lut(spec.n_classes, r.class_intensity[0]);
    for (int c = 1; c < spec.n_classes; ++c) {
      int shown = 0;
      for (int v : r.visible)
        if (v <= c) shown = std::max(shown, v);
      lut[c] = r.class_intensity[shown];
    }
    std::vector<float> plane(px);
    // Noise is drawn for every modality so present planes do not depend on the presence row.
    for (std::size_t i = 0; i < px; ++i) {
      double noise = gauss(rng);
      plane[i] = static_cast<float>(lut[s.label[i]] + r.noise_sigma * noise);
    }
    if (presence_row[m])
      standardize(plane);
    else
      std::fill(plane.begin(), plane.end(), 0.0f);
    s.images.push_back(std::move(plane));
  }
  return s;
}

ModalitySample render_sample(const SceneSpec& spec, const std::vector<bool>& presence_row, std::mt19937_64& rng) {
  validate_scene(spec);
  auto regions = sample_geometry(spec, rng);
  return render_sample(spec, regions, presence_row, rng);
}

namespace {

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

std::string sample_name(int n) {
  std::ostringstream os;
  os << 's' << std::setw(5) << std::setfill('0') << n;
  return os.str();
}

json scene_to_json(const SceneSpec& s) {
  json r = json::array();
  for (const auto& m : s.renderers)
    r.push_back({{"class_intensity", m.class_intensity}, {"visible", m.visible}, {"noise_sigma", m.noise_sigma}});
  return {{"height", s.height},
          {"width", s.width},
          {"n_classes", s.n_classes},
          {"outer_axis_min", s.outer_axis_min},
          {"outer_axis_max", s.outer_axis_max},
          {"inner_scale_min", s.inner_scale_min},
          {"inner_scale_max", s.inner_scale_max},
          {"renderers", r}};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.height = j.at("height");
  s.width = j.at("width");
  s.n_classes = j.at("n_classes");
  s.outer_axis_min = j.at("outer_axis_min");
  s.outer_axis_max = j.at("outer_axis_max");
  s.inner_scale_min = j.at("inner_scale_min");
  s.inner_scale_max = j.at("inner_scale_max");
  for (const auto& r : j.at("renderers")) {
    ModalityRenderer m;
    m.class_intensity = r.at("class_intensity").get<std::vector<double>>();
    m.visible = r.at("visible").get<std::vector<int>>();
    m.noise_sigma = r.at("noise_sigma");
    s.renderers.push_back(std::move(m));
  }
  return s;
}

template <typename T>
void write_le(const std::filesystem::path& p, const std::vector<T>& data) {
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot write " + p.string());
  if constexpr (sizeof(T) > 1 && std::endian::native == std::endian::big) {
    for (T v : data) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      f.write(bytes.data(), sizeof(T));
    }
  } else {
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  }
  require(static_cast<bool>(f), ErrorCode::kIo, "short write to " + p.string());
}

template <typename T>
std::vector<T> read_le(const std::filesystem::path& p, std::size_t count, const std::string& sample_id) {
  std::error_code ec;
  auto size = std::filesystem::file_size(p, ec);
  require(!ec, ErrorCode::kIo, "sample " + sample_id + ": missing file " + p.filename().string());
  require(size == count * sizeof(T), ErrorCode::kFormat,
          "sample " + sample_id + ": " + p.filename().string() + " has " + std::to_string(size) + " bytes, expected " +
              std::to_string(count * sizeof(T)));
  std::vector<T> data(count);
  std::ifstream f(p, std::ios::binary);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
  require(static_cast<bool>(f), ErrorCode::kIo, "sample " + sample_id + ": read failed for " + p.filename().string());
  if constexpr (sizeof(T) > 1 && std::endian::native == std::endian::big) {
    for (T& v : data) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  }
  return data;
}

json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "corrupt JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace

Corpus generate_corpus(const SceneSpec& spec, const MissingProtocol& protocol, int n_samples) {
  validate_scene(spec);
  Corpus c;
  c.protocol = protocol;
  if (protocol.mode == MissingMode::kPdt) c.protocol.target_rates.assign(spec.n_modalities(), 0.0);
  c.spec = spec;
  c.presence = sample_presence(c.protocol, n_samples, spec.n_modalities());
  c.samples.reserve(n_samples);
  for (int n = 0; n < n_samples; ++n) {
    auto rng = substream(protocol.seed, static_cast<std::uint64_t>(n));
    auto s = render_sample(spec, c.presence.row(n), rng);
    s.sample_id = sample_name(n);
    c.samples.push_back(std::move(s));
  }
  return c;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  const int m_count = corpus.presence.n_modalities();
  json presence = json::array();
  json ids = json::array();
  for (int n = 0; n < corpus.presence.n_samples(); ++n) {
    std::vector<int> row(m_count);
    for (int m = 0; m < m_count; ++m) row[m] = corpus.presence.at(n, m);
    presence.push_back(row);
  }
  for (const auto& s : corpus.samples) {
    ids.push_back(s.sample_id);
    const fs::path sd = dir / s.sample_id;
    fs::create_directories(sd, ec);
    require(!ec, ErrorCode::kIo, "cannot create " + sd.string());
    json files = json::array();
    for (int m = 0; m < m_count; ++m) {
      std::string name = "image_" + std::to_string(m) + ".f32";
      write_le(sd / name, s.images[m]);
      files.push_back(name);
    }
    write_le(sd / "label.u8", s.label);
    std::vector<int> pres(s.presence.begin(), s.presence.end());
    json side = {{"format_version", kCorpusFormatVersion},
                 {"sample_id", s.sample_id},
                 {"height", s.height},
                 {"width", s.width},
                 {"n_modalities", m_count},
                 {"presence", pres},
                 {"images", files},
                 {"image_dtype", "float32-le"},
                 {"label", "label.u8"},
                 {"label_dtype", "uint8"}};
    std::ofstream(sd / "sample.json") << side.dump(2) << '\n';
  }
  json manifest = {{"format_version", kCorpusFormatVersion},
                   {"protocol",
                    {{"mode", to_string(corpus.protocol.mode)},
                     {"target_rates", corpus.protocol.target_rates},
                     {"seed", corpus.protocol.seed}}},
                   {"spec", scene_to_json(corpus.spec)},
                   {"n_samples", corpus.presence.n_samples()},
                   {"n_modalities", m_count},
                   {"realized_MR", corpus.presence.missing_rates()},
                   {"presence", presence},
                   {"samples", ids}};
  std::ofstream f(dir / "manifest.json");
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

Corpus read_corpus(const std::filesystem::path& dir) {
  json man = read_json(dir / "manifest.json");
  Corpus c;
  try {
    int version = man.at("format_version");
    if (version != kCorpusFormatVersion)
      fail(ErrorCode::kFormat, "corpus manifest format_version " + std::to_string(version) +
                                   " is not supported (expected " + std::to_string(kCorpusFormatVersion) + ")");
    const auto& p = man.at("protocol");
    c.protocol.mode = parse_mode(p.at("mode"));
    c.protocol.target_rates = p.at("target_rates").get<std::vector<double>>();
    c.protocol.seed = p.at("seed");
    c.spec = scene_from_json(man.at("spec"));
    const int n = man.at("n_samples");
    const int m_count = man.at("n_modalities");
    std::vector<std::uint8_t> entries;
    for (const auto& row : man.at("presence")) {
      require(static_cast<int>(row.size()) == m_count, ErrorCode::kFormat, "manifest: presence row width");
      for (int v : row) entries.push_back(static_cast<std::uint8_t>(v));
    }
    c.presence = PresenceMatrix(n, m_count, std::move(entries));
    const auto ids = man.at("samples").get<std::vector<std::string>>();
    require(static_cast<int>(ids.size()) == n, ErrorCode::kFormat, "manifest: sample list length");
    const std::size_t px = static_cast<std::size_t>(c.spec.height) * c.spec.width;
    for (int i = 0; i < n; ++i) {
      const auto sd = dir / ids[i];
      json side = read_json(sd / "sample.json");
      ModalitySample s;
      s.sample_id = side.at("sample_id");
      require(s.sample_id == ids[i], ErrorCode::kFormat, "sample " + ids[i] + ": sidecar id mismatch");
      s.height = side.at("height");
      s.width = side.at("width");
      require(s.height == c.spec.height && s.width == c.spec.width, ErrorCode::kFormat,
              "sample " + ids[i] + ": shape disagrees with manifest");
      for (int m = 0; m < m_count; ++m) s.presence.push_back(c.presence.at(i, m));
      const auto files = side.at("images").get<std::vector<std::string>>();
      require(static_cast<int>(files.size()) == m_count, ErrorCode::kFormat, "sample " + ids[i] + ": image count");
      for (const auto& f : files) s.images.push_back(read_le<float>(sd / f, px, s.sample_id));
      s.label = read_le<std::uint8_t>(sd / side.at("label").get<std::string>(), px, s.sample_id);
      for (auto v : s.label)
        require(v < c.spec.n_classes, ErrorCode::kFormat, "sample " + ids[i] + ": label value out of range");
      c.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, "corrupt corpus manifest in " + dir.string() + ": " + e.what());
  }
  return c;
}

}  // namespace dmaf::data
