#include "dmaf/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "dmaf/error.hpp"
#include "dmaf/metrics.hpp"

namespace dmaf::train {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'M', 'A', 'F', 'C', 'K', 'P', 'T'};

json net_to_json(const model::NetConfig& n) {
  return {{"n_modalities", n.n_modalities},
          {"n_classes", n.n_classes},
          {"n_levels", n.n_levels},
          {"base_channels", n.base_channels},
          {"height", n.height},
          {"width", n.width},
          {"token_h", n.dmaf.token_h},
          {"token_w", n.dmaf.token_w},
          {"dmaf_layers", n.dmaf.n_layers},
          {"dmaf_heads", n.dmaf.n_heads},
          {"maa_heads", n.maa_heads}};
}

template <class T>
void take(const json& obj, const char* key, T& dst, std::vector<std::string>& seen) {
  seen.emplace_back(key);
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& obj, const std::vector<std::string>& known, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      fail(ErrorCode::kConfig, "unknown config key '" + where + it.key() + "'");
}

model::NetConfig net_from_json(const json& j, model::NetConfig n) {
  std::vector<std::string> seen;
  take(j, "n_modalities", n.n_modalities, seen);
  take(j, "n_classes", n.n_classes, seen);
  take(j, "n_levels", n.n_levels, seen);
  take(j, "base_channels", n.base_channels, seen);
  take(j, "height", n.height, seen);
  take(j, "width", n.width, seen);
  take(j, "token_h", n.dmaf.token_h, seen);
  take(j, "token_w", n.dmaf.token_w, seen);
  take(j, "dmaf_layers", n.dmaf.n_layers, seen);
  take(j, "dmaf_heads", n.dmaf.n_heads, seen);
  take(j, "maa_heads", n.maa_heads, seen);
  reject_unknown(j, seen, "net.");
  return n;
}

// Little-endian binary helpers.
void put_u64(std::string& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = is.get();
    require(c != EOF, ErrorCode::kFormat, "checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
void put_doubles(std::string& os, const std::vector<double>& v) {
  for (double d : v) put_u64(os, std::bit_cast<std::uint64_t>(d));
}
void get_doubles(std::istream& is, std::vector<double>& v) {
  for (double& d : v) d = std::bit_cast<double>(get_u64(is));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<int> present_indices(const std::vector<bool>& presence) {
  std::vector<int> p;
  for (std::size_t m = 0; m < presence.size(); ++m)
    if (presence[m]) p.push_back(static_cast<int>(m));
  return p;
}

std::vector<std::uint8_t> argmax_classes(const ag::Var& logits) {
  const int c = logits->dim(0);
  const std::size_t px = logits->size() / c;
  std::vector<std::uint8_t> out(px);
  for (std::size_t i = 0; i < px; ++i) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (logits->value[k * px + i] > logits->value[best * px + i]) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::vector<std::vector<double>> masked_images(const data::ModalitySample& s, const std::vector<bool>& presence) {
  std::vector<std::vector<double>> images;
  for (std::size_t m = 0; m < s.images.size(); ++m)
    images.push_back(presence[m] ? to_double(s.images[m])
                                 : std::vector<double>(static_cast<std::size_t>(s.height) * s.width, 0.0));
  return images;
}

void check_sample(const model::NetConfig& net, const data::ModalitySample& s) {
  require(static_cast<int>(s.images.size()) == net.n_modalities, ErrorCode::kConfig,
          "sample " + s.sample_id + " has " + std::to_string(s.images.size()) + " modalities, config expects " +
              std::to_string(net.n_modalities));
  require(s.height == net.height && s.width == net.width, ErrorCode::kConfig,
          "sample " + s.sample_id + " size does not match config");
  for (auto v : s.label)
    require(v < net.n_classes, ErrorCode::kConfig,
            "sample " + s.sample_id + " has label " + std::to_string(v) + " outside n_classes");
}

void require_finite(const ag::Var& v, const std::string& what) {
  require(std::isfinite(v->item()), ErrorCode::kNumeric, "non-finite loss component: " + what);
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"corpus", c.corpus},
          {"output_dir", c.output_dir},
          {"net", net_to_json(c.net)},
          {"lr", c.optimizer.lr},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"adam_eps", c.optimizer.eps},
          {"weight_decay", c.optimizer.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lambda_fuse", c.lambdas.fuse},
          {"lambda_sep", c.lambdas.sep},
          {"lambda_rel", c.lambdas.rel},
          {"lambda_proto", c.lambdas.proto},
          {"alpha1_init", c.alpha1_init},
          {"tau", c.tau},
          {"proto_eps", c.proto_eps},
          {"dtm_eps", c.dtm_eps},
          {"gap_mean_decay", c.gap_mean_decay},
          {"use_dmaf", c.switches.use_dmaf},
          {"use_distill", c.switches.use_distill},
          {"use_dtm", c.switches.use_dtm},
          {"seed", c.seed},
          {"val_fraction", c.val_fraction},
          {"hd_percentile", c.hd_percentile}};
}

RunConfig config_from_json(const json& j, RunConfig c) {
  require(j.is_object(), ErrorCode::kConfig, "config must be a JSON object");
  std::vector<std::string> seen;
  take(j, "corpus", c.corpus, seen);
  take(j, "output_dir", c.output_dir, seen);
  seen.emplace_back("net");
  if (j.contains("net")) c.net = net_from_json(j.at("net"), c.net);
  take(j, "lr", c.optimizer.lr, seen);
  take(j, "beta1", c.optimizer.beta1, seen);
  take(j, "beta2", c.optimizer.beta2, seen);
  take(j, "adam_eps", c.optimizer.eps, seen);
  take(j, "weight_decay", c.optimizer.weight_decay, seen);
  take(j, "epochs", c.epochs, seen);
  take(j, "batch_size", c.batch_size, seen);
  take(j, "lambda_fuse", c.lambdas.fuse, seen);
  take(j, "lambda_sep", c.lambdas.sep, seen);
  take(j, "lambda_rel", c.lambdas.rel, seen);
  take(j, "lambda_proto", c.lambdas.proto, seen);
  take(j, "alpha1_init", c.alpha1_init, seen);
  take(j, "tau", c.tau, seen);
  take(j, "proto_eps", c.proto_eps, seen);
  take(j, "dtm_eps", c.dtm_eps, seen);
  take(j, "gap_mean_decay", c.gap_mean_decay, seen);
  take(j, "use_dmaf", c.switches.use_dmaf, seen);
  take(j, "use_distill", c.switches.use_distill, seen);
  take(j, "use_dtm", c.switches.use_dtm, seen);
  take(j, "seed", c.seed, seen);
  take(j, "val_fraction", c.val_fraction, seen);
  take(j, "hd_percentile", c.hd_percentile, seen);
  reject_unknown(j, seen, "");
  return c;
}

void validate(const RunConfig& c) {
  model::validate(c.net);
  require(c.batch_size == 1, ErrorCode::kConfig, "only batch_size 1 is supported");
  require(c.epochs >= 0, ErrorCode::kConfig, "epochs must be >= 0");
  require(c.optimizer.lr > 0 && c.optimizer.weight_decay >= 0, ErrorCode::kConfig, "invalid optimizer settings");
  require(c.alpha1_init > 0 && c.alpha1_init < 1, ErrorCode::kConfig, "alpha1_init must lie in (0, 1)");
  require(c.tau.empty() || static_cast<int>(c.tau.size()) == c.net.n_modalities, ErrorCode::kConfig,
          "tau needs one value per modality");
  for (double t : c.tau) require(t >= 1.0, ErrorCode::kConfig, "tau must be >= 1");
  require(c.proto_eps > 0 && c.dtm_eps > 0, ErrorCode::kConfig, "epsilons must be positive");
  require(c.gap_mean_decay >= 0 && c.gap_mean_decay < 1, ErrorCode::kConfig, "gap_mean_decay must lie in [0, 1)");
  require(c.val_fraction >= 0 && c.val_fraction < 1, ErrorCode::kConfig, "val_fraction must lie in [0, 1)");
  require(c.hd_percentile > 0 && c.hd_percentile <= 100, ErrorCode::kConfig, "hd_percentile must lie in (0, 100]");
  for (double l : {c.lambdas.fuse, c.lambdas.sep, c.lambdas.rel, c.lambdas.proto})
    require(l >= 0, ErrorCode::kConfig, "loss weights must be non-negative");
}

std::vector<double> resolved_tau(const RunConfig& c) {
  return c.tau.empty() ? std::vector<double>(c.net.n_modalities, 1.0) : c.tau;
}

std::vector<std::string> runlog_columns(int n_modalities) {
  std::vector<std::string> cols = {"step",  "epoch", "sample_id", "n_present", "L_fuse", "L_sep",
                                   "L_rel", "L_proto", "total",   "alpha1",    "alpha2"};
  for (int m = 0; m < n_modalities; ++m)
    for (const char* f : {"present", "sep", "gr", "gp", "ema_gr", "ema_gp", "g_total", "w", "gamma", "sim", "damped"})
      cols.push_back(std::string(f) + "_" + std::to_string(m));
  return cols;
}

void write_runlog(const std::vector<StepRecord>& log, int n_modalities, const std::filesystem::path& path) {
  std::ofstream os(path);
  require(os.good(), ErrorCode::kIo, "cannot write run log " + path.string());
  const auto cols = runlog_columns(n_modalities);
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : log) {
    int n_present = 0;
    for (const auto& t : r.modalities) n_present += t.present;
    os << r.step << ',' << r.epoch << ',' << r.sample_id << ',' << n_present << ',' << fmt(r.losses.fuse) << ','
       << fmt(r.losses.sep) << ',' << fmt(r.losses.rel) << ',' << fmt(r.losses.proto) << ',' << fmt(r.losses.total)
       << ',' << fmt(r.alpha1) << ',' << fmt(r.alpha2);
    for (const auto& t : r.modalities) {
      os << ',' << int(t.present) << ',' << fmt(t.sep) << ',' << fmt(t.gr) << ',' << fmt(t.gp) << ','
         << fmt(t.ema_gr) << ',' << fmt(t.ema_gp) << ',' << fmt(t.g_total) << ',' << fmt(t.weight) << ','
         << fmt(t.gamma) << ',' << (t.sim ? fmt(*t.sim) : "nan") << ',' << int(t.damped);
    }
    os << '\n';
  }
  require(os.good(), ErrorCode::kIo, "failed writing run log " + path.string());
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double val_fraction, std::uint64_t seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5e1ecULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int n_val = static_cast<int>(std::lround(val_fraction * n));
  std::vector<int> val(idx.begin(), idx.begin() + n_val), tr(idx.begin() + n_val, idx.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  return {tr, val};
}

namespace {

std::vector<ag::Var> all_params(const model::DmafNet& net, const model::ParamSet& head_ps) {
  std::vector<ag::Var> ps;
  for (const auto& [name, v] : net.params().items()) ps.push_back(v);
  for (const auto& [name, v] : head_ps.items()) ps.push_back(v);
  return ps;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, std::vector<data::ModalitySample> train_set)
    : cfg_(std::move(cfg)),
      train_(std::move(train_set)),
      net_(cfg_.net, cfg_.seed),
      opt_({}, cfg_.optimizer),
      gaps_(dtm::GapState::create(cfg_.net.n_modalities, cfg_.dtm_eps)),
      rng_(cfg_.seed ^ 0x0d3a5eedULL) {
  validate(cfg_);
  require(!train_.empty(), ErrorCode::kInvalidArgument, "training set is empty");
  for (const auto& s : train_) check_sample(cfg_.net, s);
  model::Initializer init(cfg_.seed ^ 0xd157111ULL);
  head_ = distill::DistillHead(head_params_, init, cfg_.net, cfg_.alpha1_init);
  opt_ = optim::AdamW(all_params(net_, head_params_), cfg_.optimizer);
  gaps_.mean_decay = cfg_.gap_mean_decay;
}

void Trainer::begin_epoch() {
  order_.resize(train_.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

StepRecord Trainer::next() {
  if (cursor_ >= order_.size()) {
    if (!order_.empty()) ++epoch_;
    begin_epoch();
  }
  return step(train_[order_[cursor_++]]);
}

void Trainer::train_epochs(int epochs) {
  const long steps = static_cast<long>(epochs) * static_cast<long>(train_.size());
  for (long i = 0; i < steps; ++i) next();
}

StepRecord Trainer::step(const data::ModalitySample& s) {
  check_sample(cfg_.net, s);
  const auto& nc = cfg_.net;
  const auto& sw = cfg_.switches;
  const auto present = present_indices(s.presence);
  require(!present.empty(), ErrorCode::kInvalidArgument, "sample " + s.sample_id + " has no present modality");

  auto out = net_.forward(masked_images(s, s.presence), s.presence, {sw.use_dmaf, true});
  const auto cw = objective::inverse_frequency_weights(s.label, nc.n_classes);
  auto l_fuse = objective::fuse_loss(out.fused_logits, s.label, nc.height, nc.width, cw);
  require_finite(l_fuse, "L_fuse");
  auto seps = objective::sep_losses(out.uni_logits, s.label, cw);
  for (const auto& [m, l] : seps) require_finite(l, "L_sep[" + std::to_string(m) + "]");

  std::map<int, dtm::GapObservation> observed;
  ag::Var l_rel = ag::scalar(0.0), l_proto = ag::scalar(0.0);
  double alpha1 = head_.alpha1()->item();
  if (sw.use_distill) {
    std::vector<ag::Var> uni_bottleneck;
    for (int m = 0; m < nc.n_modalities; ++m) uni_bottleneck.push_back(out.uni[m].back());
    distill::DistillConfig dc{cfg_.proto_eps, resolved_tau(cfg_), true};
    auto d = distill::distill(head_, uni_bottleneck, out.fused.back(), s.label, nc.height, nc.width, s.presence,
                              nc.n_classes, dc);
    require_finite(d.rel, "L_rel");
    require_finite(d.proto, "L_proto");
    l_rel = d.rel;
    l_proto = d.proto;
    alpha1 = d.alpha1;
    for (int m : present) observed[m] = {d.gap_rel.at(m), d.gap_proto.at(m)};
  } else {
    for (int m : present) observed[m] = {1.0, 1.0};
  }
  dtm::update_gaps(gaps_, observed);

  std::map<int, double> weights;
  if (sw.use_dtm) {
    std::map<int, double> g;
    for (int m : present) g[m] = dtm::total_gap(gaps_, m);
    weights = dtm::counteractive_weights(g, gaps_.eps);
  } else {
    weights = dtm::uniform_weights(present);
  }
  auto l_sep = dtm::reweight_sep_loss(seps, weights);

  objective::Lambdas lambdas = cfg_.lambdas;
  if (!sw.use_distill) lambdas.rel = lambdas.proto = 0.0;
  StepRecord rec;
  auto total = objective::total_loss(l_fuse, l_sep, l_rel, l_proto, lambdas, &rec.losses);
  require_finite(total, "total");
  for (const auto& [m, l] : seps) rec.losses.sep_per_modality[m] = l->item();

  opt_.zero_grad();
  ag::backward(total);

  dtm::RebalanceDecision decisions;
  if (sw.use_dtm) {
    std::map<int, std::vector<double>> grads;
    for (int m : present) {
      auto& flat = grads[m];
      for (const auto& p : net_.encoder_params(m)) {
        if (p->grad.empty()) flat.insert(flat.end(), p->size(), 0.0);
        else flat.insert(flat.end(), p->grad.begin(), p->grad.end());
      }
    }
    decisions = dtm::scale_gradients(gaps_, grads, weights);
    for (int m : present) {
      const auto& flat = grads.at(m);
      std::size_t off = 0;
      for (const auto& p : net_.encoder_params(m)) {
        if (!p->grad.empty()) std::copy_n(flat.begin() + static_cast<long>(off), p->size(), p->grad.begin());
        off += p->size();
      }
    }
  }
  opt_.step();

  rec.step = step_;
  rec.epoch = epoch_;
  rec.sample_id = s.sample_id;
  rec.alpha1 = alpha1;
  rec.alpha2 = dtm::alpha2(gaps_);
  rec.modalities.resize(nc.n_modalities);
  for (int m = 0; m < nc.n_modalities; ++m) {
    auto& t = rec.modalities[m];
    const auto& g = gaps_.modalities[m];
    t.ema_gr = g.ema_gr;
    t.ema_gp = g.ema_gp;
    t.g_total = g.initialized ? dtm::total_gap(gaps_, m) : 0.0;
    if (!s.presence[m]) {
      t.sim.reset();
      continue;
    }
    t.present = true;
    t.gr = observed.at(m).gr;
    t.gp = observed.at(m).gp;
    t.sep = seps.at(m)->item();
    t.weight = weights.at(m);
    if (sw.use_dtm) {
      const auto& d = decisions.at(m);
      t.gamma = d.gamma;
      t.sim = d.sim;
      t.damped = d.damped;
    } else {
      t.gamma = 1.0;
    }
  }
  ++step_;
  log_.push_back(rec);
  return rec;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  json header;
  header["config"] = to_json(cfg_);
  header["step"] = step_;
  header["epoch"] = epoch_;
  header["cursor"] = cursor_;
  header["order"] = order_;
  std::ostringstream rs;
  rs << rng_;
  header["rng"] = rs.str();
  json params = json::array();
  auto add_names = [&](const model::ParamSet& ps) {
    for (const auto& [name, v] : ps.items()) params.push_back({{"name", name}, {"size", v->size()}});
  };
  add_names(net_.params());
  add_names(head_params_);
  header["params"] = params;
  header["adam_steps"] = opt_.step_counts();
  json g;
  g["means_initialized"] = gaps_.means_initialized;
  g["step"] = gaps_.step;
  g["eps"] = fmt(gaps_.eps);
  g["mean_decay"] = fmt(gaps_.mean_decay);
  json mods = json::array();
  for (std::size_t m = 0; m < gaps_.modalities.size(); ++m) {
    const auto& p = gaps_.prev_grad[m];
    mods.push_back({{"initialized", gaps_.modalities[m].initialized},
                    {"prev_grad_size", p ? static_cast<long>(p->size()) : -1L}});
  }
  g["modalities"] = mods;
  header["gaps"] = g;

  std::string os(kMagic, sizeof kMagic);
  put_u64(os, kCheckpointVersion);
  const std::string h = header.dump();
  put_u64(os, h.size());
  os += h;
  const auto& opt = opt_;
  const auto params_all = all_params(net_, head_params_);
  for (std::size_t i = 0; i < params_all.size(); ++i) {
    put_doubles(os, params_all[i]->value);
    put_doubles(os, opt.first_moment()[i]);
    put_doubles(os, opt.second_moment()[i]);
  }
  // Doubles of the gap state are stored bit-exactly.
  put_doubles(os, {gaps_.mean_gr, gaps_.mean_gp});
  for (std::size_t m = 0; m < gaps_.modalities.size(); ++m) {
    const auto& q = gaps_.modalities[m];
    put_doubles(os, {q.ema_gr, q.ema_gp, q.last_gr, q.last_gp});
    if (gaps_.prev_grad[m]) put_doubles(os, *gaps_.prev_grad[m]);
  }
  std::ofstream file(path, std::ios::binary);
  require(file.good(), ErrorCode::kIo, "cannot write checkpoint " + path.string());
  file.write(os.data(), static_cast<std::streamsize>(os.size()));
  require(file.good(), ErrorCode::kIo, "failed writing checkpoint " + path.string());
}

namespace {

json read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, sizeof magic);
  require(is.good() && std::memcmp(magic, kMagic, sizeof magic) == 0, ErrorCode::kFormat,
          path.string() + " is not a checkpoint");
  const auto version = get_u64(is);
  require(version == kCheckpointVersion, ErrorCode::kFormat,
          "unsupported checkpoint version " + std::to_string(version));
  const auto len = get_u64(is);
  require(len < (1ULL << 30), ErrorCode::kFormat, "checkpoint header too large");
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  require(is.good(), ErrorCode::kFormat, "checkpoint truncated");
  try {
    return json::parse(h);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint header: ") + e.what());
  }
}

void check_param_table(const json& table, const std::vector<std::pair<std::string, ag::Var>>& expected) {
  require(table.size() == expected.size(), ErrorCode::kConfig,
          "checkpoint has " + std::to_string(table.size()) + " tensors, model expects " +
              std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto size = table[i].at("size").get<std::size_t>();
    require(name == expected[i].first && size == expected[i].second->size(), ErrorCode::kConfig,
            "checkpoint tensor " + name + " does not match model tensor " + expected[i].first);
  }
}

}  // namespace

RunConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorCode::kIo, "cannot open checkpoint " + path.string());
  return config_from_json(read_header(is, path).at("config"));
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorCode::kIo, "cannot open checkpoint " + path.string());
  const json header = read_header(is, path);
  const auto stored = config_from_json(header.at("config"));
  require(stored.net == cfg_.net, ErrorCode::kConfig,
          "checkpoint network config " + net_to_json(stored.net).dump() + " does not match " +
              net_to_json(cfg_.net).dump());
  require(stored.switches == cfg_.switches, ErrorCode::kConfig, "checkpoint ablation switches differ from config");
  std::vector<std::pair<std::string, ag::Var>> named = net_.params().items();
  for (const auto& it : head_params_.items()) named.push_back(it);
  check_param_table(header.at("params"), named);

  for (std::size_t i = 0; i < named.size(); ++i) {
    get_doubles(is, named[i].second->value);
    get_doubles(is, opt_.first_moment()[i]);
    get_doubles(is, opt_.second_moment()[i]);
  }
  opt_.step_counts() = header.at("adam_steps").get<std::vector<long>>();
  require(opt_.step_counts().size() == named.size(), ErrorCode::kFormat, "checkpoint optimizer state size");

  const auto& g = header.at("gaps");
  const auto& mods = g.at("modalities");
  require(mods.size() == gaps_.modalities.size(), ErrorCode::kConfig, "checkpoint modality count");
  gaps_.means_initialized = g.at("means_initialized").get<bool>();
  gaps_.step = g.at("step").get<long>();
  gaps_.eps = std::stod(g.at("eps").get<std::string>());
  gaps_.mean_decay = std::stod(g.at("mean_decay").get<std::string>());
  std::vector<double> means(2);
  get_doubles(is, means);
  gaps_.mean_gr = means[0];
  gaps_.mean_gp = means[1];
  for (std::size_t m = 0; m < gaps_.modalities.size(); ++m) {
    auto& q = gaps_.modalities[m];
    q.initialized = mods[m].at("initialized").get<bool>();
    std::vector<double> v(4);
    get_doubles(is, v);
    q.ema_gr = v[0];
    q.ema_gp = v[1];
    q.last_gr = v[2];
    q.last_gp = v[3];
    const long n = mods[m].at("prev_grad_size").get<long>();
    if (n < 0) {
      gaps_.prev_grad[m].reset();
    } else {
      std::vector<double> pg(static_cast<std::size_t>(n));
      get_doubles(is, pg);
      gaps_.prev_grad[m] = std::move(pg);
    }
  }
  step_ = header.at("step").get<long>();
  epoch_ = header.at("epoch").get<int>();
  cursor_ = header.at("cursor").get<std::size_t>();
  order_ = header.at("order").get<std::vector<int>>();
  require(order_.empty() || order_.size() == train_.size(), ErrorCode::kConfig,
          "checkpoint epoch order does not match the training set size");
  std::istringstream rs(header.at("rng").get<std::string>());
  rs >> rng_;
  require(!rs.fail(), ErrorCode::kFormat, "checkpoint rng state unreadable");
}

LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorCode::kIo, "cannot open checkpoint " + path.string());
  const json header = read_header(is, path);
  LoadedModel lm;
  lm.config = config_from_json(header.at("config"));
  validate(lm.config);
  lm.net = std::make_unique<model::DmafNet>(lm.config.net, lm.config.seed);
  const auto& table = header.at("params");
  const auto& items = lm.net->params().items();
  require(table.size() >= items.size(), ErrorCode::kConfig, "checkpoint is missing network tensors");
  check_param_table(json(std::vector<json>(table.begin(), table.begin() + static_cast<long>(items.size()))), items);
  for (const auto& [name, v] : items) {
    get_doubles(is, v->value);
    std::vector<double> skip(2 * v->size());
    get_doubles(is, skip);
  }
  return lm;
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

std::vector<std::uint8_t> predict_fused(const model::DmafNet& net, const data::ModalitySample& sample,
                                        const std::vector<bool>& presence, bool use_dmaf) {
  check_sample(net.config(), sample);
  auto out = net.forward(masked_images(sample, presence), presence, {use_dmaf, false});
  return argmax_classes(out.fused_logits[0]);
}

std::vector<std::uint8_t> predict_uni(const model::DmafNet& net, const data::ModalitySample& sample, int m) {
  check_sample(net.config(), sample);
  const auto& nc = net.config();
  std::vector<std::vector<ag::Var>> uni(nc.n_modalities);
  std::vector<bool> presence(nc.n_modalities, false);
  presence.at(m) = true;
  uni[m] = net.encode(m, ag::constant({1, nc.height, nc.width}, to_double(sample.images[m])));
  return argmax_classes(net.decode_uni(uni, presence).at(m));
}

std::vector<std::vector<bool>> all_combinations(int n) {
  require(n >= 1 && n <= 16, ErrorCode::kInvalidArgument, "all_combinations: modality count out of range");
  std::vector<std::vector<bool>> out;
  for (int k = 1; k <= n; ++k) {
    // Lexicographic k-subsets of modality indices.
    std::vector<int> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
      std::vector<bool> c(n, false);
      for (int i : idx) c[i] = true;
      out.push_back(c);
      int i = k - 1;
      while (i >= 0 && idx[i] == n - k + i) --i;
      if (i < 0) break;
      ++idx[i];
      for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  return out;
}

std::string combination_name(const std::vector<bool>& c) {
  std::string s;
  for (std::size_t m = 0; m < c.size(); ++m)
    if (c[m]) s += (s.empty() ? "m" : "+m") + std::to_string(m);
  return s;
}

MetricsReport evaluate(const model::DmafNet& net, bool use_dmaf, const std::vector<data::ModalitySample>& samples,
                       const std::vector<std::vector<bool>>& combinations, double hd_percentile) {
  const auto& nc = net.config();
  MetricsReport r;
  r.n_modalities = nc.n_modalities;
  r.n_classes = nc.n_classes;
  const int regions = nc.n_classes - 1;
  for (const auto& combo : combinations) {
    require(static_cast<int>(combo.size()) == nc.n_modalities, ErrorCode::kInvalidArgument,
            "evaluate: combination size does not match modality count");
    CombinationRow row;
    row.combination = combo;
    row.dsc.assign(regions, 0.0);
    row.hd.assign(regions, 0.0);
    row.hd_undefined.assign(regions, 0);
    std::vector<int> hd_count(regions, 0);
    for (const auto& s : samples) {
      std::vector<bool> eff(nc.n_modalities);
      bool any = false;
      for (int m = 0; m < nc.n_modalities; ++m) any |= (eff[m] = combo[m] && s.presence[m]);
      if (!any) continue;
      const auto pred = predict_fused(net, s, eff, use_dmaf);
      const auto sc = metrics::score_labels(pred, s.label, nc.height, nc.width, nc.n_classes, hd_percentile);
      r.samples.push_back({s.sample_id, combo, sc.dsc, sc.hd, sc.macro_dsc()});
      ++row.n_samples;
      for (int c = 0; c < regions; ++c) {
        row.dsc[c] += sc.dsc[c];
        if (sc.hd[c]) {
          row.hd[c] += *sc.hd[c];
          ++hd_count[c];
        } else {
          ++row.hd_undefined[c];
        }
      }
    }
    for (int c = 0; c < regions; ++c) {
      row.dsc[c] = row.n_samples ? row.dsc[c] / row.n_samples : std::numeric_limits<double>::quiet_NaN();
      row.hd[c] = hd_count[c] ? row.hd[c] / hd_count[c] : std::numeric_limits<double>::quiet_NaN();
    }
    row.macro_dsc = regions ? std::accumulate(row.dsc.begin(), row.dsc.end(), 0.0) / regions : 0.0;
    r.table.push_back(row);
  }
  return r;
}

std::vector<double> evaluate_unimodal(const model::DmafNet& net, const std::vector<data::ModalitySample>& samples) {
  const auto& nc = net.config();
  std::vector<double> out(nc.n_modalities, std::numeric_limits<double>::quiet_NaN());
  for (int m = 0; m < nc.n_modalities; ++m) {
    double total = 0;
    int n = 0;
    for (const auto& s : samples) {
      if (!s.presence[m]) continue;
      const auto pred = predict_uni(net, s, m);
      total += metrics::score_labels(pred, s.label, nc.height, nc.width, nc.n_classes).macro_dsc();
      ++n;
    }
    if (n) out[m] = total / n;
  }
  return out;
}

void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int regions = r.n_classes - 1;
  auto header = [&](std::ostream& os, bool table) {
    os << "combination";
    if (table) os << ",n_samples";
    else os << ",sample_id";
    for (int c = 1; c <= regions; ++c) os << ",dsc_" << c;
    for (int c = 1; c <= regions; ++c) os << ",hd_" << c;
    if (table)
      for (int c = 1; c <= regions; ++c) os << ",hd_undefined_" << c;
    os << ",macro_dsc\n";
  };
  {
    std::ofstream os(dir / "samples.csv");
    require(os.good(), ErrorCode::kIo, "cannot write " + (dir / "samples.csv").string());
    header(os, false);
    for (const auto& s : r.samples) {
      os << combination_name(s.combination) << ',' << s.sample_id;
      for (double d : s.dsc) os << ',' << fmt(d);
      for (const auto& h : s.hd) os << ',' << (h ? fmt(*h) : "nan");
      os << ',' << fmt(s.macro_dsc) << '\n';
    }
  }
  std::ofstream os(dir / "combinations.csv");
  require(os.good(), ErrorCode::kIo, "cannot write " + (dir / "combinations.csv").string());
  header(os, true);
  for (const auto& row : r.table) {
    os << combination_name(row.combination) << ',' << row.n_samples;
    for (double d : row.dsc) os << ',' << fmt(d);
    for (double h : row.hd) os << ',' << fmt(h);
    for (int u : row.hd_undefined) os << ',' << u;
    os << ',' << fmt(row.macro_dsc) << '\n';
  }
}

}  // namespace dmaf::train
