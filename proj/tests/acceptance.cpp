// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,5] [--epochs N] [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmaf/datagen.hpp"
#include "dmaf/distill.hpp"
#include "dmaf/dtm.hpp"
#include "dmaf/error.hpp"
#include "dmaf/objective.hpp"
#include "dmaf/report.hpp"
#include "dmaf/train.hpp"
#include "support.hpp"

using namespace dmaf;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<bool> random_presence(std::mt19937_64& rng, int m, bool allow_full = true) {
  std::bernoulli_distribution coin(0.5);
  std::vector<bool> p(m);
  for (;;) {
    for (int i = 0; i < m; ++i) p[i] = coin(rng);
    const int k = static_cast<int>(std::count(p.begin(), p.end(), true));
    if (k > 0 && (allow_full || k < m)) return p;
  }
}

model::NetConfig small_net(int m = 3) {
  model::NetConfig c;
  c.n_modalities = m;
  c.n_levels = 2;
  c.base_channels = 4;
  c.height = c.width = 16;
  c.dmaf.token_h = c.dmaf.token_w = 4;
  return c;
}

data::Corpus corpus_for(int n, int size, int m, data::MissingProtocol p) {
  return data::generate_corpus(data::default_scene(size, size, 3, m), p, n);
}

data::MissingProtocol idt(std::vector<double> rates, std::uint64_t seed) {
  return {data::MissingMode::kIdt, std::move(rates), seed};
}

// --- 1 ---------------------------------------------------------------------

Verdict equation_oracles() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  std::uniform_int_distribution<int> dim(1, 6);
  std::map<std::string, double> worst;
  auto track = [&](const std::string& k, double got, double want) {
    const double e = std::abs(got - want) / std::max(1.0, std::abs(want));
    worst[k] = std::max(worst[k], e);
  };
  const int trials = 1000;

  for (int t = 0; t < trials; ++t) {
    const int c = dim(rng), h = dim(rng), w = dim(rng), n = h * w;
    auto x = testing::randn(rng, c * n, 1.0 + u(rng));
    const double shift = u(rng) * 10 - 15;
    for (auto& v : x) v += shift;
    const auto got = distill::covariance(ag::constant({c, h, w}, x))->value;
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) {
        // E[xy] - E[x]E[y] with compensated sums as the oracle
        long double sa = 0, sb = 0, sab = 0;
        for (int i = 0; i < n; ++i) {
          sa += x[a * n + i];
          sb += x[b * n + i];
        }
        const long double ma = sa / n, mb = sb / n;
        for (int i = 0; i < n; ++i) sab += (x[a * n + i] - ma) * (x[b * n + i] - mb);
        track("covariance", got[a * c + b], static_cast<double>(sab / n));
      }
  }

  for (int t = 0; t < trials; ++t) {
    const double r = u(rng), p = u(rng), eps = 1e-8;
    const double ratio = (r + eps) / (p + eps);
    track("alpha_decay", dtm::adaptive_decay(r, p, eps), 0.9 / (1.0 + std::exp(ratio)));
  }

  for (int t = 0; t < trials; ++t) {
    auto s = dtm::GapState::create(1);
    std::vector<std::pair<double, double>> obs;
    const int len = 1 + t % 20;
    for (int i = 0; i < len; ++i) obs.emplace_back(u(rng), u(rng));
    double er = 0, ep = 0;
    for (int i = 0; i < len; ++i) {
      dtm::update_gaps(s, {{0, {obs[i].first, obs[i].second}}});
      if (i == 0) {
        er = obs[0].first;
        ep = obs[0].second;
      } else {
        const double a = 0.9 / (1.0 + std::exp((obs[i - 1].first + 1e-8) / (obs[i - 1].second + 1e-8)));
        er = a * er + (1 - a) * obs[i].first;
        ep = a * ep + (1 - a) * obs[i].second;
      }
      track("ema", s.modalities[0].ema_gr, er);
      track("ema", s.modalities[0].ema_gp, ep);
    }
  }

  for (int t = 0; t < trials; ++t) {
    auto s = dtm::GapState::create(2);
    s.mean_gr = u(rng);
    s.mean_gp = u(rng);
    s.modalities[1].ema_gr = u(rng);
    s.modalities[1].ema_gp = u(rng);
    const double a2 = (s.mean_gr + 1e-8) / (s.mean_gr + s.mean_gp + 2e-8);
    track("g_total", dtm::total_gap(s, 1), a2 * s.modalities[1].ema_gr + (1 - a2) * s.modalities[1].ema_gp);
  }

  for (int t = 0; t < trials; ++t) {
    const int n = 1 + t % 5;
    std::map<int, double> g;
    for (int m = 0; m < n; ++m) g[m] = 0.01 + u(rng);
    const auto w = dtm::counteractive_weights(g, 0.0);
    // w_m = prod_{k != m} g_k / sum_j prod_{k != j} g_k
    std::vector<double> prods(n, 1.0);
    for (int m = 0; m < n; ++m)
      for (int k = 0; k < n; ++k)
        if (k != m) prods[m] *= g[k];
    double z = 0;
    for (double p : prods) z += p;
    for (int m = 0; m < n; ++m) track("weights", w.at(m), prods[m] / z);
  }

  for (int t = 0; t < trials; ++t) {
    auto s = dtm::GapState::create(1);
    const auto a = testing::randn(rng, 8);
    auto b = testing::randn(rng, 8);
    if (t % 2)
      for (int k = 0; k < 8; ++k) b[k] = -a[k] + 0.5 * b[k];
    const double w = std::uniform_real_distribution<double>(0.02, 1.0)(rng);
    std::map<int, std::vector<double>> g = {{0, a}};
    dtm::scale_gradients(s, g, {{0, w}});
    g = {{0, b}};
    const auto d = dtm::scale_gradients(s, g, {{0, w}});
    double dot = 0, na = 0, nb = 0;
    for (int k = 0; k < 8; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    const double cos = dot / std::sqrt(na * nb);
    const double gamma = std::min(10.0, std::max(0.1, 1.0 / w));
    const double mult = cos < -0.5 ? 0.7 * gamma : gamma;
    track("gamma", d.at(0).gamma, gamma);
    track("gamma", d.at(0).multiplier, mult);
    track("gamma", d.at(0).damped ? 1.0 : 0.0, cos < -0.5 ? 1.0 : 0.0);
    for (int k = 0; k < 8; ++k) track("gamma", g[0][k], mult * b[k]);
  }

  double overall = 0;
  std::ostringstream os;
  os << trials << " inputs each; max rel err";
  for (auto& [k, v] : worst) {
    os << " " << k << "=" << fmt("%.1e", v);
    overall = std::max(overall, v);
  }
  return {overall <= 1e-9, os.str()};
}

// --- 2 ---------------------------------------------------------------------

Verdict masking_invariance() {
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int cfg_i = 0; cfg_i < 10; ++cfg_i) {
    const int m = 2 + cfg_i % 3;
    train::RunConfig rc;
    rc.net = small_net(m);
    rc.seed = rng();
    rc.switches.use_dmaf = cfg_i % 4 != 3;
    auto corpus = corpus_for(4, 16, m, {data::MissingMode::kPdt, {}, rc.seed});
    auto sample = corpus.samples[0];
    sample.presence = random_presence(rng, m, false);
    for (int k = 0; k < m; ++k)
      if (!sample.presence[k]) std::fill(sample.images[k].begin(), sample.images[k].end(), 0.0f);
    auto noisy = sample;
    std::normal_distribution<float> nd(0.0f, 8.0f);
    for (int k = 0; k < m; ++k)
      if (!sample.presence[k])
        for (auto& v : noisy.images[k]) v = nd(rng);

    train::Trainer a(rc, {sample}), b(rc, {noisy});
    std::vector<std::vector<double>> ia, ib;
    for (int k = 0; k < m; ++k) {
      ia.push_back(train::to_double(sample.images[k]));
      ib.push_back(train::to_double(noisy.images[k]));
    }
    model::ForwardOptions fo;
    fo.use_dmaf = rc.switches.use_dmaf;
    const auto fa = a.net().forward(ia, sample.presence, fo), fb = b.net().forward(ib, sample.presence, fo);
    for (std::size_t l = 0; l < fa.fused_logits.size(); ++l)
      for (std::size_t i = 0; i < fa.fused_logits[l]->size(); ++i)
        worst = std::max(worst, std::abs(fa.fused_logits[l]->value[i] - fb.fused_logits[l]->value[i]));
    for (int step = 0; step < 2; ++step) {
      const auto ra = a.next(), rb = b.next();
      for (auto [x, y] : {std::pair{ra.losses.fuse, rb.losses.fuse}, {ra.losses.sep, rb.losses.sep},
                          {ra.losses.rel, rb.losses.rel}, {ra.losses.proto, rb.losses.proto},
                          {ra.losses.total, rb.losses.total}})
        worst = std::max(worst, std::abs(x - y));
    }
  }
  return {worst < 1e-5, "10 configurations; max |delta| " + fmt("%.2e", worst)};
}

// --- 3 ---------------------------------------------------------------------

Verdict fusion_normalization() {
  std::mt19937_64 rng(303);
  model::NetConfig nc;  // desk-scale default
  double worst_sum = 0, worst_absent = 0;
  std::unique_ptr<model::DmafNet> net;
  for (int pass = 0; pass < 100; ++pass) {
    if (pass % 10 == 0) net = std::make_unique<model::DmafNet>(nc, rng());
    const auto presence = random_presence(rng, nc.n_modalities);
    std::vector<std::vector<double>> img;
    for (int m = 0; m < nc.n_modalities; ++m) {
      auto v = testing::randn(rng, nc.height * nc.width);
      if (!presence[m]) std::fill(v.begin(), v.end(), 0.0);
      img.push_back(v);
    }
    std::vector<model::FusionOutput> fusions;
    // fuse directly so only the fusion path is timed
    std::vector<std::vector<ag::Var>> pyr(nc.n_modalities);
    for (int m = 0; m < nc.n_modalities; ++m)
      pyr[m] = presence[m] ? net->encode(m, ag::constant({1, nc.height, nc.width}, img[m])) : std::vector<ag::Var>{};
    for (int l = 0; l < nc.n_levels; ++l) {
      std::vector<ag::Var> feats;
      for (int m = 0; m < nc.n_modalities; ++m)
        feats.push_back(presence[m] ? pyr[m][l]
                                    : ag::zeros({nc.channels(l), nc.level_height(l), nc.level_width(l)}));
      const auto f = net->fuse(l, feats, presence);
      const int px = nc.level_height(l) * nc.level_width(l);
      for (int i = 0; i < px; ++i) {
        double s = 0;
        for (int m = 0; m < nc.n_modalities; ++m) {
          const double a = f.weights->value[m * px + i];
          s += a;
          if (!presence[m]) worst_absent = std::max(worst_absent, std::abs(a));
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
  }
  return {worst_sum <= 1e-6 && worst_absent == 0.0,
          "100 passes; max |sum-1| " + fmt("%.1e", worst_sum) + ", max absent weight " + fmt("%.1e", worst_absent)};
}

// --- 4 ---------------------------------------------------------------------

Verdict gradient_checks() {
  std::mt19937_64 rng(404);
  const auto nc = small_net();
  model::DmafNet net(nc, 41);
  model::ParamSet head_ps;
  model::Initializer init(42);
  distill::DistillHead head(head_ps, init, nc, 0.6);
  auto corpus = corpus_for(4, 16, 3, {data::MissingMode::kPdt, {}, 43});
  auto s = corpus.samples[1];
  const std::vector<bool> presence = {true, false, true};
  std::vector<std::vector<double>> img;
  for (int m = 0; m < 3; ++m) img.push_back(presence[m] ? train::to_double(s.images[m]) : std::vector<double>(256));
  const auto cw = objective::inverse_frequency_weights(s.label, 3);
  // Teacher left attached so finite differences and reverse mode see the same graph.
  distill::DistillConfig dc{1e-5, {1.0, 1.0, 1.0}, false};

  std::map<std::string, std::function<ag::Var()>> losses = {
      {"L_fuse", [&] { return objective::fuse_loss(net.forward(img, presence).fused_logits, s.label, 16, 16, cw); }},
      {"L_sep",
       [&] {
         auto seps = objective::sep_losses(net.forward(img, presence).uni_logits, s.label, cw);
         return dtm::reweight_sep_loss(seps, dtm::uniform_weights({0, 2}));
       }},
      {"L_rel",
       [&] {
         auto out = net.forward(img, presence);
         std::vector<ag::Var> uni;
         for (int m = 0; m < 3; ++m) uni.push_back(out.uni[m].empty() ? ag::zeros({8, 8, 8}) : out.uni[m].back());
         return distill::distill(head, uni, out.fused.back(), s.label, 16, 16, presence, 3, dc).rel;
       }},
      {"L_proto",
       [&] {
         auto out = net.forward(img, presence);
         std::vector<ag::Var> uni;
         for (int m = 0; m < 3; ++m) uni.push_back(out.uni[m].empty() ? ag::zeros({8, 8, 8}) : out.uni[m].back());
         return distill::distill(head, uni, out.fused.back(), s.label, 16, 16, presence, 3, dc).proto;
       }},
  };

  // Conv biases feeding instance norm have an identically zero gradient, so a
  // relative error is meaningless there; they are excluded from the draw.
  std::vector<ag::Var> pool;
  for (const auto& [name, p] : net.params().items())
    if (!(name.find(".conv.bias") != std::string::npos)) pool.push_back(p);
  for (const auto& [name, p] : head_ps.items()) pool.push_back(p);

  std::ostringstream os;
  double worst = 0;
  for (auto& [name, fn] : losses) {
    // Parameters the loss actually depends on, then a random subset.
    for (auto& p : pool) p->zero_grad();
    ag::backward(fn());
    std::vector<ag::Var> live;
    for (auto& p : pool)
      if (!p->grad.empty() && std::any_of(p->grad.begin(), p->grad.end(), [](double g) { return g != 0.0; }))
        live.push_back(p);
    std::shuffle(live.begin(), live.end(), rng);
    live.resize(std::min<std::size_t>(live.size(), 8));
    const auto r = testing::grad_check(fn, live, rng, 4, 1e-6, 1e-6);
    os << " " << name << "=" << fmt("%.1e", r.max_rel);
    worst = std::max(worst, r.max_rel);
  }
  return {worst < 1e-4, "max rel err" + os.str()};
}

// --- 5 ---------------------------------------------------------------------

double full_combo_macro(const model::DmafNet& net, bool use_dmaf, const std::vector<data::ModalitySample>& samples) {
  std::vector<bool> all(net.config().n_modalities, true);
  return train::evaluate(net, use_dmaf, samples, {all}).table.at(0).macro_dsc;
}

Verdict overfit() {
  auto corpus = corpus_for(8, 64, 3, {data::MissingMode::kPdt, {}, 505});
  train::RunConfig rc;
  rc.seed = 5;
  train::Trainer t(rc, corpus.samples);
  double dsc = 0;
  int epochs = 0;
  while (epochs < 200) {
    t.train_epochs(25);
    epochs += 25;
    dsc = full_combo_macro(t.net(), true, corpus.samples);
    if (dsc > 0.95) break;
  }
  return {dsc > 0.95, "fused macro-DSC " + fmt("%.4f", dsc) + " after " + std::to_string(epochs) + " epochs"};
}

// --- 6, 7, 9 ---------------------------------------------------------------

struct RunResult {
  double uni_worst = 0;     // uni-modal macro-DSC of the highest-missing-rate modality
  double fused_mean = 0;    // mean fused macro-DSC over all combinations
  train::MetricsReport report;
};

struct Study {
  int epochs = 30;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::map<std::string, std::vector<RunResult>> runs;  // by configuration name
  bool done = false;
};

const std::vector<double> kRates = {0.2, 0.5, 0.8};

void run_study(Study& st) {
  if (st.done) return;
  const auto corpus = corpus_for(64, 64, 3, idt(kRates, 606));
  const auto heldout = corpus_for(32, 64, 3, {data::MissingMode::kPdt, {}, 607});
  const int worst_m = static_cast<int>(std::max_element(kRates.begin(), kRates.end()) - kRates.begin());
  const std::vector<std::pair<std::string, train::Switches>> configs = {
      {"full", {true, true, true}},
      {"no_dtm", {true, true, false}},
      {"no_distill", {true, false, true}},
      {"no_dmaf", {false, true, true}},
  };
  for (auto seed : st.seeds) {
    train::RunConfig rc;
    rc.seed = seed;
    const auto split = train::split_indices(64, rc.val_fraction, seed);
    std::vector<data::ModalitySample> train_set;
    for (int i : split.first) train_set.push_back(corpus.samples[i]);
    for (const auto& [name, sw] : configs) {
      const auto t0 = std::chrono::steady_clock::now();
      rc.switches = sw;
      train::Trainer t(rc, train_set);
      t.train_epochs(st.epochs);
      RunResult r;
      r.uni_worst = train::evaluate_unimodal(t.net(), heldout.samples).at(worst_m);
      r.report = train::evaluate(t.net(), sw.use_dmaf, heldout.samples, train::all_combinations(3));
      for (const auto& row : r.report.table) r.fused_mean += row.macro_dsc / r.report.table.size();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("    seed %llu %-10s uni-m%d %.4f fused %.4f (%.0f s)\n", static_cast<unsigned long long>(seed),
                  name.c_str(), worst_m, r.uni_worst, r.fused_mean, secs);
      std::fflush(stdout);
      st.runs[name].push_back(std::move(r));
    }
  }
  st.done = true;
}

std::vector<double> pick(const std::vector<RunResult>& rs, double RunResult::*f) {
  std::vector<double> v;
  for (const auto& r : rs) v.push_back(r.*f);
  return v;
}

Verdict rebalancing(Study& st) {
  run_study(st);
  const double on = median(pick(st.runs["full"], &RunResult::uni_worst));
  const double off = median(pick(st.runs["no_dtm"], &RunResult::uni_worst));
  const double gain = 100.0 * (on - off);
  return {gain >= 2.0, "median uni-modal DSC of m2: dtm on " + fmt("%.4f", on) + ", off " + fmt("%.4f", off) +
                           " (gain " + fmt("%+.2f", gain) + " points, need >= 2)"};
}

Verdict ablation(Study& st) {
  run_study(st);
  const double full = median(pick(st.runs["full"], &RunResult::fused_mean));
  bool ok = true;
  std::ostringstream os;
  os << "median fused macro-DSC full " << fmt("%.4f", full);
  for (const char* name : {"no_dtm", "no_distill", "no_dmaf"}) {
    const double v = median(pick(st.runs[name], &RunResult::fused_mean));
    const double diff = 100.0 * (full - v);
    os << ", " << name << " " << fmt("%.4f", v);
    if (diff < 0 && diff >= -0.5) os << " (tie within 0.5)";
    if (diff < -0.5) ok = false;
  }
  return {ok, os.str()};
}

Verdict combination_report(Study& st, const fs::path& work) {
  run_study(st);
  const auto& rep = st.runs["full"].front().report;
  train::write_report(rep, work / "criterion9");
  const auto t = report::read_csv(work / "criterion9" / "combinations.csv");
  const std::vector<std::string> want = {"combination", "n_samples", "dsc_1",          "dsc_2",
                                         "hd_1",        "hd_2",      "hd_undefined_1", "hd_undefined_2",
                                         "macro_dsc"};
  const bool shape = t.rows.size() == 7 && t.columns == want;
  const double all = rep.table.back().macro_dsc;
  bool dominates = true;
  std::ostringstream os;
  os << t.rows.size() << " rows; all-modality " << fmt("%.4f", all) << " vs singles";
  for (int m = 0; m < 3; ++m) {
    os << " " << fmt("%.4f", rep.table[m].macro_dsc);
    if (rep.table[m].macro_dsc > all) dominates = false;
  }
  return {shape && dominates, os.str()};
}

// --- 8 ---------------------------------------------------------------------

Verdict protocol_fidelity() {
  int bad = 0, checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    for (int n : {64, 100, 37}) {
      for (const auto& p : {data::preset_table1_brats(seed), data::preset_table2(seed)}) {
        const int m = static_cast<int>(p.target_rates.size());
        const auto pm = data::sample_presence(p, n, m);
        ++checked;
        for (int k = 0; k < m; ++k) {
          const long want_missing = std::lround(p.target_rates[k] * n);
          if (n - pm.column_count(k) != want_missing) ++bad;
        }
        for (int i = 0; i < n; ++i) {
          const auto row = pm.row(i);
          if (std::find(row.begin(), row.end(), true) == row.end()) ++bad;
        }
      }
    }
  return {bad == 0, std::to_string(checked) + " matrices (100 seeds x N in {37,64,100} x 2 presets); " +
                        std::to_string(bad) + " violations"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::vector<int> only;
  Study study;
  std::string work = (fs::temp_directory_path() / "dmaf_acceptance").string();
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--epochs", study.epochs, "training epochs per run for criteria 6, 7 and 9");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
      {1, equation_oracles},
      {2, masking_invariance},
      {3, fusion_normalization},
      {4, gradient_checks},
      {5, overfit},
      {6, [&] { return rebalancing(study); }},
      {7, [&] { return ablation(study); }},
      {8, protocol_fidelity},
      {9, [&] { return combination_report(study, work); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0, ran = 0;
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %s  %s  [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str(), secs);
    std::fflush(stdout);
    ++ran;
    failed += !v.pass;
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
