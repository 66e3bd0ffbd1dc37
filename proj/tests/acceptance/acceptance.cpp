// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dimple/cli.hpp"
#include "dimple/config.hpp"
#include "dimple/errors.hpp"
#include "dimple/gradcheck.hpp"
#include "dimple/harness.hpp"
#include "dimple/independence.hpp"
#include "dimple/objectives.hpp"
#include "dimple/ops.hpp"
#include "dimple/rng.hpp"
#include "dimple/synth_data.hpp"

namespace fs = std::filesystem;
using namespace dimple;

namespace {

using Clock = std::chrono::steady_clock;
using Rows = std::vector<std::vector<double>>;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "NOT ") + what;
  }
};

// ---- independent oracles -------------------------------------------------

Rows rows_of(const Tensor& t) {
  Rows r(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) r[i][j] = t.at(i, j);
  return r;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

Rows centered_rbf(const Rows& z) {
  const std::size_t n = z.size();
  std::vector<double> ds;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) ds.push_back(distance(z[i], z[j]));
  std::sort(ds.begin(), ds.end());
  const std::size_t m = ds.size();
  double sigma = m % 2 ? ds[m / 2] : 0.5 * (ds[m / 2 - 1] + ds[m / 2]);
  if (sigma <= 0.0) sigma = 1.0;
  Rows k(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = distance(z[i], z[j]);
      k[i][j] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
  // H K H written out with explicit row, column and grand means.
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row[i] += k[i][j];
      col[j] += k[i][j];
      all += k[i][j];
    }
  const double dn = static_cast<double>(n);
  Rows c(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i][j] = k[i][j] - row[i] / dn - col[j] / dn + all / (dn * dn);
  return c;
}

double oracle_hsic(const Rows& x, const Rows& y) {
  const std::size_t n = x.size();
  const Rows kx = centered_rbf(x), ky = centered_rbf(y);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s += kx[i][j] * ky[i][j];
  return std::max(0.0, s / ((static_cast<double>(n) - 1.0) * (static_cast<double>(n) - 1.0)));
}

double oracle_conditional(const Rows& x, const Rows& y, const std::vector<int>& labels) {
  std::map<int, std::pair<Rows, Rows>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[labels[i]].first.push_back(x[i]);
    by_class[labels[i]].second.push_back(y[i]);
  }
  double total = 0.0;
  for (const auto& [c, xy] : by_class) {
    if (xy.first.size() < 2) continue;
    total += static_cast<double>(xy.first.size()) / static_cast<double>(labels.size()) *
             oracle_hsic(xy.first, xy.second);
  }
  return total;
}

Rows cosine_logits_oracle(const Rows& img, const Rows& txt, double tau) {
  Rows out(img.size(), std::vector<double>(txt.size()));
  for (std::size_t i = 0; i < img.size(); ++i)
    for (std::size_t c = 0; c < txt.size(); ++c) {
      double dot = 0.0, ni = 0.0, nt = 0.0;
      for (std::size_t k = 0; k < img[i].size(); ++k) {
        dot += img[i][k] * txt[c][k];
        ni += img[i][k] * img[i][k];
        nt += txt[c][k] * txt[c][k];
      }
      out[i][c] = dot / std::sqrt(ni * nt) / tau;
    }
  return out;
}

std::vector<double> log_softmax_row(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  std::vector<double> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] - m - std::log(s);
  return out;
}

double oracle_ce(const Rows& img, const Rows& txt, const std::vector<int>& labels, double tau) {
  const Rows z = cosine_logits_oracle(img, txt, tau);
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s -= log_softmax_row(z[i])[static_cast<std::size_t>(labels[i])];
  return s / static_cast<double>(z.size());
}

double oracle_uniformity(const Rows& img, const Rows& txt, double tau) {
  const Rows z = cosine_logits_oracle(img, txt, tau);
  const double logc = std::log(static_cast<double>(txt.size()));
  double s = 0.0;
  for (const auto& row : z) {
    const auto lp = log_softmax_row(row);
    for (double l : lp) s += std::exp(l) * (l + logc);
  }
  return std::max(0.0, s / static_cast<double>(z.size()));
}

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.normal();
  return Tensor({r, c}, std::move(v));
}

Tensor unit_rows(Rng& rng, std::size_t r, std::size_t c) {
  return normalize_rows(random_tensor(rng, r, c)).detach();
}

// ---- criteria ------------------------------------------------------------

Outcome harmonic_mean_identity() {
  Outcome o;
  const double a = harmonic_mean(76.09, 73.35);
  const double b = harmonic_mean(25.99, 29.98);
  o.require(std::abs(a - 74.70) <= 0.01, "hm(76.09, 73.35)=" + fmt(a) + " within 0.01 of 74.70");
  o.require(std::abs(b - 27.60) <= 0.05, "hm(25.99, 29.98)=" + fmt(b) + " within 0.05 of 27.60");
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto reports = run_gradcheck(0);
  const double secs = seconds_since(t0);
  std::set<std::string> labels;
  for (const auto& r : reports) {
    labels.insert(r.label);
    o.require(r.passed, r.label + " worst " + r.worst_tensor + " " + sci(r.worst_error) + " < 1e-4");
  }
  o.require(labels == std::set<std::string>{"dimple", "dimple_early", "coop", "coop_ood"}, "all four objectives");
  o.require(secs < 60.0, "runtime " + fmt(secs, 1) + " s < 60 s");
  return o;
}

Outcome hsic_oracles() {
  Outcome o;
  const auto t0 = Clock::now();
  KernelSpec spec;
  double worst_plain = 0.0, worst_cond = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(hash64(seed, "hsic"));
    const std::size_t n = 4 + rng.below(29);
    const std::size_t dx = 1 + rng.below(6), dy = 1 + rng.below(6);
    Tensor x = random_tensor(rng, n, dx), y = random_tensor(rng, n, dy);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    worst_plain = std::max(worst_plain, std::abs(hsic(x, y, spec).item() - oracle_hsic(rows_of(x), rows_of(y))));
    worst_cond = std::max(worst_cond, std::abs(conditional_hsic(x, y, labels, spec).item() -
                                               oracle_conditional(rows_of(x), rows_of(y), labels)));
  }
  o.require(worst_plain <= 1e-10, "hsic max |diff| " + sci(worst_plain) + " <= 1e-10 over 50 instances");
  o.require(worst_cond <= 1e-10, "conditional max |diff| " + sci(worst_cond) + " <= 1e-10 over 50 instances");

  Rng rng(7);
  Tensor x = random_tensor(rng, 16, 4);
  Tensor constant = Tensor({16, 3}, std::vector<double>(48, 0.25));
  o.require(hsic(x, constant, spec).item() == 0.0, "hsic(x, constant) == 0");
  Tensor y = random_tensor(rng, 16, 3);
  const std::vector<int> one_class(16, 2);
  const double reduced = conditional_hsic(x, y, one_class, spec).item();
  const double plain = hsic(x, y, spec).item();
  o.require(std::abs(reduced - plain) <= 1e-12, "single-class reduction |diff| " + sci(std::abs(reduced - plain)));
  const double secs = seconds_since(t0);
  o.require(secs < 30.0, "runtime " + fmt(secs, 1) + " s < 30 s");
  return o;
}

Outcome loss_identities() {
  Outcome o;
  const auto t0 = Clock::now();
  KernelSpec kernel;
  double worst_sum = 0.0, worst_row = 0.0, worst_uniform = 0.0, worst_ab0 = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(hash64(seed, "loss"));
    const std::size_t n = 12, c = 3, d = 6;
    FeatureBundle b;
    b.vision_invariant = unit_rows(rng, n, d);
    b.vision_spurious = unit_rows(rng, n, d);
    b.text_invariant = unit_rows(rng, c, d);
    b.text_spurious = unit_rows(rng, c, d);
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % c));
    LossWeights w;
    w.alpha = 0.3 + 0.1 * static_cast<double>(seed % 5);
    w.beta = 1.7 - 0.2 * static_cast<double>(seed % 4);
    w.tau = 0.07 + 0.05 * static_cast<double>(seed % 3);

    const LossReport r = dimple_total(b, w, kernel);
    const double ce = oracle_ce(rows_of(b.vision_invariant), rows_of(b.text_invariant), b.labels, w.tau);
    const double sp = oracle_uniformity(rows_of(b.vision_spurious), rows_of(b.text_spurious), w.tau);
    Rows text_u, text_s;
    for (int y : b.labels) {
      text_u.push_back(rows_of(b.text_invariant)[static_cast<std::size_t>(y)]);
      text_s.push_back(rows_of(b.text_spurious)[static_cast<std::size_t>(y)]);
    }
    const double cmi = 0.5 * (oracle_conditional(rows_of(b.vision_invariant), rows_of(b.vision_spurious), b.labels) +
                              oracle_conditional(text_u, text_s, b.labels));
    worst_sum = std::max(worst_sum, std::abs(r.total.item() - (ce + w.alpha * sp + w.beta * cmi)));
    for (const Tensor* p : {&r.p_invariant, &r.p_spurious})
      for (std::size_t i = 0; i < p->rows(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < p->cols(); ++k) s += p->at(i, k);
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }

    FeatureBundle u = b;
    std::vector<double> same;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < d; ++j) same.push_back(b.text_spurious.at(0, j));
    u.text_spurious = Tensor({c, d}, same);
    worst_uniform = std::max(worst_uniform, dimple_total(u, w, kernel).spurious.item());

    LossWeights zero = w;
    zero.alpha = 0.0;
    zero.beta = 0.0;
    const LossReport z = dimple_total(b, zero, kernel);
    worst_ab0 = std::max(worst_ab0, std::abs(z.total.item() - z.ce.item()));
  }
  o.require(worst_uniform <= 1e-14, "sp_r at uniform spurious probabilities " + sci(worst_uniform) + " <= 1e-14");
  o.require(worst_ab0 == 0.0, "total - ce_u at alpha=beta=0 = " + sci(worst_ab0));
  o.require(worst_sum <= 1e-12, "total vs component oracle max |diff| " + sci(worst_sum) + " <= 1e-12");
  o.require(worst_row <= 1e-9, "probability rows sum to 1 (max dev " + sci(worst_row) + ")");
  const double secs = seconds_since(t0);
  o.require(secs < 10.0, "runtime " + fmt(secs, 1) + " s < 10 s");
  return o;
}

// ---- synthetic benchmark runs shared by the directional criteria ---------

constexpr std::size_t kSeeds = 5;

struct Variant {
  std::string name;
  std::function<void(ExperimentConfig&)> configure;
};

struct VariantResult {
  std::vector<RunMetrics> runs;
  double seconds = 0.0;

  double mean(double RunMetrics::*field) const {
    double s = 0.0;
    for (const auto& r : runs) s += r.*field;
    return s / static_cast<double>(runs.size());
  }
  double mean_best_group() const {
    double s = 0.0;
    for (const auto& r : runs) {
      double best = 0.0;
      for (const auto& [g, acc] : r.group_acc) best = std::max(best, acc);
      s += best;
    }
    return s / static_cast<double>(runs.size());
  }
};

std::map<std::string, VariantResult> run_benchmark() {
  auto objective = [](Objective obj) { return [obj](ExperimentConfig& c) { c.train.objective = obj; }; };
  auto weights = [](double alpha, double beta) {
    return [alpha, beta](ExperimentConfig& c) {
      c.train.loss.alpha = alpha;
      c.train.loss.beta = beta;
      c.train.use_cmi = beta > 0.0;
    };
  };
  const std::vector<Variant> variants = {
      {"coop", objective(Objective::coop)},
      {"coop_ood", objective(Objective::coop_ood)},
      {"dimple", objective(Objective::dimple)},
      {"dimple_independent", [](ExperimentConfig& c) { c.train.mode = PromptMode::independent; }},
      {"ce_only", weights(0.0, 0.0)},
      {"ce_cmi", weights(0.0, 1.0)},
      {"ce_sp", weights(1.0, 0.0)},
  };
  std::map<std::string, VariantResult> out;
  for (const auto& v : variants) {
    VariantResult& res = out[v.name];
    const auto t0 = Clock::now();
    for (std::size_t s = 0; s < kSeeds; ++s) {
      ExperimentConfig cfg;
      cfg.train.seed = s;
      v.configure(cfg);
      cfg.resolve();
      const SyntheticTask task = generate(cfg.task);
      RunMetrics m;
      try {
        Model model = train(cfg.train, task, m);
        evaluate(model, task, m);
      } catch (const DivergedRunError& e) {
        std::cout << "  " << v.name << " seed " << s << " diverged: " << e.what() << '\n';
      }
      res.runs.push_back(m);
    }
    res.seconds = seconds_since(t0);
    std::cout << "  " << v.name << ": base " << fmt(res.mean(&RunMetrics::base_acc), 3) << " novel "
              << fmt(res.mean(&RunMetrics::novel_acc), 3) << " hm " << fmt(res.mean(&RunMetrics::hm), 3) << " avg "
              << fmt(res.mean(&RunMetrics::avg_group_acc), 3) << " worst "
              << fmt(res.mean(&RunMetrics::worst_group_acc), 3) << " (" << fmt(res.seconds, 1) << " s)" << std::endl;
  }
  return out;
}

Outcome robustness(const std::map<std::string, VariantResult>& r) {
  Outcome o;
  const auto& dimple = r.at("dimple");
  const double worst = dimple.mean(&RunMetrics::worst_group_acc);
  const double coop = r.at("coop").mean(&RunMetrics::worst_group_acc);
  const double coop_ood = r.at("coop_ood").mean(&RunMetrics::worst_group_acc);
  o.require(worst >= coop + 0.10, "dimple worst " + fmt(worst, 3) + " >= coop worst " + fmt(coop, 3) + " + 0.10");
  o.require(worst > coop_ood, "dimple worst " + fmt(worst, 3) + " > coop_ood worst " + fmt(coop_ood, 3));
  const double avg = dimple.mean(&RunMetrics::avg_group_acc), best = dimple.mean_best_group();
  o.require(best - avg <= 0.05, "dimple avg " + fmt(avg, 3) + " within 0.05 of best group " + fmt(best, 3));
  double per_seed = 0.0;
  for (const char* name : {"coop", "coop_ood", "dimple"}) per_seed += r.at(name).seconds;
  per_seed /= static_cast<double>(kSeeds);
  o.require(per_seed < 600.0, "runtime " + fmt(per_seed, 1) + " s per seed < 600 s");
  return o;
}

Outcome base_to_novel(const std::map<std::string, VariantResult>& r) {
  Outcome o;
  const auto& dimple = r.at("dimple");
  const auto& coop_ood = r.at("coop_ood");
  std::size_t wins = 0;
  for (std::size_t s = 0; s < kSeeds; ++s) wins += dimple.runs[s].novel_acc >= coop_ood.runs[s].novel_acc;
  o.require(wins >= 4, "dimple novel >= coop_ood novel on " + std::to_string(wins) + "/5 seeds (need 4)");
  const double coupled = dimple.mean(&RunMetrics::hm);
  const double independent = r.at("dimple_independent").mean(&RunMetrics::hm);
  o.require(coupled >= independent - 0.02,
            "coupled hm " + fmt(coupled, 3) + " >= independent hm " + fmt(independent, 3) + " - 0.02");
  const double secs = dimple.seconds + coop_ood.seconds + r.at("dimple_independent").seconds;
  o.require(secs < 900.0, "runtime " + fmt(secs, 1) + " s < 900 s");
  return o;
}

Outcome ablation(const std::map<std::string, VariantResult>& r) {
  Outcome o;
  const double ce = r.at("ce_only").mean(&RunMetrics::worst_group_acc);
  const double ce_cmi = r.at("ce_cmi").mean(&RunMetrics::worst_group_acc);
  const double ce_sp = r.at("ce_sp").mean(&RunMetrics::worst_group_acc);
  const double full = r.at("dimple").mean(&RunMetrics::worst_group_acc);
  o.require(ce_cmi >= ce, "ce+cmi worst " + fmt(ce_cmi, 3) + " >= ce-only worst " + fmt(ce, 3));
  o.require(ce_sp < full, "ce+sp worst " + fmt(ce_sp, 3) + " < full worst " + fmt(full, 3));
  const double secs = r.at("ce_only").seconds + r.at("ce_cmi").seconds + r.at("ce_sp").seconds + r.at("dimple").seconds;
  o.require(secs < 1200.0, "runtime " + fmt(secs, 1) + " s < 1200 s");
  return o;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  Outcome o;
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "dimple_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream sink;
  auto cli = [&](std::vector<std::string> args) { return run_cli(args, sink, sink); };
  const std::vector<std::string> base = {"--seed", "11", "--set", "train.epochs=2"};
  auto with = [&](std::vector<std::string> head, std::vector<std::string> tail) {
    head.insert(head.end(), base.begin(), base.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  const int a = cli(with({"train", "--out", (root / "a").string()}, {}));
  const int b = cli(with({"train", "--out", (root / "b").string()}, {}));
  o.require(a == kExitOk && b == kExitOk, "both training runs succeed");
  for (const char* f : {"run.json", "steps.csv", "checkpoint.bin", "resolved_config.cfg"}) {
    const auto x = read_bytes(root / "a" / f);
    o.require(!x.empty() && x == read_bytes(root / "b" / f), std::string(f) + " byte-identical");
  }
  const int e = cli(with({"eval", "--out", (root / "eval").string()},
                         {"--checkpoint", (root / "a" / "checkpoint.bin").string()}));
  o.require(e == kExitOk, "eval of the checkpoint succeeds");
  if (e == kExitOk) {
    const auto run = nlohmann::json::parse(read_bytes(root / "a" / "run.json"))["metrics"];
    const auto ev = nlohmann::json::parse(read_bytes(root / "eval" / "eval.json"))["metrics"];
    bool same = true;
    for (const char* k : {"base_acc", "novel_acc", "hm", "avg_group_acc", "worst_group_acc", "group_acc", "shift_acc"})
      same = same && run.at(k) == ev.at(k);
    o.require(same, "reloaded checkpoint reproduces every metric bitwise");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + fmt(secs, 1) + " s < 120 s");
  return o;
}

Outcome data_statistics() {
  Outcome o;
  const auto t0 = Clock::now();
  ExperimentConfig cfg;
  cfg.resolve();
  const SyntheticTask task = generate(cfg.task);
  const auto& tr = task.train;
  std::size_t aligned = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) aligned += tr.attrs[i] == task.spec.aligned_attr(tr.labels[i]);
  const double rho = static_cast<double>(aligned) / static_cast<double>(tr.size());
  o.require(std::abs(rho - task.spec.train_correlation) <= 0.02,
            "train correlation " + fmt(rho, 4) + " within 0.02 of " + fmt(task.spec.train_correlation, 2));

  const auto novel = novel_classes(task.spec);
  std::size_t leaked = 0;
  for (int y : tr.labels) leaked += std::find(novel.begin(), novel.end(), y) != novel.end();
  std::set<std::int64_t> train_ids(tr.sample_ids.begin(), tr.sample_ids.end());
  std::size_t shared = 0;
  for (const LabeledBatch* b : {&task.test_id, &task.test_shift})
    for (std::size_t i = 0; i < b->size(); ++i) shared += train_ids.count(b->sample_ids[i]);
  o.require(leaked == 0 && shared == 0, "novel-class training exposure " + std::to_string(leaked) +
                                            ", shared sample ids " + std::to_string(shared));

  TaskSpec clean = cfg.task;
  clean.noise_std = 0.05;
  const SyntheticTask low = generate(clean);
  const auto pred = core_oracle_predict(low.test_id);
  const double acc = accuracy(pred, low.test_id.labels);
  o.require(acc >= 0.99, "core oracle accuracy at noise 0.05 = " + fmt(acc, 4) + " >= 0.99");
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime " + fmt(secs, 1) + " s < 60 s");
  return o;
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Outcome>> results;
  auto report = [&](const std::string& name, Outcome o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    results.emplace_back(name, std::move(o));
  };

  report("1 harmonic-mean identity", harmonic_mean_identity());
  report("2 gradient suite", gradient_suite());
  report("3 HSIC oracle equivalence", hsic_oracles());
  report("4 loss identities", loss_identities());

  std::cout << "running the synthetic benchmark (" << kSeeds << " seeds per variant)" << std::endl;
  const auto bench = run_benchmark();
  report("5 worst-group robustness", robustness(bench));
  report("6 base-to-novel generalization", base_to_novel(bench));
  report("7 loss ablation ordering", ablation(bench));

  report("8 determinism and checkpoint round trip", determinism());
  report("9 data-generator statistics", data_statistics());

  std::size_t passed = 0;
  for (const auto& [name, o] : results) passed += o.pass;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
