// SPDX-License-Identifier: Apache-2.0
#include "dimple/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "dimple/errors.hpp"
#include "dimple/ops.hpp"
#include "dimple/serialize.hpp"

namespace dimple {

namespace {

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

Tensor gather_images(const LabeledBatch& batch, std::span<const std::size_t> idx) {
  const std::size_t T = batch.spec.num_patch_tokens, d = batch.spec.width, stride = T * d;
  auto src = batch.images.data();
  std::vector<double> px;
  px.reserve(idx.size() * stride);
  for (std::size_t i : idx)
    px.insert(px.end(), src.begin() + static_cast<long>(i * stride), src.begin() + static_cast<long>((i + 1) * stride));
  return Tensor({idx.size(), T, d}, std::move(px));
}

void require_nonempty(const LabeledBatch& b, const char* what) {
  if (b.size() == 0) throw ConfigError(std::string(what) + ": evaluation split is empty");
}

nlohmann::json kernel_json(const KernelSpec& k) {
  return {{"kind", k.kind == KernelKind::rbf ? "rbf" : "linear"},
          {"bandwidth", k.rule == BandwidthRule::median ? "median" : "fixed"},
          {"sigma", k.sigma},
          {"fallback_sigma", k.fallback_sigma}};
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(class_token_scale > 0.0)) throw ConfigError("train: class_token_scale must be positive");
  check_compatible(objective, mode);
  loss.validate();
  encoder.validate();
  kernel.validate();
}

void apply_paper_regime(TrainConfig& cfg, TaskSpec& task) {
  task.samples_per_class = 16;
  cfg.batch_size = 4;
  cfg.epochs = 5;
  cfg.lr = 0.0035;
}

double harmonic_mean(double base, double novel) {
  const double s = base + novel;
  return s > 0.0 ? 2.0 * base * novel / s : 0.0;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("accuracy: prediction and label counts differ");
  if (labels.empty()) throw ConfigError("accuracy: empty split");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

GroupReport group_accuracy(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> groups, std::size_t num_groups) {
  if (groups.size() != labels.size()) throw DimensionError("group_accuracy: group and label counts differ");
  GroupReport r;
  r.avg_acc = accuracy(predictions, labels);
  std::vector<std::size_t> hits(num_groups, 0), count(num_groups, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int g = groups[i];
    if (g < 0 || static_cast<std::size_t>(g) >= num_groups) {
      throw DimensionError("group id " + std::to_string(g) + " outside [0, " + std::to_string(num_groups) + ")");
    }
    ++count[g];
    hits[g] += predictions[i] == labels[i];
  }
  r.worst_acc = 1.0;
  for (std::size_t g = 0; g < num_groups; ++g) {
    if (count[g] == 0) continue;
    const double acc = static_cast<double>(hits[g]) / static_cast<double>(count[g]);
    r.per_group[static_cast<int>(g)] = acc;
    r.group_sizes[static_cast<int>(g)] = count[g];
    r.worst_acc = std::min(r.worst_acc, acc);
  }
  return r;
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("DIMPLE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Model init_model(const TrainConfig& cfg, const SyntheticTask& task) {
  cfg.validate();
  if (cfg.encoder.text_width != task.spec.width || cfg.encoder.vision_width != task.spec.width) {
    throw ConfigError("encoder widths must equal the task width " + std::to_string(task.spec.width));
  }
  if (cfg.encoder.num_patch_tokens != task.spec.num_patch_tokens) {
    throw ConfigError("encoder num_patch_tokens must equal the task's " + std::to_string(task.spec.num_patch_tokens));
  }
  Rng rng(hash64(cfg.seed, "init"));
  Tensor class_tokens = scale(task.geometry->class_directions, cfg.class_token_scale).detach();
  return make_model(cfg.encoder, cfg.objective, cfg.mode, class_tokens, rng, cfg.head_init);
}

void train_model(Model& model, const TrainConfig& cfg, const SyntheticTask& task, RunMetrics& metrics) {
  cfg.validate();
  const auto classes = base_classes(task.spec);
  const LabeledBatch& data = task.train;
  if (data.size() == 0) throw ConfigError("train: training split is empty");
  for (int y : data.labels) {
    if (std::find(classes.begin(), classes.end(), y) == classes.end()) {
      throw ContractError("train: training split contains non-base class " + std::to_string(y));
    }
  }
  if (!cfg.train_encoders) {
    for (auto& [name, t] : model.named_tensors())
      if (name.rfind("text.", 0) == 0 || name.rfind("vision.", 0) == 0) t.set_requires_grad(false);
  }
  auto params = model.named_parameters(cfg.train_encoders);
  std::vector<std::vector<double>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].second.numel(), 0.0);

  const std::optional<KernelSpec> kernel = cfg.use_cmi ? std::optional<KernelSpec>(cfg.kernel) : std::nullopt;
  Rng shuffle(hash64(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(data.size());
  std::size_t step = metrics.steps.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle.shuffle(order);
    StepRecord sum_rec;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      for (const auto& [name, t] : params) {
        const auto w = t.data();
        if (!std::all_of(w.begin(), w.end(), [](double v) { return std::isfinite(v); })) {
          throw DivergedRunError("parameter '" + name + "' became non-finite before step " + std::to_string(step),
                                 static_cast<long>(step));
        }
      }
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data.labels[i]);
      LossReport r = model_loss(model, gather_images(data, idx), labels, classes, cfg.loss, kernel);
      StepRecord rec{step, epoch, r.ce.item(), r.spurious.item(), r.cmi.item(), r.total.item()};
      if (!std::isfinite(rec.total)) {
        throw DivergedRunError("loss became non-finite at step " + std::to_string(step), static_cast<long>(step));
      }
      r.total.backward();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p].second;
        if (!t.has_grad()) continue;
        auto g = t.grad();
        auto w = t.mutable_data();
        auto& v = velocity[p];
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = cfg.momentum * v[k] + g[k];
          w[k] -= cfg.lr * v[k];
        }
        t.zero_grad();
      }
      metrics.steps.push_back(rec);
      sum_rec.ce += rec.ce;
      sum_rec.spurious += rec.spurious;
      sum_rec.cmi += rec.cmi;
      sum_rec.total += rec.total;
      ++batches;
      ++step;
    }
    const double nb = static_cast<double>(batches);
    metrics.epochs.push_back({step, epoch, sum_rec.ce / nb, sum_rec.spurious / nb, sum_rec.cmi / nb, sum_rec.total / nb});
  }
}

Model train(const TrainConfig& cfg, const SyntheticTask& task, RunMetrics& metrics) {
  Model model = init_model(cfg, task);
  train_model(model, cfg, task, metrics);
  return model;
}

BaseNovelReport eval_base_novel(const Model& model, const LabeledBatch& base_test, const LabeledBatch& novel_test,
                                std::span<const int> base, std::span<const int> novel) {
  require_nonempty(base_test, "eval_base_novel");
  require_nonempty(novel_test, "eval_base_novel");
  const std::size_t threads = eval_threads();
  BaseNovelReport r;
  r.base_acc = accuracy(predict(model, base_test.images, base, threads), base_test.labels);
  r.novel_acc = accuracy(predict(model, novel_test.images, novel, threads), novel_test.labels);
  r.hm = harmonic_mean(r.base_acc, novel_test.size() ? r.novel_acc : 0.0);
  return r;
}

GroupReport eval_groups(const Model& model, const LabeledBatch& test, std::span<const int> class_ids) {
  require_nonempty(test, "eval_groups");
  auto pred = predict(model, test.images, class_ids, eval_threads());
  GroupReport r = group_accuracy(pred, test.labels, test.groups, test.spec.num_groups());
  // Only groups of the evaluated classes are expected to be present.
  for (int c : class_ids) {
    for (std::size_t a = 0; a < test.spec.attr_cardinality; ++a) {
      const int g = c * static_cast<int>(test.spec.attr_cardinality) + static_cast<int>(a);
      if (!r.per_group.count(g)) r.warnings.push_back("group " + std::to_string(g) + " is empty and was excluded");
    }
  }
  return r;
}

std::map<std::string, double> eval_shift(const Model& model, const SyntheticTask& task,
                                         std::span<const int> class_ids) {
  std::map<std::string, double> out;
  const std::size_t threads = eval_threads();
  auto acc = [&](const LabeledBatch& b) { return accuracy(predict(model, b.images, class_ids, threads), b.labels); };
  LabeledBatch shifted = task.test_shift.restrict_to(class_ids);
  require_nonempty(shifted, "eval_shift");
  out["test_shift"] = acc(shifted);
  LabeledBatch id = task.test_id.restrict_to(class_ids);
  require_nonempty(id, "eval_shift");
  out["noise_up"] = acc(domain_shift(id, ShiftKind::noise_up, task.spec.noise_std, task.spec.seed));
  out["core_scale_down"] = acc(domain_shift(id, ShiftKind::core_scale_down, 0.5, task.spec.seed));
  out["attr_flip"] = acc(domain_shift(id, ShiftKind::attr_flip, 1.0, task.spec.seed));
  return out;
}

void evaluate(const Model& model, const SyntheticTask& task, RunMetrics& metrics) {
  const auto base = base_classes(task.spec);
  const auto novel = novel_classes(task.spec);
  LabeledBatch base_test = task.test_id.restrict_to(base);
  LabeledBatch novel_test = task.test_id.restrict_to(novel);
  auto bn = eval_base_novel(model, base_test, novel_test, base, novel);
  metrics.base_acc = bn.base_acc;
  metrics.novel_acc = bn.novel_acc;
  metrics.hm = bn.hm;
  GroupReport g = eval_groups(model, base_test, base);
  metrics.avg_group_acc = g.avg_acc;
  metrics.worst_group_acc = g.worst_acc;
  metrics.group_acc = g.per_group;
  metrics.warnings.insert(metrics.warnings.end(), g.warnings.begin(), g.warnings.end());
  metrics.shift_acc = eval_shift(model, task, base);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"seed", c.seed},
          {"objective", to_string(c.objective)},
          {"prompt_mode", to_string(c.mode)},
          {"loss", to_json(c.loss)},
          {"encoder", to_json(c.encoder)},
          {"kernel", kernel_json(c.kernel)},
          {"use_cmi", c.use_cmi},
          {"train_encoders", c.train_encoders},
          {"class_token_scale", c.class_token_scale},
          {"head_init", to_string(c.head_init)}};
}

nlohmann::json to_json(const RunMetrics& m) {
  auto step_json = [](const StepRecord& s) {
    return nlohmann::json{{"step", s.step}, {"epoch", s.epoch}, {"ce_u", s.ce},
                          {"sp_r", s.spurious}, {"cmi", s.cmi}, {"total", s.total}};
  };
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : m.epochs) epochs.push_back(step_json(e));
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, acc] : m.group_acc) groups[std::to_string(g)] = acc;
  return {{"epochs", epochs},
          {"base_acc", m.base_acc},
          {"novel_acc", m.novel_acc},
          {"hm", m.hm},
          {"avg_group_acc", m.avg_group_acc},
          {"worst_group_acc", m.worst_group_acc},
          {"group_acc", groups},
          {"shift_acc", m.shift_acc},
          {"warnings", m.warnings}};
}

void write_run_json(const std::string& path, const TrainConfig& cfg, const TaskSpec& task, const RunMetrics& metrics) {
  nlohmann::json j = {{"config", to_json(cfg)}, {"task", to_json(task)}, {"metrics", to_json(metrics)}};
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

void write_steps_csv(const std::string& path, const RunMetrics& metrics) {
  auto out = open_output(path);
  out << "step,epoch,ce_u,sp_r,cmi,total\n";
  for (const auto& s : metrics.steps) {
    out << s.step << ',' << s.epoch << ',' << format_double(s.ce) << ',' << format_double(s.spurious) << ','
        << format_double(s.cmi) << ',' << format_double(s.total) << '\n';
  }
}

void export_embeddings(const Model& model, const LabeledBatch& batch, std::span<const int> class_ids,
                       const std::string& path) {
  require_nonempty(batch, "export_embeddings");
  FeatureBundle f;
  {
    NoGradGuard guard;
    f = export_features(model, batch.images, batch.labels, class_ids);
  }
  const std::size_t d = f.vision_invariant.cols();
  auto out = open_output(path);
  out << "sample_id,label,group_id,modality,component";
  for (std::size_t k = 0; k < d; ++k) out << ",dim_" << k;
  out << '\n';
  char buf[32];
  auto row = [&](long long id, int label, int group, char modality, char component, const Tensor& m, std::size_t r) {
    out << id << ',' << label << ',' << group << ',' << modality << ',' << component;
    for (std::size_t k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(r, k));
      out << ',' << buf;
    }
    out << '\n';
  };
  for (std::size_t i = 0; i < batch.size(); ++i) {
    row(batch.sample_ids[i], batch.labels[i], batch.groups[i], 'v', 'u', f.vision_invariant, i);
    row(batch.sample_ids[i], batch.labels[i], batch.groups[i], 'v', 's', f.vision_spurious, i);
  }
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    row(-1, class_ids[c], -1, 't', 'u', f.text_invariant, c);
    row(-1, class_ids[c], -1, 't', 's', f.text_spurious, c);
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::vector<GridRow> gridsearch(const TrainConfig& base, const SyntheticTask& task, const GridRanges& ranges,
                                std::size_t threads) {
  auto or_default = [](auto values, auto fallback) {
    if (values.empty()) values.push_back(fallback);
    return values;
  };
  const auto alphas = or_default(ranges.alpha, base.loss.alpha);
  const auto betas = or_default(ranges.beta, base.loss.beta);
  const auto lens = or_default(ranges.prompt_len, base.encoder.prompt_len);
  const auto depths = or_default(ranges.prompt_depth, base.encoder.prompt_depth);

  std::vector<GridRow> rows;
  for (double a : alphas)
    for (double b : betas)
      for (std::size_t len : lens)
        for (std::size_t depth : depths) rows.push_back({a, b, len, depth, "", {}});

  auto run_cell = [&](GridRow& row) {
    TrainConfig cfg = base;
    cfg.loss.alpha = row.alpha;
    cfg.loss.beta = row.beta;
    cfg.encoder.prompt_len = row.prompt_len;
    cfg.encoder.prompt_depth = row.prompt_depth;
    if (row.prompt_depth > cfg.encoder.num_layers) {
      row.status = "skipped: prompt_depth " + std::to_string(row.prompt_depth) + " exceeds num_layers " +
                   std::to_string(cfg.encoder.num_layers);
      return;
    }
    try {
      Model m = train(cfg, task, row.metrics);
      evaluate(m, task, row.metrics);
      row.status = "ok";
    } catch (const ConfigError& e) {
      row.status = std::string("skipped: ") + e.what();
    } catch (const DivergedRunError& e) {
      row.status = std::string("diverged: ") + e.what();
    }
  };

  std::size_t next = 0;
  std::mutex lock;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> g(lock);
        if (next >= rows.size()) return;
        i = next++;
      }
      run_cell(rows[i]);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, rows.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& x, const GridRow& y) {
    const bool xo = x.status == "ok", yo = y.status == "ok";
    if (xo != yo) return xo;
    return xo && x.metrics.hm > y.metrics.hm;
  });
  return rows;
}

void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows) {
  auto out = open_output(path);
  out << "alpha,beta,prompt_len,prompt_depth,status,base_acc,novel_acc,hm,avg_group_acc,worst_group_acc\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << format_double(r.alpha) << ',' << format_double(r.beta) << ',' << r.prompt_len << ',' << r.prompt_depth
        << ',' << status;
    if (r.status == "ok") {
      out << ',' << format_double(r.metrics.base_acc) << ',' << format_double(r.metrics.novel_acc) << ','
          << format_double(r.metrics.hm) << ',' << format_double(r.metrics.avg_group_acc) << ','
          << format_double(r.metrics.worst_group_acc);
    } else {
      out << ",,,,,";
    }
    out << '\n';
  }
}

}  // namespace dimple
