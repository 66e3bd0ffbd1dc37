// SPDX-License-Identifier: Apache-2.0
#include "dimple/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dimple/ops.hpp"

namespace dimple {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& param, double h) {
  auto w = param.mutable_data();
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double up = f();
    w[i] = orig - h;
    const double down = f();
    w[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

std::string parameter_group(const std::string& name) {
  if (name.rfind("prompts.", 0) == 0) return "prompts";
  if (name.rfind("coupling.", 0) == 0) return "coupling";
  if (name.rfind("heads.", 0) == 0) return "heads";
  return "encoder";
}

GradCheckReport check_gradients(const std::string& label, const std::function<Tensor()>& loss,
                                std::span<NamedTensor> params, double h, double threshold,
                                const std::function<void(bool analytic)>& before_eval, const GradientFault& fault) {
  GradCheckReport report;
  report.label = label;
  report.threshold = threshold;
  for (auto& [name, t] : params) t.zero_grad();
  if (before_eval) before_eval(true);
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : params) {
    std::vector<double> g(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    if (fault) fault(name, g);
    analytic.push_back(std::move(g));
    t.zero_grad();
  }
  auto value = [&] {
    NoGradGuard guard;
    if (before_eval) before_eval(false);
    return loss().item();
  };
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, t] = params[p];
    auto numeric = numeric_gradient(value, t, h);
    TensorCheck check{name, parameter_group(name), numeric.size(), 0.0};
    for (std::size_t i = 0; i < numeric.size(); ++i)
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[p][i], numeric[i]));
    auto& worst = report.group_worst[check.group];
    worst = std::max(worst, check.max_rel_error);
    if (report.worst_tensor.empty() || check.max_rel_error > report.worst_error) {
      report.worst_error = check.max_rel_error;
      report.worst_tensor = name;
    }
    if (!(check.max_rel_error < threshold)) report.passed = false;
    report.tensors.push_back(std::move(check));
  }
  return report;
}

std::vector<GradCheckReport> run_gradcheck(std::uint64_t seed, const GradientFault& fault,
                                           std::span<const Objective> objectives) {
  static constexpr Objective kAll[] = {Objective::dimple, Objective::dimple_early, Objective::coop,
                                       Objective::coop_ood};
  if (objectives.empty()) objectives = kAll;

  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.prompt_depth = 2;
  cfg.prompt_len = 1;
  cfg.text_width = cfg.vision_width = cfg.embed_width = 8;
  cfg.num_heads = 2;
  cfg.num_patch_tokens = 4;
  // Larger weights than the training default so that every path carries signal.
  cfg.init_std = 0.3;
  const std::size_t n = 4, classes = 3;

  Rng data_rng(hash64(seed, "data"));
  std::vector<double> cls(classes * cfg.text_width), px(n * cfg.num_patch_tokens * cfg.vision_width);
  for (auto& v : cls) v = data_rng.normal();
  for (auto& v : px) v = data_rng.normal();
  const Tensor class_embeddings({classes, cfg.text_width}, cls);
  const Tensor images({n, cfg.num_patch_tokens, cfg.vision_width}, px);
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<int> class_ids = {0, 1, 2};

  LossWeights w;
  w.alpha = 0.7;
  w.beta = 1.3;
  w.tau = 0.5;

  std::vector<GradCheckReport> reports;
  for (Objective obj : objectives) {
    const PromptMode mode = obj == Objective::dimple_early ? PromptMode::early : PromptMode::coupled;
    Rng init(hash64(seed, "init"));
    Model model = make_model(cfg, obj, mode, class_embeddings, init);
    KernelSpec kernel;
    kernel.tape = std::make_shared<BandwidthTape>();
    auto params = model.named_parameters(true);
    auto loss = [&] { return model_loss(model, images, labels, class_ids, w, kernel).total; };
    // The analytic pass records the median bandwidths; probes replay them.
    auto before = [&](bool analytic) {
      if (analytic) {
        kernel.tape->values.clear();
        kernel.tape->replaying = false;
      } else {
        kernel.tape->start_replay();
      }
    };
    reports.push_back(check_gradients(to_string(obj), loss, params, 1e-5, 1e-4, before, fault));
  }
  return reports;
}

}  // namespace dimple
