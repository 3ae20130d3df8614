#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "pafu/datasets.hpp"
#include "pafu/losses.hpp"
#include "pafu/models.hpp"

namespace pafu {

// ---------------------------------------------------------------- optimizer

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamSlot {
  Tensor m, v;
  std::size_t t = 0;
};

/// Moments and step counters for a parameter list; each parameter keeps its
/// own counter, so groups updated on different schedules stay bias-correct.
struct AdamState {
  AdamHyper hyper;
  std::vector<AdamSlot> slots;

  static AdamState for_params(const std::vector<Param>& params, AdamHyper hyper = {}) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& p : params) s.slots.push_back({Tensor(p.value.shape()), Tensor(p.value.shape()), 0});
    return s;
  }
};

inline bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

inline void adam_update(Tensor& p, const Tensor& g, AdamSlot& slot, double lr, const AdamHyper& h) {
  require_same_shape(p.shape(), g.shape(), "adam");
  require_same_shape(p.shape(), slot.m.shape(), "adam state");
  ++slot.t;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(slot.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(slot.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double m = h.beta1 * slot.m[i] + (1.0 - h.beta1) * gi;
    const double v = h.beta2 * slot.v[i] + (1.0 - h.beta2) * gi * gi;
    slot.m[i] = static_cast<float>(m);
    slot.v[i] = static_cast<float>(v);
    p[i] = static_cast<float>(p[i] - lr * (m / bc1) / (std::sqrt(v / bc2) + h.eps));
  }
}

/// Bias-corrected Adam on the parameters flagged in `active` (all when empty).
/// Gradients are checked first; a non-finite value aborts the whole step.
inline void adam_step(std::vector<Param>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                      const std::vector<bool>& active = {}) {
  if (grads.size() != params.size() || state.slots.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and state counts differ");
  }
  auto on = [&](std::size_t i) { return active.empty() || active[i]; };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (on(i) && !all_finite(grads[i])) throw NumericError("adam_step: non-finite gradient for '" + params[i].name + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (on(i)) adam_update(params[i].value, grads[i], state.slots[i], lr, state.hyper);
  }
}

// ---------------------------------------------------------------- schedules

struct AltRatio {
  std::size_t selector = 1;
  std::size_t kernels = 3;

  std::size_t cycle() const { return selector + kernels; }
  bool selector_phase(std::size_t step) const { return step % cycle() < selector; }

  void validate() const {
    if (selector == 0 || kernels == 0) throw ContractError("alternation ratio terms must be positive");
  }

  static AltRatio parse(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ContractError("alternation ratio must look like A:B");
    AltRatio r;
    try {
      std::size_t used = 0;
      const std::string a = s.substr(0, colon), b = s.substr(colon + 1);
      r.selector = std::stoul(a, &used);
      if (used != a.size()) throw std::invalid_argument(a);
      r.kernels = std::stoul(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
    } catch (const std::logic_error&) {
      throw ContractError("bad alternation ratio '" + s + "'");
    }
    r.validate();
    return r;
  }
};

struct TrainConfig {
  Task task = Task::Sad;
  std::size_t batch_size = 4;
  std::size_t steps = 5000;
  double lr = 1e-3;
  double lr_final = 1e-5;  // cosine decay from lr to lr_final
  double tau_start = 1.0;  // exponential anneal tau_start -> tau_end
  double tau_end = 0.1;
  AltRatio alt;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;

  double lr_at(std::size_t step) const {
    if (steps <= 1) return lr;
    const double f = static_cast<double>(step) / static_cast<double>(steps - 1);
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * f));
  }
  double tau_at(std::size_t step) const {
    if (steps <= 1) return tau_end;
    const double f = static_cast<double>(step) / static_cast<double>(steps - 1);
    return tau_start * std::pow(tau_end / tau_start, f);
  }
  void validate() const {
    alt.validate();
    if (batch_size == 0) throw ContractError("batch size must be positive");
    if (!(lr > 0.0) || lr_final < 0.0) throw ContractError("learning rate must be positive");
    if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ContractError("temperature must be positive");
  }
};

// ---------------------------------------------------------------- stepping

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;  // task + mean regularizer
  double task = 0.0;
  double reg = 0.0;
  double psnr = 0.0;
  bool selector_updated = false;
};

inline std::string format_metrics(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step=%zu loss=%.6f reg=%.6f psnr=%.4f", m.step, m.loss, m.reg, m.psnr);
  return buf;
}

/// Owns the optimizer state and the alternating schedule. Within each cycle
/// of alt.selector + alt.kernels steps the first alt.selector steps update
/// only selector parameters and the rest update everything else. Models
/// without selector parameters update all parameters every step.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), adam_(AdamState::for_params(model.params())), noise_(Rng(cfg_.seed).split(1)) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }
  std::size_t selector_updates() const { return selector_updates_; }
  std::size_t kernel_updates() const { return kernel_updates_; }
  /// Gradients of the most recent step, one per parameter (frozen ones included).
  const std::vector<Tensor>& last_gradients() const { return last_grads_; }

  StepMetrics step(const ImagePair& batch) {
    const bool alternate = model_.has_group(ParamGroup::Selector);
    const bool sel_phase = alternate && cfg_.alt.selector_phase(step_);

    Tape<float> tape;
    std::vector<Var<float>> vars;
    for (const auto& p : model_.params()) vars.push_back(tape.leaf(p.value));
    ForwardOptions opt;
    opt.tau = cfg_.tau_at(step_);
    opt.noise = &noise_;
    const ForwardResult fr = model_.forward(tape, vars, batch.input, opt);
    const Var<float> target = tape.constant(Model::as_batch(batch.target));
    const Var<float> task = ad::l1_loss(fr.output, target);
    const Var<float> loss = ad::total_loss(task, fr.reg);
    const Gradients<float> grads = tape.backward(loss);

    last_grads_.clear();
    std::vector<bool> active;
    for (std::size_t i = 0; i < vars.size(); ++i) {
      last_grads_.push_back(grads[vars[i]]);
      const bool is_sel = model_.params()[i].group == ParamGroup::Selector;
      active.push_back(!alternate || is_sel == sel_phase);
    }
    adam_step(model_.params(), last_grads_, adam_, cfg_.lr_at(step_), active);

    if (sel_phase) {
      ++selector_updates_;
    } else {
      ++kernel_updates_;
    }
    StepMetrics m;
    m.step = step_;
    m.task = task.value()[0];
    m.loss = loss.value()[0];
    m.reg = m.loss - m.task;
    m.psnr = psnr(fr.output.value(), target.value());
    m.selector_updated = sel_phase;
    ++step_;
    return m;
  }

 private:
  Model& model_;
  TrainConfig cfg_;
  AdamState adam_;
  Rng noise_;
  std::size_t step_ = 0;
  std::size_t selector_updates_ = 0;
  std::size_t kernel_updates_ = 0;
  std::vector<Tensor> last_grads_;
};

// ---------------------------------------------------------------- batches

using BatchFn = std::function<ImagePair(Rng&)>;

inline ImagePair stack_pairs(const std::vector<ImagePair>& items) {
  std::vector<Tensor> in, tg;
  for (const auto& p : items) {
    in.push_back(p.input);
    tg.push_back(p.target);
  }
  return {stack_batch(in), stack_batch(tg)};
}

inline BatchFn sad_batches(SadConfig cfg, std::size_t batch) {
  return [cfg, batch](Rng& rng) {
    std::vector<ImagePair> items;
    for (std::size_t b = 0; b < batch; ++b) {
      SadSample s = gen_sad_sample(cfg, rng);
      items.push_back({std::move(s.input), std::move(s.target)});
    }
    return stack_pairs(items);
  };
}

/// Demosaicking pair from a clean RGB image: input is the (optionally noisy)
/// RGGB mosaic spread into a sparse three channel image.
inline ImagePair demosaick_pair(const Tensor& rgb, Rng* noise = nullptr, double alpha = 0.0, double beta = 0.0) {
  Tensor mosaic = bayer_mosaic(rgb);
  if (noise) mosaic = add_heteroskedastic_noise(mosaic, alpha, beta, *noise);
  return {mosaic_to_sparse_rgb(mosaic), rgb};
}

/// Super-resolution pair: the high resolution image cropped to a multiple of
/// r, and its bicubic downsample.
inline ImagePair sr_pair(const Tensor& hr, std::size_t r) {
  const std::size_t H = hr.h() / r * r, W = hr.w() / r * r;
  if (H == 0 || W == 0) throw DimensionError("sr_pair: image smaller than scale");
  Tensor target = crop(hr, 0, 0, H, W);
  return {resample_bicubic(target, Scale{1, r}), target};
}

inline ImagePair random_crop(const Tensor& img, std::size_t size, Rng& rng, std::size_t align = 1) {
  if (img.h() < size || img.w() < size) throw DimensionError("training image smaller than patch");
  const std::size_t top = rng.below((img.h() - size) / align + 1) * align;
  const std::size_t left = rng.below((img.w() - size) / align + 1) * align;
  const Tensor c = crop(img, top, left, size, size);
  return {c, c};
}

inline BatchFn demosaick_batches(std::vector<Tensor> images, std::size_t patch, std::size_t batch, bool noisy) {
  if (images.empty()) throw ContractError("demosaick training needs at least one image");
  if (patch % 2) throw DimensionError("demosaick patch must be even");
  return [images = std::move(images), patch, batch, noisy](Rng& rng) {
    std::vector<ImagePair> items;
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor& img = images[rng.below(images.size())];
      const Tensor rgb = augment_flips(random_crop(img, patch, rng, 2), rng).target;
      if (noisy) {
        const double alpha = rng.uniform(0.0, 0.02), beta = rng.uniform(0.0, 0.0004);
        items.push_back(demosaick_pair(rgb, &rng, alpha, beta));
      } else {
        items.push_back(demosaick_pair(rgb));
      }
    }
    return stack_pairs(items);
  };
}

inline BatchFn sr_batches(std::vector<Tensor> images, std::size_t scale, std::size_t lr_patch, std::size_t batch) {
  if (images.empty()) throw ContractError("super-resolution training needs at least one image");
  return [images = std::move(images), scale, lr_patch, batch](Rng& rng) {
    std::vector<ImagePair> items;
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor& img = images[rng.below(images.size())];
      const Tensor hr = augment_flips(random_crop(img, lr_patch * scale, rng), rng).target;
      items.push_back(sr_pair(hr, scale));
    }
    return stack_pairs(items);
  };
}

/// Runs cfg.steps alternating steps, writing a metrics line every
/// cfg.log_every steps (and on the last step) to each stream in `logs`.
inline StepMetrics train(Model& model, const TrainConfig& cfg, const BatchFn& batches,
                         const std::vector<std::ostream*>& logs = {}) {
  Trainer trainer(model, cfg);
  Rng data = Rng(cfg.seed).split(2);
  StepMetrics last;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    last = trainer.step(batches(data));
    if ((cfg.log_every && s % cfg.log_every == 0) || s + 1 == cfg.steps) {
      const std::string line = format_metrics(last);
      for (std::ostream* o : logs) *o << line << '\n' << std::flush;
    }
  }
  return last;
}

// ---------------------------------------------------------------- models

/// Conv-relu baseline with roughly the PAFU toy model's budget
/// (3->34->34->34->34->3, 3x3, about 33K parameters).
inline std::unique_ptr<FcnnModel> build_fcnn_baseline(bool residual, Rng& rng, Task task = Task::Sad) {
  ModelSpec s;
  s.task = task;
  s.arch = residual ? Arch::ResidualFcnn : Arch::Fcnn;
  return std::make_unique<FcnnModel>(s, rng);
}

/// Training defaults per task: SAD trains on smaller synthetic images of the
/// same construction; the imaging tasks train on random patches.
struct TaskDefaults {
  TrainConfig train;
  std::size_t patch = 0;  // SAD image size, demosaick patch, or low resolution SR patch
};

inline TaskDefaults task_defaults(Task task) {
  TaskDefaults d;
  d.train.task = task;
  switch (task) {
    case Task::Sad:
      d.train.batch_size = 2;
      d.train.alt = AltRatio{1, 1};
      d.patch = 39;
      break;
    case Task::Demosaick:
      d.train.batch_size = 8;
      d.patch = 32;
      break;
    case Task::Sr:
      d.train.batch_size = 8;
      d.patch = 16;
      break;
  }
  return d;
}

/// PAFU model with the library's standard initialization: He-normal selector
/// layers except a zero final layer (uniform selection odds everywhere) and
/// kernels at a tenth of He scale.
inline std::unique_ptr<PafuModel> make_pafu_model(const ModelSpec& spec, Rng& rng) {
  const PafuModel raw(spec, rng);
  KernelBank bank = raw.bank();
  for (auto& k : bank.kernels) k = scale(k, 0.1f);
  SelectorNet net = raw.selector();
  net.layers.back().weight.fill(0.0f);
  return std::make_unique<PafuModel>(spec, bank, net);
}

// ---------------------------------------------------------------- evaluation

struct EvalRecord {
  std::string name;
  double l1 = 0.0;
  double psnr = 0.0;
};

struct EvalSummary {
  std::vector<EvalRecord> images;
  double mean_l1 = 0.0;
  double mean_psnr = 0.0;
};

inline EvalSummary evaluate(const Model& model, const std::vector<ImagePair>& pairs,
                            const std::vector<std::string>& names = {}) {
  EvalSummary s;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Tensor out = model.infer(pairs[i].input);
    const Tensor target = Model::as_batch(pairs[i].target);
    EvalRecord r;
    r.name = i < names.size() ? names[i] : std::to_string(i);
    r.l1 = l1_loss(out, target);
    r.psnr = psnr(out, target);
    s.mean_l1 += r.l1;
    s.mean_psnr += r.psnr;
    s.images.push_back(r);
  }
  if (!pairs.empty()) {
    s.mean_l1 /= static_cast<double>(pairs.size());
    s.mean_psnr /= static_cast<double>(pairs.size());
  }
  return s;
}

}  // namespace pafu
