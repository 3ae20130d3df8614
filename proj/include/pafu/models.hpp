#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pafu/autodiff.hpp"
#include "pafu/checkpoint.hpp"
#include "pafu/losses.hpp"
#include "pafu/pafu_unit.hpp"
#include "pafu/rng.hpp"

namespace pafu {

enum class Task { Sad = 0, Demosaick = 1, Sr = 2 };
enum class Arch { Pafu = 0, Fcnn = 1, ResidualFcnn = 2 };
enum class ParamGroup { Selector, Kernels, Other };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::Sad: return "sad";
    case Task::Demosaick: return "demosaick";
    case Task::Sr: return "sr";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "sad") return Task::Sad;
  if (s == "demosaick") return Task::Demosaick;
  if (s == "sr") return Task::Sr;
  throw ContractError("unknown task '" + s + "'");
}

struct ModelSpec {
  Task task = Task::Sad;
  Arch arch = Arch::Pafu;
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;  // image channels after depth_to_space
  std::size_t scale = 1;         // depth_to_space factor (super-resolution)
  Padding padding = Padding::Zero;
  // PAFU
  std::size_t kernels = 2;
  std::vector<std::size_t> supports{5};
  std::size_t selector_width = 42;
  std::size_t selector_depth = 4;
  // FCNN
  std::size_t fcnn_width = 34;
  std::size_t fcnn_depth = 5;

  std::size_t unit_out_channels() const { return out_channels * scale * scale; }

  /// Support of kernel i: the list is split into contiguous equal blocks,
  /// e.g. 4 kernels with supports {5,7} -> 5,5,7,7.
  std::size_t support_of(std::size_t i) const {
    if (supports.empty()) throw ContractError("model spec: no kernel supports");
    const std::size_t per = (kernels + supports.size() - 1) / supports.size();
    return supports[std::min(i / per, supports.size() - 1)];
  }

  static ModelSpec for_task(Task task, std::size_t kernels, std::vector<std::size_t> supports, std::size_t scale = 2) {
    ModelSpec s;
    s.task = task;
    s.kernels = kernels;
    s.supports = std::move(supports);
    if (task == Task::Sr) {
      s.scale = scale;
      s.padding = Padding::Replicate;
    }
    return s;
  }
};

struct Param {
  std::string name;
  Tensor value;
  ParamGroup group;
};

struct ForwardOptions {
  double tau = 1.0;
  Rng* noise = nullptr;  // Gumbel noise source; nullptr = deterministic argmax
  bool hard_forward = true;
};

struct ForwardResult {
  Var<float> output;
  std::vector<Var<float>> reg;  // one decorrelation loss per unit
  std::optional<SelectionMap> selection;
};

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  const ModelSpec& spec() const { return spec_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  bool has_group(ParamGroup g) const {
    for (const auto& p : params_)
      if (p.group == g) return true;
    return false;
  }

  /// Builds the graph on `tape`; `vars` mirror params() one to one.
  virtual ForwardResult forward(Tape<float>& tape, const std::vector<Var<float>>& vars, const Tensor& input,
                                const ForwardOptions& opt) const = 0;

  /// Deterministic evaluation (no noise, hard selection, no gradients).
  ForwardResult evaluate(Tape<float>& tape, const Tensor& input) const {
    std::vector<Var<float>> vars;
    for (const auto& p : params_) vars.push_back(tape.constant(p.value));
    return forward(tape, vars, input, ForwardOptions{1.0, nullptr, true});
  }

  Tensor infer(const Tensor& input) const {
    Tape<float> tape;
    return evaluate(tape, as_batch(input)).output.value();
  }

  static Tensor as_batch(const Tensor& x) {
    if (x.shape().rank() == 4) return x;
    return x.reshaped(Shape{1, x.c(), x.h(), x.w()});
  }

 protected:
  ModelSpec spec_;
  std::vector<Param> params_;
};

class PafuModel : public Model {
 public:
  PafuModel(ModelSpec spec, Rng& rng) : Model(std::move(spec)) {
    if (spec_.kernels < 1) throw ContractError("PAFU needs at least one kernel");
    std::vector<std::size_t> sup;
    for (std::size_t i = 0; i < spec_.kernels; ++i) sup.push_back(spec_.support_of(i));
    KernelBank bank = KernelBank::random(spec_.unit_out_channels(), spec_.in_channels, sup, rng);
    SelectorNet net = SelectorNet::make(spec_.in_channels, spec_.kernels, spec_.selector_width, spec_.selector_depth, rng);
    set_unit(bank, net);
  }

  PafuModel(ModelSpec spec, const KernelBank& bank, const SelectorNet& net) : Model(std::move(spec)) {
    set_unit(bank, net);
  }

  KernelBank bank() const {
    KernelBank b;
    for (std::size_t i = 0; i < spec_.kernels; ++i) b.kernels.push_back(params_[i].value);
    return b;
  }
  SelectorNet selector() const {
    SelectorNet net;
    for (std::size_t i = spec_.kernels; i + 1 < params_.size(); i += 2) net.layers.push_back({params_[i].value, params_[i + 1].value});
    return net;
  }

  ForwardResult forward(Tape<float>& tape, const std::vector<Var<float>>& vars, const Tensor& input,
                        const ForwardOptions& opt) const override {
    const Var<float> x = tape.constant(as_batch(input));
    const std::vector<Var<float>> kernels(vars.begin(), vars.begin() + static_cast<std::ptrdiff_t>(spec_.kernels));
    const std::vector<Var<float>> sel_params(vars.begin() + static_cast<std::ptrdiff_t>(spec_.kernels), vars.end());
    const Var<float> logits = ad::select_coefficients(x, sel_params, spec_.padding);
    Tensor noise;
    if (opt.noise) noise = gumbel_noise(logits.shape(), *opt.noise);
    const auto sel = ad::gumbel_softmax(logits, opt.tau, noise, opt.hard_forward);
    Var<float> y = ad::sv_conv2d(x, kernels, sel.z, spec_.padding);
    if (spec_.scale > 1) y = ad::depth_to_space(y, spec_.scale);
    ForwardResult r;
    r.output = y;
    r.reg.push_back(ad::decorrelation_loss(kernels));
    r.selection = SelectionMap{sel.hard, sel.soft, opt.tau};
    return r;
  }

 private:
  void set_unit(const KernelBank& bank, const SelectorNet& net) {
    bank.validate();
    if (net.out_channels() != bank.count()) throw DimensionError("selector emits " + std::to_string(net.out_channels()) +
                                                                 " logits for " + std::to_string(bank.count()) + " kernels");
    if (net.in_channels() != bank.cin()) throw DimensionError("selector and bank disagree on input channels");
    params_.clear();
    for (std::size_t i = 0; i < bank.count(); ++i)
      params_.push_back({"unit0.kernel" + std::to_string(i), bank.kernels[i], ParamGroup::Kernels});
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      const std::string p = "unit0.selector.conv" + std::to_string(l);
      params_.push_back({p + ".weight", net.layers[l].weight, ParamGroup::Selector});
      params_.push_back({p + ".bias", net.layers[l].bias, ParamGroup::Selector});
    }
  }
};

/// Plain conv-relu stack (3x3, same padding); the residual variant adds the
/// input to the output, so zero weights give the identity.
class FcnnModel : public Model {
 public:
  FcnnModel(ModelSpec spec, Rng& rng) : Model(std::move(spec)) {
    if (spec_.arch == Arch::Pafu) spec_.arch = Arch::Fcnn;
    std::size_t c = spec_.in_channels;
    for (std::size_t d = 0; d < spec_.fcnn_depth; ++d) {
      const std::size_t o = d + 1 == spec_.fcnn_depth ? spec_.unit_out_channels() : spec_.fcnn_width;
      const std::string p = "fcnn.conv" + std::to_string(d);
      params_.push_back({p + ".weight", randn(Shape{o, c, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(c * 9))),
                         ParamGroup::Other});
      params_.push_back({p + ".bias", Tensor(Shape{o}), ParamGroup::Other});
      c = o;
    }
    if (residual() && (spec_.in_channels != spec_.out_channels || spec_.scale != 1)) {
      throw DimensionError("residual FCNN needs matching input/output channels");
    }
  }

  bool residual() const { return spec_.arch == Arch::ResidualFcnn; }

  void zero_weights() {
    for (auto& p : params_) p.value.fill(0.0f);
  }

  ForwardResult forward(Tape<float>& tape, const std::vector<Var<float>>& vars, const Tensor& input,
                        const ForwardOptions&) const override {
    const Var<float> x = tape.constant(as_batch(input));
    Var<float> y = ad::select_coefficients(x, vars, spec_.padding);
    if (spec_.scale > 1) y = ad::depth_to_space(y, spec_.scale);
    if (residual()) y = ad::add(y, x);
    return ForwardResult{y, {}, std::nullopt};
  }
};

namespace detail {

inline Tensor meta_scalar(double v) { return Tensor::scalar(static_cast<float>(v)); }

inline std::size_t meta_get(const NamedTensors& ck, const std::string& name) {
  return static_cast<std::size_t>(find_tensor(ck, "meta." + name)[0]);
}

}  // namespace detail

/// Parameters plus the meta.* entries needed to rebuild the model.
inline NamedTensors to_checkpoint(const Model& m) {
  const ModelSpec& s = m.spec();
  NamedTensors ck;
  ck.emplace_back("meta.task", detail::meta_scalar(static_cast<double>(s.task)));
  ck.emplace_back("meta.arch", detail::meta_scalar(static_cast<double>(s.arch)));
  ck.emplace_back("meta.in_channels", detail::meta_scalar(static_cast<double>(s.in_channels)));
  ck.emplace_back("meta.out_channels", detail::meta_scalar(static_cast<double>(s.out_channels)));
  ck.emplace_back("meta.scale", detail::meta_scalar(static_cast<double>(s.scale)));
  ck.emplace_back("meta.padding", detail::meta_scalar(s.padding == Padding::Zero ? 0.0 : 1.0));
  ck.emplace_back("meta.kernels", detail::meta_scalar(static_cast<double>(s.kernels)));
  Tensor sup(Shape{s.supports.size()});
  for (std::size_t i = 0; i < s.supports.size(); ++i) sup[i] = static_cast<float>(s.supports[i]);
  ck.emplace_back("meta.supports", sup);
  ck.emplace_back("meta.selector_width", detail::meta_scalar(static_cast<double>(s.selector_width)));
  ck.emplace_back("meta.selector_depth", detail::meta_scalar(static_cast<double>(s.selector_depth)));
  ck.emplace_back("meta.fcnn_width", detail::meta_scalar(static_cast<double>(s.fcnn_width)));
  ck.emplace_back("meta.fcnn_depth", detail::meta_scalar(static_cast<double>(s.fcnn_depth)));
  for (const auto& p : m.params()) ck.emplace_back(p.name, p.value);
  return ck;
}

/// Rebuilds a model from a checkpoint; parameter shapes are checked against
/// the architecture described by the meta.* entries.
inline std::unique_ptr<Model> from_checkpoint(const NamedTensors& ck) {
  using detail::meta_get;
  ModelSpec s;
  s.task = static_cast<Task>(meta_get(ck, "task"));
  s.arch = static_cast<Arch>(meta_get(ck, "arch"));
  s.in_channels = meta_get(ck, "in_channels");
  s.out_channels = meta_get(ck, "out_channels");
  s.scale = meta_get(ck, "scale");
  s.padding = meta_get(ck, "padding") == 0 ? Padding::Zero : Padding::Replicate;
  s.kernels = meta_get(ck, "kernels");
  s.supports.clear();
  for (float v : find_tensor(ck, "meta.supports").data()) s.supports.push_back(static_cast<std::size_t>(v));
  s.selector_width = meta_get(ck, "selector_width");
  s.selector_depth = meta_get(ck, "selector_depth");
  s.fcnn_width = meta_get(ck, "fcnn_width");
  s.fcnn_depth = meta_get(ck, "fcnn_depth");

  Rng rng(0);
  std::unique_ptr<Model> m;
  if (s.arch == Arch::Pafu) {
    m = std::make_unique<PafuModel>(s, rng);
  } else {
    m = std::make_unique<FcnnModel>(s, rng);
  }
  for (auto& p : m->params()) {
    const Tensor& t = find_tensor(ck, p.name);
    if (!(t.shape() == p.value.shape())) {
      throw DimensionError("checkpoint tensor '" + p.name + "' has shape " + t.shape().str() + ", model expects " +
                           p.value.shape().str());
    }
    p.value = t;
  }
  return m;
}

}  // namespace pafu
