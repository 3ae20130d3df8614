#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pafu/gradcheck_cases.hpp"
#include "pafu/pafu.hpp"

namespace pafu::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kRuntime = 2;

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::size_t v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw CLI::ValidationError(what, "expected a comma separated list of integers");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError(what, "empty list");
  return out;
}

inline std::vector<fs::path> png_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Error("data directory '" + dir + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no PNG images in '" + dir + "'");
  return files;
}

struct NamedPairs {
  std::vector<ImagePair> pairs;
  std::vector<std::string> names;
};

/// input_XXXX.png / target_XXXX.png pairs as written by gen-sad.
inline NamedPairs sad_pairs(const std::string& dir) {
  NamedPairs out;
  for (const auto& p : png_files(dir)) {
    const std::string name = p.filename().string();
    if (name.rfind("input_", 0) != 0) continue;
    const fs::path target = p.parent_path() / ("target_" + name.substr(6));
    if (!fs::exists(target)) throw Error("missing target for '" + name + "'");
    out.pairs.push_back({read_png(p.string()), read_png(target.string())});
    out.names.push_back(name.substr(6, name.size() - 10));
  }
  if (out.pairs.empty()) throw Error("no input_*.png files in '" + dir + "'");
  return out;
}

/// Network input for a single image of the given task. Demosaicking inputs
/// are RGB images mosaicked here (a gray PNG holding a raw mosaic passes
/// through unchanged, since every channel carries the same samples).
inline Tensor prepare_input(Task task, const Tensor& img) {
  if (task == Task::Demosaick) return mosaic_to_sparse_rgb(bayer_mosaic(img));
  return img;
}

inline Tensor image_of(const Tensor& batch) { return batch.reshaped(Shape{batch.c(), batch.h(), batch.w()}); }

}  // namespace detail

struct GenSadArgs {
  std::string out;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  double density = 0.25;
};

struct TrainArgs {
  std::string task;
  std::string out;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t kernels = 2;
  std::string supports = "5";
  std::size_t scale = 2;
  std::optional<std::string> alt_ratio;
  std::string data;
  std::string log;
  std::string arch = "pafu";
  std::optional<std::size_t> batch;
  std::optional<std::size_t> patch;
  std::optional<double> lr;
  bool noisy = false;
};

struct EvalArgs {
  std::string task;
  std::string ckpt;
  std::string data;
  std::string baseline;
  std::size_t scale = 2;
  bool y_psnr = false;
  std::size_t crop = 4;
};

struct ImageArgs {
  std::string ckpt;
  std::string in;
  std::string out;
  bool bayer_split = false;
};

struct GradArgs {
  std::string op;
  std::uint64_t seed = 0;
};

struct BenchArgs {
  std::string op;
  std::string size;
  std::size_t iters = 10;
  std::size_t kernels = 2;
  std::size_t support = 5;
};

inline int gen_sad(const GenSadArgs& a, std::ostream& out) {
  fs::create_directories(a.out);
  SadConfig cfg;
  cfg.seed = a.seed;
  cfg.black_density = a.density;
  cfg.validate();
  for (std::size_t i = 0; i < a.count; ++i) {
    const SadSample s = gen_sad_sample(cfg, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    write_png(s.input, (fs::path(a.out) / ("input_" + std::string(name))).string());
    write_png(s.target, (fs::path(a.out) / ("target_" + std::string(name))).string());
  }
  out << "wrote " << a.count << " pairs to " << a.out << '\n';
  return kOk;
}

inline int train(const TrainArgs& a, std::ostream& out) {
  const Task task = parse_task(a.task);
  TaskDefaults d = task_defaults(task);
  TrainConfig cfg = d.train;
  cfg.task = task;
  cfg.steps = a.steps;
  cfg.seed = a.seed;
  if (a.alt_ratio) cfg.alt = AltRatio::parse(*a.alt_ratio);
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.lr) cfg.lr = *a.lr;
  const std::size_t patch = a.patch.value_or(d.patch);

  ModelSpec spec = ModelSpec::for_task(task, a.kernels, detail::parse_list(a.supports, "--supports"), a.scale);
  if (task != Task::Sr) spec.scale = 1;
  Rng init = Rng(a.seed).split(0);
  std::unique_ptr<Model> model;
  if (a.arch == "pafu") {
    model = make_pafu_model(spec, init);
  } else if (a.arch == "fcnn" || a.arch == "fcnn-res") {
    spec.arch = a.arch == "fcnn" ? Arch::Fcnn : Arch::ResidualFcnn;
    model = std::make_unique<FcnnModel>(spec, init);
  } else {
    throw CLI::ValidationError("--arch", "expected pafu, fcnn or fcnn-res");
  }

  BatchFn batches;
  if (task == Task::Sad) {
    if (a.data.empty()) {
      batches = sad_batches(SadConfig::of_size(patch), cfg.batch_size);
    } else {
      auto pairs = detail::sad_pairs(a.data).pairs;
      batches = [pairs, b = cfg.batch_size](Rng& rng) {
        std::vector<ImagePair> items;
        for (std::size_t i = 0; i < b; ++i) items.push_back(pairs[rng.below(pairs.size())]);
        return stack_pairs(items);
      };
    }
  } else {
    if (a.data.empty()) throw Error("--data is required for task " + a.task);
    std::vector<Tensor> images;
    for (const auto& p : detail::png_files(a.data)) images.push_back(read_png(p.string()));
    batches = task == Task::Demosaick ? demosaick_batches(std::move(images), patch, cfg.batch_size, a.noisy)
                                      : sr_batches(std::move(images), spec.scale, patch, cfg.batch_size);
  }

  const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
  std::ofstream log(log_path);
  if (!log) throw Error("cannot open log file '" + log_path + "'");
  pafu::train(*model, cfg, batches, {&out, &log});
  save_checkpoint(to_checkpoint(*model), a.out);
  out << "saved " << a.out << " (" << model->parameter_count() << " parameters)\n";
  return kOk;
}

inline int eval(const EvalArgs& a, std::ostream& out) {
  const Task task = parse_task(a.task);
  std::unique_ptr<Model> model;
  std::size_t scale = a.scale;
  if (!a.ckpt.empty()) {
    model = from_checkpoint(load_checkpoint(a.ckpt));
    if (model->spec().task != task) {
      throw Error("checkpoint was trained for task " + to_string(model->spec().task) + ", not " + a.task);
    }
    scale = model->spec().scale;
  } else if (a.baseline.empty()) {
    throw CLI::ValidationError("eval", "one of --ckpt or --baseline is required");
  }
  if (!a.baseline.empty()) {
    if (!(a.baseline == "bilinear" && task == Task::Demosaick) && !(a.baseline == "bicubic" && task == Task::Sr)) {
      throw CLI::ValidationError("--baseline", "bilinear applies to demosaick, bicubic to sr");
    }
  }

  detail::NamedPairs data;
  if (task == Task::Sad) {
    data = detail::sad_pairs(a.data);
  } else {
    for (const auto& p : detail::png_files(a.data)) {
      Tensor img = read_png(p.string());
      if (task == Task::Demosaick) {
        img = crop(img, 0, 0, img.h() / 2 * 2, img.w() / 2 * 2);
        data.pairs.push_back(demosaick_pair(img));
      } else {
        data.pairs.push_back(sr_pair(img, scale));
      }
      data.names.push_back(p.stem().string());
    }
  }

  double sum_l1 = 0.0, sum_psnr = 0.0;
  for (std::size_t i = 0; i < data.pairs.size(); ++i) {
    const ImagePair& p = data.pairs[i];
    Tensor pred;
    if (a.baseline == "bilinear") {
      pred = bilinear_demosaick(bayer_mosaic(p.target));
    } else if (a.baseline == "bicubic") {
      pred = resample_bicubic(p.input, Scale{scale, 1});
    } else {
      pred = detail::image_of(model->infer(p.input));
    }
    const double l1 = l1_loss(pred, p.target);
    const double q = a.y_psnr ? psnr_y(pred, p.target, a.crop) : psnr(pred, p.target);
    sum_l1 += l1;
    sum_psnr += q;
    out << data.names[i] << " l1=" << detail::fmt("%.6f", l1) << " psnr=" << detail::fmt("%.4f", q) << '\n';
  }
  const double n = static_cast<double>(data.pairs.size());
  out << "mean l1=" << detail::fmt("%.6f", sum_l1 / n) << " psnr=" << detail::fmt("%.4f", sum_psnr / n)
      << " images=" << data.pairs.size() << '\n';
  return kOk;
}

inline int infer(const ImageArgs& a, std::ostream& out) {
  const auto model = from_checkpoint(load_checkpoint(a.ckpt));
  const Tensor img = read_png(a.in);
  const Tensor y = model->infer(detail::prepare_input(model->spec().task, img));
  write_png(detail::image_of(y), a.out);
  out << "wrote " << a.out << '\n';
  return kOk;
}

inline int heatmap(const ImageArgs& a, std::ostream& out) {
  const auto model = from_checkpoint(load_checkpoint(a.ckpt));
  if (model->spec().arch != Arch::Pafu) throw Error("heatmap needs a PAFU checkpoint");
  const Tensor img = read_png(a.in);
  Tape<float> tape;
  const ForwardResult r = model->evaluate(tape, detail::prepare_input(model->spec().task, img));
  const Tensor hm = selection_heatmap(*r.selection, default_palette(), a.bayer_split);
  write_png(detail::image_of(hm), a.out);
  out << "wrote " << a.out << '\n';
  return kOk;
}

inline int grad_check(const GradArgs& a, std::ostream& out) {
  std::vector<std::string> ops;
  if (a.op == "all") {
    ops = grad_check_case_names();
  } else {
    ops.push_back(a.op);
  }
  bool ok = true;
  for (const auto& name : ops) {
    const GradCheckCase c = make_grad_check_case(name, a.seed);
    const GradCheckResult r = run_grad_check_case(c, a.seed);
    const bool pass = r.max_rel_error <= c.tolerance;
    ok = ok && pass;
    out << "op=" << name << " max_rel_error=" << detail::fmt("%.3e", r.max_rel_error)
        << " coords=" << r.coords_checked << " tolerance=" << detail::fmt("%.0e", c.tolerance)
        << (pass ? " ok" : " FAILED") << '\n';
  }
  return ok ? kOk : kRuntime;
}

inline int bench(const BenchArgs& a, std::ostream& out) {
  const auto dims = detail::parse_list(a.size, "--size");
  if (dims.size() != 3) throw CLI::ValidationError("--size", "expected H,W,C");
  const std::size_t H = dims[0], W = dims[1], C = dims[2];
  if (a.iters == 0) throw CLI::ValidationError("--iters", "must be positive");
  Rng rng(1);
  const Tensor x = rand_uniform(Shape{1, C, H, W}, rng);
  std::function<void()> run;
  if (a.op == "conv2d") {
    const Tensor w = randn(Shape{C, C, a.support, a.support}, rng, 0.1);
    run = [x, w] { (void)conv2d(x, w, Padding::Zero); };
  } else if (a.op == "sv_conv2d") {
    const KernelBank bank = KernelBank::random(C, C, std::vector<std::size_t>(a.kernels, a.support), rng);
    std::vector<std::size_t> idx(H * W);
    for (auto& v : idx) v = rng.below(a.kernels);
    const SelectionMap z = SelectionMap::from_indices(1, a.kernels, H, W, idx);
    run = [x, bank, z] { (void)sv_conv2d(x, bank, z, Padding::Zero); };
  } else {
    throw CLI::ValidationError("--op", "expected conv2d or sv_conv2d");
  }
  run();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < a.iters; ++i) run();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double pps = static_cast<double>(H * W * a.iters) / secs;
  out << "op=" << a.op << " size=" << H << "x" << W << "x" << C << " iters=" << a.iters
      << " seconds=" << detail::fmt("%.6f", secs) << " pixels_per_s=" << detail::fmt("%.1f", pps) << '\n';
  return kOk;
}

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Returns 0 on success, 1 on usage errors, 2 on runtime errors.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Pixel adaptive filtering units: training, evaluation and inspection", "pafu"};
  app.require_subcommand(1);

  GenSadArgs gs;
  auto* c_gen = app.add_subcommand("gen-sad", "Write synthetic SAD input/target PNG pairs");
  c_gen->add_option("--out", gs.out, "Output directory")->required();
  c_gen->add_option("--count", gs.count, "Number of pairs")->required();
  c_gen->add_option("--seed", gs.seed, "Dataset seed")->required();
  c_gen->add_option("--density", gs.density, "Fraction of lattice cells with a black centre")->capture_default_str();

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  c_train->add_option("--task", ta.task, "sad, demosaick or sr")->required()->check(CLI::IsMember({"sad", "demosaick", "sr"}));
  c_train->add_option("--out", ta.out, "Checkpoint path")->required();
  c_train->add_option("--steps", ta.steps, "Training steps")->required();
  c_train->add_option("--seed", ta.seed, "Seed for initialization, data and noise")->required();
  c_train->add_option("--kernels", ta.kernels, "Kernels per unit")->capture_default_str();
  c_train->add_option("--supports", ta.supports, "Kernel supports, e.g. 5,7")->capture_default_str();
  c_train->add_option("--scale", ta.scale, "Super-resolution factor")->capture_default_str();
  c_train->add_option("--alt-ratio", ta.alt_ratio, "Selector:kernel update ratio (default 1:1 for sad, 1:3 otherwise)")
      ->check([](const std::string& v) {
        try {
          AltRatio::parse(v);
        } catch (const Error& e) {
          return std::string(e.what());
        }
        return std::string();
      });
  c_train->add_option("--data", ta.data, "Training images (required for demosaick and sr)");
  c_train->add_option("--log", ta.log, "Metrics log file (default: <out>.log)");
  c_train->add_option("--arch", ta.arch, "pafu, fcnn or fcnn-res")->capture_default_str();
  c_train->add_option("--batch", ta.batch, "Batch size");
  c_train->add_option("--patch", ta.patch, "Training patch size (SAD image size for task sad)");
  c_train->add_option("--lr", ta.lr, "Initial learning rate");
  c_train->add_flag("--noisy", ta.noisy, "Add heteroskedastic noise to demosaicking inputs");

  EvalArgs ea;
  auto* c_eval = app.add_subcommand("eval", "Report L1 and PSNR per image and on average");
  c_eval->add_option("--task", ea.task, "sad, demosaick or sr")->required()->check(CLI::IsMember({"sad", "demosaick", "sr"}));
  c_eval->add_option("--ckpt", ea.ckpt, "Checkpoint");
  c_eval->add_option("--data", ea.data, "Evaluation images")->required();
  c_eval->add_option("--baseline", ea.baseline, "Evaluate bilinear or bicubic instead of a checkpoint")
      ->check(CLI::IsMember({"bilinear", "bicubic"}));
  c_eval->add_option("--scale", ea.scale, "Scale for --baseline bicubic")->capture_default_str();
  c_eval->add_flag("--y-psnr", ea.y_psnr, "Luma PSNR after a border crop");
  c_eval->add_option("--crop", ea.crop, "Border crop for --y-psnr")->capture_default_str();

  ImageArgs ia;
  auto* c_infer = app.add_subcommand("infer", "Run a checkpoint on one image");
  c_infer->add_option("--ckpt", ia.ckpt, "Checkpoint")->required();
  c_infer->add_option("--in", ia.in, "Input PNG")->required();
  c_infer->add_option("--out", ia.out, "Output PNG")->required();

  ImageArgs ha;
  auto* c_heat = app.add_subcommand("heatmap", "Colour each pixel by its selected kernel");
  c_heat->add_option("--ckpt", ha.ckpt, "Checkpoint")->required();
  c_heat->add_option("--in", ha.in, "Input PNG")->required();
  c_heat->add_option("--out", ha.out, "Output PNG")->required();
  c_heat->add_flag("--bayer-split", ha.bayer_split, "Tile the four RGGB phases separately");

  GradArgs ga;
  auto* c_grad = app.add_subcommand("grad-check", "Finite-difference check of an op's gradient");
  c_grad->add_option("--op", ga.op, "Op name or 'all'")->required();
  c_grad->add_option("--seed", ga.seed, "Seed")->capture_default_str();

  BenchArgs ba;
  auto* c_bench = app.add_subcommand("bench", "Throughput of conv2d or sv_conv2d");
  c_bench->add_option("--op", ba.op, "conv2d or sv_conv2d")->required()->check(CLI::IsMember({"conv2d", "sv_conv2d"}));
  c_bench->add_option("--size", ba.size, "H,W,C")->required();
  c_bench->add_option("--iters", ba.iters, "Iterations")->capture_default_str();
  c_bench->add_option("--kernels", ba.kernels, "Kernels for sv_conv2d")->capture_default_str();
  c_bench->add_option("--support", ba.support, "Kernel support")->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_gen->parsed()) return gen_sad(gs, out);
    if (c_train->parsed()) return train(ta, out);
    if (c_eval->parsed()) return eval(ea, out);
    if (c_infer->parsed()) return infer(ia, out);
    if (c_heat->parsed()) return heatmap(ha, out);
    if (c_grad->parsed()) return grad_check(ga, out);
    if (c_bench->parsed()) return bench(ba, out);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace pafu::cli
