// Acceptance run: one PASS/FAIL/SKIP line per criterion, exit 1 on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "pafu/gradcheck_cases.hpp"
#include "pafu/pafu.hpp"

using namespace pafu;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  enum Kind { Pass, Fail, Skip } kind;
  std::string detail;
};

Outcome check(bool ok, std::string detail) { return {ok ? Outcome::Pass : Outcome::Fail, std::move(detail)}; }

std::string fmt(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {Outcome::Fail, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const char* tag = o.kind == Outcome::Pass ? "PASS" : o.kind == Outcome::Fail ? "FAIL" : "SKIP";
  failures += o.kind == Outcome::Fail;
  std::printf("[%s] %2d %-24s %s (%.1fs)\n", tag, id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

// ------------------------------------------------------------------ SAD

constexpr std::size_t kSadSteps = 10000;
constexpr std::uint64_t kSadSeed = 1;
constexpr std::size_t kHeldOut = 16;

std::vector<ImagePair> sad_held_out() {
  const SadConfig cfg = SadConfig::of_size(89, 0.25, 0x5AD7E57);
  std::vector<ImagePair> pairs;
  for (std::size_t i = 0; i < kHeldOut; ++i) {
    const SadSample s = gen_sad_sample(cfg, static_cast<std::uint64_t>(i));
    pairs.push_back({s.input, s.target});
  }
  return pairs;
}

double train_and_eval(Model& model, const std::vector<ImagePair>& held_out) {
  const TaskDefaults d = task_defaults(Task::Sad);
  TrainConfig cfg = d.train;
  cfg.steps = kSadSteps;
  cfg.seed = kSadSeed;
  train(model, cfg, sad_batches(SadConfig::of_size(d.patch), cfg.batch_size));
  return evaluate(model, held_out).mean_l1;
}

// Cosine with the channel-diagonal 5x5 Dirac, and L2 norm.
std::pair<double, double> dirac_cos_and_norm(const Tensor& k) {
  double dot = 0.0, nn = 0.0;
  for (std::size_t o = 0; o < k.n(); ++o)
    for (std::size_t i = 0; i < k.c(); ++i)
      for (std::size_t u = 0; u < k.h(); ++u)
        for (std::size_t v = 0; v < k.w(); ++v) {
          const double w = k(o, i, u, v);
          nn += w * w;
          if (o == i && u == k.h() / 2 && v == k.w() / 2) dot += w;
        }
  const double dirac_norm = std::sqrt(static_cast<double>(std::min(k.n(), k.c())));
  return {nn > 0.0 ? dot / (std::sqrt(nn) * dirac_norm) : 0.0, std::sqrt(nn)};
}

double pafu_sad_l1 = -1.0;

Outcome sad_optimality() {
  Rng init = Rng(kSadSeed).split(0);
  const auto model = make_pafu_model(ModelSpec::for_task(Task::Sad, 2, {5}), init);
  pafu_sad_l1 = train_and_eval(*model, sad_held_out());
  const KernelBank bank = model->bank();
  const auto [c0, n0] = dirac_cos_and_norm(bank.kernels[0]);
  const auto [c1, n1] = dirac_cos_and_norm(bank.kernels[1]);
  const bool assigned = (c0 >= 0.99 && n1 < 0.05) || (c1 >= 0.99 && n0 < 0.05);
  return check(pafu_sad_l1 < 0.01 && assigned,
               fmt("params=%zu steps=%zu held-out l1=%.5f (<0.01) k0 cos=%.4f norm=%.4f k1 cos=%.4f norm=%.4f",
                   model->parameter_count(), kSadSteps, pafu_sad_l1, c0, n0, c1, n1));
}

Outcome baseline_gap() {
  if (pafu_sad_l1 < 0.0) return {Outcome::Skip, "needs criterion 1"};
  Rng init = Rng(kSadSeed).split(0);
  const auto model = build_fcnn_baseline(false, init);
  const double l1 = train_and_eval(*model, sad_held_out());
  const double ratio = l1 / std::max(pafu_sad_l1, 1e-12);
  return check(ratio >= 5.0, fmt("fcnn params=%zu l1=%.5f pafu l1=%.5f ratio=%.1f (>=5)", model->parameter_count(), l1,
                                 pafu_sad_l1, ratio));
}

// ------------------------------------------------------------------ unit properties

Outcome collapse() {
  Rng rng(303);
  double worst = 0.0;
  const std::size_t odd[] = {1, 3, 5, 7};
  for (int t = 0; t < 100; ++t) {
    const std::size_t N = 1 + rng.below(2), C = 1 + rng.below(4), H = 3 + rng.below(10), W = 3 + rng.below(10);
    const std::size_t cout = 1 + rng.below(4), n = 1 + rng.below(4);
    std::vector<std::size_t> sup;
    for (std::size_t i = 0; i < n; ++i) sup.push_back(odd[rng.below(4)]);
    const Tensor x = randn(Shape{N, C, H, W}, rng);
    const KernelBank bank = KernelBank::random(cout, C, sup, rng);
    const std::size_t k = rng.below(n);
    const Padding pad = rng.bernoulli(0.5) ? Padding::Zero : Padding::Replicate;
    const Tensor sv = sv_conv2d(x, bank, SelectionMap::uniform(N, n, H, W, k), pad);
    worst = std::max(worst, max_abs_diff(sv, conv2d(x, bank.kernels[k], pad)));
  }
  return check(worst <= 1e-5, fmt("100 instances max abs diff=%.3g (<=1e-5)", worst));
}

// Pairwise squared cosine over kernels zero-padded to a common centred support.
double brute_decorrelation(const KernelBank& bank) {
  std::size_t K = 0;
  for (const auto& k : bank.kernels) K = std::max(K, k.h());
  std::vector<std::vector<double>> rows;
  for (const auto& k : bank.kernels) {
    std::vector<double> r(k.n() * k.c() * K * K, 0.0);
    const std::size_t off = (K - k.h()) / 2;
    for (std::size_t o = 0; o < k.n(); ++o)
      for (std::size_t i = 0; i < k.c(); ++i)
        for (std::size_t u = 0; u < k.h(); ++u)
          for (std::size_t v = 0; v < k.w(); ++v) r[((o * k.c() + i) * K + u + off) * K + v + off] = k(o, i, u, v);
    rows.push_back(std::move(r));
  }
  double acc = 0.0;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < rows.size(); ++b) {
      if (a == b) continue;
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < rows[a].size(); ++i) {
        ab += rows[a][i] * rows[b][i];
        aa += rows[a][i] * rows[a][i];
        bb += rows[b][i] * rows[b][i];
      }
      acc += ab * ab / (aa * bb);
    }
  return acc;
}

Outcome decorrelation() {
  Rng rng(404);
  const std::size_t odd[] = {1, 3, 5};
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(4), cout = 1 + rng.below(3), cin = 1 + rng.below(3);
    std::vector<std::size_t> sup;
    for (std::size_t i = 0; i < n; ++i) sup.push_back(odd[rng.below(3)]);
    const KernelBank bank = KernelBank::random(cout, cin, sup, rng);
    worst = std::max(worst, std::abs(decorrelation_loss(bank) - brute_decorrelation(bank)));
  }
  // Orthonormal banks: Gram-Schmidt on random rows of a 2x2x3x3 layout.
  double ortho = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + rng.below(5), D = 36;
    std::vector<std::vector<double>> q;
    while (q.size() < n) {
      std::vector<double> v(D);
      for (auto& e : v) e = rng.normal();
      for (const auto& u : q) {
        double d = 0.0;
        for (std::size_t i = 0; i < D; ++i) d += v[i] * u[i];
        for (std::size_t i = 0; i < D; ++i) v[i] -= d * u[i];
      }
      double nn = 0.0;
      for (double e : v) nn += e * e;
      for (auto& e : v) e /= std::sqrt(nn);
      q.push_back(v);
    }
    KernelBank bank;
    for (const auto& v : q) {
      Tensor k(Shape{2, 2, 3, 3});
      for (std::size_t i = 0; i < D; ++i) k[i] = static_cast<float>(v[i]);
      bank.kernels.push_back(k);
    }
    ortho = std::max(ortho, decorrelation_loss(bank));
  }
  double grad = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    grad = std::max(grad, run_grad_check_case(make_grad_check_case("decorrelation", seed), seed).max_rel_error);
  return check(worst <= 1e-6 && ortho <= 1e-6 && grad <= 1e-3,
               fmt("brute force max diff=%.3g (<=1e-6) orthonormal=%.3g grad rel=%.3g (<=1e-3)", worst, ortho, grad));
}

Outcome gumbel() {
  Rng rng(2024);
  const std::size_t H = 100, W = 1000;
  Tensor logits(Shape{1, 2, H, W});
  for (std::size_t i = 0; i < H * W; ++i) {
    logits[i] = static_cast<float>(std::log(3.0));
    logits[H * W + i] = 0.0f;
  }
  const SelectionMap z = gumbel_softmax_st(logits, 1.0, &rng);
  std::size_t first = 0;
  for (std::size_t i = 0; i < H * W; ++i) first += z.hard[i] == 1.0f;
  const double freq = static_cast<double>(first) / static_cast<double>(H * W);

  // One-hot on every pixel, including random logits, several temperatures and inference mode.
  bool one_hot = true;
  auto scan = [&](const SelectionMap& m) {
    const std::size_t n = m.hard.c(), HW = m.hard.h() * m.hard.w();
    for (std::size_t b = 0; b < m.hard.n(); ++b)
      for (std::size_t p = 0; p < HW; ++p) {
        std::size_t ones = 0;
        for (std::size_t k = 0; k < n; ++k) {
          const float v = m.hard[(b * n + k) * HW + p];
          if (v != 0.0f && v != 1.0f) one_hot = false;
          ones += v == 1.0f;
        }
        if (ones != 1) one_hot = false;
      }
  };
  scan(z);
  for (double tau : {0.1, 0.5, 2.0}) {
    const Tensor l = randn(Shape{2, 4, 17, 13}, rng, 3.0);
    scan(gumbel_softmax_st(l, tau, &rng));
    scan(gumbel_softmax_st(l, tau, nullptr));
  }
  return check(std::abs(freq - 0.75) <= 0.01 && one_hot,
               fmt("index 0 frequency=%.4f over 100000 (0.75+-0.01) one-hot=%s", freq, one_hot ? "yes" : "no"));
}

Outcome gradient_suite() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (const auto& name : grad_check_case_names()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const double e = run_grad_check_case(make_grad_check_case(name, seed), seed).max_rel_error;
      ++cases;
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    }
  }
  return check(worst <= 1e-3, fmt("%zu checks (eps 1e-3, double) worst=%.3g in %s (<=1e-3)", cases, worst,
                                  worst_name.c_str()));
}

Outcome alternating() {
  Rng init(5);
  ModelSpec spec = ModelSpec::for_task(Task::Sad, 2, {3});
  spec.selector_width = 4;
  const auto model = make_pafu_model(spec, init);
  TrainConfig cfg = task_defaults(Task::Sad).train;
  cfg.alt = AltRatio{1, 3};
  cfg.steps = 203;
  Trainer trainer(*model, cfg);
  const BatchFn batches = sad_batches(SadConfig::of_size(9), 1);
  Rng data(6);
  bool ok = true;
  std::size_t bad_freeze = 0;
  for (std::size_t T = 1; T <= cfg.steps; ++T) {
    const std::vector<Param> before = model->params();
    trainer.step(batches(data));
    const bool sel_step = (T - 1) % 4 == 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const bool changed = max_abs_diff(before[i].value, model->params()[i].value) > 0.0;
      const bool is_sel = before[i].group == ParamGroup::Selector;
      if (changed && is_sel != sel_step) ++bad_freeze;
    }
    const std::size_t want_sel = (T + 3) / 4;
    ok = ok && trainer.selector_updates() == want_sel && trainer.kernel_updates() == T - want_sel;
  }
  return check(ok && bad_freeze == 0, fmt("T=1..%zu counters match ceil(T/4) and T-ceil(T/4): %s, off-phase updates=%zu",
                                          cfg.steps, ok ? "yes" : "no", bad_freeze));
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome round_trips(const fs::path& dir) {
  Rng rng(808);
  const auto model = make_pafu_model(ModelSpec::for_task(Task::Sr, 3, {3, 5}, 2), rng);
  for (auto& p : model->params()) p.value = randn(p.value.shape(), rng);
  const fs::path ck = dir / "m.ckpt";
  save_checkpoint(to_checkpoint(*model), ck.string());
  const auto back = from_checkpoint(load_checkpoint(ck.string()));
  bool ckpt_ok = back->params().size() == model->params().size();
  for (std::size_t i = 0; ckpt_ok && i < back->params().size(); ++i) {
    const Tensor& a = back->params()[i].value;
    const Tensor& b = model->params()[i].value;
    ckpt_ok = a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
  }
  save_checkpoint(to_checkpoint(*back), (dir / "m2.ckpt").string());
  ckpt_ok = ckpt_ok && file_bytes(ck) == file_bytes(dir / "m2.ckpt");

  bool d2s_ok = true;
  for (std::size_t r : {1, 2, 3, 4}) {
    const Tensor x = randn(Shape{2, 3 * r * r, 5, 4}, rng);
    const Tensor y = randn(Shape{2, 3, 5 * r, 4 * r}, rng);
    const Tensor x2 = space_to_depth(depth_to_space(x, r), r);
    const Tensor y2 = depth_to_space(space_to_depth(y, r), r);
    d2s_ok = d2s_ok && std::memcmp(x.ptr(), x2.ptr(), x.size() * 4) == 0 && std::memcmp(y.ptr(), y2.ptr(), y.size() * 4) == 0;
  }

  bool png_ok = true;
  for (std::size_t t = 0; t < 5; ++t) {
    const Tensor img = rand_uniform(Shape{3, 11 + t, 7 + 2 * t}, rng, -0.1, 1.1);
    write_png(img, (dir / "a.png").string());
    write_png(read_png((dir / "a.png").string()), (dir / "b.png").string());
    png_ok = png_ok && file_bytes(dir / "a.png") == file_bytes(dir / "b.png");
  }
  return check(ckpt_ok && d2s_ok && png_ok, fmt("checkpoint bitwise=%s depth/space bitwise=%s png idempotent=%s",
                                                ckpt_ok ? "yes" : "no", d2s_ok ? "yes" : "no", png_ok ? "yes" : "no"));
}

std::pair<int, std::string> run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str() + err.str()};
}

double mean_psnr(const std::string& out) {
  std::smatch m;
  if (!std::regex_search(out, m, std::regex(R"(mean l1=[0-9.]+ psnr=([0-9.]+))"))) throw Error("no psnr in: " + out);
  return std::stod(m[1]);
}

Outcome published_baselines() {
  const char* msr = std::getenv("PAFU_MSR_DIR");
  const char* set5 = std::getenv("PAFU_SET5_DIR");
  if (!msr && !set5) return {Outcome::Skip, "set PAFU_MSR_DIR and/or PAFU_SET5_DIR to run"};
  bool ok = true;
  std::string detail;
  if (msr) {
    const auto [code, out] = run_cli({"eval", "--task", "demosaick", "--baseline", "bilinear", "--data", msr});
    if (code != 0) throw Error(out);
    const double p = mean_psnr(out);
    ok = ok && std::abs(p - 30.86) <= 0.2;
    detail += fmt("bilinear demosaick %.2f dB (30.86+-0.2) ", p);
  }
  if (set5) {
    const auto [code, out] =
        run_cli({"eval", "--task", "sr", "--baseline", "bicubic", "--scale", "2", "--y-psnr", "--data", set5});
    if (code != 0) throw Error(out);
    const double p = mean_psnr(out);
    ok = ok && std::abs(p - 33.66) <= 0.5;
    detail += fmt("bicubic x2 Y %.2f dB (33.66+-0.5)", p);
  }
  return check(ok, detail);
}

double bench_seconds(const std::string& op) {
  const auto [code, out] = run_cli({"bench", "--op", op, "--size", "128,128,3", "--iters", "20"});
  std::smatch m;
  if (code != 0 || !std::regex_search(out, m, std::regex(R"(seconds=([0-9.e+-]+))"))) throw Error(out);
  return std::stod(m[1]);
}

Outcome benchmark() {
  bench_seconds("sv_conv2d");  // warm-up
  const double conv = bench_seconds("conv2d");
  const double sv = bench_seconds("sv_conv2d");
  const double ratio = sv / conv;
  return check(ratio <= 10.0, fmt("128x128x3: conv2d %.4fs sv_conv2d %.4fs ratio=%.2f (<=10)", conv, sv, ratio));
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "pafu_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  report(1, "sad-optimality", sad_optimality);
  report(2, "baseline-gap", baseline_gap);
  report(3, "collapse", collapse);
  report(4, "decorrelation", decorrelation);
  report(5, "gumbel-statistics", gumbel);
  report(6, "gradient-suite", gradient_suite);
  report(7, "alternating-schedule", alternating);
  report(8, "round-trips", [&] { return round_trips(dir); });
  report(9, "published-baselines", published_baselines);
  report(10, "benchmark", benchmark);

  fs::remove_all(dir);
  std::printf("%s: %d failing\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
