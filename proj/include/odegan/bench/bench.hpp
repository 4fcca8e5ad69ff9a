// SPDX-License-Identifier: Apache-2.0
//
// Model accounting and the proxy distribution metric: wall-clock timing with
// a hardware descriptor, analytic FLOP estimates, parameter counts, peak
// memory, and a Fréchet distance over features from a fixed random conv
// stack. Timing and memory are measurements, never compared against anyone
// else's hardware.
#pragma once

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "odegan/core/gemm.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/models/generator.hpp"
#include "odegan/train/trainer.hpp"

namespace odegan::bench {

struct BenchReport {
  double avg_time_5 = 0;         // seconds per image, short series
  double avg_time_50 = 0;        // seconds per image, long series
  std::size_t peak_memory = 0;   // resident-set growth during the runs, bytes
  std::size_t params = 0;
  double flops_per_image = 0;    // mean over runs; varies under adaptive steps
  std::string hardware;
};

// ---------------------------------------------------------------------------
// Analytic FLOPs. Convolution arithmetic only (2 per multiply-accumulate,
// plus the bias add); normalization and activations are O(elements) noise
// next to these terms. The dynamics cost is kept separate so the total is
// exactly shell + per_eval * evals for any solver.
// ---------------------------------------------------------------------------

inline double conv_flops(std::size_t cin, std::size_t cout, std::size_t k,
                         std::size_t hout, std::size_t wout) {
  return double(hout) * double(wout) * double(cout) *
         (2.0 * double(cin) * double(k) * double(k) + 1.0);
}

struct FlopEstimate {
  double shell = 0;              // encoder + decoder
  double per_dynamics_eval = 0;  // one f(h) evaluation
  double at(std::size_t dynamics_evals) const {
    return shell + per_dynamics_eval * double(dynamics_evals);
  }
};

inline FlopEstimate generator_flops(const models::GeneratorConfig& g,
                                    std::size_t h, std::size_t w) {
  FlopEstimate e;
  const std::size_t c = g.base_channels;
  e.shell += conv_flops(3, c, 7, h, w);
  std::size_t ch = h, cw = w;
  for (std::size_t i = 0; i < g.n_downsample; ++i) {
    ch /= 2;
    cw /= 2;
    e.shell += conv_flops(c << i, c << (i + 1), 3, ch, cw);
  }
  const std::size_t bc = g.bottleneck_channels();
  for (std::size_t j = 0; j < g.convs_per_dynamics; ++j) {
    std::size_t in = bc;
    if (j == 0 && g.time_input &&
        g.bottleneck == models::BottleneckKind::kNeuralOde)
      in += 1;
    e.per_dynamics_eval += conv_flops(in, bc, 3, ch, cw);
  }
  for (std::size_t i = g.n_downsample; i > 0; --i) {
    ch *= 2;
    cw *= 2;
    e.shell += conv_flops(c << i, c << (i - 1), 3, ch, cw);
  }
  e.shell += conv_flops(c, 3, 7, h, w);
  return e;
}

// ---------------------------------------------------------------------------
// Hardware probes
// ---------------------------------------------------------------------------

namespace detail {

inline std::string cpuinfo_field(const std::string& key) {
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind(key, 0) != 0) continue;
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    auto v = line.substr(colon + 1);
    v.erase(0, v.find_first_not_of(" \t"));
    return v;
  }
  return "";
}

inline std::size_t meminfo_total_kb() {
  std::ifstream f("/proc/meminfo");
  std::string key;
  std::size_t kb = 0;
  while (f >> key >> kb) {
    if (key == "MemTotal:") return kb;
    f.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  }
  return 0;
}

// Peak resident set of this process so far, bytes.
inline std::size_t peak_rss_bytes() {
  rusage ru{};
  if (getrusage(RUSAGE_SELF, &ru) != 0) return 0;
  return std::size_t(ru.ru_maxrss) * 1024;  // Linux reports kilobytes
}

}  // namespace detail

inline std::string hardware_descriptor() {
  std::string cpu = detail::cpuinfo_field("model name");
  if (cpu.empty()) cpu = "unknown cpu";
  std::ostringstream os;
  os << cpu << ", " << std::thread::hardware_concurrency() << " threads";
  if (auto kb = detail::meminfo_total_kb())
    os << ", " << kb / 1024 << " MiB RAM";
  return os.str();
}

// ---------------------------------------------------------------------------
// Generator benchmark
// ---------------------------------------------------------------------------

struct BenchOptions {
  std::size_t image_size = 256;
  std::size_t n_warm = 2;
  std::size_t runs_short = 5;   // the "average of five" series
  std::size_t runs_long = 50;
  std::uint64_t input_seed = 99;
};

// Times single-image inference on freshly drawn inputs: the short series is
// the first runs_short of the long one. FLOPs come from the analytic layer
// estimate evaluated at each run's actual dynamics-evaluation count.
template <class S>
BenchReport bench_generator(const std::filesystem::path& ckpt_path,
                            const BenchOptions& opt = {}) {
  if (opt.runs_short < 1 || opt.runs_long < 1)
    throw core::ConfigError("bench: run counts must be positive");
  auto ck = core::load_checkpoint(ckpt_path);
  auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "train")
    throw core::IoError("bench: '" + ckpt_path.string() +
                        "' is not a training checkpoint");
  auto cfg = train::config_from_map(train::config_entries(ck.meta));
  models::Generator<S> gen(cfg.gen,
                           train::detail::subseed(cfg.seed, "model-gen"));
  ck.load_tree_into("gen", gen.params());

  BenchReport r;
  r.params = core::count_params(gen.params());
  r.hardware = hardware_descriptor();
  const auto est = generator_flops(cfg.gen, opt.image_size, opt.image_size);

  core::NoGradGuard ng;
  auto input = [&](std::size_t i) {
    auto rng = core::Rng::derive(opt.input_seed, "bench-input", i);
    return core::Tensor<S>::uniform(rng, {1, 3, opt.image_size, opt.image_size},
                                    S(-1), S(1));
  };
  for (std::size_t i = 0; i < opt.n_warm; ++i) gen.forward(input(i));

  const std::size_t runs = std::max(opt.runs_short, opt.runs_long);
  const std::size_t rss_before = detail::peak_rss_bytes();
  std::vector<double> times(runs);
  double flops_sum = 0;
  for (std::size_t i = 0; i < runs; ++i) {
    auto x = input(opt.n_warm + i);
    models::ForwardStats stats;
    auto start = std::chrono::steady_clock::now();
    auto y = gen.forward(x, &stats);
    auto stop = std::chrono::steady_clock::now();
    (void)y;
    times[i] = std::chrono::duration<double>(stop - start).count();
    flops_sum += est.at(stats.dynamics_evals);
  }
  const std::size_t rss_after = detail::peak_rss_bytes();
  r.peak_memory = rss_after > rss_before ? rss_after - rss_before : 0;
  r.flops_per_image = flops_sum / double(runs);

  auto mean_of = [&](std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += times[i];
    return s / double(n);
  };
  r.avg_time_5 = mean_of(std::min(opt.runs_short, runs));
  r.avg_time_50 = mean_of(std::min(opt.runs_long, runs));
  return r;
}

inline std::string report_csv_header() {
  return "avg_time_5_s,avg_time_50_s,peak_memory_bytes,params,"
         "flops_per_image,hardware";
}

inline std::string report_csv_row(const BenchReport& r) {
  std::ostringstream os;
  os << train::detail::fmt_double(r.avg_time_5) << ","
     << train::detail::fmt_double(r.avg_time_50) << "," << r.peak_memory << ","
     << r.params << "," << train::detail::fmt_double(r.flops_per_image)
     << ",\"" << r.hardware << "\"";
  return os.str();
}

// Human-readable accounting table; all values are measurements on the listed
// hardware.
inline std::string report_table(const BenchReport& r) {
  std::ostringstream os;
  os << "generator benchmark (" << r.hardware << ")\n"
     << "  avg time, 5-run series   : " << r.avg_time_5 << " s\n"
     << "  avg time, 50-run series  : " << r.avg_time_50 << " s\n"
     << "  peak memory growth       : " << double(r.peak_memory) / 1048576.0
     << " MiB\n"
     << "  parameters               : " << r.params << "\n"
     << "  flops per image (mean)   : " << r.flops_per_image << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Proxy feature statistics and Fréchet distance
// ---------------------------------------------------------------------------

struct FeatureStats {
  std::size_t dim = 0;
  std::vector<double> mu;     // dim
  std::vector<double> sigma;  // dim x dim, symmetric, shrunk diagonal
};

namespace detail {

// Fixed random extractor: four stride-2 convs 3->24->48->96->192, ReLU
// between, global average pool. Seed-derived like the perceptual stack, so
// scores are comparable across runs without any external weights.
template <class S>
std::vector<double> pooled_features(const core::Tensor<S>& img,
                                    std::uint64_t seed) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw core::ShapeError("extract_features: expected (3,H,W) images");
  constexpr std::size_t chans[5] = {3, 24, 48, 96, 192};
  core::NoGradGuard ng;
  auto h = core::reshape(img, {1, 3, img.dim(1), img.dim(2)});
  for (std::size_t l = 0; l < 4; ++l) {
    auto rng = core::Rng::derive(seed, "proxy-feat", l);
    double scale = std::sqrt(2.0 / double(chans[l] * 9));
    auto w = core::Tensor<S>::randn(rng, {chans[l + 1], chans[l], 3, 3},
                                    S(scale));
    h = core::conv2d(core::pad2d(h, 1, core::PadMode::kZero), w, 2);
    h = core::relu(h);
  }
  const std::size_t c = h.dim(1), hw = h.dim(2) * h.dim(3);
  std::vector<double> out(c);
  const auto& v = h.value();
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += double(v[i * hw + j]);
    out[i] = s / double(hw);
  }
  return out;
}

}  // namespace detail

// Gaussian fit of pooled proxy features. The covariance is the population
// one (1/N), so duplicating every sample leaves the statistics unchanged;
// a 1e-6 ridge keeps it positive semidefinite under tiny sample counts.
template <class S>
FeatureStats extract_features(const std::vector<core::Tensor<S>>& images,
                              std::uint64_t extractor_seed = 191) {
  if (images.size() < 2)
    throw core::UsageError("extract_features: need at least 2 images");
  const std::size_t n = images.size();
  std::vector<std::vector<double>> rows;
  rows.reserve(n);
  for (const auto& img : images)
    rows.push_back(detail::pooled_features(img, extractor_seed));
  const std::size_t d = rows[0].size();

  FeatureStats st;
  st.dim = d;
  st.mu.assign(d, 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i) st.mu[i] += r[i];
  for (double& v : st.mu) v /= double(n);

  std::vector<double> centered(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      centered[r * d + i] = rows[r][i] - st.mu[i];
  st.sigma.assign(d * d, 0.0);
  core::gemm(true, false, int(d), int(d), int(n), 1.0 / double(n),
             centered.data(), int(d), centered.data(), int(d), 0.0,
             st.sigma.data(), int(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      double s = 0.5 * (st.sigma[i * d + j] + st.sigma[j * d + i]);
      st.sigma[i * d + j] = st.sigma[j * d + i] = s;
    }
    st.sigma[i * d + i] += 1e-6;
  }
  return st;
}

namespace detail {

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations; the matrix
// is consumed. Quadratic convergence makes a handful of sweeps plenty at
// these dimensions.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a,
                                              std::size_t n) {
  auto off_norm = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a[i * n + j] * a[i * n + j];
    return s;
  };
  double frob = 0;
  for (double v : a) frob += v * v;
  const double tol = 1e-24 * std::max(frob, 1.0);
  for (int sweep = 0; sweep < 60 && off_norm() > tol; ++sweep) {
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
  return eig;
}

}  // namespace detail

// ‖Δμ‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2}). The product's square-root trace is
// Σ√λᵢ of the symmetrized product; negative eigenvalues (numerical noise —
// the true product has none) clamp to zero, and so does the final value.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim == 0 || a.dim != b.dim)
    throw core::ShapeError("frechet_distance: dimension mismatch");
  const std::size_t d = a.dim;
  double dmu = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a.mu[i] - b.mu[i];
    dmu += diff * diff;
  }
  std::vector<double> prod(d * d);
  core::gemm(false, false, int(d), int(d), int(d), 1.0, a.sigma.data(), int(d),
             b.sigma.data(), int(d), 0.0, prod.data(), int(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double s = 0.5 * (prod[i * d + j] + prod[j * d + i]);
      prod[i * d + j] = prod[j * d + i] = s;
    }
  auto eig = detail::jacobi_eigenvalues(std::move(prod), d);
  double tr_sqrt = 0;
  for (double v : eig) tr_sqrt += std::sqrt(std::max(0.0, v));
  double tr = 0;
  for (std::size_t i = 0; i < d; ++i)
    tr += a.sigma[i * d + i] + b.sigma[i * d + i];
  return std::max(0.0, dmu + tr - 2.0 * tr_sqrt);
}

}  // namespace odegan::bench
