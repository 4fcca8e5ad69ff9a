// SPDX-License-Identifier: Apache-2.0
//
// The semi-supervised training loop. Each step evaluates every objective on
// one tape snapshot, then applies the updates in a fixed order: conditional
// discriminator, unconditional discriminator, generator + projection head.
// Fakes reach the discriminator objectives detached, so each phase's
// gradients stay inside its own parameter tree; hash checks enforce that.
#pragma once

#include <charconv>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "odegan/core/adam.hpp"
#include "odegan/core/rng.hpp"
#include "odegan/core/serialize.hpp"
#include "odegan/core/tensor.hpp"
#include "odegan/data/dataset.hpp"
#include "odegan/data/image.hpp"
#include "odegan/loss/losses.hpp"
#include "odegan/models/discriminator.hpp"
#include "odegan/models/generator.hpp"
#include "odegan/models/projection.hpp"
#include "odegan/ode/solvers.hpp"

namespace odegan::train {

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the pseudo pairs
  std::size_t batch_size = 4;
  core::AdamConfig adam;  // lr 2e-4, beta1 0.5, beta2 0.999
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs between snapshots; 0: final only
  std::size_t prefetch_batches = 2;  // bounded data queue depth; 0: in-line
  bool random_crop = true;
  bool random_flip = true;
  std::size_t embed_dim = 256;
  models::GeneratorConfig gen;
  models::DiscriminatorConfig disc;  // in_channels is derived per branch
  loss::LossWeights weights;

  void validate() const {
    if (epochs < 1) throw core::ConfigError("train: epochs must be >= 1");
    if (adam.lr <= 0) throw core::ConfigError("train: lr must be positive");
    if (batch_size < 1)
      throw core::ConfigError("train: batch_size must be >= 1");
    if (embed_dim < 1) throw core::ConfigError("train: embed_dim must be >= 1");
    if (epochs > weights.total_epochs)
      throw core::ConfigError(
          "train: epochs exceeds the supervision schedule length (" +
          std::to_string(weights.total_epochs) + ")");
    weights.validate();
  }
};

// ---------------------------------------------------------------------------
// Config <-> flat key/value map. One canonical spelling per knob, shared by
// checkpoint metadata and the config-file front end.
// ---------------------------------------------------------------------------

namespace detail {

// Shortest representation that parses back to the same double, so config
// echoes stay readable and metrics rows are reproducible byte for byte.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw core::ConfigError("invalid number '" + v + "' for key '" + key +
                            "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long u = std::stoull(v, &pos);
    if (pos != v.size() || (!v.empty() && v[0] == '-'))
      throw std::invalid_argument(v);
    return u;
  } catch (const std::exception&) {
    throw core::ConfigError("invalid integer '" + v + "' for key '" + key +
                            "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw core::ConfigError("invalid boolean '" + v + "' for key '" + key +
                          "' (expected true|false)");
}

}  // namespace detail

inline std::map<std::string, std::string> config_to_map(
    const TrainConfig& c) {
  using detail::fmt_double;
  std::map<std::string, std::string> m;
  m["train.epochs"] = std::to_string(c.epochs);
  m["train.steps_per_epoch"] = std::to_string(c.steps_per_epoch);
  m["train.batch_size"] = std::to_string(c.batch_size);
  m["train.lr"] = fmt_double(c.adam.lr);
  m["train.beta1"] = fmt_double(c.adam.beta1);
  m["train.beta2"] = fmt_double(c.adam.beta2);
  m["train.seed"] = std::to_string(c.seed);
  m["train.checkpoint_every"] = std::to_string(c.checkpoint_every);
  m["train.prefetch_batches"] = std::to_string(c.prefetch_batches);
  m["train.random_crop"] = c.random_crop ? "true" : "false";
  m["train.random_flip"] = c.random_flip ? "true" : "false";
  m["model.base_channels"] = std::to_string(c.gen.base_channels);
  m["model.n_downsample"] = std::to_string(c.gen.n_downsample);
  m["model.ode_blocks"] = std::to_string(c.gen.ode_blocks);
  m["model.convs_per_dynamics"] = std::to_string(c.gen.convs_per_dynamics);
  m["model.resnet_blocks"] = std::to_string(c.gen.resnet_blocks);
  m["model.bottleneck"] = models::bottleneck_name(c.gen.bottleneck);
  m["model.norm"] = models::norm_name(c.gen.norm);
  m["model.time_input"] = c.gen.time_input ? "true" : "false";
  m["model.t0"] = fmt_double(c.gen.t0);
  m["model.t1"] = fmt_double(c.gen.t1);
  m["model.embed_dim"] = std::to_string(c.embed_dim);
  m["model.disc_base_channels"] = std::to_string(c.disc.base_channels);
  m["model.disc_layers"] = std::to_string(c.disc.n_layers);
  m["solver.method"] = ode::method_name(c.gen.solver.method);
  m["solver.fixed_step"] = fmt_double(c.gen.solver.fixed_step);
  m["solver.rtol"] = fmt_double(c.gen.solver.rtol);
  m["solver.atol"] = fmt_double(c.gen.solver.atol);
  m["solver.max_steps"] = std::to_string(c.gen.solver.max_steps);
  m["solver.initial_step"] = fmt_double(c.gen.solver.initial_step);
  m["loss.lambda_style"] = fmt_double(c.weights.lambda_style);
  m["loss.lambda_src"] = fmt_double(c.weights.lambda_src);
  m["loss.lambda_hdce"] = fmt_double(c.weights.lambda_hdce);
  m["loss.lambda_perc"] = fmt_double(c.weights.lambda_perc);
  m["loss.tau"] = fmt_double(c.weights.tau);
  m["loss.hardness"] = fmt_double(c.weights.hardness);
  m["loss.n_patches"] = std::to_string(c.weights.n_patches);
  m["loss.warmup_epochs"] = std::to_string(c.weights.warmup_epochs);
  m["loss.total_epochs"] = std::to_string(c.weights.total_epochs);
  m["loss.sup_period"] = fmt_double(c.weights.sup_period);
  m["loss.schedule"] = loss::sup_schedule_name(c.weights.schedule);
  m["loss.gan_mode"] = loss::gan_mode_name(c.weights.gan_mode);
  return m;
}

// Applies entries on top of the defaults; rejects keys it does not know so a
// typo in a config file fails loudly instead of silently using a default.
inline TrainConfig config_from_map(
    const std::map<std::string, std::string>& m) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_u64;
  TrainConfig c;
  for (const auto& [k, v] : m) {
    if (k == "train.epochs") c.epochs = parse_u64(k, v);
    else if (k == "train.steps_per_epoch") c.steps_per_epoch = parse_u64(k, v);
    else if (k == "train.batch_size") c.batch_size = parse_u64(k, v);
    else if (k == "train.lr") c.adam.lr = parse_double(k, v);
    else if (k == "train.beta1") c.adam.beta1 = parse_double(k, v);
    else if (k == "train.beta2") c.adam.beta2 = parse_double(k, v);
    else if (k == "train.seed") c.seed = parse_u64(k, v);
    else if (k == "train.checkpoint_every") c.checkpoint_every = parse_u64(k, v);
    else if (k == "train.prefetch_batches") c.prefetch_batches = parse_u64(k, v);
    else if (k == "train.random_crop") c.random_crop = parse_bool(k, v);
    else if (k == "train.random_flip") c.random_flip = parse_bool(k, v);
    else if (k == "model.base_channels") c.gen.base_channels = parse_u64(k, v);
    else if (k == "model.n_downsample") c.gen.n_downsample = parse_u64(k, v);
    else if (k == "model.ode_blocks") c.gen.ode_blocks = parse_u64(k, v);
    else if (k == "model.convs_per_dynamics")
      c.gen.convs_per_dynamics = parse_u64(k, v);
    else if (k == "model.resnet_blocks") c.gen.resnet_blocks = parse_u64(k, v);
    else if (k == "model.bottleneck")
      c.gen.bottleneck = models::bottleneck_from_name(v);
    else if (k == "model.norm") c.gen.norm = models::norm_from_name(v);
    else if (k == "model.time_input") c.gen.time_input = parse_bool(k, v);
    else if (k == "model.t0") c.gen.t0 = parse_double(k, v);
    else if (k == "model.t1") c.gen.t1 = parse_double(k, v);
    else if (k == "model.embed_dim") c.embed_dim = parse_u64(k, v);
    else if (k == "model.disc_base_channels")
      c.disc.base_channels = parse_u64(k, v);
    else if (k == "model.disc_layers") c.disc.n_layers = parse_u64(k, v);
    else if (k == "solver.method")
      c.gen.solver.method = ode::method_from_name(v);
    else if (k == "solver.fixed_step")
      c.gen.solver.fixed_step = parse_double(k, v);
    else if (k == "solver.rtol") c.gen.solver.rtol = parse_double(k, v);
    else if (k == "solver.atol") c.gen.solver.atol = parse_double(k, v);
    else if (k == "solver.max_steps") c.gen.solver.max_steps = parse_u64(k, v);
    else if (k == "solver.initial_step")
      c.gen.solver.initial_step = parse_double(k, v);
    else if (k == "loss.lambda_style")
      c.weights.lambda_style = parse_double(k, v);
    else if (k == "loss.lambda_src") c.weights.lambda_src = parse_double(k, v);
    else if (k == "loss.lambda_hdce")
      c.weights.lambda_hdce = parse_double(k, v);
    else if (k == "loss.lambda_perc")
      c.weights.lambda_perc = parse_double(k, v);
    else if (k == "loss.tau") c.weights.tau = parse_double(k, v);
    else if (k == "loss.hardness") c.weights.hardness = parse_double(k, v);
    else if (k == "loss.n_patches") c.weights.n_patches = parse_u64(k, v);
    else if (k == "loss.warmup_epochs")
      c.weights.warmup_epochs = parse_u64(k, v);
    else if (k == "loss.total_epochs")
      c.weights.total_epochs = parse_u64(k, v);
    else if (k == "loss.sup_period") c.weights.sup_period = parse_double(k, v);
    else if (k == "loss.schedule")
      c.weights.schedule = loss::sup_schedule_from_name(v);
    else if (k == "loss.gan_mode")
      c.weights.gan_mode = loss::gan_mode_from_name(v);
    else
      throw core::ConfigError("unknown config key '" + k + "'");
  }
  return c;
}

inline std::string config_digest(const TrainConfig& c) {
  std::string all;
  for (const auto& [k, v] : config_to_map(c)) all += k + "=" + v + "\n";
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << core::fnv1a64(all);
  return os.str();
}

// ---------------------------------------------------------------------------
// Models and optimizer state
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t subseed(std::uint64_t seed, std::string_view tag) {
  return core::Rng::derive(seed, tag).next_u64();
}

}  // namespace detail

template <class S>
struct ModelSet {
  models::Generator<S> gen;
  models::PatchDiscriminator<S> d_p;  // scores (target or output) ‖ source
  models::PatchDiscriminator<S> d_u;
  models::ProjectionHead<S> head;
  loss::FeatureExtractor<S> perc;

  explicit ModelSet(const TrainConfig& cfg)
      : gen(cfg.gen, detail::subseed(cfg.seed, "model-gen")),
        d_p(cond_disc(cfg), detail::subseed(cfg.seed, "model-dp")),
        d_u(uncond_disc(cfg), detail::subseed(cfg.seed, "model-du")),
        head(gen.feature_channels(), cfg.embed_dim,
             detail::subseed(cfg.seed, "model-head")) {}

  loss::LossModels<S> loss_models() {
    return {&gen, &d_p, &d_u, &head, &perc};
  }

 private:
  static models::DiscriminatorConfig cond_disc(const TrainConfig& cfg) {
    auto d = cfg.disc;
    d.in_channels = 6;
    return d;
  }
  static models::DiscriminatorConfig uncond_disc(const TrainConfig& cfg) {
    auto d = cfg.disc;
    d.in_channels = 3;
    return d;
  }
};

// epoch/step name the NEXT step to run (epoch is 1-based). All sampling
// streams are derived from (seed, purpose, counter), so these counters plus
// the config seed are the complete rng state.
template <class S>
struct TrainState {
  std::size_t epoch = 1;
  std::size_t step = 0;
  std::size_t global_step = 0;
  core::AdamState<S> opt_g, opt_f, opt_dp, opt_du;
};

// ---------------------------------------------------------------------------
// One training step
// ---------------------------------------------------------------------------

// Evaluates all objectives on one tape, checks them for finiteness, then
// updates in the fixed order D_P, D_U, G+F. Every backward pass runs before
// any parameter moves, so each phase consumes gradients taken at the step's
// starting values; the detached fakes keep the discriminator objectives off
// the generator tape, and hash checks prove no phase touches another's
// parameters.
template <class S>
loss::LossReport train_step(TrainState<S>& state, const data::Batch<S>& batch,
                            ModelSet<S>& m, const TrainConfig& cfg) {
  loss::TrainingBatch<S> tb{batch.x_p, batch.y_p, batch.x_u, batch.y_u};
  auto rng = core::Rng::derive(cfg.seed, "patches", state.global_step);
  auto lm = m.loss_models();
  auto out = loss::total_losses(tb, lm, cfg.weights, state.epoch, rng);

  const auto& names = loss::LossReport::columns();
  const auto vals = out.report.values();
  for (std::size_t i = 0; i < vals.size(); ++i)
    if (!std::isfinite(vals[i]))
      throw core::NumericError(
          "train_step: non-finite " + std::string(names[i]) +
          " loss at global step " + std::to_string(state.global_step + 1));

  core::zero_grads(m.gen.params());
  core::zero_grads(m.head.params());
  core::zero_grads(m.d_p.params());
  core::zero_grads(m.d_u.params());
  core::backward(out.g_total);
  // Drop the adversarial residue the generator objective left on the
  // discriminator weights; their own phases start from clean gradients.
  core::zero_grads(m.d_p.params());
  core::zero_grads(m.d_u.params());
  core::backward(out.d_p_loss);
  core::backward(out.d_u_loss);

  const std::uint64_t h_gen = core::content_hash(m.gen.params());
  const std::uint64_t h_head = core::content_hash(m.head.params());
  core::adam_step(m.d_p.params(), state.opt_dp, cfg.adam);
  core::adam_step(m.d_u.params(), state.opt_du, cfg.adam);
  if (core::content_hash(m.gen.params()) != h_gen ||
      core::content_hash(m.head.params()) != h_head)
    throw core::UsageError(
        "train_step: discriminator phase modified generator parameters");

  const std::uint64_t h_dp = core::content_hash(m.d_p.params());
  const std::uint64_t h_du = core::content_hash(m.d_u.params());
  core::adam_step(m.gen.params(), state.opt_g, cfg.adam);
  core::adam_step(m.head.params(), state.opt_f, cfg.adam);
  if (core::content_hash(m.d_p.params()) != h_dp ||
      core::content_hash(m.d_u.params()) != h_du)
    throw core::UsageError(
        "train_step: generator phase modified discriminator parameters");

  state.global_step += 1;
  state.step += 1;
  return out.report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void put_adam(core::Checkpoint& ck, const std::string& prefix,
              const core::AdamState<S>& a) {
  ck.meta[prefix + "/t"] = std::to_string(a.t);
  for (const auto& [path, v] : a.m)
    ck.arrays[prefix + "/m/" + path] = core::ArrayRecord::from(v, {v.size()});
  for (const auto& [path, v] : a.v)
    ck.arrays[prefix + "/v/" + path] = core::ArrayRecord::from(v, {v.size()});
}

template <class S>
void get_adam(const core::Checkpoint& ck, const std::string& prefix,
              core::AdamState<S>& a) {
  a = {};
  auto it = ck.meta.find(prefix + "/t");
  if (it == ck.meta.end())
    throw core::IoError("checkpoint: missing optimizer counter '" + prefix +
                        "/t'");
  a.t = parse_u64(prefix + "/t", it->second);
  const std::string mpre = prefix + "/m/", vpre = prefix + "/v/";
  for (const auto& [name, rec] : ck.arrays) {
    if (name.starts_with(mpre))
      a.m[name.substr(mpre.size())] = rec.template as<S>();
    else if (name.starts_with(vpre))
      a.v[name.substr(vpre.size())] = rec.template as<S>();
  }
}

}  // namespace detail

// The config subset of a checkpoint meta map (state counters and digests
// stripped), ready for config_from_map.
inline std::map<std::string, std::string> config_entries(
    const std::map<std::string, std::string>& meta) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : meta)
    if (k.starts_with("train.") || k.starts_with("model.") ||
        k.starts_with("solver.") || k.starts_with("loss."))
      kv[k] = v;
  return kv;
}

template <class S>
void save_train_checkpoint(const std::filesystem::path& path,
                           const TrainConfig& cfg, const ModelSet<S>& m,
                           const TrainState<S>& st) {
  core::Checkpoint ck;
  auto kv = config_to_map(cfg);
  ck.meta.insert(kv.begin(), kv.end());
  ck.meta["kind"] = "train";
  ck.meta["config_digest"] = config_digest(cfg);
  ck.meta["state.epoch"] = std::to_string(st.epoch);
  ck.meta["state.step"] = std::to_string(st.step);
  ck.meta["state.global_step"] = std::to_string(st.global_step);
  ck.put_tree("gen", m.gen.params());
  ck.put_tree("d_p", m.d_p.params());
  ck.put_tree("d_u", m.d_u.params());
  ck.put_tree("head", m.head.params());
  detail::put_adam(ck, "opt/g", st.opt_g);
  detail::put_adam(ck, "opt/f", st.opt_f);
  detail::put_adam(ck, "opt/dp", st.opt_dp);
  detail::put_adam(ck, "opt/du", st.opt_du);
  core::save_checkpoint(path, ck);
}

// Restores weights and optimizer state into models built from the same
// config; a digest mismatch means the caller's config diverged from the one
// that produced the checkpoint, which would silently break resume.
template <class S>
void load_train_checkpoint(const std::filesystem::path& path,
                           const TrainConfig& cfg, ModelSet<S>& m,
                           TrainState<S>& st) {
  auto ck = core::load_checkpoint(path);
  auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "train")
    throw core::IoError("checkpoint: '" + path.string() +
                        "' is not a training checkpoint");
  auto digest = ck.meta.find("config_digest");
  if (digest == ck.meta.end() || digest->second != config_digest(cfg))
    throw core::ConfigError(
        "checkpoint: configuration digest mismatch; the checkpoint was "
        "written under a different configuration");
  ck.load_tree_into("gen", m.gen.params());
  ck.load_tree_into("d_p", m.d_p.params());
  ck.load_tree_into("d_u", m.d_u.params());
  ck.load_tree_into("head", m.head.params());
  detail::get_adam(ck, "opt/g", st.opt_g);
  detail::get_adam(ck, "opt/f", st.opt_f);
  detail::get_adam(ck, "opt/dp", st.opt_dp);
  detail::get_adam(ck, "opt/du", st.opt_du);
  st.epoch = detail::parse_u64("state.epoch", ck.meta.at("state.epoch"));
  st.step = detail::parse_u64("state.step", ck.meta.at("state.step"));
  st.global_step =
      detail::parse_u64("state.global_step", ck.meta.at("state.global_step"));
}

// ---------------------------------------------------------------------------
// Bounded-queue batch feed: one worker prepares upcoming batches while the
// training thread works. Batch content is a pure function of the step index,
// so the handoff cannot perturb results; depth 0 degrades to in-line loading.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
class BatchFeed {
 public:
  BatchFeed(const data::Batcher<S>& batcher, std::size_t first,
            std::size_t last, std::size_t depth)
      : batcher_(batcher), next_(first), last_(last), depth_(depth) {
    if (depth_ > 0 && next_ < last_)
      worker_ = std::thread([this] { produce(); });
  }

  BatchFeed(const BatchFeed&) = delete;
  BatchFeed& operator=(const BatchFeed&) = delete;

  ~BatchFeed() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  data::Batch<S> pop() {
    if (depth_ == 0) return make(next_++);
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [this] { return !queue_.empty() || error_; });
    if (error_ && queue_.empty()) std::rethrow_exception(error_);
    data::Batch<S> b = std::move(queue_.front());
    queue_.pop_front();
    lk.unlock();
    cv_.notify_all();
    return b;
  }

 private:
  data::Batch<S> make(std::size_t global) const {
    const std::size_t per = batcher_.steps_per_epoch();
    return batcher_.next(global / per, global % per);
  }

  void produce() {
    try {
      for (std::size_t g = next_; g < last_; ++g) {
        {
          std::unique_lock<std::mutex> lk(mu_);
          cv_.wait(lk, [this] { return queue_.size() < depth_ || stop_; });
          if (stop_) return;
        }
        auto b = make(g);
        {
          std::lock_guard<std::mutex> lk(mu_);
          if (stop_) return;
          queue_.push_back(std::move(b));
        }
        cv_.notify_all();
      }
    } catch (...) {
      {
        std::lock_guard<std::mutex> lk(mu_);
        error_ = std::current_exception();
      }
      cv_.notify_all();
    }
  }

  const data::Batcher<S>& batcher_;
  std::size_t next_, last_, depth_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<data::Batch<S>> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

struct FitResult {
  std::filesystem::path metrics_csv;
  std::filesystem::path final_checkpoint;
  std::size_t steps_run = 0;
  loss::LossReport last;
};

inline std::string metrics_header() {
  std::string h = "step,epoch,lambda_sup";
  for (const char* c : loss::LossReport::columns()) h += std::string(",") + c;
  return h;
}

template <class S>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const data::DatasetLayout& layout,
          std::filesystem::path run_dir)
      : cfg_(validated(std::move(cfg))),
        run_dir_(std::move(run_dir)),
        models_(cfg_),
        batcher_(data::scan_and_pair(layout),
                 data::BatcherConfig{cfg_.batch_size, layout.image_size,
                                     cfg_.random_crop, cfg_.random_flip,
                                     detail::subseed(cfg_.seed, "data")}) {}

  const TrainConfig& config() const { return cfg_; }
  ModelSet<S>& models() { return models_; }
  TrainState<S>& state() { return state_; }
  const data::Batcher<S>& batcher() const { return batcher_; }

  std::size_t steps_per_epoch() const {
    return cfg_.steps_per_epoch ? cfg_.steps_per_epoch
                                : batcher_.steps_per_epoch();
  }

  void restore(const std::filesystem::path& ckpt) {
    load_train_checkpoint(ckpt, cfg_, models_, state_);
  }

  // Runs from the current state to cfg.epochs, appending one CSV row per
  // step and snapshotting at epoch boundaries. Callbacks (when given) see
  // every report, e.g. for progress printing.
  FitResult run(const std::function<void(std::size_t, std::size_t,
                                         const loss::LossReport&)>& on_step =
                    nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir_ / "ckpt");
    const bool fresh = state_.global_step == 0;
    std::ofstream csv(run_dir_ / "metrics.csv",
                      fresh ? std::ios::trunc : std::ios::app);
    if (!csv)
      throw core::IoError("fit: cannot open metrics file in '" +
                          run_dir_.string() + "'");
    if (fresh) csv << metrics_header() << "\n";

    const std::size_t spe = steps_per_epoch();
    const std::size_t total = cfg_.epochs * spe;
    detail::BatchFeed<S> feed(batcher_, state_.global_step, total,
                              cfg_.prefetch_batches);
    FitResult res;
    res.metrics_csv = run_dir_ / "metrics.csv";
    for (; state_.epoch <= cfg_.epochs; ++state_.epoch, state_.step = 0) {
      const double ls = loss::lambda_sup(state_.epoch, cfg_.weights);
      while (state_.step < spe) {
        auto r = train_step(state_, feed.pop(), models_, cfg_);
        if (std::abs(r.total - (r.unsup_total + ls * r.sup_total)) > 1e-6)
          throw core::NumericError(
              "fit: total/unsup/sup identity violated at global step " +
              std::to_string(state_.global_step));
        write_row(csv, ls, r);
        if (on_step) on_step(state_.global_step, state_.epoch, r);
        res.last = r;
        res.steps_run += 1;
      }
      csv.flush();
      if (cfg_.checkpoint_every && state_.epoch % cfg_.checkpoint_every == 0 &&
          state_.epoch < cfg_.epochs)
        snapshot(epoch_ckpt_name(state_.epoch));
    }
    csv.close();
    if (!csv)
      throw core::IoError("fit: metrics write failed in '" +
                          run_dir_.string() + "'");
    res.final_checkpoint = run_dir_ / "ckpt" / "final.ck";
    snapshot("final.ck");
    return res;
  }

  std::filesystem::path snapshot(const std::string& name) {
    std::filesystem::create_directories(run_dir_ / "ckpt");
    auto path = run_dir_ / "ckpt" / name;
    save_train_checkpoint(path, cfg_, models_, state_);
    return path;
  }

  static std::string epoch_ckpt_name(std::size_t epoch) {
    std::ostringstream os;
    os << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ck";
    return os.str();
  }

 private:
  static TrainConfig validated(TrainConfig cfg) {
    cfg.validate();
    return cfg;
  }

  void write_row(std::ostream& os, double ls, const loss::LossReport& r) {
    // global_step already counts the step just taken, so rows are 1-based.
    os << state_.global_step << "," << state_.epoch;
    os << "," << detail::fmt_double(ls);
    for (double v : r.values()) os << "," << detail::fmt_double(v);
    os << "\n";
  }

  TrainConfig cfg_;
  std::filesystem::path run_dir_;
  ModelSet<S> models_;
  data::Batcher<S> batcher_;
  TrainState<S> state_;
};

// Convenience wrapper: fresh models, full run.
template <class S>
FitResult fit(const TrainConfig& cfg, const data::DatasetLayout& layout,
              const std::filesystem::path& run_dir) {
  Trainer<S> t(cfg, layout, run_dir);
  return t.run();
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// Rebuilds the generator from checkpoint metadata, translates each input, and
// writes the results under the same filenames in out_dir. The forward runs
// off the tape, so repeated calls are bit-identical.
template <class S>
std::vector<std::filesystem::path> infer(
    const std::filesystem::path& ckpt_path,
    const std::vector<std::filesystem::path>& inputs,
    const std::filesystem::path& out_dir,
    std::optional<ode::SolverConfig> solver_override = std::nullopt) {
  auto ck = core::load_checkpoint(ckpt_path);
  auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "train")
    throw core::IoError("infer: '" + ckpt_path.string() +
                        "' is not a training checkpoint");
  TrainConfig cfg = config_from_map(config_entries(ck.meta));
  if (solver_override) cfg.gen.solver = *solver_override;
  models::Generator<S> gen(cfg.gen, detail::subseed(cfg.seed, "model-gen"));
  ck.load_tree_into("gen", gen.params());

  std::filesystem::create_directories(out_dir);
  core::NoGradGuard ng;
  std::vector<std::filesystem::path> written;
  for (const auto& in : inputs) {
    auto x = data::load_image<S>(in);
    auto b = core::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    auto y = gen.forward(b);
    auto img = data::tensor_to_image(
        core::reshape(y, {y.dim(1), y.dim(2), y.dim(3)}));
    auto out_path = out_dir / in.filename();
    data::save_png(out_path, img);
    written.push_back(out_path);
  }
  return written;
}

}  // namespace odegan::train
