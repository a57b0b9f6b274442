#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dmc/augment.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/loss.hpp"
#include "dmc/network.hpp"
#include "dmc/optim.hpp"
#include "dmc/preprocess.hpp"
#include "dmc/volume.hpp"

// The patch-based training loop: per step, cases are drawn from the rng
// stream, foreground-biased patches are cut and augmented, the batch runs
// forward through the network, the combined CE+Dice loss is backpropagated
// and SGD with Nesterov momentum applies the poly-scheduled learning rate.
// Everything is driven by one serializable rng, so a fixed (seed, config,
// data) triple reproduces checkpoints and logs byte for byte.

namespace dmc {

struct RunConfig {
  NetworkSpec network;
  std::string manifest;
  std::int64_t epochs = 1000;
  std::int64_t steps_per_epoch = 50;
  std::int64_t batch_size = 2;
  std::vector<std::int64_t> patch_size;
  double base_lr = 1e-3;
  double poly_power = 0.9;
  double momentum = 0.99;
  bool nesterov = true;
  std::uint64_t seed = 0;
  double oversample_prob = 1.0 / 3.0;
  AugmentationConfig augment;
  std::vector<double> target_spacing;  // empty = keep native
  std::int64_t checkpoint_every = 0;   // 0 = final checkpoint only
  int exclude_fold = -1;               // hold out this fold's cases
  std::string out_dir = ".";
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json aug{{"enabled", c.augment.enabled},
                     {"rotate_deg", c.augment.rotate_deg},
                     {"scale_lo", c.augment.scale_lo},
                     {"scale_hi", c.augment.scale_hi},
                     {"rot_scale_prob", c.augment.rot_scale_prob},
                     {"mirror_prob", c.augment.mirror_prob},
                     {"noise_var_hi", c.augment.noise_var_hi},
                     {"noise_prob", c.augment.noise_prob},
                     {"blur_sigma_lo", c.augment.blur_sigma_lo},
                     {"blur_sigma_hi", c.augment.blur_sigma_hi},
                     {"blur_prob", c.augment.blur_prob},
                     {"brightness_shift", c.augment.brightness_shift},
                     {"brightness_prob", c.augment.brightness_prob},
                     {"contrast_lo", c.augment.contrast_lo},
                     {"contrast_hi", c.augment.contrast_hi},
                     {"contrast_prob", c.augment.contrast_prob}};
  return nlohmann::json{{"network", spec_to_json(c.network)},
                        {"manifest", c.manifest},
                        {"epochs", c.epochs},
                        {"steps_per_epoch", c.steps_per_epoch},
                        {"batch_size", c.batch_size},
                        {"patch_size", c.patch_size},
                        {"base_lr", c.base_lr},
                        {"poly_power", c.poly_power},
                        {"momentum", c.momentum},
                        {"nesterov", c.nesterov},
                        {"seed", c.seed},
                        {"oversample_prob", c.oversample_prob},
                        {"augment", aug},
                        {"target_spacing", c.target_spacing},
                        {"checkpoint_every", c.checkpoint_every},
                        {"exclude_fold", c.exclude_fold},
                        {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.network = spec_from_json(j.at("network"));
    c.manifest = j.at("manifest").get<std::string>();
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patch_size = j.at("patch_size").get<std::vector<std::int64_t>>();
    c.base_lr = j.value("base_lr", c.base_lr);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.momentum = j.value("momentum", c.momentum);
    c.nesterov = j.value("nesterov", c.nesterov);
    c.seed = j.value("seed", c.seed);
    c.oversample_prob = j.value("oversample_prob", c.oversample_prob);
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.enabled = a.value("enabled", c.augment.enabled);
      c.augment.rotate_deg = a.value("rotate_deg", c.augment.rotate_deg);
      c.augment.scale_lo = a.value("scale_lo", c.augment.scale_lo);
      c.augment.scale_hi = a.value("scale_hi", c.augment.scale_hi);
      c.augment.rot_scale_prob = a.value("rot_scale_prob", c.augment.rot_scale_prob);
      c.augment.mirror_prob = a.value("mirror_prob", c.augment.mirror_prob);
      c.augment.noise_var_hi = a.value("noise_var_hi", c.augment.noise_var_hi);
      c.augment.noise_prob = a.value("noise_prob", c.augment.noise_prob);
      c.augment.blur_sigma_lo = a.value("blur_sigma_lo", c.augment.blur_sigma_lo);
      c.augment.blur_sigma_hi = a.value("blur_sigma_hi", c.augment.blur_sigma_hi);
      c.augment.blur_prob = a.value("blur_prob", c.augment.blur_prob);
      c.augment.brightness_shift = a.value("brightness_shift", c.augment.brightness_shift);
      c.augment.brightness_prob = a.value("brightness_prob", c.augment.brightness_prob);
      c.augment.contrast_lo = a.value("contrast_lo", c.augment.contrast_lo);
      c.augment.contrast_hi = a.value("contrast_hi", c.augment.contrast_hi);
      c.augment.contrast_prob = a.value("contrast_prob", c.augment.contrast_prob);
    }
    if (j.contains("target_spacing")) {
      c.target_spacing = j.at("target_spacing").get<std::vector<double>>();
    }
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.exclude_fold = j.value("exclude_fold", c.exclude_fold);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  return c;
}

struct EpochStats {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_dsc = 0.0;
};

struct TrainResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  std::vector<EpochStats> epochs;
};

namespace detail {

// batch-aggregated hard Dice over the epoch, averaged across foreground
// classes that appear in predictions or labels
struct DiceAccumulator {
  std::map<int, std::int64_t> inter, denom;

  void add(const Tensor& logits, const LabelMap& labels, std::int64_t num_classes) {
    const std::int64_t c = logits.dim(1);
    const std::int64_t n = logits.dim(0);
    const std::int64_t vox = spatial_numel(logits.shape());
    for (std::int64_t in = 0; in < n; ++in) {
      for (std::int64_t v = 0; v < vox; ++v) {
        std::int64_t best = 0;
        double bv = logits[(in * c) * vox + v];
        for (std::int64_t k = 1; k < c; ++k) {
          const double x = logits[(in * c + k) * vox + v];
          if (x > bv) {
            bv = x;
            best = k;
          }
        }
        const std::int32_t g = labels.ids[static_cast<std::size_t>(in * vox + v)];
        for (std::int64_t k = 1; k < num_classes; ++k) {
          const bool p = best == k, t = g == k;
          inter[static_cast<int>(k)] += p && t;
          denom[static_cast<int>(k)] += static_cast<std::int64_t>(p) + static_cast<std::int64_t>(t);
        }
      }
    }
  }

  double value() const {
    double acc = 0.0;
    int classes = 0;
    for (const auto& [cls, d] : denom) {
      if (d == 0) continue;
      acc += 2.0 * static_cast<double>(inter.at(cls)) / static_cast<double>(d);
      ++classes;
    }
    return classes == 0 ? 1.0 : acc / classes;
  }
};

}  // namespace detail

inline TrainResult train(const RunConfig& cfg,
                         const std::optional<std::filesystem::path>& resume = {}) {
  namespace fs = std::filesystem;
  if (cfg.patch_size.empty()) throw ConfigError("train: patch_size required");
  if (cfg.batch_size < 1 || cfg.epochs < 1 || cfg.steps_per_epoch < 1) {
    throw ConfigError("train: epochs, steps_per_epoch and batch_size must be >= 1");
  }

  DatasetManifest manifest = DatasetManifest::load(cfg.manifest);
  PreprocessConfig pre;
  pre.target_spacing = cfg.target_spacing;
  std::vector<VolumeSample> cases;
  for (std::size_t i = 0; i < manifest.cases.size(); ++i) {
    if (cfg.exclude_fold >= 0 && manifest.cases[i].fold == cfg.exclude_fold) continue;
    VolumeSample s = preprocess_case(manifest.load_case(i), pre);
    if (!s.has_label()) throw DataError("train: case " + s.id + " has no labels");
    cases.push_back(std::move(s));
  }
  if (cases.empty()) throw DataError("train: no training cases after fold exclusion");

  NetworkSpec nspec = cfg.network;
  if (nspec.num_classes != manifest.num_classes) {
    throw ConfigError("train: network num_classes " + std::to_string(nspec.num_classes) +
                      " != manifest num_classes " + std::to_string(manifest.num_classes));
  }
  Model model = build_network(nspec);
  SgdNesterov opt;
  opt.momentum = cfg.momentum;
  opt.nesterov = cfg.nesterov;
  opt.reset(model.params);
  Rng rng(cfg.seed);
  std::int64_t start_epoch = 0;

  if (resume.has_value()) {
    Checkpoint c = load_checkpoint(*resume);
    apply_checkpoint(model, c, &opt);
    rng = Rng::deserialize(c.rng_state);
    start_epoch = c.epoch;
  }

  fs::create_directories(cfg.out_dir);
  const fs::path log_path = fs::path(cfg.out_dir) / "train_log.jsonl";
  std::ofstream log(log_path, resume.has_value() ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open " + log_path.string());

  TrainResult result;
  result.log_path = log_path;

  DiceConfig dice_cfg;
  for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.poly_power);
    double loss_sum = 0.0;
    detail::DiceAccumulator dice_acc;
    for (std::int64_t step = 0; step < cfg.steps_per_epoch; ++step) {
      std::vector<VolumeSample> patches;
      for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
        const auto ci = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(cases.size())));
        VolumeSample patch = extract_patch(cases[ci], cfg.patch_size,
                                           PatchPolicy::kForegroundBiased, rng,
                                           cfg.oversample_prob);
        if (cfg.augment.enabled) patch = augment_sample(patch, cfg.augment, rng);
        patches.push_back(std::move(patch));
      }
      auto [x, y] = to_batch(patches);
      auto fwd = model_forward(model, x, /*training=*/true);
      Var loss = combined_loss(fwd.logits, y, dice_cfg, "loss");
      const double loss_value = fwd.tape->value(loss)[0];
      if (!std::isfinite(loss_value)) {
        const auto where = fwd.tape->first_nonfinite();
        throw DataError("train: non-finite loss at epoch " + std::to_string(epoch) +
                        " step " + std::to_string(step) + "; first non-finite layer: " +
                        where.value_or("loss"));
      }
      fwd.tape->backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(model.params.count());
      for (std::size_t i = 0; i < model.params.count(); ++i) {
        const Var pv = fwd.param_vars[i];
        grads.push_back(fwd.tape->has_grad(pv) ? fwd.tape->grad(pv)
                                               : Tensor(model.params.entry(static_cast<int>(i)).shape));
      }
      loss_sum += loss_value;
      dice_acc.add(fwd.tape->value(fwd.logits), y, nspec.num_classes);
      opt.step(model.params, grads, lr);
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.loss = loss_sum / static_cast<double>(cfg.steps_per_epoch);
    st.train_dsc = dice_acc.value();
    result.epochs.push_back(st);
    log << nlohmann::json{{"epoch", st.epoch},
                          {"lr", st.lr},
                          {"loss", st.loss},
                          {"train_dsc", st.train_dsc}}
               .dump()
        << "\n";
    log.flush();

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs) {
      const fs::path p =
          fs::path(cfg.out_dir) / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".dmc");
      save_checkpoint(checkpoint_from(model, &opt, rng, epoch + 1), p);
    }
  }

  result.checkpoint_path = fs::path(cfg.out_dir) / "checkpoint_final.dmc";
  save_checkpoint(checkpoint_from(model, &opt, rng, cfg.epochs), result.checkpoint_path);
  return result;
}

}  // namespace dmc
