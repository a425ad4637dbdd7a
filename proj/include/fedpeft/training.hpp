// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedpeft/model.hpp"

namespace fedpeft {

// ---------------------------------------------------------------- data

// One input stack of consecutive slices and the label map of its middle slice.
struct Sample {
    Matrix volume;                    // slices x (H*W)
    std::vector<std::uint8_t> mask;   // H*W labels in [0, num_classes)
};

// Geometry prior of one synthetic site. Positions and sizes are fractions of
// the image side.
struct SiteParams {
    std::uint32_t site_id = 0;
    double center_x_lo = 0.3, center_x_hi = 0.7;
    double center_y_lo = 0.3, center_y_hi = 0.7;
    double radius_lo = 0.15, radius_hi = 0.25;
    double intensity_lo = 0.6, intensity_hi = 1.0;
    double noise = 0.1;
    std::uint32_t max_bodies = 1;

    void validate() const;  // ConfigError on empty ranges
};

/// Site k of K: position prior boxes placed on a small ring around the image
/// centre (neighbouring sites overlap partly), plus per-site size and contrast.
SiteParams default_site(std::size_t index, std::size_t num_sites);

struct SyntheticSite {
    SiteParams params;
    std::uint64_t seed = 0;
    std::size_t image_size = 0;
    std::size_t slices = 0;
    std::size_t num_classes = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

/// Deterministic in (seed, params, sizes). Volume values are stored at float
/// precision so a cache round trip is exact.
SyntheticSite gen_site(std::uint64_t seed, const SiteParams& params, std::size_t n_train, std::size_t n_test,
                       std::size_t image_size, std::size_t slices, std::size_t num_classes);

/// Mean foreground centroid (x, y) in pixels over a sample list.
std::pair<double, double> mean_foreground_centroid(std::span<const Sample> samples, std::size_t image_size);

// Cache blob: "FPDS", u32 version, u64 seed, SiteParams (u32 id, 9 x f64,
// u32 max_bodies), u32 image_size, slices, num_classes, n_train, n_test,
// then per sample slices*H*W float32 followed by H*W u8 labels.
std::vector<std::uint8_t> serialize_site(const SyntheticSite& site);
SyntheticSite deserialize_site(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------- loss

struct LossWeights {
    double ce_weight = 0.2;
    double dice_weight = 0.8;
};

inline constexpr double kDiceSmoothing = 1e-5;

struct LossValue {
    double total = 0.0;
    double cross_entropy = 0.0;
    double dice_loss = 0.0;  // 1 - mean soft Dice, unweighted
};

/// ce_weight * mean pixel cross-entropy + dice_weight * (1 - soft Dice
/// averaged over foreground classes). Fills dlogits with d total / d logits.
LossValue hybrid_loss(const Matrix& logits, std::span<const std::uint8_t> mask, const LossWeights& weights,
                      Matrix& dlogits);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    Matrix m;
    Matrix v;
};

struct AdamState {
    std::uint64_t step = 0;
    std::map<ParamRef, AdamMoments> moments;
};

/// One bias-corrected Adam update of a single tensor at step t (1-based).
void adam_update(Matrix& param, const Matrix& grad, AdamMoments& moments, std::uint64_t t, const AdamConfig& cfg);

/// Updates every tensor named in `grads`. Throws NumericError before touching
/// anything if a gradient is not finite.
void adam_step(ParamRegistry& reg, AdapterSet* adapters, const GradientMap& grads, AdamState& state,
               const AdamConfig& cfg);

// ---------------------------------------------------------------- training

struct TrainerConfig {
    std::size_t batch_size = 32;
    AdamConfig adam;
    LossWeights loss;
    double divergence_threshold = 1e6;
};

// Everything one learner (a client, a local model, or the pooled model) owns.
struct LearnerState {
    ParamRegistry registry;
    std::optional<AdapterSet> adapters;
    StrategyMask mask;
    AdamState adam;

    AdapterSet* adapter_ptr() { return adapters ? &*adapters : nullptr; }
    const AdapterSet* adapter_ptr() const { return adapters ? &*adapters : nullptr; }
};

/// Base registry plus fresh adapters (when the strategy uses them).
LearnerState make_learner(const BuiltModel& base, Strategy strategy, std::size_t rank, const LoRAOptions& lora,
                          Rng& rng);

/// Batch indices for one step: the whole set in order when it fits in a
/// batch, otherwise a fresh shuffle's prefix.
std::vector<std::size_t> draw_batch(std::size_t n, std::size_t batch_size, Rng& rng);

/// Mean hybrid loss over a batch with summed-then-averaged gradients.
double batch_loss_and_grads(const SegmentationModel& model, const LearnerState& state, std::span<const Sample> data,
                            std::span<const std::size_t> batch, const LossWeights& weights, GradientMap& grads);

/// `steps` Adam steps on `data`; returns the per-step batch loss. Throws
/// DivergenceError if the loss exceeds the threshold or is not finite.
std::vector<double> train_local(const SegmentationModel& model, LearnerState& state, std::span<const Sample> data,
                                std::size_t steps, const TrainerConfig& cfg, Rng& rng);

// ---------------------------------------------------------------- evaluation

struct DiceResult {
    std::vector<double> per_class;  // index 0 is background
    double mean_foreground = 0.0;
};

DiceResult dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::size_t num_classes);

/// Per-pixel argmax over class logits.
std::vector<std::uint8_t> argmax_labels(const Matrix& logits);

/// Mean over samples of the per-sample mean foreground Dice.
double evaluate_dice(const SegmentationModel& model, const LearnerState& state, std::span<const Sample> data);

}  // namespace fedpeft
