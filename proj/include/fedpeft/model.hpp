// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedpeft/adapters.hpp"
#include "fedpeft/linalg.hpp"

namespace fedpeft {

// Parameter groups of an encoder / prompt / decoder segmentation model.
enum class Group : std::uint8_t {
    ie_attention = 0,  // IE-AT
    ie_other = 1,      // IE-NA
    prompt = 2,        // PE
    md_transformer = 3,  // MD-TR
    md_upscale = 4,      // MD-UP
    md_hypernet = 5,     // MD-HYP
};

inline constexpr std::array<Group, 6> kAllGroups = {Group::ie_attention, Group::ie_other,     Group::prompt,
                                                    Group::md_transformer, Group::md_upscale, Group::md_hypernet};

std::string to_string(Group g);  // "IE-AT", "IE-NA", ...
Group group_from_string(const std::string& s);

enum class Strategy { full_ft, attn_ft, dec_ft, lora_ft, lora_dec_ft, pdec_ft, flap_sam };

inline constexpr std::array<Strategy, 7> kAllStrategies = {Strategy::full_ft,     Strategy::attn_ft,
                                                           Strategy::dec_ft,      Strategy::lora_ft,
                                                           Strategy::lora_dec_ft, Strategy::pdec_ft,
                                                           Strategy::flap_sam};

std::string to_string(Strategy s);  // "FullFT", ..., "FLAP-SAM"
/// Case-insensitive; accepts "FLAP-SAM", "flap_sam", "flapsam", ...
Strategy strategy_from_string(const std::string& s);

struct ParamSpec;

// Which registry tensors a strategy updates, and whether it carries LoRA.
struct StrategyMask {
    Strategy strategy = Strategy::full_ft;
    std::uint8_t group_bits = 0;
    bool md_attention_only = false;  // AttnFT: decoder transformer attention tensors only
    bool uses_lora = false;

    bool has_group(Group g) const noexcept { return group_bits & (1u << static_cast<unsigned>(g)); }
    bool trains(Group g, bool attention) const noexcept;
};

StrategyMask mask_for(Strategy s);

// Architecture hyper-parameters. Two presets: `toy` (trainable at desk
// scale) and `vit_b_paper` (used only by the analytic counter).
struct ModelConfig {
    std::string name;
    std::size_t embed_dim = 32;
    std::size_t encoder_blocks = 2;
    std::size_t num_heads = 2;
    std::size_t mlp_ratio = 4;
    std::size_t patch_size = 16;
    std::size_t image_size = 32;
    std::size_t input_slices = 5;
    std::size_t patch_in_chans = 5;
    bool use_rel_pos = true;
    std::size_t decoder_dim = 16;
    std::size_t decoder_blocks = 2;
    std::size_t decoder_heads = 2;
    std::size_t decoder_mlp_dim = 64;
    std::size_t attention_downsample = 2;
    std::size_t neck_kernel = 3;
    std::vector<std::size_t> up_channels = {8, 8, 4, 4};
    std::size_t iou_head_outputs = 4;
    std::size_t mask_in_chans = 4;
    std::size_t prompt_grid = 2;
    std::size_t num_classes = 2;  // labels including background

    static ModelConfig toy();
    static ModelConfig vit_b_paper();
    static ModelConfig by_name(const std::string& name);

    std::size_t grid() const noexcept { return image_size / patch_size; }
    std::size_t tokens() const noexcept { return grid() * grid(); }
    std::size_t pixels() const noexcept { return image_size * image_size; }
    std::size_t foreground_classes() const noexcept { return num_classes - 1; }
    std::size_t cross_dim() const noexcept { return decoder_dim / attention_downsample; }

    /// Throws ConfigError on inconsistent dimensions.
    void validate() const;
    /// Whether the toy forward pass can run this config (count-only otherwise).
    bool runnable() const noexcept { return patch_in_chans == input_slices; }
    std::string canonical() const;
    std::string hash() const;
};

struct ParamSpec {
    std::string name;
    Group group;
    bool attention;
    std::size_t rows;
    std::size_t cols;

    std::size_t count() const noexcept { return rows * cols; }
};

/// Every dense tensor of the model, in registry order, without allocating.
std::vector<ParamSpec> param_layout(const ModelConfig& cfg);

// One LoRA-bearing attention layer: q and v projections are
// internal_dim x embed_dim.
struct AttentionSite {
    std::uint32_t layer;  // 1-based id
    std::string prefix;   // registry prefix, e.g. "md.tr.layer0.cross_t2i"
    std::size_t internal_dim;
    std::size_t embed_dim;
};

/// All Gamma attention layers carrying LoRA, encoder first, then decoder.
std::vector<AttentionSite> lora_sites(const ModelConfig& cfg);
/// LoRA parameter count at `rank` (every site, q and v).
std::size_t lora_param_count(const ModelConfig& cfg, std::size_t rank);
/// Largest rank every site accepts.
std::size_t max_lora_rank(const ModelConfig& cfg);
AdapterSet make_adapters(const ModelConfig& cfg, std::size_t rank, const LoRAOptions& options, Rng& rng);

/// Fixed (non-trainable) Fourier positional encodings: decoder_dim x tokens
/// for the image grid, decoder_dim x prompt_grid^2 for the prompt points.
Matrix image_positional_encoding(const ModelConfig& cfg);
Matrix prompt_positional_encoding(const ModelConfig& cfg);

struct ParamEntry {
    Matrix value;
    Group group;
    bool attention;
};

// Named, partitioned parameter store. Iteration follows insertion (layout) order.
class ParamRegistry {
public:
    void add(std::string name, ParamEntry entry);
    bool contains(const std::string& name) const { return index_.contains(name); }
    const ParamEntry& at(const std::string& name) const;
    ParamEntry& at(const std::string& name);

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t parameter_count() const noexcept;
    std::map<Group, std::size_t> group_counts() const;

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

private:
    std::vector<std::pair<std::string, ParamEntry>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// A trainable tensor: either a registry entry or one factor of an adapter.
struct ParamRef {
    enum class Kind { dense, lora_a, lora_b };
    Kind kind = Kind::dense;
    std::string name;  // registry name for dense refs
    AdapterKey key{};  // adapter key for factor refs

    std::string label() const;
    auto operator<=>(const ParamRef&) const = default;
};

/// Registry entries under the mask, then every adapter factor when the
/// strategy uses LoRA. Throws ConfigError if adapters are given to a
/// non-LoRA strategy or missing for a LoRA one.
std::vector<ParamRef> trainable_params(const ParamRegistry& reg, const StrategyMask& mask, const AdapterSet* adapters);

const Matrix& param_value(const ParamRegistry& reg, const AdapterSet* adapters, const ParamRef& ref);
Matrix& param_value(ParamRegistry& reg, AdapterSet* adapters, const ParamRef& ref);

struct ParamCounts {
    std::size_t trainable = 0;
    std::size_t total = 0;
};

/// Analytic count; `total` includes adapters when the strategy uses them.
ParamCounts count_params(const ModelConfig& cfg, const StrategyMask& mask, std::size_t rank,
                         std::size_t num_classes);
std::map<Group, std::size_t> group_param_counts(const ModelConfig& cfg);

/// SHA-256 over names and f64 bits of every entry the mask leaves frozen.
std::string frozen_digest(const ParamRegistry& reg, const StrategyMask& mask);

// Gradients w.r.t. a chosen parameter list, keyed like ParamRef.
using GradientMap = std::map<ParamRef, Matrix>;

/// Called with the logits (num_classes x pixels); returns the loss and fills
/// d loss / d logits.
using LossFn = std::function<double(const Matrix& logits, Matrix& dlogits)>;

class SegmentationModel {
public:
    explicit SegmentationModel(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }

    /// Logits (num_classes x H*W) for one N x (H*W) volume. Row 0 is the
    /// fixed background logit 0.
    Matrix forward(const ParamRegistry& reg, const AdapterSet* adapters, const Matrix& volume) const;
    std::vector<Matrix> forward_batch(const ParamRegistry& reg, const AdapterSet* adapters,
                                      std::span<const Matrix> volumes) const;

    /// Runs forward, the loss, and backward; adds gradients for `wrt` into
    /// `grads` (missing keys are created). Returns the loss.
    double forward_backward(const ParamRegistry& reg, const AdapterSet* adapters, const Matrix& volume,
                            const LossFn& loss, std::span<const ParamRef> wrt, GradientMap& grads) const;

private:
    struct Maps;
    ModelConfig cfg_;
    std::shared_ptr<const Maps> maps_;
};

struct BuiltModel {
    ParamRegistry registry;
    SegmentationModel model;
};

/// Allocates and randomly initializes a registry for `cfg` (the frozen
/// "foundation" weights) together with its forward function.
BuiltModel build_model(const ModelConfig& cfg, Rng& rng);

// Checkpoint: "FPCK", u32 version, 64-byte hex config hash, u32 strategy,
// u32 entry count, then per entry: u32 name length, name, u8 group,
// u8 attention flag, u32 rows, u32 cols, rows*cols little-endian float32.
std::vector<std::uint8_t> save_checkpoint(const ParamRegistry& reg, const ModelConfig& cfg, Strategy strategy);

struct Checkpoint {
    ParamRegistry registry;
    std::string config_hash;
    Strategy strategy;
};

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace fedpeft
