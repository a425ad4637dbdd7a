// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedpeft/byteio.hpp"
#include "fedpeft/linalg.hpp"

namespace fedpeft {

using Rng = std::mt19937_64;

/// Which attention projection a LoRA pair modifies. Keys and outputs never
/// carry adapters.
enum class Projection : std::uint32_t { query = 0, value = 1 };

std::string to_string(Projection p);

struct AdapterKey {
    std::uint32_t layer = 0;  // 1-based attention-layer id
    Projection target = Projection::query;

    auto operator<=>(const AdapterKey&) const = default;
};

// Low-rank update W + scale * B A for one d x d' projection.
struct LoRAAdapter {
    Matrix a_factor;  // rank x d'
    Matrix b_factor;  // d x rank
    std::size_t rank = 0;
    double scale = 1.0;

    std::size_t out_dim() const noexcept { return b_factor.rows(); }
    std::size_t in_dim() const noexcept { return a_factor.cols(); }
    std::size_t parameter_count() const noexcept { return a_factor.size() + b_factor.size(); }
};

struct LoRAOptions {
    double scale = 1.0;
    double init_std = 0.02;
    bool scale_by_rank = false;  // use scale / rank as the effective multiplier
};

/// Largest rank accepted for a d x d' projection.
std::size_t max_rank(std::size_t d, std::size_t d_prime) noexcept;

/// Throws ConfigError unless 1 <= rank <= min(d, d')/2.
void validate_rank(std::size_t d, std::size_t d_prime, std::size_t rank);

/// A ~ N(0, init_std^2), B = 0, so the adapter starts as an exact no-op.
LoRAAdapter init_lora(std::size_t d, std::size_t d_prime, std::size_t rank, const LoRAOptions& options,
                      Rng& rng);

/// W x + scale * B (A x), never materializing B A.
Matrix lora_forward(const Matrix& w, const LoRAAdapter& adapter, const Matrix& x);

/// Dense B A (scale is applied at forward time only).
Matrix merge_delta(const LoRAAdapter& adapter);

/// Ordered (layer, target) -> adapter map with exactly a query and a value
/// adapter per registered layer.
class AdapterSet {
public:
    void insert(AdapterKey key, LoRAAdapter adapter);
    bool contains(AdapterKey key) const { return adapters_.contains(key); }
    const LoRAAdapter& at(AdapterKey key) const;
    LoRAAdapter& at(AdapterKey key);
    const LoRAAdapter* find(AdapterKey key) const;

    std::size_t size() const noexcept { return adapters_.size(); }
    std::size_t layer_count() const noexcept { return adapters_.size() / 2; }
    std::size_t parameter_count() const noexcept;

    /// Throws ConfigError unless every layer holds both targets with one shared rank.
    void validate() const;
    /// Keys sorted by layer id, then query before value.
    std::vector<AdapterKey> keys() const;

    auto begin() const { return adapters_.begin(); }
    auto end() const { return adapters_.end(); }
    auto begin() { return adapters_.begin(); }
    auto end() { return adapters_.end(); }

private:
    std::map<AdapterKey, LoRAAdapter> adapters_;
};

// Wire record per adapter: u32 layer, u32 target, u32 rank, u32 d, u32 d',
// then A (rank x d') and B (d x rank) as row-major little-endian float32.
constexpr std::size_t kAdapterRecordHeaderBytes = 5 * sizeof(std::uint32_t);

std::size_t adapter_record_bytes(const LoRAAdapter& adapter) noexcept;
void append_adapter_record(io::ByteWriter& out, AdapterKey key, const LoRAAdapter& adapter);
std::pair<AdapterKey, LoRAAdapter> read_adapter_record(io::ByteReader& in, double scale);

// File form of a whole set: "LORA", u32 version, u32 count, f64 scale,
// u32 split mode (0 = balanced sqrt(sigma) on both factors), then records.
std::vector<std::uint8_t> serialize_adapters(const AdapterSet& set);
AdapterSet deserialize_adapters(std::span<const std::uint8_t> bytes);

}  // namespace fedpeft
