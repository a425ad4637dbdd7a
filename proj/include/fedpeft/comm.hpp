// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedpeft/model.hpp"

namespace fedpeft {

// Wire message: a fixed 64-byte header, the trainable dense tensors in
// registry order as raw float32 (shapes are implied by the model config),
// then one adapter record per LoRA pair.
//
// header: "FPWM", u32 version, u32 direction, u32 round, u32 client,
//         u32 strategy, u32 dense tensor count, u32 adapter count,
//         u64 dense float count, u64 sample count, 16 bytes config-hash prefix
inline constexpr std::size_t kMessageHeaderBytes = 64;
inline constexpr std::size_t kWireFloatBytes = 4;

enum class Direction : std::uint32_t { down = 0, up = 1 };

std::string to_string(Direction d);

struct MessageHeader {
    Direction direction = Direction::down;
    std::uint32_t round = 0;
    std::uint32_t client = 0;
    Strategy strategy = Strategy::full_ft;
    std::uint64_t samples = 0;
    std::string config_hash;  // full hex; only the first 16 characters travel
};

using DenseTensors = std::vector<std::pair<std::string, Matrix>>;

struct Payload {
    DenseTensors dense;
    std::optional<AdapterSet> adapters;
};

/// Trainable dense tensors (registry order) and adapters of a learner.
Payload extract_payload(const ParamRegistry& reg, const StrategyMask& mask, const AdapterSet* adapters);

std::vector<std::uint8_t> encode_message(const MessageHeader& header, const Payload& payload);

struct DecodedMessage {
    MessageHeader header;  // config_hash holds the 16-character prefix
    Payload payload;
};

/// Shapes come from `reference` under `mask`. Values come back at float32
/// precision. Throws IoError on malformed input.
DecodedMessage decode_message(std::span<const std::uint8_t> bytes, const ParamRegistry& reference,
                              const StrategyMask& mask, double lora_scale);

/// Fixed per-message overhead: header plus adapter record headers.
std::size_t header_overhead(const StrategyMask& mask, const ModelConfig& cfg);

/// Bytes of one message per client per direction, headers included.
std::size_t payload_bytes(const StrategyMask& mask, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes);
std::size_t payload_bytes(Strategy s, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes);

/// Parameter bytes only (4 x trainable count).
std::size_t payload_body_bytes(Strategy s, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes);

/// Ratio of header-free payloads, a / b.
double reduction_ratio(Strategy a, Strategy b, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes);

struct LedgerEntry {
    std::uint32_t round = 0;
    std::uint32_t client = 0;
    Direction direction = Direction::down;
    std::size_t bytes = 0;
};

// Append-only record of every serialized message of a run.
class CommLedger {
public:
    CommLedger() = default;
    CommLedger(Strategy strategy, std::size_t rank, std::size_t num_classes)
        : strategy_(strategy), rank_(rank), num_classes_(num_classes) {}

    void append(LedgerEntry e) { entries_.push_back(e); }
    const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
    std::size_t total_bytes() const noexcept;
    std::size_t total_bytes(Direction d) const noexcept;

    Strategy strategy() const noexcept { return strategy_; }
    std::size_t rank() const noexcept { return rank_; }
    std::size_t num_classes() const noexcept { return num_classes_; }

    /// Columns: round,client,direction,bytes
    std::string to_csv() const;

private:
    Strategy strategy_ = Strategy::full_ft;
    std::size_t rank_ = 0;
    std::size_t num_classes_ = 0;
    std::vector<LedgerEntry> entries_;
};

}  // namespace fedpeft
