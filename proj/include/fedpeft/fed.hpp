// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedpeft/comm.hpp"
#include "fedpeft/training.hpp"

namespace fedpeft {

enum class Weighting { sample_proportional, uniform };

std::string to_string(Weighting w);
Weighting weighting_from_string(const std::string& s);

struct FedOptions {
    Weighting weighting = Weighting::sample_proportional;
    bool parallel_clients = false;
    // Off: clients and server exchange exact doubles and only the byte count
    // comes from the float32 encoding. On: every message is decoded from the
    // wire, so values travel at float32 precision.
    bool wire_roundtrip = false;
    TrainerConfig trainer;
};

struct ClientState {
    std::uint32_t client_id = 0;
    std::string config_hash;
    LearnerState learner;
    const std::vector<Sample>* data = nullptr;
    std::uint32_t round = 0;
    Rng rng;

    std::size_t num_samples() const { return data ? data->size() : 0; }
};

struct ServerState {
    std::string config_hash;
    StrategyMask mask;
    std::size_t rank = 0;
    double lora_scale = 1.0;
    std::uint32_t round = 0;
    std::vector<double> weights;  // by client id
    ParamRegistry reference;      // base weights; frozen part and shapes
    Payload global;
};

/// Server snapshot from the base model. LoRA strategies get freshly
/// initialized global adapters, so all clients start from one point.
ServerState init_server(const BuiltModel& base, Strategy strategy, std::size_t rank, const LoRAOptions& lora, Rng& rng);

/// Client `id` with a private copy of the base registry and its own RNG stream.
ClientState make_client(std::uint32_t id, const BuiltModel& base, Strategy strategy, const std::vector<Sample>& data,
                        std::uint64_t seed);

/// w_k = n_k / sum n, or 1/K. Throws ProtocolError on empty clients.
std::vector<double> client_weights(std::span<const ClientState> clients, Weighting weighting);

/// Copies the global trainable snapshot into every client. Returns the bytes
/// of each client's downlink message. Throws ProtocolError on a config hash
/// mismatch.
std::vector<std::size_t> broadcast(const ServerState& server, std::span<ClientState> clients, bool wire_roundtrip = false);

struct ClientUpdate {
    std::uint32_t client_id = 0;
    double weight = 0.0;
    Payload payload;
};

/// Global dense tensor = sum_k w_k * client tensor. Atomic: the server is
/// unchanged if anything throws.
void aggregate_dense(ServerState& server, std::span<const ClientUpdate> updates);

struct LayerResidual {
    AdapterKey key;
    double residual = 0.0;     // ||dW_agg - B A||_F after truncation
    double tail_energy = 0.0;  // sqrt of the discarded squared singular values
};

/// Per adapter: merge every client's B A, take the weighted sum, and refactor
/// it to rank r with the truncated SVD. Atomic like aggregate_dense.
std::vector<LayerResidual> aggregate_lora(ServerState& server, std::span<const ClientUpdate> updates);

struct ClientTraffic {
    std::uint32_t client_id = 0;
    std::size_t samples = 0;
    std::size_t bytes_down = 0;
    std::size_t bytes_up = 0;
    double loss_first = 0.0;
    double loss_last = 0.0;
};

struct RoundRecord {
    std::uint32_t round = 0;
    std::vector<ClientTraffic> clients;
    std::vector<LayerResidual> residuals;
    double dense_update_norm = 0.0;  // ||global_new - global_old|| over dense tensors
    double lora_update_norm = 0.0;   // same over merged adapter deltas
    double seconds = 0.0;            // wall clock; kept out of transcripts
};

/// broadcast, local training, uplink, dense and LoRA aggregation in one step.
/// A diverging client aborts the round (server untouched) with a
/// DivergenceError naming it.
RoundRecord run_round(ServerState& server, std::span<ClientState> clients, const SegmentationModel& model,
                      std::size_t local_steps, const FedOptions& options, CommLedger* ledger = nullptr);

/// Writes the global snapshot into a learner (for evaluation).
void apply_global(const ServerState& server, LearnerState& learner);

/// One JSON object per line; wall-clock time is omitted.
std::string transcript_line(const RoundRecord& record);

}  // namespace fedpeft
