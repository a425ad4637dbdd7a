// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/comm.hpp"

#include <sstream>

#include "fedpeft/byteio.hpp"
#include "fedpeft/errors.hpp"

namespace fedpeft {

namespace {

constexpr std::uint32_t kWireVersion = 1;
constexpr std::size_t kHashPrefix = 16;

std::size_t adapter_count(const StrategyMask& mask, const ModelConfig& cfg) {
    return mask.uses_lora ? 2 * lora_sites(cfg).size() : 0;
}

}  // namespace

std::string to_string(Direction d) { return d == Direction::down ? "down" : "up"; }

Payload extract_payload(const ParamRegistry& reg, const StrategyMask& mask, const AdapterSet* adapters) {
    Payload p;
    for (const auto& [name, e] : reg)
        if (mask.trains(e.group, e.attention)) p.dense.emplace_back(name, e.value);
    if (mask.uses_lora) {
        if (!adapters) throw ProtocolError(to_string(mask.strategy) + " payload without adapters");
        p.adapters = *adapters;
    }
    return p;
}

std::vector<std::uint8_t> encode_message(const MessageHeader& h, const Payload& payload) {
    std::uint64_t floats = 0;
    for (const auto& [name, m] : payload.dense) floats += m.size();
    if (h.config_hash.size() < kHashPrefix) throw ProtocolError("message header: config hash too short");

    io::ByteWriter out;
    out.raw(std::string_view("FPWM"));
    out.u32(kWireVersion);
    out.u32(static_cast<std::uint32_t>(h.direction));
    out.u32(h.round);
    out.u32(h.client);
    out.u32(static_cast<std::uint32_t>(h.strategy));
    out.u32(static_cast<std::uint32_t>(payload.dense.size()));
    out.u32(static_cast<std::uint32_t>(payload.adapters ? payload.adapters->size() : 0));
    out.u64(floats);
    out.u64(h.samples);
    out.raw(std::string_view(h.config_hash).substr(0, kHashPrefix));
    for (const auto& [name, m] : payload.dense)
        for (double x : m.values()) out.f32(static_cast<float>(x));
    if (payload.adapters)
        for (const auto& [key, ad] : *payload.adapters) append_adapter_record(out, key, ad);
    return std::move(out).take();
}

DecodedMessage decode_message(std::span<const std::uint8_t> bytes, const ParamRegistry& reference,
                              const StrategyMask& mask, double lora_scale) {
    io::ByteReader in(bytes);
    if (in.raw(4) != "FPWM") throw IoError("message: bad magic");
    if (in.u32() != kWireVersion) throw IoError("message: unsupported version");
    DecodedMessage msg;
    const std::uint32_t dir = in.u32();
    if (dir > 1) throw IoError("message: bad direction");
    msg.header.direction = static_cast<Direction>(dir);
    msg.header.round = in.u32();
    msg.header.client = in.u32();
    const std::uint32_t strategy = in.u32();
    if (strategy >= kAllStrategies.size()) throw IoError("message: bad strategy id");
    msg.header.strategy = static_cast<Strategy>(strategy);
    const std::size_t dense_count = in.u32();
    const std::size_t adapters = in.u32();
    const std::uint64_t floats = in.u64();
    msg.header.samples = in.u64();
    msg.header.config_hash = in.raw(kHashPrefix);

    std::uint64_t expected = 0;
    for (const auto& [name, e] : reference) {
        if (!mask.trains(e.group, e.attention)) continue;
        Matrix m(e.value.rows(), e.value.cols());
        if (in.remaining() < m.size() * kWireFloatBytes) throw IoError("message: truncated tensor " + name);
        for (double& x : m.values()) x = in.f32();
        expected += m.size();
        msg.payload.dense.emplace_back(name, std::move(m));
    }
    if (msg.payload.dense.size() != dense_count || expected != floats) {
        throw IoError("message: dense layout does not match the reference model");
    }
    if (adapters > 0) {
        AdapterSet set;
        for (std::size_t i = 0; i < adapters; ++i) {
            auto [key, ad] = read_adapter_record(in, lora_scale);
            set.insert(key, std::move(ad));
        }
        msg.payload.adapters = std::move(set);
    }
    if (!in.done()) throw IoError("message: trailing bytes");
    return msg;
}

std::size_t header_overhead(const StrategyMask& mask, const ModelConfig& cfg) {
    return kMessageHeaderBytes + kAdapterRecordHeaderBytes * adapter_count(mask, cfg);
}

std::size_t payload_bytes(const StrategyMask& mask, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes) {
    ModelConfig c = cfg;
    c.num_classes = num_classes;
    return kWireFloatBytes * count_params(c, mask, rank, num_classes).trainable + header_overhead(mask, c);
}

std::size_t payload_bytes(Strategy s, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes) {
    return payload_bytes(mask_for(s), cfg, rank, num_classes);
}

std::size_t payload_body_bytes(Strategy s, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes) {
    return kWireFloatBytes * count_params(cfg, mask_for(s), rank, num_classes).trainable;
}

double reduction_ratio(Strategy a, Strategy b, const ModelConfig& cfg, std::size_t rank, std::size_t num_classes) {
    const auto num = static_cast<double>(payload_body_bytes(a, cfg, rank, num_classes));
    const auto den = static_cast<double>(payload_body_bytes(b, cfg, rank, num_classes));
    if (den == 0.0) throw ConfigError("reduction_ratio: " + to_string(b) + " has no trainable parameters");
    return num / den;
}

std::size_t CommLedger::total_bytes() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.bytes;
    return n;
}

std::size_t CommLedger::total_bytes(Direction d) const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (e.direction == d) n += e.bytes;
    return n;
}

std::string CommLedger::to_csv() const {
    std::ostringstream os;
    os << "round,client,direction,bytes\n";
    for (const auto& e : entries_) os << e.round << ',' << e.client << ',' << to_string(e.direction) << ',' << e.bytes << '\n';
    return os.str();
}

}  // namespace fedpeft
