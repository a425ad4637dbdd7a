// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fedpeft/adapters.hpp"

#include <algorithm>

#include "fedpeft/errors.hpp"

namespace fedpeft {

namespace {

constexpr std::uint32_t kSetVersion = 1;
constexpr std::uint32_t kBalancedSplit = 0;

}  // namespace

std::string to_string(Projection p) { return p == Projection::query ? "q" : "v"; }

std::size_t max_rank(std::size_t d, std::size_t d_prime) noexcept { return std::min(d, d_prime) / 2; }

void validate_rank(std::size_t d, std::size_t d_prime, std::size_t rank) {
    if (rank < 1 || rank > max_rank(d, d_prime)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " invalid for " + std::to_string(d) + "x" +
                          std::to_string(d_prime) + " projection (allowed 1.." +
                          std::to_string(max_rank(d, d_prime)) + ")");
    }
}

LoRAAdapter init_lora(std::size_t d, std::size_t d_prime, std::size_t rank, const LoRAOptions& options,
                      Rng& rng) {
    validate_rank(d, d_prime, rank);
    LoRAAdapter out{Matrix(rank, d_prime), Matrix(d, rank), rank,
                    options.scale_by_rank ? options.scale / static_cast<double>(rank) : options.scale};
    std::normal_distribution<double> gauss(0.0, options.init_std);
    for (double& x : out.a_factor.values()) x = gauss(rng);
    return out;
}

Matrix lora_forward(const Matrix& w, const LoRAAdapter& adapter, const Matrix& x) {
    if (w.rows() != adapter.out_dim() || w.cols() != adapter.in_dim()) {
        throw ShapeError("lora_forward: weight " + w.shape_str() + " vs adapter " +
                         std::to_string(adapter.out_dim()) + "x" + std::to_string(adapter.in_dim()));
    }
    Matrix out = matmul(w, x);
    Matrix low = matmul(adapter.b_factor, matmul(adapter.a_factor, x));
    low *= adapter.scale;
    out += low;
    return out;
}

Matrix merge_delta(const LoRAAdapter& adapter) { return matmul(adapter.b_factor, adapter.a_factor); }

void AdapterSet::insert(AdapterKey key, LoRAAdapter adapter) {
    if (adapter.b_factor.cols() != adapter.rank || adapter.a_factor.rows() != adapter.rank) {
        throw ShapeError("adapter factors " + adapter.b_factor.shape_str() + " / " + adapter.a_factor.shape_str() +
                         " inconsistent with rank " + std::to_string(adapter.rank));
    }
    adapters_.insert_or_assign(key, std::move(adapter));
}

const LoRAAdapter& AdapterSet::at(AdapterKey key) const {
    auto it = adapters_.find(key);
    if (it == adapters_.end()) {
        throw ConfigError("no adapter for layer " + std::to_string(key.layer) + " target " + to_string(key.target));
    }
    return it->second;
}

LoRAAdapter& AdapterSet::at(AdapterKey key) {
    return const_cast<LoRAAdapter&>(static_cast<const AdapterSet&>(*this).at(key));
}

const LoRAAdapter* AdapterSet::find(AdapterKey key) const {
    auto it = adapters_.find(key);
    return it == adapters_.end() ? nullptr : &it->second;
}

std::size_t AdapterSet::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [key, ad] : adapters_) n += ad.parameter_count();
    return n;
}

void AdapterSet::validate() const {
    std::size_t rank = 0;
    for (const auto& [key, ad] : adapters_) {
        const AdapterKey other{key.layer, key.target == Projection::query ? Projection::value : Projection::query};
        if (!adapters_.contains(other)) {
            throw ConfigError("layer " + std::to_string(key.layer) + " is missing its " + to_string(other.target) +
                              " adapter");
        }
        if (rank == 0) rank = ad.rank;
        if (ad.rank != rank) throw ConfigError("adapter set mixes ranks");
    }
}

std::vector<AdapterKey> AdapterSet::keys() const {
    std::vector<AdapterKey> out;
    out.reserve(adapters_.size());
    for (const auto& [key, ad] : adapters_) out.push_back(key);
    return out;
}

std::size_t adapter_record_bytes(const LoRAAdapter& adapter) noexcept {
    return kAdapterRecordHeaderBytes + sizeof(float) * adapter.parameter_count();
}

void append_adapter_record(io::ByteWriter& out, AdapterKey key, const LoRAAdapter& adapter) {
    out.u32(key.layer);
    out.u32(static_cast<std::uint32_t>(key.target));
    out.u32(static_cast<std::uint32_t>(adapter.rank));
    out.u32(static_cast<std::uint32_t>(adapter.out_dim()));
    out.u32(static_cast<std::uint32_t>(adapter.in_dim()));
    for (double x : adapter.a_factor.values()) out.f32(static_cast<float>(x));
    for (double x : adapter.b_factor.values()) out.f32(static_cast<float>(x));
}

std::pair<AdapterKey, LoRAAdapter> read_adapter_record(io::ByteReader& in, double scale) {
    AdapterKey key;
    key.layer = in.u32();
    const std::uint32_t target = in.u32();
    if (target > 1) throw IoError("adapter record: bad target " + std::to_string(target));
    key.target = static_cast<Projection>(target);
    const std::size_t rank = in.u32();
    const std::size_t d = in.u32();
    const std::size_t d_prime = in.u32();
    if (rank == 0 || d == 0 || d_prime == 0) throw IoError("adapter record: zero dimension");
    if (in.remaining() < sizeof(float) * rank * (d + d_prime)) throw IoError("adapter record: truncated factors");
    LoRAAdapter ad{Matrix(rank, d_prime), Matrix(d, rank), rank, scale};
    for (double& x : ad.a_factor.values()) x = in.f32();
    for (double& x : ad.b_factor.values()) x = in.f32();
    return {key, std::move(ad)};
}

std::vector<std::uint8_t> serialize_adapters(const AdapterSet& set) {
    io::ByteWriter out;
    out.raw(std::string_view("LORA"));
    out.u32(kSetVersion);
    out.u32(static_cast<std::uint32_t>(set.size()));
    out.f64(set.size() ? set.begin()->second.scale : 1.0);
    out.u32(kBalancedSplit);
    for (const auto& [key, ad] : set) append_adapter_record(out, key, ad);
    return std::move(out).take();
}

AdapterSet deserialize_adapters(std::span<const std::uint8_t> bytes) {
    io::ByteReader in(bytes);
    if (in.raw(4) != "LORA") throw IoError("adapter file: bad magic");
    if (in.u32() != kSetVersion) throw IoError("adapter file: unsupported version");
    const std::uint32_t count = in.u32();
    const double scale = in.f64();
    if (in.u32() != kBalancedSplit) throw IoError("adapter file: unknown singular-value split");
    AdapterSet set;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [key, ad] = read_adapter_record(in, scale);
        set.insert(key, std::move(ad));
    }
    if (!in.done()) throw IoError("adapter file: trailing bytes");
    return set;
}

}  // namespace fedpeft
