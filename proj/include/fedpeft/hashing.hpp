// Copyright (c) 2026 The fedpeft Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace fedpeft {

// Streaming SHA-256 over OpenSSL's EVP interface.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::span<const std::uint8_t> data);
    void update(std::string_view data);
    void update_f64(double v);
    /// Lowercase hex digest. The hasher cannot be reused afterwards.
    std::string hex_digest();

private:
    void* ctx_;
};

std::string sha256_hex(std::string_view data);
std::string sha256_hex(std::span<const std::uint8_t> data);

/// Git blob object id (`git hash-object`) of the given content.
std::string git_blob_hash(std::span<const std::uint8_t> content);

/// Git blob hash of the running executable, or "unknown" if it cannot be read.
std::string executable_hash();

}  // namespace fedpeft
