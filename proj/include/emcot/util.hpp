#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace emcot {

// Single RNG type used everywhere; seeds are always explicit.
using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

// Derive an independent stream from (seed, stream-id tag).
uint64_t derive_seed(uint64_t seed, std::string_view tag);

// FNV-1a, used for config hashes and artifact stamps.
uint64_t fnv1a(const void* data, size_t len);
uint64_t fnv1a(std::string_view s);
std::string hash_hex(uint64_t h);

std::string base64_encode(const std::vector<uint8_t>& data);
std::vector<uint8_t> base64_decode(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

}  // namespace emcot
