#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "revflow/tensor.h"

namespace revflow {

// NFT1 tensor blob, all integers little-endian:
//   bytes 0-3   "NFT1"
//   byte  4     dtype code (0 = f32, 1 = f64)
//   byte  5     ndim (always 4)
//   bytes 6-37  dims n, c, h, w as u64
//   then        n*c*h*w raw little-endian elements
inline constexpr std::size_t kNftHeaderBytes = 38;

template <typename T>
std::vector<std::uint8_t> encode_nft(const Tensor<T>& t);

/// Decodes a blob whose dtype must match T. `base_offset` is added to any
/// offset reported in a FormatError so callers can point into an enclosing file.
template <typename T>
Tensor<T> decode_nft(std::span<const std::uint8_t> bytes, std::uint64_t base_offset = 0);

/// Reads only the dtype code of a blob.
DType peek_nft_dtype(std::span<const std::uint8_t> bytes, std::uint64_t base_offset = 0);

template <typename T>
void write_nft(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> read_nft(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

namespace le {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
std::uint32_t get_u32(const std::uint8_t* p);
std::uint64_t get_u64(const std::uint8_t* p);
}  // namespace le

}  // namespace revflow
