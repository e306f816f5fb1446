#include "revflow/nft_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "revflow/errors.h"

namespace revflow {

static_assert(std::endian::native == std::endian::little,
              "NFT1 payloads are copied verbatim; big-endian hosts need byte swapping");

namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace le

namespace {

constexpr char kMagic[4] = {'N', 'F', 'T', '1'};

void check_header(std::span<const std::uint8_t> bytes, std::uint64_t base) {
  if (bytes.size() < kNftHeaderBytes) {
    throw FormatError("NFT1 blob truncated: " + std::to_string(bytes.size()) +
                          " bytes, header needs " + std::to_string(kNftHeaderBytes),
                      base + bytes.size());
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kMagic[i])) {
      throw FormatError("bad NFT1 magic", base + i);
    }
  }
  if (bytes[4] > 1) {
    throw FormatError("unknown NFT1 dtype code " + std::to_string(bytes[4]), base + 4);
  }
  if (bytes[5] != 4) {
    throw FormatError("NFT1 ndim must be 4, got " + std::to_string(bytes[5]), base + 5);
  }
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_nft(const Tensor<T>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kNftHeaderBytes + t.bytes());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  out.push_back(4);
  const Shape& s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) le::put_u64(out, d);
  const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), raw, raw + t.bytes());
  return out;
}

DType peek_nft_dtype(std::span<const std::uint8_t> bytes, std::uint64_t base_offset) {
  check_header(bytes, base_offset);
  return static_cast<DType>(bytes[4]);
}

template <typename T>
Tensor<T> decode_nft(std::span<const std::uint8_t> bytes, std::uint64_t base_offset) {
  check_header(bytes, base_offset);
  if (static_cast<DType>(bytes[4]) != dtype_of<T>()) {
    throw FormatError(std::string("NFT1 dtype is ") + dtype_name(static_cast<DType>(bytes[4])) +
                          ", expected " + dtype_name(dtype_of<T>()),
                      base_offset + 4);
  }
  Shape s{le::get_u64(bytes.data() + 6), le::get_u64(bytes.data() + 14),
          le::get_u64(bytes.data() + 22), le::get_u64(bytes.data() + 30)};
  std::size_t count = 0;
  try {
    count = s.numel();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid NFT1 dims: ") + e.what(), base_offset + 6);
  }
  const std::size_t payload = bytes.size() - kNftHeaderBytes;
  if (payload / sizeof(T) < count || payload != count * sizeof(T)) {
    throw FormatError("NFT1 payload is " + std::to_string(payload) + " bytes, dims " +
                          to_string(s) + " need " + std::to_string(count * sizeof(T)),
                      base_offset + kNftHeaderBytes);
  }
  Tensor<T> t(s);
  std::memcpy(t.data(), bytes.data() + kNftHeaderBytes, payload);
  return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

template <typename T>
void write_nft(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file_bytes(path, encode_nft(t));
}

template <typename T>
Tensor<T> read_nft(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_nft<T>(bytes);
}

template std::vector<std::uint8_t> encode_nft(const Tensor<float>&);
template std::vector<std::uint8_t> encode_nft(const Tensor<double>&);
template Tensor<float> decode_nft(std::span<const std::uint8_t>, std::uint64_t);
template Tensor<double> decode_nft(std::span<const std::uint8_t>, std::uint64_t);
template void write_nft(const std::filesystem::path&, const Tensor<float>&);
template void write_nft(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_nft(const std::filesystem::path&);
template Tensor<double> read_nft(const std::filesystem::path&);

}  // namespace revflow
