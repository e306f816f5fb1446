#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "revflow/flow.h"
#include "revflow/tensor.h"
#include "revflow/train.h"

namespace revflow {

// .nfc checkpoint, integers little-endian:
//   bytes 0-3   "NFC1"
//   u64         header length H
//   H bytes     UTF-8 JSON header (architecture, dtype, optimizer, seed)
//   u64         entry count E
//   E entries   u32 name length, name bytes, u64 blob length, NFT1 blob
// Entry names are the model's named_parameters() names.

struct CheckpointInfo {
  DType dtype = DType::F32;
  FlowConfig architecture;
  bool actnorm_initialized = false;
  AdamConfig optimizer;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string dataset;
};

template <typename T>
struct LoadedCheckpoint {
  CheckpointInfo info;
  FlowModel<T> model;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(FlowModel<T>& model, const CheckpointInfo& info);

/// Parses only the magic and JSON header. Throws FormatError.
CheckpointInfo decode_checkpoint_info(std::span<const std::uint8_t> bytes);

/// Rebuilds the model and restores every parameter. The stored dtype must be
/// T. Throws FormatError on any malformed, missing or unexpected entry.
template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, FlowModel<T>& model,
                     const CheckpointInfo& info);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace revflow
