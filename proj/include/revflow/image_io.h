#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "revflow/tensor.h"

namespace revflow {

/// True for 1- or 3-channel tensors with more than one pixel.
bool is_image_shape(const Shape& s);

/// Tiles the n images of an (n, c, h, w) tensor row by row into a grid of
/// ceil(sqrt(n)) columns and encodes it as binary PGM (c == 1) or PPM (c == 3).
/// Values are min-max normalized over the whole grid to 0..255; unused cells
/// are 0. Throws ShapeError for other channel counts.
template <typename T>
std::vector<std::uint8_t> encode_image_grid(const Tensor<T>& images);

template <typename T>
void write_image_grid(const std::filesystem::path& path, const Tensor<T>& images);

}  // namespace revflow
