#include "revflow/image_io.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "revflow/errors.h"
#include "revflow/nft_io.h"

namespace revflow {

bool is_image_shape(const Shape& s) { return (s.c == 1 || s.c == 3) && s.h * s.w > 1; }

template <typename T>
std::vector<std::uint8_t> encode_image_grid(const Tensor<T>& images) {
  const Shape& s = images.shape();
  if (images.empty() || (s.c != 1 && s.c != 3)) {
    throw ShapeError("image grid needs 1 or 3 channels, got " + to_string(s));
  }
  std::size_t cols = 1;
  while (cols * cols < s.n) ++cols;
  const std::size_t rows = (s.n + cols - 1) / cols;
  const std::size_t width = cols * s.w;
  const std::size_t height = rows * s.h;

  const auto [lo_it, hi_it] = std::minmax_element(images.values().begin(), images.values().end());
  const double lo = static_cast<double>(*lo_it);
  const double range = static_cast<double>(*hi_it) - lo;

  const std::string header = std::string(s.c == 1 ? "P5" : "P6") + "\n" + std::to_string(width) +
                             " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const std::size_t pixels_at = out.size();
  out.resize(pixels_at + width * height * s.c, 0);
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t y0 = (n / cols) * s.h;
    const std::size_t x0 = (n % cols) * s.w;
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < s.h; ++y) {
        for (std::size_t x = 0; x < s.w; ++x) {
          const double v = range > 0.0 ? (static_cast<double>(images(n, c, y, x)) - lo) / range : 0.0;
          const std::size_t at = pixels_at + ((y0 + y) * width + (x0 + x)) * s.c + c;
          out[at] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
  }
  return out;
}

template <typename T>
void write_image_grid(const std::filesystem::path& path, const Tensor<T>& images) {
  write_file_bytes(path, encode_image_grid(images));
}

template std::vector<std::uint8_t> encode_image_grid(const Tensor<float>&);
template std::vector<std::uint8_t> encode_image_grid(const Tensor<double>&);
template void write_image_grid(const std::filesystem::path&, const Tensor<float>&);
template void write_image_grid(const std::filesystem::path&, const Tensor<double>&);

}  // namespace revflow
