// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "odegan/core/tensor.hpp"

namespace odegan::data {

// 8-bit interleaved RGB, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Decodes an 8-bit PNG; grayscale and alpha variants are promoted/stripped
// to plain RGB. Throws IoError on anything unreadable.
Image load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Image& img);

// v -> v/127.5 - 1, laid out (3, H, W).
template <class S>
core::Tensor<S> image_to_tensor(const Image& img) {
  core::Tensor<S> t({3, img.height, img.width});
  auto& v = t.value();
  std::size_t hw = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        v[c * hw + y * img.width + x] =
            static_cast<S>(img.at(y, x, c)) / S(127.5) - S(1);
  return t;
}

// Inverse map with clamping and round-to-nearest; accepts (3,H,W).
template <class S>
Image tensor_to_image(const core::Tensor<S>& t) {
  if (t.ndim() != 3 || t.dim(0) != 3)
    throw core::ShapeError("tensor_to_image: expected (3,H,W), got " +
                           core::shape_str(t.shape()));
  Image img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.resize(img.height * img.width * 3);
  const auto& v = t.value();
  std::size_t hw = img.height * img.width;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        S s = v[c * hw + y * img.width + x];
        s = std::min(S(1), std::max(S(-1), s));
        double u = (static_cast<double>(s) + 1.0) * 127.5;
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(u));
      }
  return img;
}

template <class S>
core::Tensor<S> load_image(const std::filesystem::path& path) {
  return image_to_tensor<S>(load_png(path));
}

}  // namespace odegan::data
