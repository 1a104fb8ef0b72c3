#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "styleprobe/core.hpp"

namespace styleprobe {

// PNG with 8 or 16 bits per sample. 16-bit output is what the pipeline
// archives; 8-bit is used for images sent over the network.
std::vector<std::uint8_t> encode_png(const ImageTensor& image, int bit_depth = 16);
ImageTensor decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const ImageTensor& image,
               int bit_depth = 16);
ImageTensor read_png(const std::filesystem::path& path);

// Places images side by side with a `gap`-pixel white separator. Grayscale
// inputs are replicated to RGB. All inputs must share the same height.
ImageTensor hconcat(const std::vector<ImageTensor>& images, std::size_t gap = 0);
ImageTensor vconcat(const std::vector<ImageTensor>& images, std::size_t gap = 0);

// Bilinear resampling (align_corners = false) and its adjoint, used to adapt
// images and gradients to an external SUT's input size.
ImageTensor resize_bilinear(const ImageTensor& image, std::size_t height, std::size_t width);
ImageTensor resize_bilinear_adjoint(const ImageTensor& gradient, const ImageShape& source);

}  // namespace styleprobe
