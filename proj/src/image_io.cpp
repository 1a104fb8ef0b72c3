#include "styleprobe/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "styleprobe/util.hpp"

namespace styleprobe {

namespace {

struct PngWriteBuffer {
  std::vector<std::uint8_t> bytes;
};

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* buffer = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buffer->bytes.insert(buffer->bytes.end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct PngReadBuffer {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset = 0;
};

void png_read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* buffer = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buffer->offset + length > buffer->bytes->size()) {
    png_error(png, "read past end of buffer");
  }
  std::memcpy(data, buffer->bytes->data() + buffer->offset, length);
  buffer->offset += length;
}

[[noreturn]] void png_error_throw(png_structp, png_const_charp message) {
  throw Error(ErrorCode::kDecode, std::string("png: ") + message);
}

void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) {
    throw Error(ErrorCode::kEncode, "png bit depth must be 8 or 16");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            png_error_throw, png_warning_ignore);
  if (!png) throw Error(ErrorCode::kEncode, "png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  PngWriteBuffer buffer;
  const std::size_t H = image.height();
  const std::size_t W = image.width();
  const std::size_t C = image.channels();
  const std::size_t bytes_per_sample = bit_depth / 8;
  std::vector<std::uint8_t> rows(H * W * C * bytes_per_sample);
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  auto data = image.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto q = static_cast<std::uint32_t>(
        std::lround(std::clamp(data[i], 0.0, 1.0) * max_value));
    if (bit_depth == 8) {
      rows[i] = static_cast<std::uint8_t>(q);
    } else {
      rows[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
      rows[2 * i + 1] = static_cast<std::uint8_t>(q & 0xFF);
    }
  }
  try {
    png_set_write_fn(png, &buffer, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H),
                 bit_depth, C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = W * C * bytes_per_sample;
    for (std::size_t y = 0; y < H; ++y) png_write_row(png, rows.data() + y * stride);
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return std::move(buffer.bytes);
}

ImageTensor decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw Error(ErrorCode::kDecode, "png: bad signature");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           png_error_throw, png_warning_ignore);
  if (!png) throw Error(ErrorCode::kDecode, "png: cannot create reader");
  png_infop info = png_create_info_struct(png);
  PngReadBuffer buffer{&bytes, 0};
  std::vector<double> values;
  std::size_t H = 0, W = 0, C = 0;
  try {
    png_set_read_fn(png, &buffer, png_read_from_vector);
    png_read_info(png, info);
    const int color_type = png_get_color_type(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    H = png_get_image_height(png, info);
    W = png_get_image_width(png, info);
    C = png_get_channels(png, info);
    bit_depth = png_get_bit_depth(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> row(stride);
    values.reserve(H * W * C);
    const double max_value = bit_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t y = 0; y < H; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (std::size_t i = 0; i < W * C; ++i) {
        std::uint32_t q = bit_depth == 16 ? (row[2 * i] << 8) | row[2 * i + 1] : row[i];
        values.push_back(q / max_value);
      }
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return ImageTensor({H, W, C}, std::move(values));
}

void write_png(const std::filesystem::path& path, const ImageTensor& image, int bit_depth) {
  auto bytes = encode_png(image, bit_depth);
  write_text_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                         bytes.size()));
}

ImageTensor read_png(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  return decode_png(std::vector<std::uint8_t>(text.begin(), text.end()));
}

namespace {

ImageTensor as_rgb(const ImageTensor& image) {
  if (image.channels() == 3) return image;
  std::vector<double> rgb;
  rgb.reserve(image.height() * image.width() * 3);
  for (double v : image.data()) rgb.insert(rgb.end(), {v, v, v});
  return ImageTensor({image.height(), image.width(), 3}, std::move(rgb));
}

}  // namespace

ImageTensor hconcat(const std::vector<ImageTensor>& images, std::size_t gap) {
  if (images.empty()) throw Error(ErrorCode::kValidation, "nothing to concatenate");
  const std::size_t H = images.front().height();
  std::size_t W = 0;
  for (const auto& im : images) {
    if (im.height() != H) {
      throw Error(ErrorCode::kShapeMismatch, "hconcat needs equal heights");
    }
    W += im.width();
  }
  W += gap * (images.size() - 1);
  ImageTensor out = ImageTensor::filled({H, W, 3}, 1.0);
  std::size_t x0 = 0;
  for (const auto& im : images) {
    ImageTensor rgb = as_rgb(im);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < rgb.width(); ++x) {
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x0 + x, c) = rgb.at(y, x, c);
      }
    }
    x0 += rgb.width() + gap;
  }
  return out;
}

ImageTensor vconcat(const std::vector<ImageTensor>& images, std::size_t gap) {
  if (images.empty()) throw Error(ErrorCode::kValidation, "nothing to concatenate");
  const std::size_t W = images.front().width();
  std::size_t H = 0;
  for (const auto& im : images) {
    if (im.width() != W) throw Error(ErrorCode::kShapeMismatch, "vconcat needs equal widths");
    H += im.height();
  }
  H += gap * (images.size() - 1);
  ImageTensor out = ImageTensor::filled({H, W, 3}, 1.0);
  std::size_t y0 = 0;
  for (const auto& im : images) {
    ImageTensor rgb = as_rgb(im);
    for (std::size_t y = 0; y < rgb.height(); ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        for (std::size_t c = 0; c < 3; ++c) out.at(y0 + y, x, c) = rgb.at(y, x, c);
      }
    }
    y0 += rgb.height() + gap;
  }
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

// Source taps for one output coordinate, half-pixel centers.
Tap bilinear_tap(std::size_t out_index, std::size_t out_size, std::size_t in_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  double src = (static_cast<double>(out_index) + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(src));
  const std::size_t i1 = std::min(i0 + 1, in_size - 1);
  const double frac = src - static_cast<double>(i0);
  return {i0, i1, 1.0 - frac, frac};
}

}  // namespace

ImageTensor resize_bilinear(const ImageTensor& image, std::size_t height, std::size_t width) {
  if (height == image.height() && width == image.width()) return image;
  const std::size_t C = image.channels();
  ImageTensor out = ImageTensor::filled({height, width, C}, 0.0);
  for (std::size_t y = 0; y < height; ++y) {
    const Tap ty = bilinear_tap(y, height, image.height());
    for (std::size_t x = 0; x < width; ++x) {
      const Tap tx = bilinear_tap(x, width, image.width());
      for (std::size_t c = 0; c < C; ++c) {
        out.at(y, x, c) = ty.w0 * (tx.w0 * image.at(ty.i0, tx.i0, c) +
                                   tx.w1 * image.at(ty.i0, tx.i1, c)) +
                          ty.w1 * (tx.w0 * image.at(ty.i1, tx.i0, c) +
                                   tx.w1 * image.at(ty.i1, tx.i1, c));
      }
    }
  }
  return out;
}

ImageTensor resize_bilinear_adjoint(const ImageTensor& gradient, const ImageShape& source) {
  if (gradient.channels() != source.channels) {
    throw Error(ErrorCode::kShapeMismatch, "adjoint resize: channel count differs");
  }
  if (gradient.height() == source.height && gradient.width() == source.width) {
    return gradient;
  }
  const std::size_t C = source.channels;
  ImageTensor out = ImageTensor::filled(source, 0.0);
  for (std::size_t y = 0; y < gradient.height(); ++y) {
    const Tap ty = bilinear_tap(y, gradient.height(), source.height);
    for (std::size_t x = 0; x < gradient.width(); ++x) {
      const Tap tx = bilinear_tap(x, gradient.width(), source.width);
      for (std::size_t c = 0; c < C; ++c) {
        const double g = gradient.at(y, x, c);
        out.at(ty.i0, tx.i0, c) += g * ty.w0 * tx.w0;
        out.at(ty.i0, tx.i1, c) += g * ty.w0 * tx.w1;
        out.at(ty.i1, tx.i0, c) += g * ty.w1 * tx.w0;
        out.at(ty.i1, tx.i1, c) += g * ty.w1 * tx.w1;
      }
    }
  }
  return out;
}

}  // namespace styleprobe
