#include "fido/png_io.hpp"

#include <png.h>

#include <stdexcept>

namespace fido::png {

void write(const std::string& path, const Image8& image) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  info.width = png_uint_32(image.width);
  info.height = png_uint_32(image.height);
  info.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (image.pixels.size() != std::size_t(image.width) * std::size_t(image.height) * std::size_t(image.channels)) {
    throw std::invalid_argument("png::write: pixel buffer size mismatch");
  }
  if (!png_image_write_to_file(&info, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    const std::string msg = info.message;
    png_image_free(&info);
    throw std::runtime_error("cannot write PNG " + path + ": " + msg);
  }
}

Image8 read(const std::string& path) {
  png_image info{};
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&info, path.c_str())) {
    throw FormatError("cannot read PNG " + path + ": " + info.message);
  }
  Image8 img;
  const bool color = (info.format & PNG_FORMAT_FLAG_COLOR) != 0;
  info.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  img.width = int(info.width);
  img.height = int(info.height);
  img.channels = color ? 3 : 1;
  img.pixels.resize(PNG_IMAGE_SIZE(info));
  if (!png_image_finish_read(&info, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = info.message;
    png_image_free(&info);
    throw FormatError("cannot decode PNG " + path + ": " + msg);
  }
  return img;
}

}  // namespace fido::png
