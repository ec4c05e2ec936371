#include <png.h>

#include <cstring>
#include <vector>

#include "cli/common.hpp"

namespace bsift::cli {

TriggerSpec load_png_trigger(const fs::path& path, const ImageShape& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw FormatError(path.filename().string(), png.message);
  }
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (image.channels != 1 && image.channels != 3) {
    png_image_free(&png);
    throw InvalidArgument("PNG triggers need 1- or 3-channel images");
  }
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    throw FormatError(path.filename().string(), png.message);
  }
  const std::size_t h = png.height, w = png.width, c = image.channels;
  detail::require(h <= image.height && w <= image.width,
                  "PNG trigger " + std::to_string(w) + "x" + std::to_string(h) + " larger than image");
  TriggerSpec t;
  t.pattern = Image({c, h, w});
  // interleaved HWC bytes to planar CHW floats
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at(ch, y, x) = decode_pixel(buf[(y * w + x) * c + ch]);
    }
  }
  t.placement = {PlacementKind::Patch, image.height - h, image.width - w};
  t.blend_alpha = 0.0;
  return t;
}

}  // namespace bsift::cli
