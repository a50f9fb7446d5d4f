#include "v2i/png_io.hpp"

#include <png.h>

#include <cstring>

#include "v2i/errors.hpp"

namespace v2i {

void write_png(const std::filesystem::path& path, const Image8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw IoError(path.string(), "unsupported channel count");
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, image.data.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw IoError(path.string(), "png write failed: " + msg);
    }
}

Image8 read_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw IoError(path.string(), std::string("png open failed: ") + png.message);
    const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
    png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image8 out;
    out.width = static_cast<int>(png.width);
    out.height = static_cast<int>(png.height);
    out.channels = color ? 3 : 1;
    out.data.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, out.data.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw IoError(path.string(), "png read failed: " + msg);
    }
    return out;
}

}  // namespace v2i
