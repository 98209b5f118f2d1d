#include "fumnet/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#ifdef FUMNET_HAVE_JPEG
#include <jpeglib.h>

#include <csetjmp>
#endif

namespace fumnet {

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string netpbm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Image read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  const std::string magic = netpbm_token(in);
  if (magic != "P5" && magic != "P6") throw DataError("unsupported netpbm variant in " + path.string());
  Index w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(netpbm_token(in));
    h = std::stol(netpbm_token(in));
    maxval = std::stol(netpbm_token(in));
  } catch (const std::exception&) {
    throw DataError("malformed netpbm header in " + path.string());
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw DataError("invalid netpbm header in " + path.string());
  const Index channels = magic == "P6" ? 3 : 1;
  const Index bytes_per = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * channels * bytes_per));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("truncated image data in " + path.string());
  Image img(channels, h, w);
  const float scale = 1.0f / static_cast<float>(maxval);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < channels; ++c) {
        const std::size_t i = static_cast<std::size_t>(((y * w + x) * channels + c) * bytes_per);
        const unsigned v = bytes_per == 2 ? (unsigned{raw[i]} << 8) | raw[i + 1] : raw[i];
        img.at(c, y, x) = static_cast<float>(v) * scale;
      }
    }
  }
  return img;
}

#ifdef FUMNET_HAVE_JPEG
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

Image read_jpeg(const std::filesystem::path& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw DataError("cannot open image " + path.string());
  jpeg_decompress_struct cinfo;
  JpegError err;
  // Declared before setjmp so a decode error unwinds them normally.
  Image img;
  std::vector<unsigned char> row;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = [](j_common_ptr info) { std::longjmp(reinterpret_cast<JpegError*>(info->err)->jump, 1); };
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw DataError("cannot decode JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const Index w = cinfo.output_width, h = cinfo.output_height, channels = cinfo.output_components;
  img = Image(channels, h, w);
  row.resize(static_cast<std::size_t>(w * channels));
  while (cinfo.output_scanline < cinfo.output_height) {
    const Index y = cinfo.output_scanline;
    JSAMPROW ptr = row.data();
    jpeg_read_scanlines(&cinfo, &ptr, 1);
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<float>(row[static_cast<std::size_t>(x * channels + c)]) / 255.0f;
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return img;
}
#endif

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_netpbm(path);
  if (ext == ".jpg" || ext == ".jpeg") {
#ifdef FUMNET_HAVE_JPEG
    return read_jpeg(path);
#else
    throw DataError("JPEG support not compiled in; cannot read " + path.string());
#endif
  }
  throw DataError("unrecognized image format: " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw DataError("write_ppm: need 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(image.size()));
  std::size_t i = 0;
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x)
      for (Index c = 0; c < image.channels; ++c)
        bytes[i++] = static_cast<unsigned char>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace fumnet
