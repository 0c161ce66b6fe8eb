#include "octet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace octet {

torch::Tensor to_tensor(const Image& img) {
  auto t = torch::empty({3, img.height, img.width}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), img.data.data(), img.data.size() * sizeof(float));
  return t;
}

Image from_tensor(const torch::Tensor& t_in) {
  auto t = t_in.detach();
  if (t.dim() == 4) {
    if (t.size(0) != 1) throw std::invalid_argument("from_tensor: batch of size != 1");
    t = t[0];
  }
  if (t.dim() != 3 || t.size(0) != 3) throw std::invalid_argument("from_tensor: expected [3, H, W]");
  t = t.to(torch::kFloat32).clamp(0.0, 1.0).contiguous();
  Image img(static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
  std::memcpy(img.data.data(), t.data_ptr<float>(), img.data.size() * sizeof(float));
  return img;
}

torch::Tensor stack_images(const std::vector<Image>& images) {
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& im : images) ts.push_back(to_tensor(im));
  return torch::stack(ts);
}

namespace {

struct PngWriteBuffer {
  std::vector<uint8_t>* out;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngWriteBuffer*>(png_get_io_ptr(png));
  buf->out->insert(buf->out->end(), data, data + len);
}

void png_flush_cb(png_structp) {}

struct PngReadBuffer {
  const std::vector<uint8_t>* in;
  size_t pos;
};

void png_read_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + len > buf->in->size()) png_error(png, "truncated PNG stream");
  std::memcpy(data, buf->in->data() + buf->pos, len);
  buf->pos += len;
}

std::vector<uint8_t> encode_rows(const std::vector<uint8_t>& pixels, int height, int width, int channels) {
  std::vector<uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed");
  }
  PngWriteBuffer buf{&out};
  png_set_write_fn(png, &buf, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

std::vector<uint8_t> encode_png(const Image& img) {
  std::vector<uint8_t> rgb(static_cast<size_t>(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        rgb[(static_cast<size_t>(y) * img.width + x) * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  return encode_rows(rgb, img.height, img.width, 3);
}

std::vector<uint8_t> encode_png_gray(const std::vector<uint8_t>& pixels, int height, int width) {
  if (pixels.size() != static_cast<size_t>(height) * width) throw std::invalid_argument("encode_png_gray: size mismatch");
  return encode_rows(pixels, height, width, 1);
}

Image decode_png(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw std::invalid_argument("not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::invalid_argument("malformed PNG stream");
  }
  PngReadBuffer buf{&bytes, 0};
  png_set_read_fn(png, &buf, png_read_cb);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<uint8_t> raw(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rows[y][x * 3 + c]) / 255.0f;
  return img;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

Image make_grid(const torch::Tensor& batch_in, int cols) {
  auto batch = batch_in.detach().to(torch::kFloat32).clamp(0.0, 1.0).contiguous();
  const int n = static_cast<int>(batch.size(0));
  const int h = static_cast<int>(batch.size(2));
  const int w = static_cast<int>(batch.size(3));
  cols = std::max(1, std::min(cols, n));
  const int rows = (n + cols - 1) / cols;
  const int pad = 2;
  Image grid(rows * (h + pad) + pad, cols * (w + pad) + pad);
  std::fill(grid.data.begin(), grid.data.end(), 1.0f);
  auto acc = batch.accessor<float, 4>();
  for (int i = 0; i < n; ++i) {
    const int oy = pad + (i / cols) * (h + pad);
    const int ox = pad + (i % cols) * (w + pad);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) grid.at(c, oy + y, ox + x) = acc[i][c][y][x];
  }
  return grid;
}

}  // namespace octet
