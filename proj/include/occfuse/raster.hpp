#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "occfuse/common.hpp"

namespace occfuse {

// Row-major H x W x channels image. Files are raw little-endian arrays with no
// header; dimensions come from the dataset manifest.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, int channels = 1, T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 1) throw ValidationError("invalid raster dimensions");
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  T& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  const T& at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  // Pixel p = y * width + x.
  T& operator[](std::size_t p) { return data_[p * channels_]; }
  const T& operator[](std::size_t p) const { return data_[p * channels_]; }
  T& channel(std::size_t p, int c) { return data_[p * channels_ + c]; }
  const T& channel(std::size_t p, int c) const { return data_[p * channels_ + c]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(int w, int h) const { return width_ == w && height_ == h; }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.channels_ == b.channels_ && a.data_ == b.data_;
  }

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

template <typename T>
void write_raster(const std::filesystem::path& path, const Raster<T>& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  write_le_array(out, r.data());
  if (!out) throw LoadError("write failed for " + path.string());
}

template <typename T>
Raster<T> read_raster(const std::filesystem::path& path, int width, int height, int channels = 1) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw LoadError("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  Raster<T> r(width, height, channels);
  const std::size_t expected = r.data().size() * sizeof(T);
  if (size != expected) {
    throw LoadError(path.string() + ": expected " + std::to_string(expected) + " bytes for " +
                    std::to_string(width) + "x" + std::to_string(height) + "x" + std::to_string(channels) +
                    ", found " + std::to_string(size));
  }
  in.seekg(0);
  read_le_array(in, r.data());
  return r;
}

}  // namespace occfuse
