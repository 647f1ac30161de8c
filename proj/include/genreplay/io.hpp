#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "genreplay/tensor.hpp"

namespace genreplay {

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(const std::vector<double>& v);

/// Streaming SHA-256, used to digest parameter sets without concatenating.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update(const std::vector<double>& v) { update(v.data(), v.size() * sizeof(double)); }
  std::string hex_digest();  // finalizes; object must not be reused afterwards

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t bitlen_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

std::string read_text_file(const std::filesystem::path& path);

/// Writes to a temp file in the same directory, then renames into place.
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);

/// Appends one CSV row to a line-oriented log, creating the file (with the
/// given header) on first use.
class CsvLogger {
 public:
  CsvLogger() = default;
  CsvLogger(std::filesystem::path path, const std::string& header);
  void append_row(const std::vector<double>& values);
  void append_row(const std::vector<std::string>& fields);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Writes an image batch (NCHW, values in [-1,1]) as a tiled PPM grid.
void write_image_grid_ppm(const std::filesystem::path& path, const Tensor& images, int columns);

/// Reads/writes a single image (CHW, 1 or 3 channels, values in [-1,1]) as
/// binary PGM/PPM.
void write_image_pnm(const std::filesystem::path& path, const Tensor& chw);
Tensor read_image_pnm(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Emits a self-contained SVG line plot.
void write_line_plot_svg(const std::filesystem::path& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<PlotSeries>& series);

std::string format_double(double v);

}  // namespace genreplay
