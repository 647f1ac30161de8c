#include "genreplay/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "genreplay/errors.hpp"

namespace genreplay {

namespace {

constexpr uint32_t kSha256K[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
    0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
    0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
    0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
    0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
    0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
    0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
    0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
    0xc67178f2};

inline uint32_t rotr(uint32_t x, uint32_t n) { return (x >> n) | (x << (32 - n)); }

}  // namespace

Sha256::Sha256() {
  state_[0] = 0x6a09e667;
  state_[1] = 0xbb67ae85;
  state_[2] = 0x3c6ef372;
  state_[3] = 0xa54ff53a;
  state_[4] = 0x510e527f;
  state_[5] = 0x9b05688c;
  state_[6] = 0x1f83d9ab;
  state_[7] = 0x5be0cd19;
}

void Sha256::process_block(const uint8_t* block) {
  uint32_t w[64];
  for (int i = 0; i < 16; ++i) {
    w[i] = (uint32_t(block[i * 4]) << 24) | (uint32_t(block[i * 4 + 1]) << 16) |
           (uint32_t(block[i * 4 + 2]) << 8) | uint32_t(block[i * 4 + 3]);
  }
  for (int i = 16; i < 64; ++i) {
    uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
    uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
    w[i] = w[i - 16] + s0 + w[i - 7] + s1;
  }
  uint32_t a = state_[0], b = state_[1], c = state_[2], d = state_[3];
  uint32_t e = state_[4], f = state_[5], g = state_[6], h = state_[7];
  for (int i = 0; i < 64; ++i) {
    uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
    uint32_t ch = (e & f) ^ (~e & g);
    uint32_t t1 = h + s1 + ch + kSha256K[i] + w[i];
    uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
    uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
    uint32_t t2 = s0 + maj;
    h = g;
    g = f;
    f = e;
    e = d + t1;
    d = c;
    c = b;
    b = a;
    a = t1 + t2;
  }
  state_[0] += a;
  state_[1] += b;
  state_[2] += c;
  state_[3] += d;
  state_[4] += e;
  state_[5] += f;
  state_[6] += g;
  state_[7] += h;
}

void Sha256::update(const void* data, size_t len) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  bitlen_ += uint64_t(len) * 8;
  while (len > 0) {
    size_t take = std::min(len, sizeof(buffer_) - buffer_len_);
    std::memcpy(buffer_ + buffer_len_, p, take);
    buffer_len_ += take;
    p += take;
    len -= take;
    if (buffer_len_ == sizeof(buffer_)) {
      process_block(buffer_);
      buffer_len_ = 0;
    }
  }
}

std::string Sha256::hex_digest() {
  uint64_t bitlen = bitlen_;
  buffer_[buffer_len_++] = 0x80;
  if (buffer_len_ > 56) {
    while (buffer_len_ < 64) buffer_[buffer_len_++] = 0;
    process_block(buffer_);
    buffer_len_ = 0;
  }
  while (buffer_len_ < 56) buffer_[buffer_len_++] = 0;
  for (int i = 0; i < 8; ++i) buffer_[56 + i] = uint8_t(bitlen >> (56 - i * 8));
  process_block(buffer_);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (uint32_t s : state_) {
    for (int i = 28; i >= 0; i -= 4) out.push_back(hex[(s >> i) & 0xf]);
  }
  return out;
}

std::string sha256_hex(const void* data, size_t len) {
  Sha256 h;
  h.update(data, len);
  return h.hex_digest();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_hex(const std::vector<double>& v) {
  return sha256_hex(v.data(), v.size() * sizeof(double));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void atomic_write_file(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CsvLogger::CsvLogger(std::filesystem::path path, const std::string& header)
    : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) {
    if (!path_.parent_path().empty()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::trunc);
    if (!out) throw IoError("cannot create log: " + path_.string());
    out << header << "\n";
  }
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

void CsvLogger::append_row(const std::vector<double>& values) {
  std::vector<std::string> fields;
  fields.reserve(values.size());
  for (double v : values) fields.push_back(format_double(v));
  append_row(fields);
}

void CsvLogger::append_row(const std::vector<std::string>& fields) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to log: " + path_.string());
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ",";
    out << fields[i];
  }
  out << "\n";
}

namespace {

uint8_t to_byte(double v) {
  double x = (v + 1.0) * 0.5;  // [-1,1] -> [0,1]
  x = std::clamp(x, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(x * 255.0));
}

}  // namespace

void write_image_pnm(const std::filesystem::path& path, const Tensor& chw) {
  if (chw.ndim() != 3) throw DimensionError("write_image_pnm expects CHW, got " + chw.shape_str());
  int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (c != 1 && c != 3) throw DimensionError("write_image_pnm supports 1 or 3 channels");
  std::ostringstream out;
  out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.put(static_cast<char>(to_byte(chw[(ch * h + y) * w + x])));
  atomic_write_file(path, out.str());
}

Tensor read_image_pnm(const std::filesystem::path& path) {
  std::string raw = read_text_file(path);
  std::istringstream in(raw);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw IoError("unsupported image format in " + path.string());
  int w = 0, h = 0, maxval = 0;
  // Skip comment lines between header tokens.
  auto next_int = [&in, &path]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return std::stoi(tok);
    }
    throw IoError("truncated PNM header in " + path.string());
  };
  w = next_int();
  h = next_int();
  maxval = next_int();
  if (maxval != 255) throw IoError("expected 8-bit PNM in " + path.string());
  in.get();  // single whitespace after maxval
  int c = magic == "P5" ? 1 : 3;
  Tensor img({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        int byte = in.get();
        if (byte == EOF) throw IoError("truncated PNM data in " + path.string());
        img[(ch * h + y) * w + x] = byte / 255.0 * 2.0 - 1.0;
      }
  return img;
}

void write_image_grid_ppm(const std::filesystem::path& path, const Tensor& images, int columns) {
  if (images.ndim() != 4) throw DimensionError("image grid expects NCHW");
  int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3) throw DimensionError("image grid supports 1 or 3 channels");
  columns = std::max(1, columns);
  int rows = (n + columns - 1) / columns;
  const int pad = 1;
  int gh = rows * (h + pad) + pad;
  int gw = columns * (w + pad) + pad;
  std::vector<uint8_t> canvas(static_cast<size_t>(gh) * gw * 3, 32);
  for (int i = 0; i < n; ++i) {
    int r = i / columns, col = i % columns;
    int oy = pad + r * (h + pad), ox = pad + col * (w + pad);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          double v = images.at(i, c == 1 ? 0 : ch, y, x);
          canvas[(static_cast<size_t>(oy + y) * gw + (ox + x)) * 3 + ch] = to_byte(v);
        }
  }
  std::ostringstream out;
  out << "P6\n" << gw << " " << gh << "\n255\n";
  out.write(reinterpret_cast<const char*>(canvas.data()), static_cast<std::streamsize>(canvas.size()));
  atomic_write_file(path, out.str());
}

void write_line_plot_svg(const std::filesystem::path& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const std::vector<PlotSeries>& series) {
  const int width = 640, height = 420;
  const int ml = 60, mr = 150, mt = 40, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (double v : s.x) {
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
    for (double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << title << "</text>\n";
  // axes
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
      << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  out << "<text x=\"16\" y=\"" << (mt + height - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << (mt + height - mb) / 2 << ")\">" << y_label << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    double yv = ymin + t * (ymax - ymin) / 4;
    out << "<line x1=\"" << ml - 4 << "\" y1=\"" << py(yv) << "\" x2=\"" << width - mr
        << "\" y2=\"" << py(yv) << "\" stroke=\"#dddddd\"/>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << format_double(std::round(yv * 100) / 100)
        << "</text>\n";
    double xv = xmin + t * (xmax - xmin) / 4;
    out << "<text x=\"" << px(xv) << "\" y=\"" << height - mb + 16
        << "\" text-anchor=\"middle\" font-size=\"11\">"
        << format_double(std::round(xv * 100) / 100) << "</text>\n";
  }
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = palette[si % 8];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i) out << px(s.x[i]) << "," << py(s.y[i]) << " ";
    out << "\"/>\n";
    for (size_t i = 0; i < s.x.size(); ++i)
      out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2.5\" fill=\""
          << color << "\"/>\n";
    int ly = mt + 16 + static_cast<int>(si) * 18;
    out << "<line x1=\"" << width - mr + 10 << "\" y1=\"" << ly - 4 << "\" x2=\""
        << width - mr + 30 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << width - mr + 36 << "\" y=\"" << ly << "\" font-size=\"12\">" << s.label
        << "</text>\n";
  }
  out << "</svg>\n";
  atomic_write_file(path, out.str());
}

}  // namespace genreplay
