#include "bruno/image.hpp"

#include <cmath>
#include <fstream>

#include "bruno/errors.hpp"

namespace bruno {

namespace {
std::uint8_t to_pixel(double x) {
  const double p = std::floor(x * 256.0);
  if (p < 0.0) return 0;
  if (p > 255.0) return 255;
  return std::uint8_t(p);
}
}  // namespace

void emit_grid(const Eigen::MatrixXd& samples, long rows, long cols,
               const std::string& path, int channels) {
  if (channels != 1 && channels != 3)
    throw ShapeMismatch("emit_grid: channels must be 1 or 3");
  if (rows * cols != samples.cols())
    throw ShapeMismatch("emit_grid: rows*cols = " + std::to_string(rows * cols) +
                        " but sample count is " + std::to_string(samples.cols()));
  const long d = samples.rows();
  if (d % channels != 0) throw ShapeMismatch("emit_grid: dimension not divisible by channels");
  const long plane = d / channels;
  const long side = long(std::llround(std::sqrt(double(plane))));
  if (side * side != plane)
    throw ShapeMismatch("emit_grid: sample dimension " + std::to_string(plane) +
                        " is not a square image");

  const long W = cols * side, H = rows * side;
  std::vector<std::uint8_t> img(std::size_t(W) * std::size_t(H) * std::size_t(channels), 0);
  for (long s = 0; s < samples.cols(); ++s) {
    const long tr = s / cols, tc = s % cols;
    for (long y = 0; y < side; ++y)
      for (long x = 0; x < side; ++x)
        for (int c = 0; c < channels; ++c) {
          const double v = samples(c * plane + y * side + x, s);
          const std::size_t px =
              (std::size_t(tr * side + y) * std::size_t(W) + std::size_t(tc * side + x)) *
                  std::size_t(channels) +
              std::size_t(c);
          img[px] = to_pixel(v);
        }
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image file: " + path);
  out << (channels == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), long(img.size()));
}

RawImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image file: " + path);
  std::string magic;
  in >> magic;
  RawImage img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw BadMagic("pnm: unsupported magic " + magic);
  long maxval = 0;
  in >> img.width >> img.height >> maxval;
  if (!in || img.width <= 0 || img.height <= 0 || maxval != 255)
    throw CorruptFile("pnm: bad header");
  in.get();  // single whitespace after maxval
  img.pixels.resize(std::size_t(img.width) * std::size_t(img.height) *
                    std::size_t(img.channels));
  in.read(reinterpret_cast<char*>(img.pixels.data()), long(img.pixels.size()));
  if (std::size_t(in.gcount()) != img.pixels.size())
    throw TruncatedFile("pnm: truncated pixel data");
  return img;
}

}  // namespace bruno
