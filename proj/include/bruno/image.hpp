#pragma once

// Binary PGM/PPM emission for sample grids, plus a reader for round-trip
// checks. No codec dependencies.

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace bruno {

struct RawImage {
  long width = 0, height = 0;
  int channels = 1;  // 1 = PGM, 3 = PPM
  std::vector<std::uint8_t> pixels;  // row-major, interleaved for channels=3
};

// Lay out samples (columns, values in normalized [0,1) units) as a
// rows x cols grid of square tiles and write a binary PGM (grayscale) or
// PPM (channels=3, planar R|G|B sample layout). Values map to pixels via
// floor(x * 256), clamped to [0, 255].
void emit_grid(const Eigen::MatrixXd& samples, long rows, long cols,
               const std::string& path, int channels = 1);

RawImage read_pnm(const std::string& path);

}  // namespace bruno
