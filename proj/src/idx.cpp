#include "bruno/idx.hpp"

#include <cstring>
#include <fstream>

#include "bruno/errors.hpp"

namespace bruno {

namespace {
std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}
}  // namespace

IdxArray parse_idx(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw TruncatedFile("idx: file shorter than magic");
  if (bytes[0] != 0 || bytes[1] != 0)
    throw BadMagic("idx: first two magic bytes must be zero");
  if (bytes[2] != 0x08)
    throw BadMagic("idx: unsupported dtype byte 0x" + std::to_string(bytes[2]) +
                   " (only 0x08 unsigned byte)");
  const std::size_t ndim = bytes[3];
  if (ndim == 0 || ndim > 4) throw BadMagic("idx: unsupported dimension count");
  if (bytes.size() < 4 + 4 * ndim) throw TruncatedFile("idx: truncated dimension list");
  IdxArray arr;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::size_t d = read_be32(bytes.data() + 4 + 4 * i);
    arr.dims.push_back(d);
    if (d != 0 && total > bytes.size() / d)
      throw TruncatedFile("idx: dimensions exceed the file size");
    total *= d;
  }
  const std::size_t offset = 4 + 4 * ndim;
  if (bytes.size() < offset + total)
    throw TruncatedFile("idx: payload has " + std::to_string(bytes.size() - offset) +
                        " bytes, header promises " + std::to_string(total));
  arr.data.assign(bytes.begin() + long(offset), bytes.begin() + long(offset + total));
  return arr;
}

IdxArray load_idx_array(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open idx file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

namespace {

// rotate a square side x side image 90 degrees clockwise
void rotate90(const double* src, double* dst, long side) {
  for (long r = 0; r < side; ++r)
    for (long c = 0; c < side; ++c) dst[c * side + (side - 1 - r)] = src[r * side + c];
}

}  // namespace

Dataset idx_to_dataset(const IdxArray& images, const IdxArray& labels,
                       bool rotate_augment) {
  if (labels.dims.size() != 1)
    throw DimensionMismatch("idx labels must be one-dimensional");
  if (images.count() != labels.count())
    throw DimensionMismatch("idx: " + std::to_string(images.count()) + " images vs " +
                            std::to_string(labels.count()) + " labels");
  const long n = long(images.count());
  const long d = long(images.item_size());
  if (d == 0) throw DimensionMismatch("idx images have empty items");

  int max_label = 0;
  for (std::uint8_t l : labels.data) max_label = std::max<int>(max_label, l);
  const int base_classes = max_label + 1;

  long side = 0;
  if (rotate_augment) {
    side = long(std::sqrt(double(d)));
    if (side * side != d)
      throw DimensionMismatch("rotation augmentation requires square images");
  }
  const int copies = rotate_augment ? 4 : 1;

  Dataset ds;
  ds.items.resize(d, n * copies);
  ds.labels.resize(std::size_t(n) * std::size_t(copies));
  std::vector<double> buf(static_cast<std::size_t>(d));
  std::vector<double> buf2(static_cast<std::size_t>(d));
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < d; ++j)
      buf[std::size_t(j)] = double(images.data[std::size_t(i) * std::size_t(d) + std::size_t(j)]);
    for (int r = 0; r < copies; ++r) {
      const long col = i * copies + r;
      for (long j = 0; j < d; ++j) ds.items(j, col) = buf[std::size_t(j)];
      // each rotation becomes a distinct class, as in 90-degree augmentation
      ds.labels[std::size_t(col)] = int(labels.data[std::size_t(i)]) + r * base_classes;
      if (r + 1 < copies) {
        rotate90(buf.data(), buf2.data(), side);
        std::swap(buf, buf2);
      }
    }
  }
  ds.rebuild_index();
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 bool rotate_augment) {
  return idx_to_dataset(load_idx_array(images_path), load_idx_array(labels_path),
                        rotate_augment);
}

}  // namespace bruno
