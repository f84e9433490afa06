#pragma once

// IDX binary ingestion (MNIST-style): big-endian magic, dimension sizes,
// row-major unsigned-byte payload.

#include <cstdint>
#include <string>
#include <vector>

#include "bruno/data.hpp"

namespace bruno {

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t item_size() const {
    std::size_t s = 1;
    for (std::size_t i = 1; i < dims.size(); ++i) s *= dims[i];
    return s;
  }
};

// Parse one IDX file. Throws BadMagic on a malformed header, TruncatedFile
// when the payload is shorter than the dimensions promise.
IdxArray load_idx_array(const std::string& path);
IdxArray parse_idx(const std::vector<std::uint8_t>& bytes);

// Pair an image file with a label file into a Dataset; leading dimensions
// must match. Optionally augment with lossless rotations by multiples of 90
// degrees (requires square images); rotated copies keep their class label.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 bool rotate_augment = false);

Dataset idx_to_dataset(const IdxArray& images, const IdxArray& labels,
                       bool rotate_augment = false);

}  // namespace bruno
