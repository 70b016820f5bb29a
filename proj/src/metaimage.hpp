#pragma once

// MetaImage (.mhd + .raw) container shared by volume, segmentation and DVF I/O.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "jrs/volgrid.hpp"

namespace jrs::meta {

struct Header {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::string element_type;  // MET_FLOAT, MET_UCHAR, ...
  int channels = 1;
  bool msb = false;
  std::filesystem::path data_file;  // resolved; the header itself for LOCAL
  std::size_t local_offset = 0;     // byte offset of a LOCAL payload
};

std::size_t element_size(const std::string& type);  // throws on unknown

Header read_header(const std::filesystem::path& mhd);

// Raw payload bytes in host order. Throws "payload size mismatch" when the
// file does not hold exactly dims * channels elements.
std::vector<unsigned char> read_payload(const Header& h);

// Element values converted to float.
std::vector<float> read_as_float(const Header& h);

void write(const std::filesystem::path& mhd, const Dims3& dims,
           const Vec3& spacing, const Vec3& origin,
           const std::string& element_type, int channels, const void* payload,
           std::size_t bytes);

}  // namespace jrs::meta
