#include "metaimage.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace jrs::meta {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T, std::size_t N>
std::array<T, N> parse_tuple(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  std::array<T, N> out{};
  for (auto& v : out)
    if (!(in >> v)) throw Error("malformed header value for " + key + ": '" + value + "'");
  return out;
}

template <typename T>
void byteswap_inplace(unsigned char* p, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) std::reverse(p + i * sizeof(T), p + (i + 1) * sizeof(T));
}

}  // namespace

std::size_t element_size(const std::string& type) {
  static const std::map<std::string, std::size_t> sizes = {
      {"MET_UCHAR", 1}, {"MET_CHAR", 1},  {"MET_USHORT", 2}, {"MET_SHORT", 2},
      {"MET_UINT", 4},  {"MET_INT", 4},   {"MET_FLOAT", 4},  {"MET_DOUBLE", 8}};
  const auto it = sizes.find(type);
  if (it == sizes.end()) throw Error("unsupported element type " + type);
  return it->second;
}

Header read_header(const fs::path& mhd) {
  std::ifstream in(mhd, std::ios::binary);
  if (!in) throw Error("cannot open " + mhd.string());

  Header h;
  std::map<std::string, std::string> kv;
  std::string line;
  bool saw_data_file = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    kv[key] = value;
    if (key == "ElementDataFile") {
      saw_data_file = true;
      if (value == "LOCAL") h.local_offset = static_cast<std::size_t>(in.tellg());
      break;  // ElementDataFile is always the last header field
    }
  }
  if (!saw_data_file) throw Error(mhd.string() + ": missing ElementDataFile");

  if (kv.count("NDims") && trim(kv["NDims"]) != "3")
    throw Error(mhd.string() + ": only 3D images are supported (NDims = " + kv["NDims"] + ")");
  if (!kv.count("DimSize")) throw Error(mhd.string() + ": missing DimSize");
  const auto dims = parse_tuple<int, 3>("DimSize", kv["DimSize"]);
  h.dims = {dims[0], dims[1], dims[2]};
  if (!h.dims.valid()) throw Error(mhd.string() + ": non-positive DimSize");

  if (kv.count("ElementSpacing")) h.spacing = parse_tuple<double, 3>("ElementSpacing", kv["ElementSpacing"]);
  else if (kv.count("ElementSize")) h.spacing = parse_tuple<double, 3>("ElementSize", kv["ElementSize"]);
  for (double s : h.spacing)
    if (!(s > 0.0)) throw Error(mhd.string() + ": non-positive ElementSpacing");

  for (const char* key : {"Offset", "Origin", "Position"})
    if (kv.count(key)) {
      h.origin = parse_tuple<double, 3>(key, kv[key]);
      break;
    }

  if (!kv.count("ElementType")) throw Error(mhd.string() + ": missing ElementType");
  h.element_type = kv["ElementType"];
  element_size(h.element_type);

  if (kv.count("ElementNumberOfChannels")) h.channels = std::stoi(kv["ElementNumberOfChannels"]);
  if (h.channels < 1) throw Error(mhd.string() + ": invalid ElementNumberOfChannels");

  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"})
    if (kv.count(key)) h.msb = kv[key] == "True" || kv[key] == "true";
  if (kv.count("CompressedData") && (kv["CompressedData"] == "True" || kv["CompressedData"] == "true"))
    throw Error(mhd.string() + ": compressed payloads are not supported");

  if (kv["ElementDataFile"] == "LOCAL") {
    h.data_file = mhd;
  } else {
    fs::path data = kv["ElementDataFile"];
    if (data.is_relative()) data = mhd.parent_path() / data;
    h.data_file = data;
  }
  return h;
}

std::vector<unsigned char> read_payload(const Header& h) {
  const std::size_t esize = element_size(h.element_type);
  const std::size_t expected = h.dims.count() * static_cast<std::size_t>(h.channels) * esize;

  std::ifstream in(h.data_file, std::ios::binary);
  if (!in) throw Error("cannot open payload " + h.data_file.string());

  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg()) - h.local_offset;
  if (size != expected)
    throw Error("payload size mismatch: " + h.data_file.string() + " holds " + std::to_string(size) +
                " bytes, header requires " + std::to_string(expected));
  in.seekg(static_cast<std::streamoff>(h.local_offset));
  std::vector<unsigned char> bytes(expected);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
  if (!in) throw Error("short read on " + h.data_file.string());

  const bool host_big = std::endian::native == std::endian::big;
  if (h.msb != host_big && esize > 1) {
    const std::size_t n = bytes.size() / esize;
    if (esize == 2) byteswap_inplace<std::uint16_t>(bytes.data(), n);
    if (esize == 4) byteswap_inplace<std::uint32_t>(bytes.data(), n);
    if (esize == 8) byteswap_inplace<std::uint64_t>(bytes.data(), n);
  }
  return bytes;
}

std::vector<float> read_as_float(const Header& h) {
  const auto bytes = read_payload(h);
  const std::size_t esize = element_size(h.element_type);
  const std::size_t n = bytes.size() / esize;
  std::vector<float> out(n);
  auto convert = [&](auto tag) {
    using T = decltype(tag);
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
      out[i] = static_cast<float>(v);
    }
  };
  const auto& t = h.element_type;
  if (t == "MET_FLOAT") convert(float{});
  else if (t == "MET_DOUBLE") convert(double{});
  else if (t == "MET_UCHAR") convert(std::uint8_t{});
  else if (t == "MET_CHAR") convert(std::int8_t{});
  else if (t == "MET_SHORT") convert(std::int16_t{});
  else if (t == "MET_USHORT") convert(std::uint16_t{});
  else if (t == "MET_INT") convert(std::int32_t{});
  else if (t == "MET_UINT") convert(std::uint32_t{});
  else throw Error("unsupported element type " + t);
  return out;
}

void write(const fs::path& mhd, const Dims3& dims, const Vec3& spacing, const Vec3& origin,
           const std::string& element_type, int channels, const void* payload, std::size_t bytes) {
  if (!dims.valid()) throw Error("refusing to write " + mhd.string() + ": zero-sized dims");
  for (double s : spacing)
    if (!(s > 0.0)) throw Error("refusing to write " + mhd.string() + ": non-positive spacing");
  static_assert(std::endian::native == std::endian::little, "payload writer assumes a little-endian host");

  fs::path raw = mhd;
  raw.replace_extension(".raw");

  std::ofstream h(mhd);
  if (!h) throw Error("cannot write " + mhd.string());
  h.precision(17);
  h << "ObjectType = Image\n"
    << "NDims = 3\n"
    << "BinaryData = True\n"
    << "BinaryDataByteOrderMSB = False\n"
    << "CompressedData = False\n"
    << "Offset = " << origin[0] << ' ' << origin[1] << ' ' << origin[2] << '\n'
    << "ElementSpacing = " << spacing[0] << ' ' << spacing[1] << ' ' << spacing[2] << '\n'
    << "DimSize = " << dims.x << ' ' << dims.y << ' ' << dims.z << '\n';
  if (channels != 1) h << "ElementNumberOfChannels = " << channels << '\n';
  h << "ElementType = " << element_type << '\n'
    << "ElementDataFile = " << raw.filename().string() << '\n';
  if (!h) throw Error("cannot write " + mhd.string());

  std::ofstream r(raw, std::ios::binary);
  if (!r) throw Error("cannot write " + raw.string());
  r.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!r) throw Error("cannot write " + raw.string());
}

}  // namespace jrs::meta
