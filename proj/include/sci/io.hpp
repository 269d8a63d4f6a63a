#ifndef SCI_IO_HPP
#define SCI_IO_HPP

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sci/cassi.hpp"

// HSC1 cube files:
//   "HSC1" | version u16 = 1 | dtype u16 = 0 (f32) | W u32 | H u32 | L u32 | reserved u64
//   | W*H*L little-endian f32, band-major then row-major.
// Masks and measurements are stored as L = 1 cubes.
//
// Checkpoints:
//   "SCK1" | version u16 = 1 | dtype u16 = 0 | section count u32 | reserved u64
//   | per section: name length u16, name bytes, offset u64, length u64 (bytes)
//   | payloads at their offsets, in table order with no gaps.
// Every section is raw little-endian f32 except "meta", which holds UTF-8 JSON.

namespace sci {

inline constexpr std::size_t kHsc1HeaderBytes = 28;

std::string encode_hsc1(const HsiCube<float>& cube);
/// Throws FormatError on bad magic, version, dtype, extents or payload length.
HsiCube<float> decode_hsc1(std::string_view bytes, const std::string& source = "buffer");

void write_hsc1(const std::string& path, const HsiCube<float>& cube);
HsiCube<float> read_hsc1(const std::string& path);

HsiCube<float> mask_to_cube(const CodedAperture<float>& mask);
CodedAperture<float> mask_from_cube(const HsiCube<float>& cube);
HsiCube<float> measurement_to_cube(const Measurement<float>& y);
Measurement<float> measurement_from_cube(const HsiCube<float>& cube);

struct Checkpoint {
  struct Section {
    std::string name;
    std::vector<float> values;
  };
  std::vector<Section> sections;
  nlohmann::json meta = nlohmann::json::object();

  const Section* find(const std::string& name) const;
  void put(const std::string& name, std::vector<float> values);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "buffer");

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::string& path, std::string_view bytes);

/// 64-bit FNV-1a of the bytes, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace sci

#endif
