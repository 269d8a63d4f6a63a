#include "sci/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace sci {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

void put_floats(std::string& out, const float* p, std::size_t n) {
  out.reserve(out.size() + 4 * n);
  for (std::size_t i = 0; i < n; ++i) put_le(out, std::bit_cast<std::uint32_t>(p[i]));
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(source_ + ": " + msg); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<float> get_floats(std::string_view raw) {
  std::vector<float> v(raw.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (std::size_t k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + k])) << (8 * k);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

}  // namespace

std::string encode_hsc1(const HsiCube<float>& cube) {
  if (cube.width < 1 || cube.height < 1 || cube.bands < 1 || cube.values.size() != cube.size())
    throw DimensionError("cannot encode cube with extents " + std::to_string(cube.width) + "x" +
                         std::to_string(cube.height) + "x" + std::to_string(cube.bands));
  std::string out = "HSC1";
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint16_t>(out, 0);
  put_le(out, static_cast<std::uint32_t>(cube.width));
  put_le(out, static_cast<std::uint32_t>(cube.height));
  put_le(out, static_cast<std::uint32_t>(cube.bands));
  put_le<std::uint64_t>(out, 0);
  put_floats(out, cube.values.data(), static_cast<std::size_t>(cube.values.size()));
  return out;
}

HsiCube<float> decode_hsc1(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.take(4, "magic") != "HSC1") r.fail("bad magic, expected HSC1");
  const auto version = r.get<std::uint16_t>("version");
  const auto dtype = r.get<std::uint16_t>("dtype");
  if (version != 1) r.fail("unsupported HSC1 version " + std::to_string(version));
  if (dtype != 0) r.fail("unsupported dtype " + std::to_string(dtype) + " (only 0 = f32)");
  const std::uint64_t w = r.get<std::uint32_t>("width"), h = r.get<std::uint32_t>("height"),
                      l = r.get<std::uint32_t>("bands");
  r.get<std::uint64_t>("reserved");
  if (w == 0 || h == 0 || l == 0) r.fail("zero extent in header");
  const std::uint64_t n = w * h * l;
  if (bytes.size() - kHsc1HeaderBytes != 4 * n)
    r.fail("payload is " + std::to_string(bytes.size() - kHsc1HeaderBytes) + " bytes, header implies " +
           std::to_string(4 * n));
  auto values = get_floats(r.take(4 * n, "payload"));
  auto cube = HsiCube<float>::zeros(static_cast<std::int64_t>(w), static_cast<std::int64_t>(h), static_cast<std::int64_t>(l));
  cube.values = Eigen::Map<const Vec<float>>(values.data(), static_cast<Eigen::Index>(values.size()));
  return cube;
}

void write_hsc1(const std::string& path, const HsiCube<float>& cube) { write_file(path, encode_hsc1(cube)); }
HsiCube<float> read_hsc1(const std::string& path) { return decode_hsc1(read_file(path), path); }

HsiCube<float> mask_to_cube(const CodedAperture<float>& mask) {
  auto c = HsiCube<float>::zeros(mask.width, mask.height, 1);
  c.values = mask.values;
  return c;
}

CodedAperture<float> mask_from_cube(const HsiCube<float>& cube) {
  if (cube.bands != 1) throw FormatError("mask file must have L = 1, got " + std::to_string(cube.bands));
  CodedAperture<float> m{cube.width, cube.height, cube.values};
  m.validate();
  return m;
}

HsiCube<float> measurement_to_cube(const Measurement<float>& y) {
  auto c = HsiCube<float>::zeros(y.width, y.height, 1);
  c.values = y.values;
  return c;
}

Measurement<float> measurement_from_cube(const HsiCube<float>& cube) {
  if (cube.bands != 1) throw FormatError("measurement file must have L = 1, got " + std::to_string(cube.bands));
  Measurement<float> y;
  y.width = cube.width;
  y.height = cube.height;
  y.values = cube.values;
  return y;
}

const Checkpoint::Section* Checkpoint::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

void Checkpoint::put(const std::string& name, std::vector<float> values) {
  if (name == "meta") throw UsageError("section name 'meta' is reserved");
  for (auto& s : sections)
    if (s.name == name) {
      s.values = std::move(values);
      return;
    }
  sections.push_back({name, std::move(values)});
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const std::string meta = ckpt.meta.dump();
  std::uint64_t table = 0;
  for (const auto& s : ckpt.sections) table += 2 + s.name.size() + 16;
  table += 2 + 4 + 16;
  std::string out = "SCK1";
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint16_t>(out, 0);
  put_le(out, static_cast<std::uint32_t>(ckpt.sections.size() + 1));
  put_le<std::uint64_t>(out, 0);
  std::uint64_t offset = out.size() + table;
  auto entry = [&](const std::string& name, std::uint64_t length) {
    if (name.empty() || name.size() > 0xFFFF) throw UsageError("checkpoint section name must have 1..65535 bytes");
    put_le(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_le(out, offset);
    put_le(out, length);
    offset += length;
  };
  for (const auto& s : ckpt.sections) entry(s.name, 4 * s.values.size());
  entry("meta", meta.size());
  for (const auto& s : ckpt.sections) put_floats(out, s.values.data(), s.values.size());
  out += meta;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.take(4, "magic") != "SCK1") r.fail("bad magic, expected SCK1");
  const auto version = r.get<std::uint16_t>("version");
  const auto dtype = r.get<std::uint16_t>("dtype");
  if (version != 1) r.fail("unsupported checkpoint version " + std::to_string(version));
  if (dtype != 0) r.fail("unsupported dtype " + std::to_string(dtype));
  const auto count = r.get<std::uint32_t>("section count");
  r.get<std::uint64_t>("reserved");
  struct Entry {
    std::string name;
    std::uint64_t offset, length;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("section name length");
    Entry e{std::string(r.take(len, "section name")), 0, 0};
    e.offset = r.get<std::uint64_t>("section offset");
    e.length = r.get<std::uint64_t>("section length");
    entries.push_back(std::move(e));
  }
  std::uint64_t expect = r.pos();
  Checkpoint ckpt;
  bool have_meta = false;
  for (const auto& e : entries) {
    if (e.offset != expect) r.fail("section '" + e.name + "' is not contiguous with the table");
    if (e.length > bytes.size() || e.offset > bytes.size() - e.length) r.fail("section '" + e.name + "' runs past end of file");
    const auto raw = bytes.substr(e.offset, e.length);
    expect = e.offset + e.length;
    if (e.name == "meta") {
      if (have_meta) r.fail("duplicate meta section");
      have_meta = true;
      try {
        ckpt.meta = nlohmann::json::parse(raw);
      } catch (const nlohmann::json::exception& ex) {
        r.fail(std::string("meta section is not valid JSON: ") + ex.what());
      }
      continue;
    }
    if (e.length % 4 != 0) r.fail("section '" + e.name + "' length is not a multiple of 4");
    if (ckpt.find(e.name)) r.fail("duplicate section '" + e.name + "'");
    ckpt.sections.push_back({e.name, get_floats(raw)});
  }
  if (!have_meta) r.fail("missing meta section");
  if (expect != bytes.size()) r.fail(std::to_string(bytes.size() - expect) + " trailing bytes after last section");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }
Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + path);
  }
  std::filesystem::rename(tmp, path);
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sci
