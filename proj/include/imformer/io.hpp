#pragma once

// Binary containers: CIM complex image series and model checkpoints. Little-endian, FNV-1a checksummed.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "complex_image.hpp"
#include "model.hpp"
#include "noise.hpp"

namespace imformer {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

class FormatError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a64(void const *data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL)
{
  auto const *p = static_cast<unsigned char const *>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

struct Writer
{
  std::vector<char> buf;

  template <class T>
  void put(T v)
  {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.insert(buf.end(), b, b + sizeof(T));
  }
  void bytes(void const *p, std::size_t n) {
    buf.insert(buf.end(), static_cast<char const *>(p), static_cast<char const *>(p) + n);
  }
  void zeros(std::size_t n) { buf.insert(buf.end(), n, '\0'); }

  void save(std::string const &path) const
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) { throw std::runtime_error("cannot open " + path + " for writing"); }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) { throw std::runtime_error("write failed: " + path); }
  }
};

struct Reader
{
  std::vector<char> buf;
  std::size_t pos = 0;
  std::string path;

  explicit Reader(std::string p)
    : path(std::move(p))
  {
    std::ifstream f(path, std::ios::binary);
    if (!f) { throw std::runtime_error("cannot open " + path); }
    buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }

  void need(std::size_t n) const
  {
    if (pos + n > buf.size()) { throw FormatError(path + ": truncated file"); }
  }

  template <class T>
  T get()
  {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  char const *take(std::size_t n)
  {
    need(n);
    char const *p = buf.data() + pos;
    pos += n;
    return p;
  }
};

} // namespace detail

enum class CimDtype : std::uint8_t
{
  complex64 = 0,
  float32 = 1,
};

/// Raw CIM contents; `payload` holds 2*T*H*W floats for complex64 and T*H*W for float32.
struct CimFile
{
  CimDtype dtype = CimDtype::complex64;
  std::uint32_t frames = 0, height = 0, width = 0;
  float pixel_intensity_scale = 0;
  bool snr_unit = false;
  std::vector<float> payload;
};

inline constexpr std::uint8_t kCimVersion = 1;

inline void write_cim(std::string const &path, CimFile const &c)
{
  std::size_t const n = std::size_t(c.frames) * c.height * c.width * (c.dtype == CimDtype::complex64 ? 2 : 1);
  if (c.payload.size() != n) { throw std::invalid_argument("CIM payload size does not match dimensions"); }
  detail::Writer w;
  w.bytes("CIM1", 4);
  w.put<std::uint8_t>(kCimVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.dtype));
  w.put<std::uint16_t>(0);
  w.put(c.frames);
  w.put(c.height);
  w.put(c.width);
  w.put(c.pixel_intensity_scale);
  w.put<std::uint8_t>(c.snr_unit ? 1 : 0);
  w.zeros(7);
  w.bytes(c.payload.data(), n * sizeof(float));
  w.put(fnv1a64(c.payload.data(), n * sizeof(float)));
  w.save(path);
}

inline CimFile read_cim(std::string const &path)
{
  detail::Reader r(path);
  if (std::memcmp(r.take(4), "CIM1", 4) != 0) { throw FormatError(path + ": bad magic"); }
  if (auto v = r.get<std::uint8_t>(); v != kCimVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(v));
  }
  CimFile c;
  auto const dt = r.get<std::uint8_t>();
  if (dt > 1) { throw FormatError(path + ": unknown dtype " + std::to_string(dt)); }
  c.dtype = static_cast<CimDtype>(dt);
  r.get<std::uint16_t>();
  c.frames = r.get<std::uint32_t>();
  c.height = r.get<std::uint32_t>();
  c.width = r.get<std::uint32_t>();
  c.pixel_intensity_scale = r.get<float>();
  c.snr_unit = r.get<std::uint8_t>() != 0;
  r.take(7);
  std::size_t const n = std::size_t(c.frames) * c.height * c.width * (c.dtype == CimDtype::complex64 ? 2 : 1);
  char const *p = r.take(n * sizeof(float));
  c.payload.resize(n);
  std::memcpy(c.payload.data(), p, n * sizeof(float));
  auto const stored = r.get<std::uint64_t>();
  if (stored != fnv1a64(p, n * sizeof(float))) { throw FormatError(path + ": payload checksum mismatch"); }
  if (r.pos != r.buf.size()) { throw FormatError(path + ": trailing bytes"); }
  return c;
}

inline void write_image(std::string const &path, ComplexImage const &img)
{
  CimFile c;
  c.frames = static_cast<std::uint32_t>(img.frames);
  c.height = static_cast<std::uint32_t>(img.height);
  c.width = static_cast<std::uint32_t>(img.width);
  c.pixel_intensity_scale = static_cast<float>(img.pixel_intensity_scale);
  c.snr_unit = img.snr_unit;
  c.payload.reserve(img.values.size() * 2);
  for (auto const &v : img.values) {
    c.payload.push_back(static_cast<float>(v.real()));
    c.payload.push_back(static_cast<float>(v.imag()));
  }
  write_cim(path, c);
}

inline ComplexImage read_image(std::string const &path)
{
  auto c = read_cim(path);
  if (c.dtype != CimDtype::complex64) { throw FormatError(path + ": expected a complex64 image"); }
  ComplexImage img(c.frames, c.height, c.width);
  img.pixel_intensity_scale = c.pixel_intensity_scale;
  img.snr_unit = c.snr_unit;
  for (std::size_t i = 0; i < img.values.size(); ++i) { img.values[i] = {c.payload[2 * i], c.payload[2 * i + 1]}; }
  return img;
}

/// g-factor maps are stored as single-frame float32 CIM files.
inline void write_gfactor(std::string const &path, GFactorMap const &g)
{
  CimFile c;
  c.dtype = CimDtype::float32;
  c.frames = 1;
  c.height = static_cast<std::uint32_t>(g.height);
  c.width = static_cast<std::uint32_t>(g.width);
  c.pixel_intensity_scale = static_cast<float>(g.acceleration);
  c.payload.assign(g.values.begin(), g.values.end());
  write_cim(path, c);
}

inline GFactorMap read_gfactor(std::string const &path)
{
  auto c = read_cim(path);
  if (c.dtype != CimDtype::float32 || c.frames != 1) { throw FormatError(path + ": expected a single-frame float32 map"); }
  GFactorMap g{c.height, c.width, std::vector<double>(c.payload.begin(), c.payload.end()),
               static_cast<int>(c.pixel_intensity_scale)};
  return g;
}

// Checkpoint: "CKP1" | u8 version | 3 pad | u32 config length | config JSON
//             | u32 entries | per entry: u32 name length, name, u32 rank, u64 dims[rank], u64 offset
//             | u64 float count | f32 buffer | u64 FNV-1a(buffer)
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(std::string const &path, Model<S> const &m)
{
  detail::Writer w;
  w.bytes("CKP1", 4);
  w.put<std::uint8_t>(kCheckpointVersion);
  w.zeros(3);
  std::string const cfg = to_json(m.cfg).dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size()));
  std::uint64_t offset = 0;
  for (auto const &e : m.params.entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.value.rank()));
    for (Index d : e.value.shape) { w.put<std::uint64_t>(static_cast<std::uint64_t>(d)); }
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(e.value.numel());
  }
  std::vector<float> flat;
  flat.reserve(offset);
  for (auto const &e : m.params.entries) {
    for (S v : e.value.data) { flat.push_back(static_cast<float>(v)); }
  }
  w.put<std::uint64_t>(flat.size());
  w.bytes(flat.data(), flat.size() * sizeof(float));
  w.put(fnv1a64(flat.data(), flat.size() * sizeof(float)));
  w.save(path);
}

template <class S>
Model<S> load_checkpoint(std::string const &path)
{
  detail::Reader r(path);
  if (std::memcmp(r.take(4), "CKP1", 4) != 0) { throw FormatError(path + ": bad checkpoint magic"); }
  if (auto v = r.get<std::uint8_t>(); v != kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(v));
  }
  r.take(3);
  auto const cfg_len = r.get<std::uint32_t>();
  std::string const cfg_text(r.take(cfg_len), cfg_len);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(cfg_text));
  } catch (std::exception const &e) {
    throw FormatError(path + ": bad model config: " + e.what());
  }
  Model<S> m = build_model<S>(cfg, 0);
  auto const n = r.get<std::uint32_t>();
  if (n != m.params.size()) {
    throw FormatError(path + ": manifest has " + std::to_string(n) + " tensors, model has " + std::to_string(m.params.size()));
  }
  std::vector<std::uint64_t> offsets(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto const len = r.get<std::uint32_t>();
    std::string const name(r.take(len), len);
    auto const rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto &d : shape) { d = static_cast<Index>(r.get<std::uint64_t>()); }
    offsets[i] = r.get<std::uint64_t>();
    auto const &e = m.params.entries[i];
    if (name != e.name || shape != e.value.shape) {
      throw FormatError(path + ": manifest entry " + name + " " + to_string(shape) + " does not match " + e.name + " " +
                        to_string(e.value.shape));
    }
  }
  auto const count = r.get<std::uint64_t>();
  if (count != static_cast<std::uint64_t>(m.params.count())) {
    throw FormatError(path + ": parameter buffer size mismatch");
  }
  char const *p = r.take(count * sizeof(float));
  if (r.get<std::uint64_t>() != fnv1a64(p, count * sizeof(float))) {
    throw FormatError(path + ": parameter checksum mismatch");
  }
  if (r.pos != r.buf.size()) { throw FormatError(path + ": trailing bytes"); }
  for (std::uint32_t i = 0; i < n; ++i) {
    auto &t = m.params.entries[i].value;
    if (offsets[i] + static_cast<std::uint64_t>(t.numel()) > count) {
      throw FormatError(path + ": entry offset out of range");
    }
    for (Index j = 0; j < t.numel(); ++j) {
      float v;
      std::memcpy(&v, p + (offsets[i] + j) * sizeof(float), sizeof(float));
      t.data[j] = static_cast<S>(v);
    }
  }
  return m;
}

} // namespace imformer
