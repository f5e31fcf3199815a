#include "distilseg/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

#include "distilseg/error.hpp"

namespace distilseg::io {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'S', 'G', 'V', 'O', 'L', '0', '1'};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f64: return 8;
    case DType::f32: return 4;
    case DType::i32: return 4;
    case DType::u8: return 1;
    case DType::i16: return 2;
  }
  throw IoError("unknown dtype code");
}

template <class T>
void put(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <class T>
T get(const std::string& buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size()) throw IoError("raw container truncated");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void dump(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Shape3 shape_from_dims(const std::vector<std::uint64_t>& dims, std::size_t first) {
  return Shape3{static_cast<std::int64_t>(dims[first]), static_cast<std::int64_t>(dims[first + 1]),
                static_cast<std::int64_t>(dims[first + 2])};
}

// ---- NIfTI-1 ------------------------------------------------------------

struct NiftiHeader {
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.f;
  float scl_slope = 0.f;
  float scl_inter = 0.f;
};

template <class T>
T byteswap(T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  std::reverse(b, b + sizeof(T));
  std::memcpy(&v, b, sizeof(T));
  return v;
}

std::string gz_slurp(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> chunk{};
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw IoError("decompression failed for " + path.string());
    }
    if (n == 0) break;
    out.append(chunk.data(), static_cast<std::size_t>(n));
  }
  gzclose(f);
  return out;
}

void gz_dump(const fs::path& path, const std::string& bytes, bool compress) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  gzFile f = gzopen(path.string().c_str(), compress ? "wb6" : "wbT");
  if (!f) throw IoError("cannot write " + path.string());
  const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
  if (n != static_cast<int>(bytes.size())) throw IoError("short write to " + path.string());
}

struct NiftiData {
  Shape3 shape;
  Spacing spacing;
  std::vector<double> values;
};

NiftiData read_nifti(const fs::path& path) {
  const std::string buf = gz_slurp(path);
  if (buf.size() < 348) throw IoError("NIfTI header truncated: " + path.string());
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, buf.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (byteswap(sizeof_hdr) != 348) throw IoError("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  auto rd = [&](std::size_t off, auto dummy) {
    decltype(dummy) v;
    std::memcpy(&v, buf.data() + off, sizeof(v));
    return swap ? byteswap(v) : v;
  };
  NiftiHeader h;
  for (int i = 0; i < 8; ++i) h.dim[static_cast<std::size_t>(i)] = rd(40 + 2 * i, std::int16_t{});
  h.datatype = rd(70, std::int16_t{});
  for (int i = 0; i < 8; ++i) h.pixdim[static_cast<std::size_t>(i)] = rd(76 + 4 * i, float{});
  h.vox_offset = rd(108, float{});
  h.scl_slope = rd(112, float{});
  h.scl_inter = rd(116, float{});

  const int nd = h.dim[0];
  if (nd < 3 || nd > 7) throw IoError("NIfTI: expected a 3D image, dim[0]=" + std::to_string(nd));
  for (int i = 4; i <= nd; ++i) {
    if (h.dim[static_cast<std::size_t>(i)] != 1) throw IoError("NIfTI: multi-channel/time images are not supported");
  }
  // NIfTI stores x fastest, which maps onto our W axis.
  NiftiData out;
  out.shape = Shape3{h.dim[3], h.dim[2], h.dim[1]};
  auto sp = [](float v) { return v > 0 && std::isfinite(v) ? static_cast<double>(v) : 1.0; };
  out.spacing = Spacing{sp(h.pixdim[3]), sp(h.pixdim[2]), sp(h.pixdim[1])};
  if (!out.shape.positive()) throw IoError("NIfTI: non-positive dimensions");

  const auto n = static_cast<std::size_t>(out.shape.voxels());
  std::size_t off = static_cast<std::size_t>(std::max(352.f, h.vox_offset));
  out.values.resize(n);
  auto decode = [&](auto proto) {
    using T = decltype(proto);
    if (off + n * sizeof(T) > buf.size()) throw IoError("NIfTI payload truncated: " + path.string());
    for (std::size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, buf.data() + off + i * sizeof(T), sizeof(T));
      if (swap) v = byteswap(v);
      out.values[i] = static_cast<double>(v);
    }
  };
  switch (h.datatype) {
    case 2: decode(std::uint8_t{}); break;
    case 4: decode(std::int16_t{}); break;
    case 8: decode(std::int32_t{}); break;
    case 16: decode(float{}); break;
    case 64: decode(double{}); break;
    case 256: decode(std::int8_t{}); break;
    case 512: decode(std::uint16_t{}); break;
    case 768: decode(std::uint32_t{}); break;
    case 1024: decode(std::int64_t{}); break;
    case 1280: decode(std::uint64_t{}); break;
    default: throw IoError("NIfTI: unsupported datatype " + std::to_string(h.datatype));
  }
  if (h.scl_slope != 0.f && std::isfinite(h.scl_slope) && !(h.scl_slope == 1.f && h.scl_inter == 0.f)) {
    for (auto& v : out.values) v = v * h.scl_slope + h.scl_inter;
  }
  return out;
}

void write_nifti(const fs::path& path, const Shape3& shape, const Spacing& spacing, std::int16_t datatype,
                 const std::string& payload) {
  std::string hdr(352, '\0');
  auto wr = [&](std::size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
  wr(0, std::int32_t{348});
  const std::array<std::int16_t, 8> dim = {3, static_cast<std::int16_t>(shape.w), static_cast<std::int16_t>(shape.h),
                                           static_cast<std::int16_t>(shape.d), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) wr(40 + 2 * i, dim[static_cast<std::size_t>(i)]);
  wr(70, datatype);
  const std::int16_t bitpix = datatype == 64 ? 64 : (datatype == 16 || datatype == 8 ? 32 : 8);
  wr(72, bitpix);
  const std::array<float, 8> pixdim = {1.f, static_cast<float>(spacing.w), static_cast<float>(spacing.h),
                                       static_cast<float>(spacing.d), 1.f, 1.f, 1.f, 1.f};
  for (int i = 0; i < 8; ++i) wr(76 + 4 * i, pixdim[static_cast<std::size_t>(i)]);
  wr(108, 352.f);
  wr(112, 1.f);
  wr(116, 0.f);
  wr(123, std::uint8_t{10});  // xyzt_units: mm, s
  std::memcpy(hdr.data() + 344, "n+1\0", 4);
  const bool gz = path.extension() == ".gz";
  gz_dump(path, hdr + payload, gz);
}

}  // namespace

bool is_nifti(const fs::path& path) {
  const std::string name = path.filename().string();
  auto ends = [&](const std::string& suf) {
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends(".nii") || ends(".nii.gz");
}

RawArray read_raw(const fs::path& path) {
  const std::string buf = slurp(path);
  if (buf.size() < 24 || std::memcmp(buf.data(), kMagic.data(), kMagic.size()) != 0) {
    throw IoError("not a raw volume container: " + path.string());
  }
  std::size_t off = 8;
  RawArray arr;
  arr.dtype = static_cast<DType>(get<std::uint32_t>(buf, off));
  arr.kind = static_cast<Kind>(get<std::uint32_t>(buf, off));
  const auto ndim = get<std::uint32_t>(buf, off);
  if (ndim != 3 && ndim != 4) throw IoError("raw container: ndim must be 3 or 4");
  arr.num_classes = get<std::uint32_t>(buf, off);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    arr.dims.push_back(get<std::uint64_t>(buf, off));
    count *= arr.dims.back();
  }
  arr.spacing.d = get<double>(buf, off);
  arr.spacing.h = get<double>(buf, off);
  arr.spacing.w = get<double>(buf, off);
  const std::size_t esz = dtype_size(arr.dtype);
  if (buf.size() != off + count * esz) throw IoError("raw container payload size mismatch: " + path.string());
  arr.values.resize(count);
  auto decode = [&](auto proto) {
    using T = decltype(proto);
    for (std::uint64_t i = 0; i < count; ++i) {
      T v;
      std::memcpy(&v, buf.data() + off + i * sizeof(T), sizeof(T));
      arr.values[i] = static_cast<double>(v);
    }
  };
  switch (arr.dtype) {
    case DType::f64: decode(double{}); break;
    case DType::f32: decode(float{}); break;
    case DType::i32: decode(std::int32_t{}); break;
    case DType::u8: decode(std::uint8_t{}); break;
    case DType::i16: decode(std::int16_t{}); break;
  }
  return arr;
}

void write_raw(const fs::path& path, const RawArray& arr) {
  std::string buf(kMagic.begin(), kMagic.end());
  put(buf, static_cast<std::uint32_t>(arr.dtype));
  put(buf, static_cast<std::uint32_t>(arr.kind));
  put(buf, static_cast<std::uint32_t>(arr.dims.size()));
  put(buf, arr.num_classes);
  std::uint64_t count = 1;
  for (auto d : arr.dims) {
    put(buf, d);
    count *= d;
  }
  if (count != arr.values.size()) throw IoError("write_raw: dims do not match payload");
  put(buf, arr.spacing.d);
  put(buf, arr.spacing.h);
  put(buf, arr.spacing.w);
  buf.reserve(buf.size() + count * dtype_size(arr.dtype));
  for (double v : arr.values) {
    switch (arr.dtype) {
      case DType::f64: put(buf, v); break;
      case DType::f32: put(buf, static_cast<float>(v)); break;
      case DType::i32: put(buf, static_cast<std::int32_t>(v)); break;
      case DType::u8: put(buf, static_cast<std::uint8_t>(v)); break;
      case DType::i16: put(buf, static_cast<std::int16_t>(v)); break;
    }
  }
  dump(path, buf);
}

Volume load_volume(const fs::path& path) {
  if (is_nifti(path)) {
    auto n = read_nifti(path);
    return Volume(n.shape, std::move(n.values), n.spacing);
  }
  RawArray a = read_raw(path);
  if (a.dims.size() != 3) throw IoError("expected a 3D scalar volume in " + path.string());
  return Volume(shape_from_dims(a.dims, 0), std::move(a.values), a.spacing);
}

LabelMap load_labels(const fs::path& path, int num_classes) {
  Shape3 shape;
  Spacing spacing;
  std::vector<double> vals;
  if (is_nifti(path)) {
    auto n = read_nifti(path);
    shape = n.shape;
    spacing = n.spacing;
    vals = std::move(n.values);
  } else {
    RawArray a = read_raw(path);
    if (a.dims.size() != 3) throw IoError("expected a 3D label map in " + path.string());
    shape = shape_from_dims(a.dims, 0);
    spacing = a.spacing;
    if (num_classes == 0) num_classes = static_cast<int>(a.num_classes);
    vals = std::move(a.values);
  }
  std::vector<std::int32_t> ids(vals.size());
  std::int32_t max_id = 0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double r = std::round(vals[i]);
    if (r != vals[i]) throw ValidationError("label map contains non-integer values: " + path.string());
    ids[i] = static_cast<std::int32_t>(r);
    max_id = std::max(max_id, ids[i]);
  }
  if (num_classes == 0) num_classes = std::max(2, max_id + 1);
  return LabelMap(shape, std::move(ids), num_classes, spacing);
}

DisplacementField load_field(const fs::path& path) {
  RawArray a = read_raw(path);
  if (a.dims.size() != 4 || a.dims[0] != 3) throw IoError("expected a (3, D, H, W) field in " + path.string());
  return DisplacementField(shape_from_dims(a.dims, 1), std::move(a.values));
}

void save_volume(const fs::path& path, const Volume& v) {
  if (is_nifti(path)) {
    std::string payload(static_cast<std::size_t>(v.voxels()) * 4, '\0');
    for (std::size_t i = 0; i < v.data().size(); ++i) {
      const auto f = static_cast<float>(v.data()[i]);
      std::memcpy(payload.data() + 4 * i, &f, 4);
    }
    write_nifti(path, v.shape(), v.spacing(), 16, payload);
    return;
  }
  const auto& s = v.shape();
  RawArray a{DType::f64, Kind::volume,
             {static_cast<std::uint64_t>(s.d), static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
             v.spacing(), 0, std::vector<double>(v.data().begin(), v.data().end())};
  write_raw(path, a);
}

void save_labels(const fs::path& path, const LabelMap& l) {
  if (is_nifti(path)) {
    std::string payload(static_cast<std::size_t>(l.voxels()) * 4, '\0');
    std::memcpy(payload.data(), l.data().data(), payload.size());
    write_nifti(path, l.shape(), l.spacing(), 8, payload);
    return;
  }
  const auto& s = l.shape();
  RawArray a{DType::i32, Kind::labels,
             {static_cast<std::uint64_t>(s.d), static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
             l.spacing(), static_cast<std::uint32_t>(l.num_classes()),
             std::vector<double>(l.data().begin(), l.data().end())};
  write_raw(path, a);
}

void save_field(const fs::path& path, const DisplacementField& f) {
  const auto& s = f.shape();
  RawArray a{DType::f64, Kind::displacement,
             {3, static_cast<std::uint64_t>(s.d), static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)},
             Spacing{}, 0, std::vector<double>(f.data().begin(), f.data().end())};
  write_raw(path, a);
}

void save_features(const fs::path& path, std::span<const float> data, std::int64_t channels, const Shape3& shape) {
  RawArray a{DType::f32, Kind::features,
             {static_cast<std::uint64_t>(channels), static_cast<std::uint64_t>(shape.d),
              static_cast<std::uint64_t>(shape.h), static_cast<std::uint64_t>(shape.w)},
             Spacing{}, 0, std::vector<double>(data.begin(), data.end())};
  write_raw(path, a);
}

}  // namespace distilseg::io
