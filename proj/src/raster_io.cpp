#include "lunardem/raster_io.hpp"

#include "lunardem/error.hpp"

#include "json.hpp"

#include <tiffio.h>

#include <cmath>
#include <cstdarg>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <vector>

namespace lunardem {

namespace fs = std::filesystem;

namespace {

constexpr ttag_t kModelPixelScale = 33550;
constexpr ttag_t kModelTiepoint = 33922;
constexpr ttag_t kModelTransformation = 34264;
constexpr ttag_t kGeoKeyDirectory = 34735;
constexpr ttag_t kGeoAsciiParams = 34737;
constexpr ttag_t kGdalNodata = 42113;

constexpr std::uint16_t kKeyModelType = 1024;
constexpr std::uint16_t kKeyRasterType = 1025;
constexpr std::uint16_t kKeyCitation = 1026;
constexpr std::uint16_t kKeyGeographicType = 2048;
constexpr std::uint16_t kKeyProjectedType = 3072;

const TIFFFieldInfo kGeoFields[] = {
    {kModelPixelScale, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("ModelPixelScale")},
    {kModelTiepoint, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("ModelTiepoint")},
    {kModelTransformation, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("ModelTransformation")},
    {kGeoKeyDirectory, -1, -1, TIFF_SHORT, FIELD_CUSTOM, 1, 1, const_cast<char*>("GeoKeyDirectory")},
    {kGeoAsciiParams, -1, -1, TIFF_ASCII, FIELD_CUSTOM, 1, 0, const_cast<char*>("GeoAsciiParams")},
    {kGdalNodata, -1, -1, TIFF_ASCII, FIELD_CUSTOM, 1, 0, const_cast<char*>("GDALNoDataValue")},
};

TIFFExtendProc g_parent_extender = nullptr;

void geo_extender(TIFF* tif) {
  TIFFMergeFieldInfo(tif, kGeoFields, sizeof(kGeoFields) / sizeof(kGeoFields[0]));
  if (g_parent_extender) g_parent_extender(tif);
}

thread_local std::string g_tiff_error;

void tiff_error_handler(const char* module, const char* fmt, va_list args) {
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  g_tiff_error = std::string(module ? module : "libtiff") + ": " + buf;
}

void install_tiff_hooks() {
  static std::once_flag once;
  std::call_once(once, [] {
    g_parent_extender = TIFFSetTagExtender(geo_extender);
    TIFFSetWarningHandler(nullptr);
    TIFFSetErrorHandler(tiff_error_handler);
  });
}

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

bool is_tiff(const fs::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".tif" || ext == ".tiff";
}

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

template <typename T>
void copy_row(const void* src, double* dst, int n) {
  const T* p = static_cast<const T*>(src);
  for (int i = 0; i < n; ++i) dst[i] = static_cast<double>(p[i]);
}

void decode(const unsigned char* src, double* dst, int n, BitDepth depth) {
  switch (depth) {
    case BitDepth::u16: copy_row<std::uint16_t>(src, dst, n); break;
    case BitDepth::s16: copy_row<std::int16_t>(src, dst, n); break;
    case BitDepth::f32: copy_row<float>(src, dst, n); break;
  }
}

std::size_t bytes_per_sample(BitDepth depth) { return depth == BitDepth::f32 ? 4 : 2; }

GeoTransform read_geotransform(TIFF* tif) {
  GeoTransform t;
  std::uint16_t count = 0;
  double* data = nullptr;
  if (TIFFGetField(tif, kModelTransformation, &count, &data) && count >= 16) {
    t.c = {data[3], data[0], data[1], data[7], data[4], data[5]};
    return t;
  }
  double* scale = nullptr;
  std::uint16_t scale_count = 0;
  if (TIFFGetField(tif, kModelTiepoint, &count, &data) && count >= 6 &&
      TIFFGetField(tif, kModelPixelScale, &scale_count, &scale) && scale_count >= 2) {
    t.c = {data[3] - data[0] * scale[0], scale[0], 0.0, data[4] + data[1] * scale[1], 0.0, -scale[1]};
  }
  return t;
}

std::string read_crs(TIFF* tif) {
  std::uint16_t count = 0;
  std::uint16_t* keys = nullptr;
  if (!TIFFGetField(tif, kGeoKeyDirectory, &count, &keys) || count < 4) return {};
  const char* ascii = nullptr;
  TIFFGetField(tif, kGeoAsciiParams, &ascii);
  std::string fallback;
  const int n = keys[3];
  for (int k = 0; k < n && 4 + 4 * k + 3 < count; ++k) {
    const std::uint16_t* e = keys + 4 + 4 * k;
    if (e[0] == kKeyCitation && e[1] == kGeoAsciiParams && ascii) {
      std::string s(ascii + e[3], ascii + std::min<std::size_t>(std::strlen(ascii), e[3] + e[2]));
      while (!s.empty() && (s.back() == '|' || s.back() == '\0')) s.pop_back();
      return s;
    }
    if ((e[0] == kKeyProjectedType || e[0] == kKeyGeographicType) && e[1] == 0) {
      fallback = "EPSG:" + std::to_string(e[3]);
    }
  }
  return fallback;
}

RasterGrid read_tiff(const fs::path& path) {
  install_tiff_hooks();
  g_tiff_error.clear();
  TiffPtr tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw Error(ErrorKind::IoFailure, "cannot open TIFF " + path.string() + ": " + g_tiff_error);

  std::uint32_t width = 0, height = 0;
  std::uint16_t spp = 1, bps = 0, format = SAMPLEFORMAT_UINT, config = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &config);
  if (spp != 1) {
    throw Error(ErrorKind::UnsupportedBandCount, path.string() + " has " + std::to_string(spp) + " bands");
  }
  BitDepth depth;
  if (bps == 16 && format == SAMPLEFORMAT_UINT) {
    depth = BitDepth::u16;
  } else if (bps == 16 && format == SAMPLEFORMAT_INT) {
    depth = BitDepth::s16;
  } else if (bps == 32 && format == SAMPLEFORMAT_IEEEFP) {
    depth = BitDepth::f32;
  } else {
    throw Error(ErrorKind::UnsupportedBitDepth,
                path.string() + ": " + std::to_string(bps) + "-bit format " + std::to_string(format));
  }
  if (width == 0 || height == 0) throw Error(ErrorKind::IoFailure, path.string() + " is empty");

  RasterGrid grid;
  grid.values.resize(height, width);
  grid.source_bitdepth = depth;
  const std::size_t bps_bytes = bytes_per_sample(depth);

  if (TIFFIsTiled(tif.get())) {
    std::uint32_t tw = 0, th = 0;
    TIFFGetField(tif.get(), TIFFTAG_TILEWIDTH, &tw);
    TIFFGetField(tif.get(), TIFFTAG_TILELENGTH, &th);
    std::vector<unsigned char> buf(TIFFTileSize(tif.get()));
    std::vector<double> row(tw);
    for (std::uint32_t y = 0; y < height; y += th) {
      for (std::uint32_t x = 0; x < width; x += tw) {
        if (TIFFReadTile(tif.get(), buf.data(), x, y, 0, 0) < 0) {
          throw Error(ErrorKind::IoFailure, "tile read failed in " + path.string() + ": " + g_tiff_error);
        }
        const std::uint32_t rows = std::min(th, height - y), cols = std::min(tw, width - x);
        for (std::uint32_t r = 0; r < rows; ++r) {
          decode(buf.data() + r * tw * bps_bytes, row.data(), static_cast<int>(cols), depth);
          for (std::uint32_t c = 0; c < cols; ++c) grid.values(y + r, x + c) = row[c];
        }
      }
    }
  } else {
    std::vector<unsigned char> buf(TIFFScanlineSize(tif.get()));
    for (std::uint32_t r = 0; r < height; ++r) {
      if (TIFFReadScanline(tif.get(), buf.data(), r, 0) < 0) {
        throw Error(ErrorKind::IoFailure, "scanline read failed in " + path.string() + ": " + g_tiff_error);
      }
      decode(buf.data(), grid.values.row(r).data(), static_cast<int>(width), depth);
    }
  }

  grid.transform = read_geotransform(tif.get());
  grid.crs_id = read_crs(tif.get());
  const char* nodata = nullptr;
  if (TIFFGetField(tif.get(), kGdalNodata, &nodata) && nodata && *nodata) {
    grid.nodata = std::strtod(nodata, nullptr);
  }
  return grid;
}

RasterGrid read_f32(const fs::path& path) {
  const fs::path meta_path = sidecar_path(path);
  if (!fs::exists(meta_path)) throw Error(ErrorKind::MissingFile, "missing sidecar " + meta_path.string());
  nlohmann::json meta;
  try {
    std::ifstream(meta_path) >> meta;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::IoFailure, "bad sidecar " + meta_path.string() + ": " + e.what());
  }
  const int width = meta.at("width"), height = meta.at("height");
  if (width <= 0 || height <= 0) throw Error(ErrorKind::IoFailure, "non-positive size in " + meta_path.string());
  RasterGrid grid;
  grid.source_bitdepth = BitDepth::f32;
  if (meta.contains("transform")) {
    for (int i = 0; i < 6; ++i) grid.transform.c[i] = meta["transform"][i];
  }
  grid.crs_id = meta.value("crs_id", "");
  if (meta.contains("nodata") && !meta["nodata"].is_null()) {
    grid.nodata = meta["nodata"].is_string() ? std::strtod(meta["nodata"].get<std::string>().c_str(), nullptr)
                                             : meta["nodata"].get<double>();
  }
  std::vector<float> raw(static_cast<std::size_t>(width) * height);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(raw.size() * sizeof(float))) {
    throw Error(ErrorKind::IoFailure, path.string() + " is shorter than its sidecar size");
  }
  grid.values = Eigen::Map<RowMatrix<float>>(raw.data(), height, width).cast<double>();
  return grid;
}

template <typename T>
T saturate(double v, std::int64_t& clamped) {
  const double lo = std::numeric_limits<T>::lowest(), hi = std::numeric_limits<T>::max();
  const double r = std::nearbyint(v);
  if (r < lo) {
    ++clamped;
    return static_cast<T>(lo);
  }
  if (r > hi) {
    ++clamped;
    return static_cast<T>(hi);
  }
  return static_cast<T>(r);
}

std::string format_nodata(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_tiff(const RasterGrid& grid, const fs::path& path, BitDepth depth, bool deflate, WriteReport& report) {
  install_tiff_hooks();
  g_tiff_error.clear();
  TiffPtr tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw Error(ErrorKind::IoFailure, "cannot create " + path.string() + ": " + g_tiff_error);
  const int w = grid.width(), h = grid.height();
  TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(w));
  TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(h));
  TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, 1);
  TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, depth == BitDepth::f32 ? 32 : 16);
  TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT,
               depth == BitDepth::f32 ? SAMPLEFORMAT_IEEEFP
                                      : (depth == BitDepth::s16 ? SAMPLEFORMAT_INT : SAMPLEFORMAT_UINT));
  TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
  TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(tif.get(), TIFFTAG_COMPRESSION, deflate ? COMPRESSION_ADOBE_DEFLATE : COMPRESSION_NONE);
  TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, TIFFDefaultStripSize(tif.get(), 0));

  const auto& t = grid.transform.c;
  if (t[2] == 0.0 && t[4] == 0.0) {
    double tie[6] = {0, 0, 0, t[0], t[3], 0};
    double scale[3] = {t[1], -t[5], 0};
    TIFFSetField(tif.get(), kModelTiepoint, 6, tie);
    TIFFSetField(tif.get(), kModelPixelScale, 3, scale);
  } else {
    double m[16] = {t[1], t[2], 0, t[0], t[4], t[5], 0, t[3], 0, 0, 0, 0, 0, 0, 0, 1};
    TIFFSetField(tif.get(), kModelTransformation, 16, m);
  }
  const std::string citation = grid.crs_id + "|";
  std::vector<std::uint16_t> keys{1, 1, 0, 0};
  keys.insert(keys.end(), {kKeyModelType, 0, 1, 1});
  keys.insert(keys.end(), {kKeyRasterType, 0, 1, 1});
  if (!grid.crs_id.empty()) {
    keys.insert(keys.end(), {kKeyCitation, static_cast<std::uint16_t>(kGeoAsciiParams),
                             static_cast<std::uint16_t>(citation.size()), 0});
  }
  keys[3] = static_cast<std::uint16_t>((keys.size() - 4) / 4);
  TIFFSetField(tif.get(), kGeoKeyDirectory, static_cast<int>(keys.size()), keys.data());
  if (!grid.crs_id.empty()) TIFFSetField(tif.get(), kGeoAsciiParams, citation.c_str());

  std::optional<double> nodata = grid.nodata;
  if (nodata) TIFFSetField(tif.get(), kGdalNodata, format_nodata(*nodata).c_str());

  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * bytes_per_sample(depth));
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double v = grid.values(r, c);
      if (std::isnan(v) && depth != BitDepth::f32) v = nodata.value_or(0.0);
      switch (depth) {
        case BitDepth::u16: {
          const auto q = saturate<std::uint16_t>(v, report.clamped);
          std::memcpy(buf.data() + 2 * c, &q, 2);
          break;
        }
        case BitDepth::s16: {
          const auto q = saturate<std::int16_t>(v, report.clamped);
          std::memcpy(buf.data() + 2 * c, &q, 2);
          break;
        }
        case BitDepth::f32: {
          const float q = static_cast<float>(v);
          std::memcpy(buf.data() + 4 * c, &q, 4);
          break;
        }
      }
    }
    if (TIFFWriteScanline(tif.get(), buf.data(), static_cast<std::uint32_t>(r), 0) < 0) {
      throw Error(ErrorKind::IoFailure, "write failed for " + path.string() + ": " + g_tiff_error);
    }
  }
}

void write_f32(const RasterGrid& grid, const fs::path& path) {
  const RowMatrix<float> data = grid.values.cast<float>();
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  nlohmann::json meta = {{"width", grid.width()},
                         {"height", grid.height()},
                         {"transform", grid.transform.c},
                         {"crs_id", grid.crs_id},
                         {"nodata", nullptr}};
  if (grid.nodata) {
    if (std::isfinite(*grid.nodata)) {
      meta["nodata"] = *grid.nodata;
    } else {
      meta["nodata"] = format_nodata(*grid.nodata);
    }
  }
  std::ofstream side(sidecar_path(path));
  side << meta.dump(2) << "\n";
  if (!side) throw Error(ErrorKind::IoFailure, "cannot write " + sidecar_path(path).string());
}

}  // namespace

std::string to_string(BitDepth depth) {
  switch (depth) {
    case BitDepth::u16: return "u16";
    case BitDepth::s16: return "s16";
    case BitDepth::f32: return "f32";
  }
  return "?";
}

BitDepth bitdepth_from_string(const std::string& name) {
  if (name == "u16") return BitDepth::u16;
  if (name == "s16") return BitDepth::s16;
  if (name == "f32") return BitDepth::f32;
  throw Error(ErrorKind::UnsupportedBitDepth, "unknown bit depth '" + name + "'");
}

GeoTransform GeoTransform::inverse() const {
  const double det = determinant();
  if (!(std::abs(det) > 1e-300) || !std::isfinite(det)) {
    throw Error(ErrorKind::DegenerateTransform, "affine transform is not invertible");
  }
  GeoTransform inv;
  inv.c[1] = c[5] / det;
  inv.c[2] = -c[2] / det;
  inv.c[4] = -c[4] / det;
  inv.c[5] = c[1] / det;
  inv.c[0] = -(inv.c[1] * c[0] + inv.c[2] * c[3]);
  inv.c[3] = -(inv.c[4] * c[0] + inv.c[5] * c[3]);
  return inv;
}

double ValidityMask::valid_ratio() const {
  if (bits.size() == 0) return 0.0;
  return static_cast<double>(bits.cast<std::int64_t>().sum()) / static_cast<double>(bits.size());
}

double default_nodata(BitDepth depth) {
  switch (depth) {
    case BitDepth::s16: return -32768.0;
    case BitDepth::u16: return 0.0;
    case BitDepth::f32: return std::numeric_limits<double>::quiet_NaN();
  }
  return std::numeric_limits<double>::quiet_NaN();
}

RasterGrid read_raster(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::MissingFile, "no such raster: " + path.string());
  if (is_tiff(path)) return read_tiff(path);
  if (path.extension() == ".f32") return read_f32(path);
  throw Error(ErrorKind::IoFailure, "unrecognized raster extension: " + path.string());
}

SanitizedRaster sanitize_nodata(const RasterGrid& grid) {
  SanitizedRaster out{grid, {MaskMatrix::Ones(grid.height(), grid.width())}};
  const double sentinel = grid.nodata.value_or(default_nodata(grid.source_bitdepth));
  const bool nan_sentinel = std::isnan(sentinel);
  for (Eigen::Index i = 0; i < out.grid.values.size(); ++i) {
    double& v = out.grid.values.data()[i];
    if ((!nan_sentinel && v == sentinel) || !std::isfinite(v)) {
      v = 0.0;
      out.mask.bits.data()[i] = 0;
    }
  }
  return out;
}

ResampledRaster resample_to_grid(const RasterGrid& src, const RasterGrid& ref, const ValidityMask* src_mask) {
  if (src.crs_id != ref.crs_id) {
    throw Error(ErrorKind::CrsMismatch, "cannot resample '" + src.crs_id + "' onto '" + ref.crs_id + "'");
  }
  if (src_mask && (src_mask->bits.rows() != src.height() || src_mask->bits.cols() != src.width())) {
    throw Error(ErrorKind::ShapeMismatch, "source mask does not match source grid");
  }
  ref.transform.inverse();
  src.transform.inverse();
  const int h = src.height(), w = src.width();

  ResampledRaster out;
  out.grid.values = RowMatrix<double>::Zero(ref.height(), ref.width());
  out.grid.transform = ref.transform;
  out.grid.crs_id = ref.crs_id;
  out.grid.source_bitdepth = src.source_bitdepth;
  out.mask.bits = MaskMatrix::Zero(ref.height(), ref.width());

  constexpr double tol = 1e-9;
  for (int r = 0; r < ref.height(); ++r) {
    for (int c = 0; c < ref.width(); ++c) {
      const auto map = ref.transform.apply(c + 0.5, r + 0.5);
      const auto px = src.transform.pixel_of(map[0], map[1]);
      // Continuous index with pixel centers at integers.
      const double u = px[0] - 0.5, v = px[1] - 0.5;
      if (u < -0.5 - tol || u > w - 0.5 + tol || v < -0.5 - tol || v > h - 0.5 + tol) continue;
      const double uc = std::clamp(u, 0.0, double(w - 1)), vc = std::clamp(v, 0.0, double(h - 1));
      const int j0 = std::min(static_cast<int>(std::floor(uc)), std::max(w - 2, 0));
      const int i0 = std::min(static_cast<int>(std::floor(vc)), std::max(h - 2, 0));
      const int j1 = std::min(j0 + 1, w - 1), i1 = std::min(i0 + 1, h - 1);
      const double fx = uc - j0, fy = vc - i0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int ii[4] = {i0, i0, i1, i1}, jj[4] = {j0, j1, j0, j1};
      bool valid = true;
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0.0) continue;
        if (src_mask && !src_mask->bits(ii[k], jj[k])) valid = false;
        acc += wts[k] * src.values(ii[k], jj[k]);
      }
      if (!valid) continue;
      out.grid.values(r, c) = acc;
      out.mask.bits(r, c) = 1;
    }
  }
  return out;
}

WriteReport write_raster(const RasterGrid& grid, const fs::path& path, BitDepth depth, bool deflate) {
  WriteReport report;
  if (grid.values.size() == 0) throw Error(ErrorKind::IoFailure, "refusing to write an empty raster");
  if (is_tiff(path)) {
    write_tiff(grid, path, depth, deflate, report);
  } else if (path.extension() == ".f32") {
    if (depth != BitDepth::f32) {
      throw Error(ErrorKind::UnsupportedBitDepth, "raw .f32 rasters are float32 only");
    }
    write_f32(grid, path);
  } else {
    throw Error(ErrorKind::IoFailure, "unrecognized raster extension: " + path.string());
  }
  if (report.clamped > 0) {
    std::cerr << "warning: " << report.clamped << " pixel(s) saturated writing " << path.string() << " as "
              << to_string(depth) << "\n";
  }
  return report;
}

}  // namespace lunardem
