#pragma once

#include "lunardem/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace lunardem {

enum class BitDepth { u16, s16, f32 };

std::string to_string(BitDepth depth);
BitDepth bitdepth_from_string(const std::string& name);

/// GDAL-ordered affine: x = c0 + col*c1 + row*c2, y = c3 + col*c4 + row*c5,
/// with (col, row) measured from the top-left corner of the top-left pixel.
struct GeoTransform {
  std::array<double, 6> c{0.0, 1.0, 0.0, 0.0, 0.0, 1.0};

  std::array<double, 2> apply(double col, double row) const {
    return {c[0] + col * c[1] + row * c[2], c[3] + col * c[4] + row * c[5]};
  }
  double determinant() const { return c[1] * c[5] - c[2] * c[4]; }
  /// Inverse map to (col, row); exact division for north-up grids.
  std::array<double, 2> pixel_of(double x, double y) const {
    const double dx = x - c[0], dy = y - c[3];
    if (c[2] == 0.0 && c[4] == 0.0) return {dx / c[1], dy / c[5]};
    const double det = determinant();
    return {(c[5] * dx - c[2] * dy) / det, (c[1] * dy - c[4] * dx) / det};
  }
  /// Throws Error(DegenerateTransform) when not invertible.
  GeoTransform inverse() const;
  bool operator==(const GeoTransform&) const = default;
};

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RasterGrid {
  RowMatrix<double> values;
  GeoTransform transform;
  std::string crs_id;
  std::optional<double> nodata;
  BitDepth source_bitdepth = BitDepth::f32;

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

struct ValidityMask {
  MaskMatrix bits;

  double valid_ratio() const;
  static ValidityMask all_valid(int height, int width) {
    return {MaskMatrix::Ones(height, width)};
  }
};

/// Sentinel used when the file carries none: -32768 for s16, 0 for u16, NaN for f32.
double default_nodata(BitDepth depth);

/// Reads .tif/.tiff (single band, u16/s16/f32, uncompressed or deflate) or the
/// raw .f32 format with its `<path>.json` sidecar.
/// Throws MissingFile, UnsupportedBandCount, UnsupportedBitDepth, IoFailure.
RasterGrid read_raster(const std::filesystem::path& path);

struct SanitizedRaster {
  RasterGrid grid;
  ValidityMask mask;
};

/// Zero-fills sentinel and non-finite pixels and records them in the mask.
SanitizedRaster sanitize_nodata(const RasterGrid& grid);

struct ResampledRaster {
  RasterGrid grid;
  ValidityMask mask;
};

/// Bilinear resampling of src onto ref's pixel centers. Samples outside src's
/// footprint become 0 with mask 0; with a src mask, any invalid contributing
/// neighbor also clears the output bit. Throws CrsMismatch, DegenerateTransform.
ResampledRaster resample_to_grid(const RasterGrid& src, const RasterGrid& ref,
                                 const ValidityMask* src_mask = nullptr);

struct WriteReport {
  std::int64_t clamped = 0;
};

/// Writes by extension (.tif/.tiff or .f32). Integer depths round to nearest
/// and saturate; the number of saturated pixels is returned and warned about.
WriteReport write_raster(const RasterGrid& grid, const std::filesystem::path& path, BitDepth depth,
                         bool deflate = false);

}  // namespace lunardem
