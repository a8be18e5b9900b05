#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lunardem {

enum class ErrorKind {
  // raster_io
  MissingFile,
  UnsupportedBandCount,
  UnsupportedBitDepth,
  CrsMismatch,
  DegenerateTransform,
  IoFailure,
  // preprocess
  ShapeMismatch,
  EmptyTile,
  NegativePtp,
  BadRatios,
  ManifestVersionMismatch,
  CorruptTile,
  // model
  BadConfig,
  BadShape,
  NonFiniteInput,
  ConfigMismatch,
  CorruptCheckpoint,
  // losses
  EmptyMask,
  TooSmall,
  MissingStats,
  // train / eval
  OutOfRange,
  EmptySplit,
  NonFiniteLoss,
  MissingMetadata,
  OutOfBounds,
  // cli
  Usage,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace lunardem
