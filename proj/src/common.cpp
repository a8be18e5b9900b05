#include "lunardem/error.hpp"
#include "lunardem/tensor.hpp"

namespace lunardem {

std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + "]";
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::UnsupportedBandCount: return "UnsupportedBandCount";
    case ErrorKind::UnsupportedBitDepth: return "UnsupportedBitDepth";
    case ErrorKind::CrsMismatch: return "CrsMismatch";
    case ErrorKind::DegenerateTransform: return "DegenerateTransform";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyTile: return "EmptyTile";
    case ErrorKind::NegativePtp: return "NegativePtp";
    case ErrorKind::BadRatios: return "BadRatios";
    case ErrorKind::ManifestVersionMismatch: return "ManifestVersionMismatch";
    case ErrorKind::CorruptTile: return "CorruptTile";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::BadShape: return "BadShape";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::TooSmall: return "TooSmall";
    case ErrorKind::MissingStats: return "MissingStats";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::MissingMetadata: return "MissingMetadata";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::Usage: return "Usage";
  }
  return "Unknown";
}

}  // namespace lunardem
