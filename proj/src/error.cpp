#include "embedkit/error.hpp"

namespace embedkit {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NotScalar: return "NotScalar";
    case Errc::NoTape: return "NoTape";
    case Errc::NonDeterministicFunction: return "NonDeterministicFunction";
    case Errc::NonConformingGrid: return "NonConformingGrid";
    case Errc::InvalidLabel: return "InvalidLabel";
    case Errc::InvalidMargin: return "InvalidMargin";
    case Errc::InvalidCounts: return "InvalidCounts";
    case Errc::ZeroCenter: return "ZeroCenter";
    case Errc::MissingGrad: return "MissingGrad";
    case Errc::UnmatchedGlob: return "UnmatchedGlob";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::MisalignedSets: return "MisalignedSets";
    case Errc::DegenerateRow: return "DegenerateRow";
    case Errc::ZeroSecondSet: return "ZeroSecondSet";
    case Errc::SingularSystem: return "SingularSystem";
    case Errc::FreezeViolation: return "FreezeViolation";
    case Errc::HeadNotShared: return "HeadNotShared";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyIndex: return "EmptyIndex";
    case Errc::NoEvaluableQueries: return "NoEvaluableQueries";
    case Errc::SpecTooSmall: return "SpecTooSmall";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::WrongDim: return "WrongDim";
    case Errc::ChecksumMismatch: return "ChecksumMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace embedkit
