#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace embedkit {

enum class Errc {
  ShapeMismatch,
  NotScalar,
  NoTape,
  NonDeterministicFunction,
  NonConformingGrid,
  InvalidLabel,
  InvalidMargin,
  InvalidCounts,
  ZeroCenter,
  MissingGrad,
  UnmatchedGlob,
  NonFiniteLoss,
  MisalignedSets,
  DegenerateRow,
  ZeroSecondSet,
  SingularSystem,
  FreezeViolation,
  HeadNotShared,
  DimensionMismatch,
  EmptyIndex,
  NoEvaluableQueries,
  SpecTooSmall,
  BadMagic,
  TruncatedFile,
  WrongDim,
  ChecksumMismatch,
  InvalidConfig,
  IoError,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace embedkit
