#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace cf {

// Error taxonomy shared across the toolkit. The category string is stable
// and machine-readable; the CLI prints it as `error=<category>`.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(category + ": " + message),
        category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define CF_DEFINE_ERROR(NAME)                    \
  class NAME : public Error {                    \
   public:                                       \
    explicit NAME(const std::string& message)    \
        : Error(#NAME, message) {}               \
  }

CF_DEFINE_ERROR(SizeError);     // length / dimension mismatches
CF_DEFINE_ERROR(ShapeError);    // wrong rank, non-scalar loss
CF_DEFINE_ERROR(DataError);     // bad values: NaN input, label range, empty batch
CF_DEFINE_ERROR(DomainError);   // log of nonpositive, d outside (0,1)
CF_DEFINE_ERROR(ConfigError);   // invalid configuration keys or bounds
CF_DEFINE_ERROR(NumericError);  // non-finite intermediate or loss term
CF_DEFINE_ERROR(SpecError);     // incompatible layer specifications
CF_DEFINE_ERROR(PruneError);    // surgery would disconnect the network
CF_DEFINE_ERROR(FormatError);   // malformed checkpoint / tensor files
CF_DEFINE_ERROR(OracleError);   // verification oracle misuse
CF_DEFINE_ERROR(UsageError);    // command-line misuse
CF_DEFINE_ERROR(RuntimeError);  // other runtime failures surfaced by the CLI

#undef CF_DEFINE_ERROR

}  // namespace cf
