#pragma once

#include <stdexcept>
#include <string>

namespace mudpt {

/// Base for every error raised by the library. `kind()` names the category
/// so the CLI can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept = 0;
};

#define MUDPT_DEFINE_ERROR(Name, Kind)                         \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& what) : Error(what) {}    \
    const char* kind() const noexcept override { return Kind; } \
  };

MUDPT_DEFINE_ERROR(ShapeError, "shape")
MUDPT_DEFINE_ERROR(InvalidInputError, "invalid-input")
MUDPT_DEFINE_ERROR(NumericError, "numeric")
MUDPT_DEFINE_ERROR(ConfigError, "config")
MUDPT_DEFINE_ERROR(VocabularyError, "vocabulary")
MUDPT_DEFINE_ERROR(DataError, "data")
MUDPT_DEFINE_ERROR(IoError, "io")
MUDPT_DEFINE_ERROR(InternalError, "internal")

#undef MUDPT_DEFINE_ERROR

}  // namespace mudpt
