#pragma once

#include <stdexcept>
#include <string>

namespace mora {

enum class ErrorCategory {
  dimension,
  numeric,
  contract,
  config,
  validation,
  ingestion,
  parse,
  io,
};


/// Base of every error the library raises. The category drives the CLI exit
/// code and the prefix of the printed message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define MORA_DEFINE_ERROR(Name, cat)                                        \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorCategory::cat, what) {} \
  };

MORA_DEFINE_ERROR(DimensionError, dimension)
MORA_DEFINE_ERROR(NumericError, numeric)
MORA_DEFINE_ERROR(ContractError, contract)
MORA_DEFINE_ERROR(ConfigError, config)
MORA_DEFINE_ERROR(ValidationError, validation)
MORA_DEFINE_ERROR(IngestionError, ingestion)
MORA_DEFINE_ERROR(ParseError, parse)
MORA_DEFINE_ERROR(IoError, io)

#undef MORA_DEFINE_ERROR

inline const char* to_string(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::dimension: return "dimension error";
    case ErrorCategory::numeric: return "numeric error";
    case ErrorCategory::contract: return "contract error";
    case ErrorCategory::config: return "config error";
    case ErrorCategory::validation: return "validation error";
    case ErrorCategory::ingestion: return "ingestion error";
    case ErrorCategory::parse: return "parse error";
    case ErrorCategory::io: return "io error";
  }
  return "error";
}

}  // namespace mora
