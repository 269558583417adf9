#pragma once

#include <stdexcept>
#include <string>

namespace chainfl {

enum class errc {
  numeric_overflow,
  aggregation_empty,
  shape_mismatch,
  validation,
  not_found,
  corruption,
  config,
  contract_violation,
  double_genesis,
  unknown_vertex,
  pruned_vertex,
  iteration_failed,
  watchdog,
  io,
};

inline const char* to_string(errc code) {
  switch (code) {
    case errc::numeric_overflow: return "numeric_overflow";
    case errc::aggregation_empty: return "aggregation_empty";
    case errc::shape_mismatch: return "shape_mismatch";
    case errc::validation: return "validation";
    case errc::not_found: return "not_found";
    case errc::corruption: return "corruption";
    case errc::config: return "config";
    case errc::contract_violation: return "contract_violation";
    case errc::double_genesis: return "double_genesis";
    case errc::unknown_vertex: return "unknown_vertex";
    case errc::pruned_vertex: return "pruned_vertex";
    case errc::iteration_failed: return "iteration_failed";
    case errc::watchdog: return "watchdog";
    case errc::io: return "io";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-checkable code.
class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  errc code() const noexcept { return code_; }
  // The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  errc code_;
  std::string detail_;
};

}  // namespace chainfl
