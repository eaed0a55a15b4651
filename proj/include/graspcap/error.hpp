#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace graspcap {

enum class ErrorKind {
  PointBehindCamera,
  DegenerateConfiguration,
  InsufficientCorrespondences,
  DegenerateMotion,
  IllConditioned,
  PreconditionViolation,
  NoSteadySegment,
  ConfigError,
  ParseError,
};

std::string_view to_string(ErrorKind kind);

/// Exception carrying a machine-checkable kind alongside the message.
class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

}  // namespace graspcap
