#pragma once

#include <stdexcept>
#include <string>

namespace uora {

// Error categories map one-to-one onto the C API status codes.
enum class ErrorKind {
  Shape = 1,
  Config = 2,
  Bounds = 3,
  Decode = 4,
  Version = 5,
  Divergence = 6,
  Checksum = 7,
  Io = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error(ErrorKind::Shape, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct BoundsError : Error {
  explicit BoundsError(const std::string& w) : Error(ErrorKind::Bounds, w) {}
};
struct DecodeError : Error {
  explicit DecodeError(const std::string& w) : Error(ErrorKind::Decode, w) {}
};
struct VersionError : Error {
  explicit VersionError(const std::string& w) : Error(ErrorKind::Version, w) {}
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& w)
      : Error(ErrorKind::Divergence, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::Io, w) {}
};

}  // namespace uora
