#pragma once

#include <stdexcept>
#include <string>

namespace trompt {

// Error taxonomy shared by the whole library. The category maps onto the
// process exit codes used by the CLI and the C API status codes.
enum class ErrorKind {
  Usage,    // bad flags, invalid configuration
  Data,     // unreadable/ill-formed datasets, schema mismatches
  Train,    // divergence and other training failures
  Numeric,  // non-finite value produced by a forward primitive
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_usage(const std::string& msg) {
  throw Error(ErrorKind::Usage, msg);
}
[[noreturn]] inline void throw_data(const std::string& msg) {
  throw Error(ErrorKind::Data, msg);
}
[[noreturn]] inline void throw_train(const std::string& msg) {
  throw Error(ErrorKind::Train, msg);
}
[[noreturn]] inline void throw_numeric(const std::string& msg) {
  throw Error(ErrorKind::Numeric, msg);
}
[[noreturn]] inline void throw_internal(const std::string& msg) {
  throw Error(ErrorKind::Internal, msg);
}

}  // namespace trompt
