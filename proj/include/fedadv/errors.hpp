#pragma once

#include <stdexcept>
#include <string>

namespace fedadv {

// Base of every error raised by the library. Subclasses map onto the
// failure categories callers (and the CLI exit codes) care about.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

class ValidationError : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

class SingularityError : public NumericError {
public:
  using NumericError::NumericError;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class IngestionError : public Error {
public:
  using Error::Error;
};

class FusionError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Raised by the federated driver when a client's local training fails.
class ClientError : public Error {
public:
  ClientError(std::size_t client_id, const std::string& what)
      : Error("client " + std::to_string(client_id) + ": " + what), client_id_(client_id) {}

  std::size_t client_id() const noexcept { return client_id_; }

private:
  std::size_t client_id_;
};

} // namespace fedadv
