#pragma once

#include <stdexcept>
#include <string>

namespace frami {

// Every failure carries the CLI exit code it maps to.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what, 2) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what, 2) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain error: " + what, 2) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("index error: " + what, 2) {}
};

class IngestionError : public Error {
 public:
  explicit IngestionError(const std::string& what) : Error("ingestion error: " + what, 3) {}
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error("integrity error: " + what, 3) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what, 3) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical abort: " + what, 4) {}
};

}  // namespace frami
