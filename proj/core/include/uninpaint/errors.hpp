#pragma once

#include <stdexcept>
#include <string>

namespace uninpaint {

// Base error carrying a short machine-readable kind ("config", "contract", ...).
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message);

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error("config", message) {}
};

// Shape or precondition mismatch at an API boundary.
class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& message) : Error("contract", message) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& message) : Error("checkpoint", message) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& message) : Error("data", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

// Raised when a training objective becomes NaN/Inf. The message carries the
// step, the offending term and the ids of the batch that produced it.
class NonFiniteLossError : public Error {
public:
    explicit NonFiniteLossError(const std::string& message) : Error("non_finite", message) {}
};

} // namespace uninpaint
