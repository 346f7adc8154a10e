#pragma once

#include <stdexcept>
#include <string>

namespace warpnorm {

// Base class for all library errors.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / dimension mismatch; message carries the offending shapes.
class dim_error : public error {
public:
    explicit dim_error(const std::string& msg) : error(msg) {}
};

// Violated call contract (bad op id, out-of-range mask values, ...).
class contract_error : public error {
public:
    explicit contract_error(const std::string& msg) : error(msg) {}
};

// Invalid configuration (files, flags, scene specs).
class config_error : public error {
public:
    explicit config_error(const std::string& msg) : error(msg) {}
};

// The finite-difference oracle itself failed (non-finite evaluation).
class oracle_error : public error {
public:
    explicit oracle_error(const std::string& msg) : error(msg) {}
};

// Training aborted (divergence, non-finite loss or gradients).
class train_error : public error {
public:
    explicit train_error(const std::string& msg) : error(msg) {}
};

} // namespace warpnorm
