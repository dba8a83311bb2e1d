#pragma once

#include <stdexcept>
#include <string>

namespace eunet {

// Thrown when a caller breaks a documented precondition (shape mismatch,
// out-of-range class id, invalid config, ...).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Thrown when a forward computation produces NaN/Inf, or training diverges.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown by file readers on malformed input; message carries a byte offset.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

} // namespace eunet
