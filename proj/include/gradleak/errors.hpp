#pragma once

#include <stdexcept>
#include <string>

namespace gradleak {

// Violated precondition, invariant, or shape contract. CLI maps this to exit 3.
class ContractViolation : public std::runtime_error {
public:
    explicit ContractViolation(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value escaped a numeric operation. CLI maps this to exit 4.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

} // namespace gradleak
