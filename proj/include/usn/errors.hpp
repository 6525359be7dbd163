#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace usn {

/// Malformed network layout, shapes that do not line up, bad config files.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite values or an iterative method that failed to converge.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConvergenceError : public NumericError {
public:
    ConvergenceError(const std::string& what, std::size_t iterations)
        : NumericError(what + " (after " + std::to_string(iterations) + " iterations)"),
          iterations_(iterations) {}

    std::size_t iterations() const noexcept { return iterations_; }

private:
    std::size_t iterations_;
};

#define USN_REQUIRE(cond, msg)                                                   \
    do {                                                                         \
        if (!(cond)) throw ::usn::ContractError(std::string(__func__) + ": " + (msg)); \
    } while (0)

}  // namespace usn
