#pragma once

#include <stdexcept>
#include <string>

namespace cca {

// Caller passed something outside an operation's documented domain.
class input_error : public std::invalid_argument {
public:
    explicit input_error(const std::string& what) : std::invalid_argument(what) {}
};

// An internal invariant failed; indicates a bug, not bad input.
class internal_error : public std::logic_error {
public:
    explicit internal_error(const std::string& what) : std::logic_error(what) {}
};

// Training produced a non-finite loss. Carries the offending step.
class divergence_error : public std::runtime_error {
public:
    divergence_error(const std::string& what, long step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw input_error(what);
}

} // namespace cca
