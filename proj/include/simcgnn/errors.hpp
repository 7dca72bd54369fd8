#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace simcgnn {

// Shape disagreement between operands of a tensor operation.
class dimension_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated by the caller.
class contract_error : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Malformed input text. Carries the 1-based line number.
class parse_error : public std::runtime_error {
public:
    parse_error(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class empty_input_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Filtering removed every session.
class empty_dataset_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint and bundle disagree on vocabulary, or formats mismatch.
class compatibility_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

} // namespace detail
} // namespace simcgnn
