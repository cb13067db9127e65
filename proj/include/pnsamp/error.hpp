#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace pnsamp {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/graph shape disagreements.
struct ShapeError : Error {
    using Error::Error;
};

/// Domain violations (bad argument values, out-of-range targets, ...).
struct ValueError : Error {
    using Error::Error;
};

/// File container problems: bad magic, truncation, invalid headers.
struct IoError : Error {
    using Error::Error;
};

namespace detail {

template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

}  // namespace detail

}  // namespace pnsamp
