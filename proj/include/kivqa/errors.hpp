// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace kivqa {

// Error taxonomy maps 1:1 onto CLI exit codes:
//   ConfigError -> 2, DataError -> 3, NumericError -> 4.
// ContractError signals a violated API precondition (a caller bug); the CLI
// maps it to the data exit code when it escapes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    cat_into(os, rest...);
}
}  // namespace detail

// cat("built ", n, " rows") -> std::string; used for error/log messages.
template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    detail::cat_into(os, args...);
    return os.str();
}

#define KIVQA_CHECK(cond, ...)                                  \
    do {                                                        \
        if (!(cond)) throw ::kivqa::ContractError(::kivqa::cat(__VA_ARGS__)); \
    } while (0)

}  // namespace kivqa
