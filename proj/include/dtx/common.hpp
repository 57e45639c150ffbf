#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dtx {

// Exit-code categories for the CLI; library code throws, the CLI maps.
enum class ErrorKind {
    usage   = 1,
    data    = 2,
    numeric = 3,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

// Distinct failure modes for the binary file formats.
enum class FormatError {
    bad_magic,
    bad_version,
    truncated,
    dim_mismatch,
};

class FileFormatError : public Error {
public:
    FileFormatError(FormatError code, const std::string& msg)
        : Error(ErrorKind::data, msg), code_(code) {}
    FormatError code() const { return code_; }

private:
    FormatError code_;
};

}  // namespace dtx
