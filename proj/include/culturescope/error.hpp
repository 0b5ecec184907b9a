#pragma once

#include <stdexcept>
#include <string>

namespace culturescope {

// Single exception type for the whole library; `kind` tells callers which
// contract was violated without string matching.
class Error : public std::runtime_error {
public:
    enum class Kind {
        length,        // sequence/size limits
        shape,         // dimension mismatch
        range,         // index out of range
        numeric,       // non-finite value produced
        precondition,  // caller violated an operation precondition
        config,        // bad configuration / missing requirement
        data,          // malformed or inconsistent input data
        parse,         // unreadable file or record
        provider,      // external provider (embedding endpoint) failure
        io,            // filesystem error
    };

    Error(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline const char* to_string(Error::Kind k) {
    switch (k) {
        case Error::Kind::length: return "length";
        case Error::Kind::shape: return "shape";
        case Error::Kind::range: return "range";
        case Error::Kind::numeric: return "numeric";
        case Error::Kind::precondition: return "precondition";
        case Error::Kind::config: return "config";
        case Error::Kind::data: return "data";
        case Error::Kind::parse: return "parse";
        case Error::Kind::provider: return "provider";
        case Error::Kind::io: return "io";
    }
    return "unknown";
}

}  // namespace culturescope
