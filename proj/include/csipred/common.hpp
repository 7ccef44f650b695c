#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Scalar type for all tensor math. Default is f32; test builds define
// CSIPRED_REAL=double so finite-difference gradient checks have headroom.
#ifndef CSIPRED_REAL
#define CSIPRED_REAL float
#endif

namespace csipred {

using real_t = CSIPRED_REAL;

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += "x";
    }
    return out + "]";
}

// Error taxonomy. Dimension mismatches, violated call contracts, bad
// user-facing parameters and IO failures are kept distinct so the CLI can
// report them faithfully.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ParamError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace csipred
