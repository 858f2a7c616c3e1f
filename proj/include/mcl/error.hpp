#pragma once

#include <stdexcept>
#include <string>

namespace mcl {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// precondition / dimension violations
struct ContractError : Error {
    using Error::Error;
};

// value outside its documented interval
struct OutOfRangeError : Error {
    using Error::Error;
};

// input rejected outright (e.g. NaN from an upstream producer)
struct RejectError : Error {
    using Error::Error;
};

// no extractable payload in a model reply
struct ParseError : Error {
    using Error::Error;
};

// payload present but a required key is absent
struct MissingKeyError : Error {
    using Error::Error;
};

// bad configuration file or inconsistent geometry
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace mcl
