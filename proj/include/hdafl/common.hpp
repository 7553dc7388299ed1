#pragma once

#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>

namespace hdafl {

// Error taxonomy, mapped onto CLI exit codes:
//   validation_error (and derived) -> 1, load_error -> 2, numeric_error -> 3.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class validation_error : public error {
public:
    using error::error;
};

class config_error : public validation_error {
public:
    using validation_error::validation_error;
};

class sampling_error : public validation_error {
public:
    using validation_error::validation_error;
};

class load_error : public error {
public:
    using error::error;
};

class numeric_error : public error {
public:
    using error::error;
};

/// Warning sink. Tests may swap the handler to capture warnings.
inline std::function<void(const std::string&)>& warn_handler() {
    static std::function<void(const std::string&)> handler =
        [](const std::string& msg) { std::fprintf(stderr, "warning: %s\n", msg.c_str()); };
    return handler;
}

inline void warn(const std::string& msg) { warn_handler()(msg); }

}  // namespace hdafl
