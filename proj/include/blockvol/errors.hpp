#pragma once

#include <stdexcept>
#include <string>

namespace blockvol {

enum class Errc {
    invalid_argument,
    config,
    io,
    unsupported,
    not_found,
    already_exists,
    corrupt,
    exhausted,
    partial,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
    throw Error(code, message);
}

} // namespace blockvol
