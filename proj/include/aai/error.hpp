#ifndef AAI_ERROR_HPP
#define AAI_ERROR_HPP

#include <stdexcept>
#include <string>

namespace aai {

// Bad caller input: shapes, ranges, unknown ids. The CLI maps this to exit code 2.
class ArgumentError : public std::invalid_argument {
public:
    explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed or truncated persisted data.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& message) {
    if (!cond) {
        throw ArgumentError(message);
    }
}

}  // namespace aai

#endif  // AAI_ERROR_HPP
