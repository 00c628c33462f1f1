#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace card {

using token_t = int32_t;

// Bad command lines / config files. The CLI maps this to exit code 1,
// everything else thrown to exit code 2.
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string & msg) {
    throw std::runtime_error(msg);
}

#define CARD_CHECK(cond, msg)          \
    do {                               \
        if (!(cond)) ::card::fail(msg); \
    } while (0)

}  // namespace card
