#pragma once

#include <stdexcept>
#include <string>

namespace ipa {

// All precondition and numeric failures surface as ipa::Error; the CLI maps
// them to a nonzero exit code.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace ipa
