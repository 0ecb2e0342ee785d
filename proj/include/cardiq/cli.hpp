#pragma once

#include <string>
#include <vector>

namespace cardiq::cli {

/// All randomness in a run flows from this one seed unless --seed is given.
inline constexpr std::uint64_t kDefaultSeed = 1729;

/// Entry point behind the executable: 0 success, 1 pipeline error,
/// 2 usage error.
int run(const std::vector<std::string>& args);

}  // namespace cardiq::cli
