#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace pmg {

// Lowercased alphanumeric words hashed into [0, vocab_size).
std::vector<std::size_t> tokenize(std::string_view text, std::size_t vocab_size);

}  // namespace pmg
