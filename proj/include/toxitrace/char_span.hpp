#pragma once

#include <cstddef>
#include <vector>

namespace toxitrace {

// Half-open [begin, end) interval of unicode scalar values within a text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t length() const noexcept { return end > begin ? end - begin : 0; }
  bool operator==(const CharSpan&) const = default;
  auto operator<=>(const CharSpan&) const = default;
};

// Sorts and coalesces intersecting spans (touching spans stay separate).
std::vector<CharSpan> normalize_spans(std::vector<CharSpan> spans);

}  // namespace toxitrace
