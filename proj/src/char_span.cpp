#include "toxitrace/char_span.hpp"

#include <algorithm>

namespace toxitrace {

std::vector<CharSpan> normalize_spans(std::vector<CharSpan> spans) {
  std::erase_if(spans, [](const CharSpan& s) { return s.end <= s.begin; });
  std::sort(spans.begin(), spans.end());
  std::vector<CharSpan> out;
  for (const auto& s : spans) {
    if (!out.empty() && s.begin < out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace toxitrace
