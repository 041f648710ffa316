#pragma once

#include <stdexcept>
#include <vector>

namespace csg {

// Token id 0 is the reserved null token used for unconditional prediction.
inline constexpr int kNullToken = 0;

// A prompt is a short token sequence plus the index of the single token the
// edit is allowed to change.
struct Prompt {
  std::vector<int> tokens;
  int edited_index = 0;
};

inline void validate_prompt(const Prompt& p, int vocab_size) {
  if (p.tokens.empty())
    throw std::invalid_argument("prompt: token list is empty.");
  if (p.edited_index < 0 || p.edited_index >= static_cast<int>(p.tokens.size()))
    throw std::invalid_argument("prompt: edited_index out of range.");
  for (int t : p.tokens)
    if (t < 0 || t >= vocab_size)
      throw std::invalid_argument("prompt: token id outside vocabulary.");
}

inline bool all_null(const Prompt& p) {
  for (int t : p.tokens)
    if (t != kNullToken) return false;
  return true;
}

// Unconditional counterpart: same length, every slot null.
inline Prompt null_prompt_like(const Prompt& p) {
  Prompt q;
  q.tokens.assign(p.tokens.size(), kNullToken);
  q.edited_index = p.edited_index;
  return q;
}

// Source/target prompts of one edit must agree outside the edited slot.
// Equal prompts are allowed: editing toward the same token is a guided
// reconstruction.
inline void validate_edit_pair(const Prompt& src, const Prompt& tgt) {
  if (src.tokens.size() != tgt.tokens.size())
    throw std::invalid_argument("edit pair: prompt lengths differ.");
  if (src.edited_index != tgt.edited_index)
    throw std::invalid_argument("edit pair: edited_index differs.");
  for (std::size_t i = 0; i < src.tokens.size(); ++i) {
    if (static_cast<int>(i) != src.edited_index &&
        src.tokens[i] != tgt.tokens[i])
      throw std::invalid_argument("edit pair: non-edited tokens must match.");
  }
}

}  // namespace csg
