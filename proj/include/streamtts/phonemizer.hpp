#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "streamtts/errors.hpp"

namespace streamtts {

inline constexpr int kPadPhoneme = 0;
inline constexpr int kWordBoundaryPhoneme = 1;

// Word -> phoneme-id lexicon plus the phoneme inventory. IDs are dense
// from 0 with PAD=0 and WORD_BOUNDARY=1 reserved; unknown words fall back
// to a fixed per-letter table so every lettered word stays pronounceable.
struct Lexicon {
    std::vector<std::string> inventory;          // index == PhonemeId
    std::map<std::string, int> inventory_index;  // name -> id
    std::unordered_map<std::string, std::vector<int>> words;

    int phoneme_id(const std::string& name) const;
    const std::string& phoneme_name(int id) const;
    int inventory_size() const { return static_cast<int>(inventory.size()); }
};

// The canonical 32-phoneme toy inventory (no lexicon entries).
Lexicon make_inventory();

// Parses a TSV lexicon (`word<TAB>PH1 PH2 ...`, '#' comments) over the
// canonical inventory. Duplicate words keep the last entry with a warning
// on stderr; an unknown phoneme string is a parse error naming the line.
Lexicon load_lexicon(const std::string& path);

// Lowercases, strips punctuation except apostrophes, and spells out digit
// characters as words ("42" -> "four", "two"). Tokens without letters are
// dropped.
std::vector<std::string> normalize_word(const std::string& word);

// Lexicon hit returns the entry; a miss maps letters through the fallback
// table. Returns an empty list when the word has no letters.
std::vector<int> phonemize_word(const std::string& word, const Lexicon& lex);

}  // namespace streamtts
