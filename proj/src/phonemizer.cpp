#include "streamtts/phonemizer.hpp"

#include <cctype>
#include <fstream>
#include <iostream>
#include <sstream>

namespace streamtts {

namespace {

// 32 phonemes keeps ids in [0, 32) so the toy codec's semantic-token map
// can carry a phoneme id plus one flag bit inside a 64-entry vocabulary.
const std::vector<std::string> kInventory = {
    "PAD", "WB",  "AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",
    "EH",  "ER",  "EY", "F",  "G",  "HH", "IH", "IY", "JH", "K",  "L",
    "M",   "N",   "OW", "P",  "R",  "S",  "T",  "UW", "V",  "Z"};

const char* kLetterFallback[26] = {
    /*a*/ "AE", /*b*/ "B",  /*c*/ "K",  /*d*/ "D",  /*e*/ "EH", /*f*/ "F",
    /*g*/ "G",  /*h*/ "HH", /*i*/ "IH", /*j*/ "JH", /*k*/ "K",  /*l*/ "L",
    /*m*/ "M",  /*n*/ "N",  /*o*/ "OW", /*p*/ "P",  /*q*/ "K",  /*r*/ "R",
    /*s*/ "S",  /*t*/ "T",  /*u*/ "UW", /*v*/ "V",  /*w*/ "UW", /*x*/ "K",
    /*y*/ "IY", /*z*/ "Z"};

const char* kDigitWords[10] = {"zero", "one", "two",   "three", "four",
                               "five", "six", "seven", "eight", "nine"};

}  // namespace

int Lexicon::phoneme_id(const std::string& name) const {
    auto it = inventory_index.find(name);
    if (it == inventory_index.end()) throw ValidationError("unknown phoneme: " + name);
    return it->second;
}

const std::string& Lexicon::phoneme_name(int id) const {
    if (id < 0 || id >= inventory_size())
        throw ValidationError("phoneme id out of range: " + std::to_string(id));
    return inventory[id];
}

Lexicon make_inventory() {
    Lexicon lex;
    lex.inventory = kInventory;
    for (int i = 0; i < static_cast<int>(kInventory.size()); ++i)
        lex.inventory_index[kInventory[i]] = i;
    return lex;
}

Lexicon load_lexicon(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open lexicon: " + path);
    Lexicon lex = make_inventory();
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("lexicon line " + std::to_string(lineno) + ": missing tab");
        std::string word = line.substr(0, tab);
        std::istringstream rest(line.substr(tab + 1));
        std::vector<int> ids;
        std::string ph;
        while (rest >> ph) {
            auto it = lex.inventory_index.find(ph);
            if (it == lex.inventory_index.end())
                throw ParseError("lexicon line " + std::to_string(lineno) +
                                 ": unknown phoneme \"" + ph + "\"");
            ids.push_back(it->second);
        }
        if (ids.empty())
            throw ParseError("lexicon line " + std::to_string(lineno) + ": no phonemes");
        if (lex.words.count(word))
            std::cerr << "lexicon: duplicate entry for \"" << word
                      << "\" at line " << lineno << ", keeping the later one\n";
        lex.words[word] = std::move(ids);
    }
    return lex;
}

std::vector<std::string> normalize_word(const std::string& word) {
    std::vector<std::string> tokens;
    std::string cur;
    auto flush = [&] {
        bool has_letter = false;
        for (char c : cur)
            if (c != '\'') has_letter = true;
        if (has_letter) tokens.push_back(cur);
        cur.clear();
    };
    for (unsigned char uc : word) {
        if (std::isalpha(uc)) {
            cur += static_cast<char>(std::tolower(uc));
        } else if (uc == '\'') {
            cur += '\'';
        } else if (std::isdigit(uc)) {
            flush();
            tokens.push_back(kDigitWords[uc - '0']);
        }
        // everything else (punctuation, whitespace, non-ASCII bytes) drops
    }
    flush();
    return tokens;
}

std::vector<int> phonemize_word(const std::string& word, const Lexicon& lex) {
    std::vector<int> out;
    for (const auto& tok : normalize_word(word)) {
        auto it = lex.words.find(tok);
        if (it != lex.words.end()) {
            out.insert(out.end(), it->second.begin(), it->second.end());
            continue;
        }
        for (char c : tok) {
            if (c == '\'') continue;
            out.push_back(lex.inventory_index.at(kLetterFallback[c - 'a']));
        }
    }
    return out;
}

}  // namespace streamtts
