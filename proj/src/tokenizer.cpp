#include <sstream>

#include "storyviz/encoders.hpp"
#include "storyviz/errors.hpp"

namespace storyviz {

namespace {

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

}  // namespace

void Tokenizer::add_word(const std::string& w) {
    if (ids_.count(w)) return;
    ids_[w] = int(words_.size());
    words_.push_back(w);
}

Tokenizer Tokenizer::build(const DatasetConfig& config, int max_len) {
    if (max_len < 2) throw ConfigError("tokenizer max_len must be at least 2");
    Tokenizer t;
    t.max_len_ = max_len;
    t.add_word("<pad>");
    t.add_word("<bos>");
    for (const auto& ch : config.roster) {
        t.add_word(ch.name);
        t.roster_.insert(ch.name);
        t.roster_names_.push_back(ch.name);
    }
    // the rewrite emits pronouns both mid-sentence and sentence-initial
    for (const char* w : {"He", "She", "They", "he", "she", "they"}) t.add_word(w);
    for (const char* w : {"is", "are", "and", "in", "the", "."}) t.add_word(w);
    for (const auto& a : config.actions) t.add_word(a);
    for (const auto& b : config.backgrounds) t.add_word(b.label);
    return t;
}

Tokenizer Tokenizer::from_vocab(const std::vector<std::string>& words,
                                const std::vector<std::string>& roster_names, int max_len) {
    if (max_len < 2) throw ConfigError("tokenizer max_len must be at least 2");
    if (words.size() < 2 || words[0] != "<pad>" || words[1] != "<bos>")
        throw DataError("vocabulary list must start with <pad> and <bos>");
    Tokenizer t;
    t.max_len_ = max_len;
    for (const auto& w : words) {
        if (t.ids_.count(w)) throw DataError("duplicate word in vocabulary list: " + w);
        t.add_word(w);
    }
    for (const auto& n : roster_names) {
        if (!t.ids_.count(n)) throw DataError("roster name missing from vocabulary: " + n);
        t.roster_.insert(n);
        t.roster_names_.push_back(n);
    }
    return t;
}

int Tokenizer::word_id(const std::string& w) const {
    const auto it = ids_.find(w);
    if (it == ids_.end()) throw DataError("word not in caption vocabulary: '" + w + "'");
    return it->second;
}

const std::string& Tokenizer::word(int id) const {
    if (id < 0 || id >= int(words_.size()))
        throw DataError("token id out of range: " + std::to_string(id));
    return words_[size_t(id)];
}

Tokenized Tokenizer::tokenize(const std::string& caption) const {
    Tokenized out;
    out.ids.assign(size_t(max_len_), kPad);
    const auto words = split_words(caption);
    if (words.empty()) return out;

    out.ids[0] = kBos;
    for (size_t i = 0; i < words.size(); ++i) {
        const int pos = int(i) + 1;
        if (pos >= max_len_) {
            out.truncated = true;
            break;
        }
        out.ids[size_t(pos)] = word_id(words[i]);
        if (roster_.count(words[i])) out.char_token_indices[words[i]] = pos;
    }
    return out;
}

std::vector<int> Tokenizer::encode_raw(const std::string& text) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) out.push_back(word_id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos) continue;
        const std::string& w = word(id);
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

}  // namespace storyviz
