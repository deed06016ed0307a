#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "storyviz/errors.hpp"
#include "storyviz/graph.hpp"
#include "storyviz/nn.hpp"
#include "storyviz/png_io.hpp"
#include "storyviz/sprite_data.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// Tokenizer: closed caption vocabulary, dense ids, <pad>=0 and <bos>=1.
// ---------------------------------------------------------------------------

struct Tokenized {
    std::vector<int> ids;  // padded/truncated to max_len
    std::map<std::string, int> char_token_indices;  // roster name -> token position
    bool truncated = false;
};

class Tokenizer {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;

    // Vocabulary covers everything the caption template and the referential
    // rewrite can emit: names, both pronoun casings, verbs, glue words, the
    // period, actions, background labels.
    static Tokenizer build(const DatasetConfig& config, int max_len);
    // Reconstruction from a serialized word list (checkpoint loading).
    static Tokenizer from_vocab(const std::vector<std::string>& words,
                                const std::vector<std::string>& roster_names, int max_len);

    int vocab_size() const { return int(words_.size()); }
    int max_len() const { return max_len_; }
    const std::vector<std::string>& vocabulary() const { return words_; }
    const std::vector<std::string>& roster_names() const { return roster_names_; }

    bool has_word(const std::string& w) const { return ids_.count(w) != 0; }
    int word_id(const std::string& w) const;
    const std::string& word(int id) const;

    // <bos>-prefixed, padded to max_len; locates roster names. Empty input
    // stays all-<pad> with no <bos>.
    Tokenized tokenize(const std::string& caption) const;
    // Bare word ids, no <bos>, no padding (language-model streams).
    std::vector<int> encode_raw(const std::string& text) const;
    // Inverse of encoding for in-vocabulary text: drops <pad> and <bos>.
    std::string decode(const std::vector<int>& ids) const;

  private:
    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
    std::set<std::string> roster_;
    std::vector<std::string> roster_names_;
    int max_len_ = 16;

    void add_word(const std::string& w);
};

// ---------------------------------------------------------------------------
// Condition embeddings
// ---------------------------------------------------------------------------

enum class CondSource { text_only, fused, null_cond };

template <typename T>
struct ConditionEmbedding {
    Tensor<T> values;  // (max_len, d_c)
    std::vector<int> augmented_rows;  // sorted token positions that were fused
    CondSource source = CondSource::text_only;
};

template <typename T>
struct CharacterFeature {
    Tensor<T> values;  // (1, d_i)
    std::string name;
};

struct EncoderDims {
    int vocab = 0;  // filled from the tokenizer
    int max_len = 16;
    int d_c = 64;  // condition width
    int text_heads = 4;
    int text_layers = 2;
    int d_i = 64;  // crop feature width; also the last conv width
    int crop_c1 = 16;
    int crop_c2 = 32;

    void validate() const {
        if (vocab < 3) throw ConfigError("tokenizer vocabulary too small");
        if (d_c <= 0 || d_i <= 0 || max_len <= 0) throw ConfigError("encoder dims must be positive");
        if (d_c % text_heads != 0) throw ConfigError("condition width must divide by head count");
    }
};

namespace detail {

// largest group count from {8,4,2,1} dividing the channel width
inline int norm_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// TextEncoder: token + position embeddings into a small bidirectional
// transformer. Pad positions are masked out of attention and their output
// rows carry the raw <pad> embedding.
// ---------------------------------------------------------------------------

template <typename T>
class TextEncoder {
  public:
    using Id = typename Graph<T>::Id;

    TextEncoder(EncoderDims dims, std::string prefix) : dims_(dims), prefix_(std::move(prefix)) {}

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int d = dims_.d_c;
        store.add(prefix_ + "tok_emb", init_normal<T>(dims_.vocab, d, rng, 0.02));
        store.add(prefix_ + "pos_emb", init_normal<T>(dims_.max_len, d, rng, 0.02));
        for (int l = 0; l < dims_.text_layers; ++l) {
            const std::string lp = prefix_ + "l" + std::to_string(l) + ".";
            store.add(lp + "ln1.g", init_ones<T>(1, d));
            store.add(lp + "ln1.b", init_zeros<T>(1, d));
            store.add(lp + "wq", init_xavier<T>(d, d, rng));
            store.add(lp + "wk", init_xavier<T>(d, d, rng));
            store.add(lp + "wv", init_xavier<T>(d, d, rng));
            store.add(lp + "wo", init_xavier<T>(d, d, rng));
            store.add(lp + "ln2.g", init_ones<T>(1, d));
            store.add(lp + "ln2.b", init_zeros<T>(1, d));
            store.add(lp + "ffn.w1", init_xavier<T>(d, 2 * d, rng));
            store.add(lp + "ffn.b1", init_zeros<T>(1, 2 * d));
            store.add(lp + "ffn.w2", init_xavier<T>(2 * d, d, rng));
            store.add(lp + "ffn.b2", init_zeros<T>(1, d));
        }
        store.add(prefix_ + "lnf.g", init_ones<T>(1, d));
        store.add(prefix_ + "lnf.b", init_zeros<T>(1, d));
    }

    // (max_len, d_c)
    Id forward(Graph<T>& g, ParamStore<T>& store, const std::vector<int>& ids) const {
        if (int(ids.size()) != dims_.max_len)
            throw DataError("text encoder expects exactly max_len token ids");
        for (int id : ids)
            if (id < 0 || id >= dims_.vocab) throw DataError("token id out of range");

        const int d = dims_.d_c;
        const int hd = d / dims_.text_heads;
        Id tok = g.param(store.get(prefix_ + "tok_emb"));
        Id x = g.add(g.gather_rows(tok, ids), g.param(store.get(prefix_ + "pos_emb")));

        // additive key mask: pad keys are unreachable
        Tensor<T> km(1, dims_.max_len);
        for (int p = 0; p < dims_.max_len; ++p) km.at(0, p) = ids[size_t(p)] == Tokenizer::kPad ? T(-1e30) : T(0);
        Id key_mask = g.input(std::move(km));

        for (int l = 0; l < dims_.text_layers; ++l) {
            const std::string lp = prefix_ + "l" + std::to_string(l) + ".";
            Id h = affine_norm(g, store, g.layer_norm(x), lp + "ln1");
            Id q = g.matmul(h, g.param(store.get(lp + "wq")));
            Id k = g.matmul(h, g.param(store.get(lp + "wk")));
            Id v = g.matmul(h, g.param(store.get(lp + "wv")));
            Id ctx = -1;
            for (int hh = 0; hh < dims_.text_heads; ++hh) {
                Id qh = g.slice_cols(q, hh * hd, hd);
                Id kh = g.slice_cols(k, hh * hd, hd);
                Id vh = g.slice_cols(v, hh * hd, hd);
                Id scores = g.scale(g.matmul_nt(qh, kh), T(1.0 / std::sqrt(double(hd))));
                Id att = g.softmax_rows(g.add_row_broadcast(scores, key_mask));
                Id oh = g.matmul(att, vh);
                ctx = hh == 0 ? oh : g.concat_cols(ctx, oh);
            }
            x = g.add(x, g.matmul(ctx, g.param(store.get(lp + "wo"))));
            Id h2 = affine_norm(g, store, g.layer_norm(x), lp + "ln2");
            Id f = linear(g, h2, g.param(store.get(lp + "ffn.w1")), g.param(store.get(lp + "ffn.b1")));
            f = linear(g, g.gelu(f), g.param(store.get(lp + "ffn.w2")), g.param(store.get(lp + "ffn.b2")));
            x = g.add(x, f);
        }
        x = affine_norm(g, store, g.layer_norm(x), prefix_ + "lnf");

        std::vector<int> pad_pos;
        for (int p = 0; p < dims_.max_len; ++p)
            if (ids[size_t(p)] == Tokenizer::kPad) pad_pos.push_back(p);
        if (!pad_pos.empty()) {
            std::vector<int> pads(pad_pos.size(), Tokenizer::kPad);
            x = g.row_replace(x, pad_pos, g.gather_rows(tok, pads));
        }
        return x;
    }

    ConditionEmbedding<T> encode(ParamStore<T>& store, const std::vector<int>& ids) const {
        Graph<T> g(false);
        ConditionEmbedding<T> out;
        out.values = g.val(forward(g, store, ids));
        out.source = CondSource::text_only;
        return out;
    }

    const EncoderDims& dims() const { return dims_; }

  private:
    EncoderDims dims_;
    std::string prefix_;

    Id affine_norm(Graph<T>& g, ParamStore<T>& store, Id normed, const std::string& name) const {
        Id s = g.mul_row_broadcast(normed, g.param(store.get(name + ".g")));
        return g.add_row_broadcast(s, g.param(store.get(name + ".b")));
    }
};

// ---------------------------------------------------------------------------
// CropEncoder: three strided convolutions then global average pooling, so a
// crop of any size at least 4x4 maps to a fixed d_i-wide feature.
// ---------------------------------------------------------------------------

template <typename T>
class CropEncoder {
  public:
    using Id = typename Graph<T>::Id;

    CropEncoder(EncoderDims dims, std::string prefix) : dims_(dims), prefix_(std::move(prefix)) {}

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int c1 = dims_.crop_c1, c2 = dims_.crop_c2, c3 = dims_.d_i;
        store.add(prefix_ + "conv1.w", init_kaiming<T>(c1, 3 * 9, rng));
        store.add(prefix_ + "conv1.b", init_zeros<T>(c1, 1));
        store.add(prefix_ + "conv2.w", init_kaiming<T>(c2, c1 * 9, rng));
        store.add(prefix_ + "conv2.b", init_zeros<T>(c2, 1));
        store.add(prefix_ + "gn2.g", init_ones<T>(c2, 1));
        store.add(prefix_ + "gn2.b", init_zeros<T>(c2, 1));
        store.add(prefix_ + "conv3.w", init_kaiming<T>(c3, c2 * 9, rng));
        store.add(prefix_ + "conv3.b", init_zeros<T>(c3, 1));
        store.add(prefix_ + "gn3.g", init_ones<T>(c3, 1));
        store.add(prefix_ + "gn3.b", init_zeros<T>(c3, 1));
    }

    // crop_chw is (3, w*h); returns (1, d_i)
    Id forward(Graph<T>& g, ParamStore<T>& store, const Tensor<T>& crop_chw, int w, int h) const {
        if (w < 4 || h < 4)
            throw DataError("character crop too small: " + std::to_string(w) + "x" +
                            std::to_string(h) + " (need at least 4x4)");
        if (crop_chw.rows != 3 || crop_chw.cols != w * h)
            throw DataError("character crop buffer shape mismatch");

        Id x = g.input(Tensor<T>(crop_chw));
        x = g.conv2d(x, g.param(store.get(prefix_ + "conv1.w")), h, w, 3, 3, 1, 1);
        x = g.silu(g.add_col_broadcast(x, g.param(store.get(prefix_ + "conv1.b"))));
        const int h2 = (h - 1) / 2 + 1, w2 = (w - 1) / 2 + 1;
        x = g.conv2d(x, g.param(store.get(prefix_ + "conv2.w")), h, w, 3, 3, 2, 1);
        x = g.add_col_broadcast(x, g.param(store.get(prefix_ + "conv2.b")));
        x = norm_act(g, store, x, dims_.crop_c2, prefix_ + "gn2");
        x = g.conv2d(x, g.param(store.get(prefix_ + "conv3.w")), h2, w2, 3, 3, 2, 1);
        x = g.add_col_broadcast(x, g.param(store.get(prefix_ + "conv3.b")));
        x = norm_act(g, store, x, dims_.d_i, prefix_ + "gn3");
        return g.transpose(g.mean_cols(x));
    }

    CharacterFeature<T> encode(ParamStore<T>& store, const Image8& crop,
                               const std::string& name) const {
        Graph<T> g(false);
        CharacterFeature<T> out;
        out.values = g.val(forward(g, store, image_to_chw(crop).template cast<T>(), crop.w, crop.h));
        out.name = name;
        return out;
    }

    const EncoderDims& dims() const { return dims_; }

  private:
    EncoderDims dims_;
    std::string prefix_;

    Id norm_act(Graph<T>& g, ParamStore<T>& store, Id x, int channels, const std::string& name) const {
        Id n = g.group_norm(x, detail::norm_groups(channels));
        n = g.mul_col_broadcast(n, g.param(store.get(name + ".g")));
        n = g.add_col_broadcast(n, g.param(store.get(name + ".b")));
        return g.silu(n);
    }
};

// ---------------------------------------------------------------------------
// CharacterFusion: replaces each named token row with
// MLP(concat(text_row, crop_feature)); every other row passes through
// untouched.
// ---------------------------------------------------------------------------

template <typename T>
class CharacterFusion {
  public:
    using Id = typename Graph<T>::Id;

    CharacterFusion(EncoderDims dims, std::string prefix) : dims_(dims), prefix_(std::move(prefix)) {}

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int in = dims_.d_c + dims_.d_i, hidden = 2 * dims_.d_c;
        store.add(prefix_ + "w1", init_xavier<T>(in, hidden, rng));
        store.add(prefix_ + "b1", init_zeros<T>(1, hidden));
        store.add(prefix_ + "w2", init_xavier<T>(hidden, dims_.d_c, rng));
        store.add(prefix_ + "b2", init_zeros<T>(1, dims_.d_c));
    }

    // positions must be unique; feature_nodes[k] is (1, d_i) and pairs with
    // positions[k]
    Id forward(Graph<T>& g, ParamStore<T>& store, Id text, const std::vector<int>& positions,
               const std::vector<Id>& feature_nodes) const {
        if (positions.size() != feature_nodes.size())
            throw DataError("character position/feature count mismatch");
        if (positions.empty()) return text;
        Id stack = -1;
        for (size_t k = 0; k < positions.size(); ++k) {
            if (positions[k] < 0 || positions[k] >= dims_.max_len)
                throw DataError("character token position out of range");
            Id row = g.concat_cols(g.slice_rows(text, positions[k], 1), feature_nodes[k]);
            stack = k == 0 ? row : g.concat_rows(stack, row);
        }
        Id h = linear(g, stack, g.param(store.get(prefix_ + "w1")), g.param(store.get(prefix_ + "b1")));
        Id fused = linear(g, g.gelu(h), g.param(store.get(prefix_ + "w2")),
                          g.param(store.get(prefix_ + "b2")));
        return g.row_replace(text, positions, fused);
    }

    const EncoderDims& dims() const { return dims_; }

  private:
    EncoderDims dims_;
    std::string prefix_;
};

// ---------------------------------------------------------------------------
// EncoderStack: the three encoders plus the learned null condition row,
// sharing one parameter store.
// ---------------------------------------------------------------------------

template <typename T>
class EncoderStack {
  public:
    using Id = typename Graph<T>::Id;

    explicit EncoderStack(EncoderDims dims)
        : dims_(dims), text_(dims, "text_enc."), crop_(dims, "crop_enc."), fuse_(dims, "fuse.") {
        dims_.validate();
    }

    void register_params(ParamStore<T>& store, Rng& rng) const {
        text_.register_params(store, rng);
        crop_.register_params(store, rng);
        fuse_.register_params(store, rng);
        store.add("cond.null", init_normal<T>(1, dims_.d_c, rng, 0.02));
    }

    TextEncoder<T>& text() { return text_; }
    CropEncoder<T>& crop() { return crop_; }
    CharacterFusion<T>& fusion() { return fuse_; }
    const TextEncoder<T>& text() const { return text_; }
    const CropEncoder<T>& crop() const { return crop_; }
    const CharacterFusion<T>& fusion() const { return fuse_; }
    const EncoderDims& dims() const { return dims_; }

    // (max_len, d_c): the learned null row broadcast to every position
    Id null_condition(Graph<T>& g, ParamStore<T>& store) const {
        return g.gather_rows(g.param(store.get("cond.null")), std::vector<int>(size_t(dims_.max_len), 0));
    }

    ConditionEmbedding<T> encode_text(ParamStore<T>& store, const std::vector<int>& ids) const {
        return text_.encode(store, ids);
    }

    CharacterFeature<T> encode_character(ParamStore<T>& store, const Image8& crop,
                                         const std::string& name) const {
        return crop_.encode(store, crop, name);
    }

    ConditionEmbedding<T> null_embedding(ParamStore<T>& store) const {
        Graph<T> g(false);
        ConditionEmbedding<T> out;
        out.values = g.val(null_condition(g, store));
        out.source = CondSource::null_cond;
        return out;
    }

    // Plain-value fusion; the training path drives the graph overloads
    // directly instead.
    ConditionEmbedding<T> fuse_embedding(ParamStore<T>& store, const ConditionEmbedding<T>& text_emb,
                                         const std::map<std::string, int>& char_token_indices,
                                         const std::vector<CharacterFeature<T>>& features) const {
        if (char_token_indices.size() != features.size())
            throw DataError("character index/feature count mismatch");
        std::vector<int> positions;
        Graph<T> g(false);
        Id text = g.input(Tensor<T>(text_emb.values));
        std::vector<Id> feats;
        for (const auto& [name, pos] : char_token_indices) {
            const auto it = std::find_if(features.begin(), features.end(),
                                         [&](const CharacterFeature<T>& f) { return f.name == name; });
            if (it == features.end())
                throw DataError("no crop feature supplied for character '" + name + "'");
            positions.push_back(pos);
            feats.push_back(g.input(Tensor<T>(it->values)));
        }
        ConditionEmbedding<T> out;
        out.values = g.val(fuse_.forward(g, store, text, positions, feats));
        out.augmented_rows = positions;  // map iteration is name-sorted; positions follow caption order
        std::sort(out.augmented_rows.begin(), out.augmented_rows.end());
        out.source = CondSource::fused;
        return out;
    }

  private:
    EncoderDims dims_;
    TextEncoder<T> text_;
    CropEncoder<T> crop_;
    CharacterFusion<T> fuse_;
};

}  // namespace storyviz
