#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "storyviz/encoders.hpp"
#include "storyviz/errors.hpp"
#include "storyviz/graph.hpp"
#include "storyviz/nn.hpp"
#include "storyviz/rng.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// Dimensions for the stage-2 story model: a small causal LM that reads an
// interleaved context of visual prefixes and caption tokens, emits reserved
// image-request tokens, and maps their hidden states to the diffusion
// condition.
// ---------------------------------------------------------------------------

struct StoryLMDims {
    int e = 128;    // LM width
    int heads = 4;
    int layers = 4;
    int max_seq = 96;
    int img_tokens = 8;       // reserved image-request tokens appended per frame
    int visual_prefix = 4;    // embedding rows one frame feature expands to
    int mapper_queries = 16;  // must equal the diffusion condition length
    int mapper_layers = 2;
    int d_i = 64;  // frame feature width (crop encoder output)
    int d_c = 64;  // diffusion condition width
    bool mapper_query_pos = false;

    void validate() const {
        if (e <= 0 || heads <= 0 || e % heads != 0)
            throw ConfigError("story LM width must divide by head count");
        if (layers <= 0 || mapper_layers <= 0) throw ConfigError("layer counts must be positive");
        if (max_seq <= 0 || img_tokens <= 0 || visual_prefix <= 0 || mapper_queries <= 0)
            throw ConfigError("sequence dims must be positive");
        if (d_i <= 0 || d_c <= 0) throw ConfigError("feature widths must be positive");
        if (img_tokens >= max_seq)
            throw ConfigError("image-token block cannot fill the whole context window");
    }
};

// ---------------------------------------------------------------------------
// Interleaved context layout: (I_1, S_1, ..., I_{n-1}, S_{n-1}, S_n), where
// each prior frame I_j contributes `visual_prefix` rows and captions enter as
// raw token ids. Image-request slots are appended separately for emission.
// ---------------------------------------------------------------------------

enum class SlotKind { visual, text, img };

struct ContextSlot {
    SlotKind kind = SlotKind::text;
    int token = -1;  // vocabulary id for text/img slots
    int frame = -1;  // owning frame for visual/text slots
};

struct LMContext {
    std::vector<ContextSlot> slots;
    bool truncated = false;
    int frames_kept = 0;    // prior frames that survived truncation
    int current_frame = 0;  // index of the caption the context ends with
    int length() const { return int(slots.size()); }
};

// Lays out the context for frame n given captions S_1..S_n (raw token ids)
// and n-1 prior frames. When the window overflows, whole (frame, caption)
// pairs are dropped oldest-first, except that the first pair is kept as an
// anchor for as long as it fits; the kept recent pairs form a contiguous
// suffix. `reserve` keeps that many trailing slots free for tokens appended
// later (image requests, generated words).
inline LMContext build_context(const std::vector<std::vector<int>>& captions, int visual_prefix,
                               int max_seq, bool interleave_images = true, int reserve = 0) {
    if (captions.empty()) throw DataError("context needs at least one caption");
    const int n = int(captions.size());
    const int budget = max_seq - reserve;
    const int current = int(captions.back().size());
    if (current > budget)
        throw DataError("current caption does not fit the context window (" +
                        std::to_string(current) + " tokens, budget " + std::to_string(budget) +
                        ")");

    const int per_frame = interleave_images ? visual_prefix : 0;
    auto pair_cost = [&](int j) { return per_frame + int(captions[size_t(j)].size()); };

    int remaining = budget - current;
    bool keep_anchor = false;
    if (n >= 2 && pair_cost(0) <= remaining) {
        keep_anchor = true;
        remaining -= pair_cost(0);
    }
    int suffix_start = n - 1;  // first kept pair after the anchor
    for (int j = n - 2; j >= 1; --j) {
        if (pair_cost(j) > remaining) break;
        remaining -= pair_cost(j);
        suffix_start = j;
    }

    LMContext ctx;
    ctx.frames_kept = (keep_anchor ? 1 : 0) + (n - 1 - suffix_start);
    ctx.truncated = ctx.frames_kept < n - 1;
    ctx.current_frame = n - 1;
    auto push_pair = [&](int j) {
        if (interleave_images)
            for (int v = 0; v < visual_prefix; ++v) ctx.slots.push_back({SlotKind::visual, -1, j});
        for (int tok : captions[size_t(j)]) ctx.slots.push_back({SlotKind::text, tok, j});
    };
    if (keep_anchor) push_pair(0);
    for (int j = std::max(suffix_start, 1); j < n - 1; ++j) push_pair(j);
    for (int tok : captions.back()) ctx.slots.push_back({SlotKind::text, tok, n - 1});
    return ctx;
}

// Appends the image-request block [IMG_1..R] after the current caption.
inline void append_img_slots(LMContext& ctx, int img_base, int img_tokens, int max_seq) {
    if (ctx.length() + img_tokens > max_seq)
        throw DataError("image-request block overflows the context window");
    for (int r = 0; r < img_tokens; ++r)
        ctx.slots.push_back({SlotKind::img, img_base + r, ctx.current_frame});
}

// ---------------------------------------------------------------------------
// StoryLM: decoder-only transformer over caption vocabulary plus the reserved
// image-request range. The base parameters (lm.base.*) are frozen for stage-2
// alignment; only the image-token rows, the visual prefix map, and the
// condition mapper keep training.
// ---------------------------------------------------------------------------

template <typename T>
class StoryLM {
  public:
    using Id = typename Graph<T>::Id;

    StoryLM(StoryLMDims dims, int vocab, std::string prefix = "lm.")
        : dims_(dims), vocab_(vocab), prefix_(std::move(prefix)) {
        dims_.validate();
        if (vocab_ < 3) throw ConfigError("story LM vocabulary too small");
    }

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int e = dims_.e;
        store.add(prefix_ + "base.tok_emb", init_normal<T>(vocab_, e, rng, 0.02));
        store.add(prefix_ + "base.pos", init_normal<T>(dims_.max_seq, e, rng, 0.02));
        for (int l = 0; l < dims_.layers; ++l) {
            const std::string p = prefix_ + "base.blk" + std::to_string(l) + ".";
            store.add(p + "ln1.g", init_ones<T>(1, e));
            store.add(p + "ln1.b", init_zeros<T>(1, e));
            store.add(p + "wq", init_xavier<T>(e, e, rng));
            store.add(p + "wk", init_xavier<T>(e, e, rng));
            store.add(p + "wv", init_xavier<T>(e, e, rng));
            store.add(p + "wo", init_xavier<T>(e, e, rng));
            store.add(p + "ln2.g", init_ones<T>(1, e));
            store.add(p + "ln2.b", init_zeros<T>(1, e));
            store.add(p + "ffn.w1", init_xavier<T>(e, 4 * e, rng));
            store.add(p + "ffn.b1", init_zeros<T>(1, 4 * e));
            store.add(p + "ffn.w2", init_xavier<T>(4 * e, e, rng));
            store.add(p + "ffn.b2", init_zeros<T>(1, e));
        }
        store.add(prefix_ + "base.lnf.g", init_ones<T>(1, e));
        store.add(prefix_ + "base.lnf.b", init_zeros<T>(1, e));
        store.add(prefix_ + "gen.img_emb", init_normal<T>(dims_.img_tokens, e, rng, 0.02));
        store.add(prefix_ + "v2t.w", init_xavier<T>(dims_.d_i, dims_.visual_prefix * e, rng));
        store.add(prefix_ + "v2t.b", init_zeros<T>(1, dims_.visual_prefix * e));
    }

    int vocab() const { return vocab_; }
    int total_vocab() const { return vocab_ + dims_.img_tokens; }
    int img_base() const { return vocab_; }
    const StoryLMDims& dims() const { return dims_; }
    const std::string& prefix() const { return prefix_; }

    // Affine expansion of one frame feature (1, d_i) into visual_prefix rows.
    Id map_visual_prefix(Graph<T>& g, ParamStore<T>& store, Id feature) const {
        Id flat = linear(g, feature, g.param(store.get(prefix_ + "v2t.w")),
                         g.param(store.get(prefix_ + "v2t.b")));
        return g.reshape(flat, dims_.visual_prefix, dims_.e);
    }

    // Token table spanning the caption vocabulary and the image-request rows.
    Id full_embedding(Graph<T>& g, ParamStore<T>& store) const {
        return g.concat_rows(g.param(store.get(prefix_ + "base.tok_emb")),
                             g.param(store.get(prefix_ + "gen.img_emb")));
    }

    // Context -> (len, e) input embeddings: token lookups, visual rows
    // spliced in, positions added.
    Id embed_context(Graph<T>& g, ParamStore<T>& store, const LMContext& ctx,
                     const std::vector<Tensor<T>>& frame_features) const {
        const int len = ctx.length();
        if (len < 1) throw DataError("empty context");
        if (len > dims_.max_seq) throw DataError("context exceeds the sequence limit");

        std::vector<int> ids(size_t(len), 0);
        std::vector<int> visual_positions;
        std::vector<int> visual_frames;
        for (int p = 0; p < len; ++p) {
            const auto& s = ctx.slots[size_t(p)];
            if (s.kind == SlotKind::visual) {
                visual_positions.push_back(p);
                visual_frames.push_back(s.frame);
            } else {
                if (s.token < 0 || s.token >= total_vocab())
                    throw DataError("context token id outside the vocabulary");
                ids[size_t(p)] = s.token;
            }
        }

        Id x = g.gather_rows(full_embedding(g, store), std::move(ids));
        if (!visual_positions.empty()) {
            Id rows = -1;
            for (size_t i = 0; i < visual_positions.size(); i += size_t(dims_.visual_prefix)) {
                const int f = visual_frames[i];
                if (f < 0 || f >= int(frame_features.size()))
                    throw DataError("context references a frame feature that was not provided");
                Id block =
                    map_visual_prefix(g, store, g.input(Tensor<T>(frame_features[size_t(f)])));
                rows = rows < 0 ? block : g.concat_rows(rows, block);
            }
            x = g.row_replace(x, std::move(visual_positions), rows);
        }
        return g.add(x, g.slice_rows(g.param(store.get(prefix_ + "base.pos")), 0, len));
    }

    // Pre-LN causal blocks plus final layer norm: (len, e) -> (len, e).
    Id forward_hidden(Graph<T>& g, ParamStore<T>& store, Id x) const {
        const int len = g.val(x).rows;
        const int hd = dims_.e / dims_.heads;
        Tensor<T> mask(len, len);
        for (int r = 0; r < len; ++r)
            for (int c = 0; c < len; ++c) mask.at(r, c) = c > r ? T(-1e30) : T(0);
        const Id causal = g.input(std::move(mask));

        for (int l = 0; l < dims_.layers; ++l) {
            const std::string p = prefix_ + "base.blk" + std::to_string(l) + ".";
            Id n1 = affine_norm(g, store, x, p + "ln1");
            Id q = g.matmul(n1, g.param(store.get(p + "wq")));
            Id k = g.matmul(n1, g.param(store.get(p + "wk")));
            Id v = g.matmul(n1, g.param(store.get(p + "wv")));
            Id heads_out = -1;
            for (int h = 0; h < dims_.heads; ++h) {
                Id qh = g.slice_cols(q, h * hd, hd);
                Id kh = g.slice_cols(k, h * hd, hd);
                Id vh = g.slice_cols(v, h * hd, hd);
                Id att = g.softmax_rows(
                    g.add(g.scale(g.matmul_nt(qh, kh), T(1.0 / std::sqrt(double(hd)))), causal));
                Id oh = g.matmul(att, vh);
                heads_out = heads_out < 0 ? oh : g.concat_cols(heads_out, oh);
            }
            x = g.add(x, g.matmul(heads_out, g.param(store.get(p + "wo"))));
            Id n2 = affine_norm(g, store, x, p + "ln2");
            Id f = linear(g, n2, g.param(store.get(p + "ffn.w1")), g.param(store.get(p + "ffn.b1")));
            f = linear(g, g.gelu(f), g.param(store.get(p + "ffn.w2")),
                       g.param(store.get(p + "ffn.b2")));
            x = g.add(x, f);
        }
        return affine_norm(g, store, x, prefix_ + "base.lnf");
    }

    // Tied output head over the full table: (len, e) -> (len, vocab + R).
    Id logits(Graph<T>& g, ParamStore<T>& store, Id h) const {
        return g.matmul_nt(h, full_embedding(g, store));
    }

  private:
    StoryLMDims dims_;
    int vocab_;
    std::string prefix_;

    Id affine_norm(Graph<T>& g, ParamStore<T>& store, Id x, const std::string& name) const {
        Id n = g.layer_norm(x);
        n = g.mul_row_broadcast(n, g.param(store.get(name + ".g")));
        return g.add_row_broadcast(n, g.param(store.get(name + ".b")));
    }
};

// ---------------------------------------------------------------------------
// ConditionMapper: learnable queries cross-attending into the image-request
// hidden states, producing the (mapper_queries, d_c) diffusion condition.
// Queries never attend to each other, so with positional encodings off the
// map is equivariant to query order.
// ---------------------------------------------------------------------------

template <typename T>
class ConditionMapper {
  public:
    using Id = typename Graph<T>::Id;

    ConditionMapper(StoryLMDims dims, std::string prefix = "mapper.")
        : dims_(dims), prefix_(std::move(prefix)) {
        dims_.validate();
    }

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int e = dims_.e;
        store.add(prefix_ + "queries", init_normal<T>(dims_.mapper_queries, e, rng, 0.02));
        if (dims_.mapper_query_pos)
            store.add(prefix_ + "qpos", init_normal<T>(dims_.mapper_queries, e, rng, 0.02));
        for (int l = 0; l < dims_.mapper_layers; ++l) {
            const std::string p = prefix_ + "blk" + std::to_string(l) + ".";
            store.add(p + "ln1.g", init_ones<T>(1, e));
            store.add(p + "ln1.b", init_zeros<T>(1, e));
            store.add(p + "wq", init_xavier<T>(e, e, rng));
            store.add(p + "wk", init_xavier<T>(e, e, rng));
            store.add(p + "wv", init_xavier<T>(e, e, rng));
            store.add(p + "wo", init_xavier<T>(e, e, rng));
            store.add(p + "ln2.g", init_ones<T>(1, e));
            store.add(p + "ln2.b", init_zeros<T>(1, e));
            store.add(p + "ffn.w1", init_xavier<T>(e, 4 * e, rng));
            store.add(p + "ffn.b1", init_zeros<T>(1, 4 * e));
            store.add(p + "ffn.w2", init_xavier<T>(4 * e, e, rng));
            store.add(p + "ffn.b2", init_zeros<T>(1, e));
        }
        store.add(prefix_ + "proj.w", init_xavier<T>(e, dims_.d_c, rng));
        store.add(prefix_ + "proj.b", init_zeros<T>(1, dims_.d_c));
    }

    // img_hidden must be exactly (img_tokens, e).
    Id forward(Graph<T>& g, ParamStore<T>& store, Id img_hidden) const {
        {
            const auto& h = g.val(img_hidden);
            if (h.rows != dims_.img_tokens || h.cols != dims_.e)
                throw DataError("condition mapper expects one hidden state per image token");
        }
        const int hd = dims_.e / dims_.heads;
        Id x = g.param(store.get(prefix_ + "queries"));
        if (dims_.mapper_query_pos) x = g.add(x, g.param(store.get(prefix_ + "qpos")));
        for (int l = 0; l < dims_.mapper_layers; ++l) {
            const std::string p = prefix_ + "blk" + std::to_string(l) + ".";
            Id n1 = affine_norm(g, store, x, p + "ln1");
            Id q = g.matmul(n1, g.param(store.get(p + "wq")));
            Id k = g.matmul(img_hidden, g.param(store.get(p + "wk")));
            Id v = g.matmul(img_hidden, g.param(store.get(p + "wv")));
            Id heads_out = -1;
            for (int h = 0; h < dims_.heads; ++h) {
                Id qh = g.slice_cols(q, h * hd, hd);
                Id kh = g.slice_cols(k, h * hd, hd);
                Id vh = g.slice_cols(v, h * hd, hd);
                Id att =
                    g.softmax_rows(g.scale(g.matmul_nt(qh, kh), T(1.0 / std::sqrt(double(hd)))));
                Id oh = g.matmul(att, vh);
                heads_out = heads_out < 0 ? oh : g.concat_cols(heads_out, oh);
            }
            x = g.add(x, g.matmul(heads_out, g.param(store.get(p + "wo"))));
            Id n2 = affine_norm(g, store, x, p + "ln2");
            Id f = linear(g, n2, g.param(store.get(p + "ffn.w1")), g.param(store.get(p + "ffn.b1")));
            f = linear(g, g.gelu(f), g.param(store.get(p + "ffn.w2")),
                       g.param(store.get(p + "ffn.b2")));
            x = g.add(x, f);
        }
        return linear(g, x, g.param(store.get(prefix_ + "proj.w")),
                      g.param(store.get(prefix_ + "proj.b")));
    }

  private:
    StoryLMDims dims_;
    std::string prefix_;

    Id affine_norm(Graph<T>& g, ParamStore<T>& store, Id x, const std::string& name) const {
        Id n = g.layer_norm(x);
        n = g.mul_row_broadcast(n, g.param(store.get(name + ".g")));
        return g.add_row_broadcast(n, g.param(store.get(name + ".b")));
    }
};

// ---------------------------------------------------------------------------
// Stage2Model: tokenizer + LM + mapper in one parameter store.
// ---------------------------------------------------------------------------

template <typename T>
struct Stage2Model {
    Tokenizer tokenizer;
    StoryLM<T> lm;
    ConditionMapper<T> mapper;
    ParamStore<T> store;
    bool pretrained = false;  // base LM saw next-token pretraining
    bool trained = false;     // alignment training happened

    Stage2Model(Tokenizer tok, StoryLMDims dims, uint64_t seed)
        : tokenizer(std::move(tok)), lm(dims, tokenizer.vocab_size()), mapper(dims) {
        Rng rng(derive_seed(seed, 303));
        lm.register_params(store, rng);
        mapper.register_params(store, rng);
    }

    // Stage-2 alignment trains only the image-token rows, the visual prefix
    // map, and the mapper; the language backbone stays fixed.
    void freeze_backbone() { store.set_trainable_prefix(lm.prefix() + "base.", false); }
    uint64_t backbone_hash() const { return hash_params(store, lm.prefix() + "base."); }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Next-token targets for the emission objective: every position whose
// successor is an image-request token contributes; with `continuation` set,
// positions whose successor lies in the current caption contribute too.
inline std::vector<int> emission_targets(const LMContext& ctx, bool continuation) {
    const int len = ctx.length();
    std::vector<int> targets(size_t(len), -1);
    int img_count = 0;
    for (int p = 0; p + 1 < len; ++p) {
        const auto& next = ctx.slots[size_t(p + 1)];
        if (next.kind == SlotKind::img) {
            targets[size_t(p)] = next.token;
            ++img_count;
        } else if (continuation && next.kind == SlotKind::text &&
                   next.frame == ctx.current_frame) {
            targets[size_t(p)] = next.token;
        }
    }
    if (img_count == 0) throw DataError("context carries no image-request targets");
    return targets;
}

template <typename T>
struct Stage2LossNodes {
    typename Graph<T>::Id total = -1;
    typename Graph<T>::Id l_gen = -1;    // mean NLL per contributing position
    typename Graph<T>::Id l_align = -1;  // mean squared error to the fused target
    bool truncated = false;
};

template <typename T>
struct Stage2Item {
    std::vector<std::vector<int>> captions;   // n captions, raw ids
    std::vector<Tensor<T>> frame_features;    // n-1 features, each (1, d_i)
    Tensor<T> fused_target;                   // (mapper_queries, d_c)
};

struct Stage2TrainConfig {
    double lambda_align = 1.0;
    bool continuation = true;        // caption tokens join the emission loss
    bool interleave_images = true;   // ablation: captions-only context
};

template <typename T>
Stage2LossNodes<T> stage2_sample_loss(Graph<T>& g, Stage2Model<T>& model, const Stage2Item<T>& item,
                                      const Stage2TrainConfig& cfg) {
    const auto& dims = model.lm.dims();
    if (item.fused_target.rows != dims.mapper_queries || item.fused_target.cols != dims.d_c)
        throw DataError("fused alignment target has the wrong shape");

    LMContext ctx = build_context(item.captions, dims.visual_prefix, dims.max_seq,
                                  cfg.interleave_images, dims.img_tokens);
    append_img_slots(ctx, model.lm.img_base(), dims.img_tokens, dims.max_seq);

    Stage2LossNodes<T> nodes;
    nodes.truncated = ctx.truncated;
    auto targets = emission_targets(ctx, cfg.continuation);
    typename Graph<T>::Id h =
        model.lm.forward_hidden(g, model.store, model.lm.embed_context(g, model.store, ctx,
                                                                       item.frame_features));
    nodes.l_gen = g.cross_entropy_rows(model.lm.logits(g, model.store, h), std::move(targets));
    typename Graph<T>::Id img_h = g.slice_rows(h, ctx.length() - dims.img_tokens, dims.img_tokens);
    typename Graph<T>::Id gen_emb = model.mapper.forward(g, model.store, img_h);
    nodes.l_align = mse(g, gen_emb, g.input(Tensor<T>(item.fused_target)));
    nodes.total = axpy(g, nodes.l_gen, T(cfg.lambda_align), nodes.l_align);
    return nodes;
}

struct Stage2StepStats {
    double l_gen = 0;
    double l_align = 0;
    double grad_norm = 0;
    int truncated = 0;
};

template <typename T>
Stage2StepStats train_stage2_step(Stage2Model<T>& model, const std::vector<Stage2Item<T>>& batch,
                                  Adam<T>& opt, const Stage2TrainConfig& cfg, int64_t step) {
    if (batch.empty()) throw DataError("stage-2 training batch is empty");
    Stage2StepStats stats;
    model.store.zero_grad();
    for (const auto& item : batch) {
        Graph<T> g(true);
        auto nodes = stage2_sample_loss(g, model, item, cfg);
        g.backward(g.scale(nodes.total, T(1.0 / double(batch.size()))));
        g.flush_param_grads();
        stats.l_gen += double(g.val(nodes.l_gen).at(0, 0));
        stats.l_align += double(g.val(nodes.l_align).at(0, 0));
        stats.truncated += nodes.truncated ? 1 : 0;
    }
    stats.l_gen /= double(batch.size());
    stats.l_align /= double(batch.size());

    double norm_sq = 0;
    for (size_t i = 0; i < model.store.size(); ++i) {
        const auto& p = model.store.at(i);
        if (!p.trainable) continue;
        for (const T& gv : p.grad.data) norm_sq += double(gv) * double(gv);
    }
    stats.grad_norm = std::sqrt(norm_sq);
    if (!std::isfinite(stats.l_gen) || !std::isfinite(stats.l_align) ||
        !std::isfinite(stats.grad_norm))
        throw NumericError("stage-2 training diverged at step " + std::to_string(step) +
                           ": l_gen=" + std::to_string(stats.l_gen) +
                           " l_align=" + std::to_string(stats.l_align) +
                           " lr=" + std::to_string(opt.config().lr) +
                           " grad_norm=" + std::to_string(stats.grad_norm));
    opt.step(model.store);
    model.trained = true;
    return stats;
}

// ---------------------------------------------------------------------------
// Base-LM pretraining: plain next-token prediction over caption streams, run
// before the backbone is frozen.
// ---------------------------------------------------------------------------

template <typename T>
double train_lm_pretrain_step(Stage2Model<T>& model, const std::vector<std::vector<int>>& streams,
                              Adam<T>& opt, int64_t step) {
    if (streams.empty()) throw DataError("pretraining batch is empty");
    double total = 0;
    model.store.zero_grad();
    for (const auto& ids : streams) {
        if (int(ids.size()) < 2) throw DataError("pretraining stream too short");
        if (int(ids.size()) > model.lm.dims().max_seq)
            throw DataError("pretraining stream exceeds the context window");
        Graph<T> g(true);
        typename Graph<T>::Id x =
            g.gather_rows(model.lm.full_embedding(g, model.store), std::vector<int>(ids));
        x = g.add(x, g.slice_rows(g.param(model.store.get(model.lm.prefix() + "base.pos")), 0,
                                  int(ids.size())));
        typename Graph<T>::Id h = model.lm.forward_hidden(g, model.store, x);
        std::vector<int> targets(ids.begin() + 1, ids.end());
        targets.push_back(-1);
        typename Graph<T>::Id loss =
            g.cross_entropy_rows(model.lm.logits(g, model.store, h), std::move(targets));
        g.backward(g.scale(loss, T(1.0 / double(streams.size()))));
        g.flush_param_grads();
        total += double(g.val(loss).at(0, 0));
    }
    total /= double(streams.size());
    if (!std::isfinite(total))
        throw NumericError("LM pretraining diverged at step " + std::to_string(step) +
                           ": loss=" + std::to_string(total) +
                           " lr=" + std::to_string(opt.config().lr));
    opt.step(model.store);
    model.pretrained = true;
    return total;
}

// ---------------------------------------------------------------------------
// Inference helpers (no gradients)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> lm_hidden_states(Stage2Model<T>& model, const LMContext& ctx,
                           const std::vector<Tensor<T>>& frame_features) {
    Graph<T> g(false);
    return g.val(model.lm.forward_hidden(
        g, model.store, model.lm.embed_context(g, model.store, ctx, frame_features)));
}

template <typename T>
Tensor<T> lm_all_logits(Stage2Model<T>& model, const LMContext& ctx,
                        const std::vector<Tensor<T>>& frame_features) {
    Graph<T> g(false);
    typename Graph<T>::Id h = model.lm.forward_hidden(
        g, model.store, model.lm.embed_context(g, model.store, ctx, frame_features));
    return g.val(model.lm.logits(g, model.store, h));
}

// Condition for the diffusion model from the image-token hidden states.
template <typename T>
Tensor<T> condition_from_hidden(Stage2Model<T>& model, const Tensor<T>& img_hidden) {
    Graph<T> g(false);
    return g.val(model.mapper.forward(g, model.store, g.input(Tensor<T>(img_hidden))));
}

}  // namespace storyviz
