#include "storyviz/pipeline.hpp"

#include <chrono>

namespace storyviz {

ModelBundle::ModelBundle(const RunConfig& cfg)
    : ModelBundle(cfg, Tokenizer::build(cfg.dataset(), cfg.caption_len)) {}

ModelBundle::ModelBundle(const RunConfig& cfg, Tokenizer tok)
    : config(cfg),
      stage1(tok, cfg.encoder_dims(), cfg.diffusion_dims(), cfg.seed),
      stage2(std::move(tok), cfg.lm_dims(), cfg.seed) {}

std::unique_ptr<ModelBundle> make_bundle(const RunConfig& cfg) {
    cfg.validate();
    return std::make_unique<ModelBundle>(cfg);
}

std::unique_ptr<ModelBundle> bundle_from_checkpoint(const CheckpointState& state,
                                                    const std::string& expect_stage) {
    const RunConfig cfg = parse_config_text(state.config_echo);
    Tokenizer tok = Tokenizer::from_vocab(state.vocab, state.roster, cfg.caption_len);
    auto bundle = std::make_unique<ModelBundle>(cfg, std::move(tok));
    if (expect_stage == "stage1")
        restore_stage1(bundle->stage1, state);
    else if (expect_stage == "stage2")
        restore_stage2(bundle->stage1, bundle->stage2, state);
    else
        throw StageError("unknown stage tag '" + expect_stage + "' requested");
    return bundle;
}

Tensor<float> frame_feature(ModelBundle& bundle, const Image8& frame) {
    return bundle.stage1.encoders.encode_character(bundle.stage1.store, frame, "").values;
}

ImgDecodeResult decode_condition(ModelBundle& bundle,
                                 const std::vector<std::vector<int>>& caption_ids,
                                 const std::vector<Tensor<float>>& features) {
    auto& lm = bundle.stage2.lm;
    const auto& dims = lm.dims();
    LMContext ctx = build_context(caption_ids, dims.visual_prefix, dims.max_seq,
                                  bundle.config.interleave, dims.img_tokens);
    ImgDecodeResult out;
    out.context_len = ctx.length();
    out.truncated = ctx.truncated;
    append_img_slots(ctx, lm.img_base(), dims.img_tokens, dims.max_seq);

    const Tensor<float> h = lm_hidden_states(bundle.stage2, ctx, features);
    Tensor<float> logits;
    {
        Graph<float> g(false);
        logits = g.val(lm.logits(g, bundle.stage2.store, g.input(Tensor<float>(h))));
    }
    // The emission is CONSTRAINED: position r emits image token r by
    // construction; agreement counts how often the model's own restricted
    // argmax concurs.
    const int lt = ctx.length() - dims.img_tokens;
    for (int r = 0; r < dims.img_tokens; ++r) {
        const int row = lt + r - 1;
        int best = lm.img_base();
        for (int c = lm.img_base() + 1; c < lm.total_vocab(); ++c)
            if (logits.at(row, c) > logits.at(row, best)) best = c;
        if (best == lm.img_base() + r) ++out.agreement;
    }

    Tensor<float> img_h(dims.img_tokens, dims.e);
    for (int r = 0; r < dims.img_tokens; ++r)
        for (int c = 0; c < dims.e; ++c)
            img_h.at(r, c) = h.at(h.rows - dims.img_tokens + r, c);
    out.condition = condition_from_hidden(bundle.stage2, img_h);
    return out;
}

StoryResult visualize_story(ModelBundle& bundle, const std::vector<std::string>& captions,
                            uint64_t seed) {
    if (captions.empty()) throw DataError("visualize_story needs at least one caption");
    StoryResult result;
    result.captions = captions;
    result.seed = seed;

    std::vector<std::vector<int>> ids;
    for (const auto& c : captions) ids.push_back(bundle.stage2.tokenizer.encode_raw(c));

    std::vector<Tensor<float>> features;  // generated frames only, never ground truth
    for (size_t i = 0; i < captions.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<std::vector<int>> prefix(ids.begin(), ids.begin() + long(i) + 1);
        ImgDecodeResult dec = decode_condition(bundle, prefix, features);

        SampleConfig sc = bundle.config.sampling();
        sc.seed = derive_seed(seed, 401 + uint64_t(i));
        auto [frame, attention] = sample_stage1(bundle.stage1, dec.condition, sc);
        features.push_back(frame_feature(bundle, frame));

        FrameResult fr;
        fr.frame = std::move(frame);
        fr.attention = std::move(attention);
        fr.context_len = dec.context_len;
        fr.context_truncated = dec.truncated;
        fr.img_agreement = dec.agreement;
        fr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.frames.push_back(std::move(fr));
    }
    return result;
}

std::vector<ContinuationStep> continue_story(ModelBundle& bundle,
                                             const std::vector<std::string>& captions,
                                             const std::vector<Image8>& frames, int n_extra,
                                             uint64_t seed, int max_caption_tokens) {
    if (!bundle.config.continuation)
        throw StageError("this checkpoint was not trained for caption continuation");
    if (n_extra < 1) throw ConfigError("n_extra must be at least 1");
    if (max_caption_tokens < 1) throw ConfigError("max_caption_tokens must be at least 1");
    if (captions.empty() || captions.size() != frames.size())
        throw DataError("continuation needs matching (caption, frame) pairs");

    auto& tok = bundle.stage2.tokenizer;
    const auto& dims = bundle.stage2.lm.dims();
    const int period = tok.word_id(".");

    std::vector<std::vector<int>> ids;
    for (const auto& c : captions) ids.push_back(tok.encode_raw(c));
    std::vector<Tensor<float>> features;
    for (const auto& f : frames) features.push_back(frame_feature(bundle, f));

    std::vector<ContinuationStep> steps;
    for (int k = 0; k < n_extra; ++k) {
        std::vector<int> next;
        while (int(next.size()) < max_caption_tokens) {
            auto with_partial = ids;
            with_partial.push_back(next);
            const LMContext ctx = build_context(with_partial, dims.visual_prefix, dims.max_seq,
                                                bundle.config.interleave, dims.img_tokens);
            const Tensor<float> logits = lm_all_logits(bundle.stage2, ctx, features);
            int best = 2;  // word ids only: <pad>, <bos>, and image tokens excluded
            for (int c = 3; c < tok.vocab_size(); ++c)
                if (logits.at(logits.rows - 1, c) > logits.at(logits.rows - 1, best)) best = c;
            next.push_back(best);
            if (best == period) break;
        }
        ids.push_back(next);

        ImgDecodeResult dec = decode_condition(bundle, ids, features);
        SampleConfig sc = bundle.config.sampling();
        sc.seed = derive_seed(seed, 601 + uint64_t(k));
        Image8 frame = sample_stage1(bundle.stage1, dec.condition, sc).first;
        features.push_back(frame_feature(bundle, frame));
        steps.push_back({tok.decode(next), std::move(frame)});
    }
    return steps;
}

}  // namespace storyviz
