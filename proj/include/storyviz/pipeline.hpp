#pragma once

#include <memory>
#include <string>
#include <vector>

#include "storyviz/checkpoint.hpp"
#include "storyviz/config.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// ModelBundle: both stages plus the configuration they were built from. The
// two-stage inference path always flows stage-2 hidden states through the
// condition mapper into the stage-1 sampler.
// ---------------------------------------------------------------------------

struct ModelBundle {
    RunConfig config;
    Stage1Model<float> stage1;
    Stage2Model<float> stage2;

    explicit ModelBundle(const RunConfig& cfg);
    ModelBundle(const RunConfig& cfg, Tokenizer tok);
};

// Fresh bundle with the tokenizer built from the dataset roster.
std::unique_ptr<ModelBundle> make_bundle(const RunConfig& cfg);
// Bundle reconstructed from a checkpoint: config echo, vocabulary, and
// parameters all come from the file. Enforces the stage tag it is given.
std::unique_ptr<ModelBundle> bundle_from_checkpoint(const CheckpointState& state,
                                                    const std::string& expect_stage);

// ---------------------------------------------------------------------------
// Story visualization (autoregressive two-stage inference)
// ---------------------------------------------------------------------------

struct FrameResult {
    Image8 frame;
    AttentionRecord<float> attention;
    int context_len = 0;        // slots before the image-request block
    bool context_truncated = false;
    int img_agreement = 0;      // forced positions whose restricted argmax matched
    double seconds = 0;         // wall time for this frame
};

struct StoryResult {
    std::vector<std::string> captions;
    std::vector<FrameResult> frames;
    uint64_t seed = 0;
};

// Renders one frame per caption. Frame 1 sees caption 1 alone; every later
// frame sees generated frames (as whole-frame features) interleaved with the
// caption history. Deterministic in (captions, seed, checkpoint).
StoryResult visualize_story(ModelBundle& bundle, const std::vector<std::string>& captions,
                            uint64_t seed);

// Continues a story: alternately decodes a new caption (greedy, words only,
// stops at '.' or max_caption_tokens) and renders its frame, n_extra times.
// Requires a bundle trained with the continuation objective.
struct ContinuationStep {
    std::string caption;
    Image8 frame;
};
std::vector<ContinuationStep> continue_story(ModelBundle& bundle,
                                             const std::vector<std::string>& captions,
                                             const std::vector<Image8>& frames, int n_extra,
                                             uint64_t seed, int max_caption_tokens);

// ---------------------------------------------------------------------------
// Shared inference plumbing, exposed for evaluation and tests
// ---------------------------------------------------------------------------

// Whole-frame feature for the visual prefix: the crop encoder applied to the
// full frame.
Tensor<float> frame_feature(ModelBundle& bundle, const Image8& frame);

// Builds the interleaved context for the next frame, appends the
// image-request block, and maps the resulting hidden states to a stage-1
// condition. Returns the condition plus bookkeeping for the transcript.
struct ImgDecodeResult {
    Tensor<float> condition;
    int context_len = 0;
    bool truncated = false;
    int agreement = 0;
};
ImgDecodeResult decode_condition(ModelBundle& bundle,
                                 const std::vector<std::vector<int>>& caption_ids,
                                 const std::vector<Tensor<float>>& features);

}  // namespace storyviz
