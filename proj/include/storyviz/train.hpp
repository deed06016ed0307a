#pragma once

#include <string>
#include <vector>

#include "storyviz/pipeline.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// Run directory: config.echo, checkpoints/, frames/, log.txt. Every training
// entry point logs through it; pass nullptr to train silently in memory.
// ---------------------------------------------------------------------------

struct RunDir {
    std::string root;

    static RunDir create(const std::string& path, const RunConfig& cfg);
    std::string checkpoints_dir() const { return root + "/checkpoints"; }
    std::string frames_dir() const { return root + "/frames"; }
    std::string log_path() const { return root + "/log.txt"; }
    std::string report_path() const { return root + "/report.json"; }
    void log(const std::string& line) const;  // appends to log.txt and echoes to stdout
};

struct TrainSummary {
    int steps = 0;
    double first_loss = 0;  // mean loss over the first logging window
    double last_loss = 0;   // mean loss over the final logging window
    double seconds = 0;
    std::string rng_state;  // training stream state after the final step
};

// ---------------------------------------------------------------------------
// Stage 1: denoiser training on (frame, original caption, annotations)
// samples under the null/text/fused condition mix.
// ---------------------------------------------------------------------------

// Flattened per-frame training view. Items point into `episodes`, which must
// outlive them.
std::vector<Stage1Item> stage1_items(const std::vector<StoryEpisode>& episodes);

TrainSummary train_stage1(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                          const RunDir* dir, int log_every = 200);

// ---------------------------------------------------------------------------
// Stage 2: next-token pretraining of the language backbone, then alignment
// training of the image-token rows, the visual prefix map, and the mapper
// against frozen fused targets.
// ---------------------------------------------------------------------------

// One next-token stream per episode: <bos> S_1 <bos> S_2 ... over the
// referential captions, clipped to the context window.
std::vector<std::vector<int>> pretrain_streams(const Tokenizer& tok,
                                               const std::vector<StoryEpisode>& episodes,
                                               int max_seq);

TrainSummary pretrain_lm(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                         const RunDir* dir, int log_every = 500);

// Frozen-encoder precompute: one alignment target and one whole-frame
// feature per (episode, frame). Targets follow config.align_target; captions
// for the LM context are the referential track.
std::vector<Stage2Item<float>> build_stage2_items(ModelBundle& bundle,
                                                  const std::vector<StoryEpisode>& episodes);

// Freezes the backbone, then trains on build_stage2_items batches. Requires
// trained stage-1 encoders for the targets.
TrainSummary train_stage2(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                          const RunDir* dir, int log_every = 500);

// Saves the matching checkpoint into dir.checkpoints_dir().
std::string save_stage1_checkpoint(const ModelBundle& bundle, const RunDir& dir,
                                   const std::string& rng_state);
std::string save_stage2_checkpoint(const ModelBundle& bundle, const RunDir& dir,
                                   const std::string& rng_state);

// Deterministic episode sets: training episodes use one seed namespace,
// held-out evaluation episodes a disjoint one.
std::vector<StoryEpisode> make_episodes(const RunConfig& cfg, int count, uint64_t space);
constexpr uint64_t kTrainSpace = 1000;
constexpr uint64_t kEvalSpace = 2000000;

}  // namespace storyviz
