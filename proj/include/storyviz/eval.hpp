#pragma once

#include <string>
#include <vector>

#include "storyviz/pipeline.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// Pixel oracle: the renderer's palette is known, so detection is nearest
// palette color plus a connected-area gate. Exact on clean renders; the
// metric's ground anchor.
// ---------------------------------------------------------------------------

struct OracleDetection {
    std::vector<std::string> chars;           // detected names, roster order
    std::vector<std::vector<uint8_t>> masks;  // matching pixel masks, image-sized 0/1
    std::string background;                   // majority background label
};

OracleDetection pixel_oracle(const Image8& frame, const DatasetConfig& config,
                             double color_tol = 0.15, int min_area = 4);

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct FrameTruth {
    std::vector<std::string> chars;
    std::string background;
};

// char_acc is per-frame exact-set accuracy; char_f1 micro-F1 over
// per-character presence; bg metrics are the single-label analogs (micro-F1
// over one label per frame reduces to accuracy).
struct CharMetrics {
    double char_acc = 0;
    double char_f1 = 0;
    double bg_acc = 0;
    double bg_f1 = 0;
    long long tp = 0, fp = 0, fn = 0;  // character-presence counts behind char_f1
    int frames = 0;
};

CharMetrics char_metrics(const std::vector<OracleDetection>& detected,
                         const std::vector<FrameTruth>& truth);

// ---------------------------------------------------------------------------
// Frechet feature distance over probe features (rows are samples). Computed
// in double; covariance spectra floored at 1e-10 before the matrix square
// root; shrinkage toward the scaled identity below d+1 samples per side.
// ---------------------------------------------------------------------------

double frechet_feature_distance(const Tensor<double>& a, const Tensor<double>& b);

// ---------------------------------------------------------------------------
// Attention localization: fraction of cross-attention mass inside the
// character's mask, averaged over characters and layers. `char_cols` gives
// each character's condition-row index (its name-token position when the
// condition comes from a caption).
// ---------------------------------------------------------------------------

double attention_localization(const AttentionRecord<float>& record,
                              const std::vector<std::vector<uint8_t>>& char_masks,
                              const std::vector<int>& char_cols, int image_size);

// Grayscale grid of one frame's attention maps: layers stacked vertically,
// condition rows horizontally, each map upsampled to the image size and
// normalized to its own peak.
void write_attention_grid(const std::string& path, const AttentionRecord<float>& record,
                          int image_size);

// ---------------------------------------------------------------------------
// Probe classifier: a small conv net trained on ground-truth frames to
// predict (character multi-hot, background). Its pooled features feed the
// Frechet distance.
// ---------------------------------------------------------------------------

class Probe {
  public:
    Probe(const DatasetConfig& config, uint64_t seed, int feat_width = 32);

    // Multi-label BCE on characters plus softmax CE on the background.
    double train_step(const std::vector<const Image8*>& frames,
                      const std::vector<FrameTruth>& truth, Adam<float>& opt);
    // Penultimate pooled feature row (1, feat_width).
    Tensor<float> features(const Image8& frame);
    // Thresholded character set and argmax background.
    FrameTruth predict(const Image8& frame);

    int feat_width() const { return dims_.d_i; }
    ParamStore<float>& store() { return store_; }

  private:
    DatasetConfig config_;
    EncoderDims dims_;
    CropEncoder<float> body_;
    ParamStore<float> store_;

    typename Graph<float>::Id logits_pair(Graph<float>& g, const Image8& frame,
                                          typename Graph<float>::Id* bg_logits);
};

// Trains a probe on the episodes' ground-truth frames; deterministic in seed.
Probe train_probe(const std::vector<StoryEpisode>& episodes, const DatasetConfig& config,
                  int steps, int batch, uint64_t seed);

// ---------------------------------------------------------------------------
// Evaluation runs
// ---------------------------------------------------------------------------

enum class EvalMode {
    stage2,        // full two-stage story generation
    stage1_fused,  // per-frame diffusion with fused ground-truth conditions
    stage1_text,   // per-frame diffusion with text-only conditions
};

struct EvalOptions {
    EvalMode mode = EvalMode::stage2;
    bool referential = true;  // which caption track conditions the run
    int max_episodes = -1;    // -1: whole split
    uint64_t seed = 0;
    Probe* probe = nullptr;   // required for ffd; skipped when null
};

struct EvalReport {
    std::string protocol;  // metric definitions in prose
    std::string mode;
    int episodes = 0;
    CharMetrics classify;
    double ffd = -1;           // -1 when no probe supplied
    double attn_in_mask = -1;  // -1 when the mode carries no caption-aligned columns
    int attn_frames = 0;       // frames contributing to attn_in_mask
    int attn_omitted = 0;      // frames skipped for want of detected characters
};

EvalReport evaluate_run(ModelBundle& bundle, const std::vector<StoryEpisode>& split,
                        const EvalOptions& options);

void write_report_json(const EvalReport& report, const std::string& path);

// Per-run transcript: captions, seed, and the oracle's read of every frame.
void write_story_json(const StoryResult& story, const DatasetConfig& config,
                      const std::string& path);

}  // namespace storyviz
