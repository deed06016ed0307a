#pragma once

#include <string>

#include "storyviz/char_ldm.hpp"
#include "storyviz/story_lm.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// RunConfig: every knob of the lab in one flat struct. The defaults ARE the
// desk-scale configuration; an empty config file reproduces them exactly.
// Files are line-oriented `key: value` text, `#` starts a comment, unknown
// keys are rejected by name. serialize_config emits a file that parses back
// to an identical struct (the run-directory `config.echo`).
// ---------------------------------------------------------------------------

struct RunConfig {
    // dataset
    int episodes = 2000;
    int frames_per_episode = 4;
    int image_size = 32;
    double subset_prob = 0.6;

    // caption/condition encoders
    int caption_len = 16;   // token positions per caption, bos included
    int cond_width = 64;    // condition row width fed to the denoiser
    int feature_width = 64; // character crop / whole-frame feature width
    int text_heads = 4;
    int text_layers = 2;
    int crop_c1 = 16;
    int crop_c2 = 32;

    // diffusion
    int unet_base = 32;
    int unet_mid = 48;
    int unet_deep = 96;
    int time_dim = 64;
    int time_hidden = 128;
    int diffusion_steps = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    double lambda_reg = 0.01;
    bool reg_enabled = true;
    double mix_null = 0.1;
    double mix_text = 0.1;
    double mix_fused = 0.8;
    double guidance_w = 3.0;
    int ddim_steps = 20;

    // story language model
    int lm_width = 128;
    int lm_heads = 4;
    int lm_layers = 4;
    int max_seq = 96;
    int img_tokens = 8;
    int visual_prefix = 4;
    int mapper_queries = 16;
    int mapper_layers = 2;
    double lambda_align = 1.0;
    bool continuation = true;
    bool interleave = true;
    std::string align_target = "fused";  // or "text"

    // training
    uint64_t seed = 0;
    int stage1_steps = 15000;
    int stage1_batch = 4;
    double stage1_lr = 1e-3;
    int stage2_steps = 10000;
    int stage2_batch = 2;
    double stage2_lr = 1e-3;
    int pretrain_steps = 5000;
    int pretrain_batch = 4;
    double pretrain_lr = 1e-3;
    double grad_clip = 1.0;  // global L2 clip, 0 disables

    // evaluation
    int eval_episodes = 200;

    void validate() const;

    DatasetConfig dataset() const;
    EncoderDims encoder_dims() const;
    DiffusionDims diffusion_dims() const;
    StoryLMDims lm_dims() const;
    Stage1TrainConfig stage1_train() const;
    Stage2TrainConfig stage2_train() const;
    SampleConfig sampling() const;
};

// Parses one file / one in-memory config text. Both apply defaults first,
// then validate the result.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text);

// Applies a single `key: value` line to an existing config (CLI overrides).
// No validation; callers validate once all overrides are in.
void apply_config_line(RunConfig& cfg, const std::string& line);

// Emits every key with its current value, parseable by parse_config_text.
std::string serialize_config(const RunConfig& cfg);

}  // namespace storyviz
