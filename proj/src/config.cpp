#include "storyviz/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <variant>

namespace storyviz {

namespace {

using Member = std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*,
                            uint64_t RunConfig::*, std::string RunConfig::*>;

struct KeyEntry {
    const char* key;
    Member member;
    const char* section;
};

// The one table every config path shares: parsing, overrides, and the echo.
const KeyEntry kKeys[] = {
    {"episodes", &RunConfig::episodes, "dataset"},
    {"frames_per_episode", &RunConfig::frames_per_episode, "dataset"},
    {"image_size", &RunConfig::image_size, "dataset"},
    {"subset_prob", &RunConfig::subset_prob, "dataset"},
    {"caption_len", &RunConfig::caption_len, "encoders"},
    {"cond_width", &RunConfig::cond_width, "encoders"},
    {"feature_width", &RunConfig::feature_width, "encoders"},
    {"text_heads", &RunConfig::text_heads, "encoders"},
    {"text_layers", &RunConfig::text_layers, "encoders"},
    {"crop_c1", &RunConfig::crop_c1, "encoders"},
    {"crop_c2", &RunConfig::crop_c2, "encoders"},
    {"unet_base", &RunConfig::unet_base, "diffusion"},
    {"unet_mid", &RunConfig::unet_mid, "diffusion"},
    {"unet_deep", &RunConfig::unet_deep, "diffusion"},
    {"time_dim", &RunConfig::time_dim, "diffusion"},
    {"time_hidden", &RunConfig::time_hidden, "diffusion"},
    {"diffusion_steps", &RunConfig::diffusion_steps, "diffusion"},
    {"beta_min", &RunConfig::beta_min, "diffusion"},
    {"beta_max", &RunConfig::beta_max, "diffusion"},
    {"lambda_reg", &RunConfig::lambda_reg, "diffusion"},
    {"reg_enabled", &RunConfig::reg_enabled, "diffusion"},
    {"mix_null", &RunConfig::mix_null, "diffusion"},
    {"mix_text", &RunConfig::mix_text, "diffusion"},
    {"mix_fused", &RunConfig::mix_fused, "diffusion"},
    {"guidance_w", &RunConfig::guidance_w, "diffusion"},
    {"ddim_steps", &RunConfig::ddim_steps, "diffusion"},
    {"lm_width", &RunConfig::lm_width, "story-lm"},
    {"lm_heads", &RunConfig::lm_heads, "story-lm"},
    {"lm_layers", &RunConfig::lm_layers, "story-lm"},
    {"max_seq", &RunConfig::max_seq, "story-lm"},
    {"img_tokens", &RunConfig::img_tokens, "story-lm"},
    {"visual_prefix", &RunConfig::visual_prefix, "story-lm"},
    {"mapper_queries", &RunConfig::mapper_queries, "story-lm"},
    {"mapper_layers", &RunConfig::mapper_layers, "story-lm"},
    {"lambda_align", &RunConfig::lambda_align, "story-lm"},
    {"continuation", &RunConfig::continuation, "story-lm"},
    {"interleave", &RunConfig::interleave, "story-lm"},
    {"align_target", &RunConfig::align_target, "story-lm"},
    {"seed", &RunConfig::seed, "training"},
    {"stage1_steps", &RunConfig::stage1_steps, "training"},
    {"stage1_batch", &RunConfig::stage1_batch, "training"},
    {"stage1_lr", &RunConfig::stage1_lr, "training"},
    {"stage2_steps", &RunConfig::stage2_steps, "training"},
    {"stage2_batch", &RunConfig::stage2_batch, "training"},
    {"stage2_lr", &RunConfig::stage2_lr, "training"},
    {"pretrain_steps", &RunConfig::pretrain_steps, "training"},
    {"pretrain_batch", &RunConfig::pretrain_batch, "training"},
    {"pretrain_lr", &RunConfig::pretrain_lr, "training"},
    {"grad_clip", &RunConfig::grad_clip, "training"},
    {"eval_episodes", &RunConfig::eval_episodes, "evaluation"},
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void type_error(const char* key, const char* want, const std::string& got) {
    throw ConfigError("config key '" + std::string(key) + "' expects " + want + " (got '" + got +
                      "')");
}

void assign(RunConfig& cfg, const KeyEntry& e, const std::string& raw) {
    const std::string v = trim(raw);
    if (auto* m = std::get_if<int RunConfig::*>(&e.member)) {
        char* end = nullptr;
        const long long x = std::strtoll(v.c_str(), &end, 10);
        if (v.empty() || *end != '\0' || x < INT32_MIN || x > INT32_MAX)
            type_error(e.key, "an integer", v);
        cfg.*(*m) = int(x);
    } else if (auto* m2 = std::get_if<double RunConfig::*>(&e.member)) {
        char* end = nullptr;
        const double x = std::strtod(v.c_str(), &end);
        if (v.empty() || *end != '\0') type_error(e.key, "a number", v);
        cfg.*(*m2) = x;
    } else if (auto* m3 = std::get_if<bool RunConfig::*>(&e.member)) {
        if (v == "true")
            cfg.*(*m3) = true;
        else if (v == "false")
            cfg.*(*m3) = false;
        else
            type_error(e.key, "'true' or 'false'", v);
    } else if (auto* m4 = std::get_if<uint64_t RunConfig::*>(&e.member)) {
        char* end = nullptr;
        const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
        if (v.empty() || v[0] == '-' || *end != '\0') type_error(e.key, "an unsigned integer", v);
        cfg.*(*m4) = uint64_t(x);
    } else {
        cfg.*std::get<std::string RunConfig::*>(e.member) = v;
    }
}

void append_value(std::string& out, const RunConfig& cfg, const KeyEntry& e) {
    char buf[64];
    if (auto* m = std::get_if<int RunConfig::*>(&e.member)) {
        std::snprintf(buf, sizeof buf, "%d", cfg.*(*m));
        out += buf;
    } else if (auto* m2 = std::get_if<double RunConfig::*>(&e.member)) {
        std::snprintf(buf, sizeof buf, "%.17g", cfg.*(*m2));
        out += buf;
    } else if (auto* m3 = std::get_if<bool RunConfig::*>(&e.member)) {
        out += cfg.*(*m3) ? "true" : "false";
    } else if (auto* m4 = std::get_if<uint64_t RunConfig::*>(&e.member)) {
        std::snprintf(buf, sizeof buf, "%" PRIu64, cfg.*(*m4));
        out += buf;
    } else {
        out += cfg.*std::get<std::string RunConfig::*>(e.member);
    }
}

void require_positive(int v, const char* key) {
    if (v <= 0) throw ConfigError(std::string("config key '") + key + "' must be positive");
}

void require_nonneg(double v, const char* key) {
    if (!(v >= 0)) throw ConfigError(std::string("config key '") + key + "' must be nonnegative");
}

}  // namespace

void apply_config_line(RunConfig& cfg, const std::string& line) {
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) return;
    const size_t colon = stripped.find(':');
    if (colon == std::string::npos)
        throw ConfigError("config line is not 'key: value': '" + trim(line) + "'");
    const std::string key = trim(stripped.substr(0, colon));
    const std::string value = stripped.substr(colon + 1);
    for (const auto& e : kKeys) {
        if (key == e.key) {
            assign(cfg, e, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        try {
            apply_config_line(cfg, line);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config_text(buf.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    const char* section = "";
    for (const auto& e : kKeys) {
        if (std::string(section) != e.section) {
            section = e.section;
            if (!out.empty()) out += "\n";
            out += std::string("# ") + section + "\n";
        }
        out += e.key;
        out += ": ";
        append_value(out, cfg, e);
        out += "\n";
    }
    return out;
}

void RunConfig::validate() const {
    require_positive(episodes, "episodes");
    require_positive(frames_per_episode, "frames_per_episode");
    if (image_size < 4 || image_size % 4 != 0)
        throw ConfigError("config key 'image_size' must be a positive multiple of 4");
    if (!(subset_prob >= 0 && subset_prob <= 1))
        throw ConfigError("config key 'subset_prob' must lie in [0, 1]");
    if (caption_len < 2) throw ConfigError("config key 'caption_len' must be at least 2");
    require_positive(cond_width, "cond_width");
    require_positive(feature_width, "feature_width");
    require_positive(text_heads, "text_heads");
    require_positive(text_layers, "text_layers");
    require_positive(crop_c1, "crop_c1");
    require_positive(crop_c2, "crop_c2");
    if (cond_width % text_heads != 0)
        throw ConfigError("config key 'cond_width' must divide by 'text_heads'");
    require_positive(unet_base, "unet_base");
    require_positive(unet_mid, "unet_mid");
    require_positive(unet_deep, "unet_deep");
    require_positive(time_dim, "time_dim");
    require_positive(time_hidden, "time_hidden");
    require_positive(diffusion_steps, "diffusion_steps");
    if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
        throw ConfigError("config keys 'beta_min'/'beta_max' must satisfy 0 < min <= max < 1");
    require_nonneg(lambda_reg, "lambda_reg");
    require_nonneg(lambda_align, "lambda_align");
    require_nonneg(guidance_w, "guidance_w");
    for (const auto& [v, k] : {std::pair<double, const char*>{mix_null, "mix_null"},
                               {mix_text, "mix_text"},
                               {mix_fused, "mix_fused"}})
        if (!(v >= 0 && v <= 1))
            throw ConfigError(std::string("config key '") + k + "' must lie in [0, 1]");
    const double mix_sum = mix_null + mix_text + mix_fused;
    if (std::abs(mix_sum - 1.0) > 1e-9) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.12g", mix_sum);
        throw ConfigError("mix_null + mix_text + mix_fused must sum to 1 (got " +
                          std::string(buf) + ")");
    }
    if (ddim_steps < 1 || ddim_steps > diffusion_steps)
        throw ConfigError("config key 'ddim_steps' must lie in [1, diffusion_steps]");
    require_positive(lm_width, "lm_width");
    require_positive(lm_heads, "lm_heads");
    require_positive(lm_layers, "lm_layers");
    require_positive(max_seq, "max_seq");
    require_positive(img_tokens, "img_tokens");
    require_positive(visual_prefix, "visual_prefix");
    require_positive(mapper_queries, "mapper_queries");
    require_positive(mapper_layers, "mapper_layers");
    if (mapper_queries != caption_len)
        throw ConfigError(
            "config key 'mapper_queries' must equal 'caption_len' (the mapper output stands in "
            "for a caption-shaped condition)");
    if (lm_width % lm_heads != 0)
        throw ConfigError("config key 'lm_width' must divide by 'lm_heads'");
    if (img_tokens >= max_seq)
        throw ConfigError("config key 'img_tokens' must stay below 'max_seq'");
    if (align_target != "text" && align_target != "fused")
        throw ConfigError("config key 'align_target' must be 'text' or 'fused' (got '" +
                          align_target + "')");
    if (stage1_steps < 0 || stage2_steps < 0 || pretrain_steps < 0)
        throw ConfigError("training step counts must be nonnegative");
    require_positive(stage1_batch, "stage1_batch");
    require_positive(stage2_batch, "stage2_batch");
    require_positive(pretrain_batch, "pretrain_batch");
    if (!(stage1_lr > 0) || !(stage2_lr > 0) || !(pretrain_lr > 0))
        throw ConfigError("learning rates must be positive");
    require_nonneg(grad_clip, "grad_clip");
    require_positive(eval_episodes, "eval_episodes");
}

DatasetConfig RunConfig::dataset() const {
    DatasetConfig d = DatasetConfig::defaults();
    d.n_frames = frames_per_episode;
    d.image_size = image_size;
    d.subset_prob = subset_prob;
    return d;
}

EncoderDims RunConfig::encoder_dims() const {
    EncoderDims d;
    d.max_len = caption_len;
    d.d_c = cond_width;
    d.d_i = feature_width;
    d.text_heads = text_heads;
    d.text_layers = text_layers;
    d.crop_c1 = crop_c1;
    d.crop_c2 = crop_c2;
    return d;
}

DiffusionDims RunConfig::diffusion_dims() const {
    DiffusionDims d;
    d.image_size = image_size;
    d.base = unet_base;
    d.mid = unet_mid;
    d.deep = unet_deep;
    d.time_dim = time_dim;
    d.time_hidden = time_hidden;
    d.steps = diffusion_steps;
    d.beta_min = beta_min;
    d.beta_max = beta_max;
    return d;
}

StoryLMDims RunConfig::lm_dims() const {
    StoryLMDims d;
    d.e = lm_width;
    d.heads = lm_heads;
    d.layers = lm_layers;
    d.max_seq = max_seq;
    d.img_tokens = img_tokens;
    d.visual_prefix = visual_prefix;
    d.mapper_queries = mapper_queries;
    d.mapper_layers = mapper_layers;
    d.d_i = feature_width;
    d.d_c = cond_width;
    return d;
}

Stage1TrainConfig RunConfig::stage1_train() const {
    Stage1TrainConfig c;
    c.lambda_reg = lambda_reg;
    c.reg_enabled = reg_enabled;
    c.p_null = mix_null;
    c.p_text = mix_text;
    return c;
}

Stage2TrainConfig RunConfig::stage2_train() const {
    Stage2TrainConfig c;
    c.lambda_align = lambda_align;
    c.continuation = continuation;
    c.interleave_images = interleave;
    return c;
}

SampleConfig RunConfig::sampling() const {
    SampleConfig c;
    c.guidance_w = guidance_w;
    c.ddim_steps = ddim_steps;
    return c;
}

}  // namespace storyviz
