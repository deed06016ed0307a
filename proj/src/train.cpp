#include "storyviz/train.hpp"

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace storyviz {

namespace fs = std::filesystem;

RunDir RunDir::create(const std::string& path, const RunConfig& cfg) {
    RunDir dir{path};
    std::error_code ec;
    fs::create_directories(dir.checkpoints_dir(), ec);
    fs::create_directories(dir.frames_dir(), ec);
    if (ec || !fs::is_directory(dir.root))
        throw DataError("cannot create run directory '" + path + "'");
    std::ofstream echo(dir.root + "/config.echo");
    if (!echo) throw DataError("cannot write config echo in '" + path + "'");
    echo << serialize_config(cfg);
    return dir;
}

void RunDir::log(const std::string& line) const {
    std::ofstream out(log_path(), std::ios::app);
    out << line << "\n";
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
}

namespace {

void log_line(const RunDir* dir, const std::string& line) {
    if (dir)
        dir->log(line);
    else {
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
    }
}

std::string fmt(const char* pattern, ...) {
    char buf[256];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof buf, pattern, args);
    va_end(args);
    return buf;
}

// Tracks the first and last logging-window means for the summary.
struct WindowTracker {
    double sum = 0;
    int count = 0;
    double first = 0;
    bool have_first = false;
    double last = 0;

    void add(double v) {
        sum += v;
        ++count;
    }
    double flush() {
        const double mean = count > 0 ? sum / count : 0;
        if (!have_first) {
            first = mean;
            have_first = true;
        }
        last = mean;
        sum = 0;
        count = 0;
        return mean;
    }
};

}  // namespace

std::vector<Stage1Item> stage1_items(const std::vector<StoryEpisode>& episodes) {
    std::vector<Stage1Item> items;
    for (const auto& ep : episodes)
        for (size_t i = 0; i < ep.frames.size(); ++i)
            items.push_back({&ep.frames[i], &ep.captions_original[i], &ep.annotations[i]});
    if (items.empty()) throw DataError("no training frames in the dataset");
    return items;
}

TrainSummary train_stage1(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                          const RunDir* dir, int log_every) {
    const RunConfig& cfg = bundle.config;
    const std::vector<Stage1Item> items = stage1_items(episodes);
    const Stage1TrainConfig tc = cfg.stage1_train();
    Adam<float> opt({.lr = cfg.stage1_lr, .grad_clip = cfg.grad_clip});
    Rng rng(derive_seed(cfg.seed, 11));

    TrainSummary summary;
    WindowTracker window;
    double reg_sum = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto t_window = t0;
    for (int step = 0; step < cfg.stage1_steps; ++step) {
        std::vector<Stage1Item> batch;
        for (int b = 0; b < cfg.stage1_batch; ++b)
            batch.push_back(items[rng.uniform_int(items.size())]);
        const Stage1StepStats stats = train_stage1_step(bundle.stage1, batch, opt, rng, tc, step);
        window.add(stats.l_diffusion);
        reg_sum += stats.l_reg;
        if ((step + 1) % log_every == 0 || step + 1 == cfg.stage1_steps) {
            const auto now = std::chrono::steady_clock::now();
            const double dt = std::chrono::duration<double>(now - t_window).count();
            const int n = window.count;
            log_line(dir, fmt("stage1 step %d/%d  l_diff %.5f  l_reg %.5f  %.1f steps/s",
                              step + 1, cfg.stage1_steps, window.flush(),
                              n > 0 ? reg_sum / n : 0.0, n > 0 && dt > 0 ? n / dt : 0.0));
            reg_sum = 0;
            t_window = now;
        }
    }
    summary.steps = cfg.stage1_steps;
    summary.first_loss = window.first;
    summary.last_loss = window.last;
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summary.rng_state = rng.state();
    return summary;
}

std::vector<std::vector<int>> pretrain_streams(const Tokenizer& tok,
                                               const std::vector<StoryEpisode>& episodes,
                                               int max_seq) {
    std::vector<std::vector<int>> streams;
    for (const auto& ep : episodes) {
        std::vector<int> stream;
        for (const auto& caption : ep.captions_referential) {
            stream.push_back(Tokenizer::kBos);
            const auto ids = tok.encode_raw(caption);
            stream.insert(stream.end(), ids.begin(), ids.end());
        }
        if (int(stream.size()) > max_seq) stream.resize(size_t(max_seq));
        if (int(stream.size()) >= 2) streams.push_back(std::move(stream));
    }
    if (streams.empty()) throw DataError("no pretraining streams in the dataset");
    return streams;
}

TrainSummary pretrain_lm(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                         const RunDir* dir, int log_every) {
    const RunConfig& cfg = bundle.config;
    const auto streams =
        pretrain_streams(bundle.stage2.tokenizer, episodes, bundle.stage2.lm.dims().max_seq);
    Adam<float> opt({.lr = cfg.pretrain_lr, .grad_clip = cfg.grad_clip});
    Rng rng(derive_seed(cfg.seed, 12));

    TrainSummary summary;
    WindowTracker window;
    const auto t0 = std::chrono::steady_clock::now();
    auto t_window = t0;
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        std::vector<std::vector<int>> batch;
        for (int b = 0; b < cfg.pretrain_batch; ++b)
            batch.push_back(streams[rng.uniform_int(streams.size())]);
        window.add(train_lm_pretrain_step(bundle.stage2, batch, opt, step));
        if ((step + 1) % log_every == 0 || step + 1 == cfg.pretrain_steps) {
            const auto now = std::chrono::steady_clock::now();
            const double dt = std::chrono::duration<double>(now - t_window).count();
            const int n = window.count;
            log_line(dir, fmt("pretrain step %d/%d  nll %.5f  %.1f steps/s", step + 1,
                              cfg.pretrain_steps, window.flush(),
                              n > 0 && dt > 0 ? n / dt : 0.0));
            t_window = now;
        }
    }
    summary.steps = cfg.pretrain_steps;
    summary.first_loss = window.first;
    summary.last_loss = window.last;
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summary.rng_state = rng.state();
    return summary;
}

std::vector<Stage2Item<float>> build_stage2_items(ModelBundle& bundle,
                                                  const std::vector<StoryEpisode>& episodes) {
    if (!bundle.stage1.trained)
        throw StageError(
            "stage-2 training needs a trained stage-1 model for its alignment targets");
    auto& enc = bundle.stage1.encoders;
    auto& store = bundle.stage1.store;
    const bool fused_target = bundle.config.align_target == "fused";

    std::vector<Stage2Item<float>> items;
    for (const auto& ep : episodes) {
        const int n = int(ep.frames.size());
        std::vector<std::vector<int>> ref_ids;
        std::vector<Tensor<float>> features;
        std::vector<Tensor<float>> targets;
        for (int i = 0; i < n; ++i) {
            ref_ids.push_back(bundle.stage2.tokenizer.encode_raw(ep.captions_referential[size_t(i)]));
            features.push_back(
                enc.encode_character(store, ep.frames[size_t(i)], "").values);

            // Targets come from the ORIGINAL captions: names, not pronouns,
            // so the condition the mapper must reproduce is unambiguous.
            const Tokenized tok =
                bundle.stage1.tokenizer.tokenize(ep.captions_original[size_t(i)]);
            ConditionEmbedding<float> cond = enc.encode_text(store, tok.ids);
            if (fused_target && !tok.char_token_indices.empty()) {
                std::vector<CharacterFeature<float>> crops;
                for (const auto& ann : ep.annotations[size_t(i)])
                    if (tok.char_token_indices.count(ann.name))
                        crops.push_back(enc.encode_character(store, ann.crop, ann.name));
                if (crops.size() == tok.char_token_indices.size())
                    cond = enc.fuse_embedding(store, cond, tok.char_token_indices, crops);
            }
            targets.push_back(std::move(cond.values));
        }
        for (int i = 0; i < n; ++i) {
            Stage2Item<float> item;
            item.captions.assign(ref_ids.begin(), ref_ids.begin() + i + 1);
            item.frame_features.assign(features.begin(), features.begin() + i);
            item.fused_target = targets[size_t(i)];
            items.push_back(std::move(item));
        }
    }
    if (items.empty()) throw DataError("no stage-2 training samples in the dataset");
    return items;
}

TrainSummary train_stage2(ModelBundle& bundle, const std::vector<StoryEpisode>& episodes,
                          const RunDir* dir, int log_every) {
    const RunConfig& cfg = bundle.config;
    const auto items = build_stage2_items(bundle, episodes);
    bundle.stage2.freeze_backbone();
    Stage2TrainConfig tc;
    tc.lambda_align = cfg.lambda_align;
    tc.continuation = cfg.continuation;
    tc.interleave_images = cfg.interleave;
    Adam<float> opt({.lr = cfg.stage2_lr, .grad_clip = cfg.grad_clip});
    Rng rng(derive_seed(cfg.seed, 13));

    TrainSummary summary;
    WindowTracker window;
    double align_sum = 0;
    int truncated = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto t_window = t0;
    for (int step = 0; step < cfg.stage2_steps; ++step) {
        std::vector<Stage2Item<float>> batch;
        for (int b = 0; b < cfg.stage2_batch; ++b)
            batch.push_back(items[rng.uniform_int(items.size())]);
        const Stage2StepStats stats = train_stage2_step(bundle.stage2, batch, opt, tc, step);
        window.add(stats.l_gen + cfg.lambda_align * stats.l_align);
        align_sum += stats.l_align;
        truncated += stats.truncated;
        if ((step + 1) % log_every == 0 || step + 1 == cfg.stage2_steps) {
            const auto now = std::chrono::steady_clock::now();
            const double dt = std::chrono::duration<double>(now - t_window).count();
            const int n = window.count;
            log_line(dir, fmt("stage2 step %d/%d  loss %.5f  l_align %.5f  truncated %d  "
                              "%.1f steps/s",
                              step + 1, cfg.stage2_steps, window.flush(),
                              n > 0 ? align_sum / n : 0.0, truncated,
                              n > 0 && dt > 0 ? n / dt : 0.0));
            align_sum = 0;
            truncated = 0;
            t_window = now;
        }
    }
    summary.steps = cfg.stage2_steps;
    summary.first_loss = window.first;
    summary.last_loss = window.last;
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summary.rng_state = rng.state();
    return summary;
}

std::string save_stage1_checkpoint(const ModelBundle& bundle, const RunDir& dir,
                                   const std::string& rng_state) {
    const std::string path = dir.checkpoints_dir() + "/stage1.ckpt";
    save_checkpoint(
        checkpoint_from_stage1(bundle.stage1, serialize_config(bundle.config), rng_state), path);
    return path;
}

std::string save_stage2_checkpoint(const ModelBundle& bundle, const RunDir& dir,
                                   const std::string& rng_state) {
    const std::string path = dir.checkpoints_dir() + "/stage2.ckpt";
    save_checkpoint(checkpoint_from_stage2(bundle.stage1, bundle.stage2,
                                           serialize_config(bundle.config), rng_state),
                    path);
    return path;
}

std::vector<StoryEpisode> make_episodes(const RunConfig& cfg, int count, uint64_t space) {
    const DatasetConfig ds = cfg.dataset();
    std::vector<StoryEpisode> episodes;
    for (int i = 0; i < count; ++i)
        episodes.push_back(generate_episode(derive_seed(cfg.seed, space + uint64_t(i)), ds));
    return episodes;
}

}  // namespace storyviz
