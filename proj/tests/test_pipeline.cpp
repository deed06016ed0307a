#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "storyviz/eval.hpp"

using namespace storyviz;

namespace {

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.episodes = 6;
    cfg.frames_per_episode = 3;
    cfg.image_size = 16;
    cfg.caption_len = 10;
    cfg.cond_width = 16;
    cfg.feature_width = 12;
    cfg.text_heads = 2;
    cfg.text_layers = 1;
    cfg.crop_c1 = 4;
    cfg.crop_c2 = 6;
    cfg.unet_base = 8;
    cfg.unet_mid = 12;
    cfg.unet_deep = 16;
    cfg.time_dim = 8;
    cfg.time_hidden = 16;
    cfg.diffusion_steps = 40;
    cfg.ddim_steps = 5;
    cfg.lm_width = 24;
    cfg.lm_heads = 2;
    cfg.lm_layers = 1;
    cfg.max_seq = 48;
    cfg.img_tokens = 3;
    cfg.visual_prefix = 2;
    cfg.mapper_queries = 10;
    cfg.mapper_layers = 1;
    return cfg;
}

// Inference contract tests exercise the samplers with fresh weights; the
// trained flags gate state, not quality.
std::unique_ptr<ModelBundle> tiny_bundle(RunConfig cfg = tiny_config()) {
    auto bundle = make_bundle(cfg);
    bundle->stage1.trained = true;
    bundle->stage2.pretrained = true;
    bundle->stage2.trained = true;
    return bundle;
}

std::vector<uint8_t> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

void put_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
}

}  // namespace

TEST_CASE("config text round trips") {
    SUBCASE("empty text yields the defaults") {
        const RunConfig cfg = parse_config_text("");
        CHECK(cfg.episodes == 2000);
        CHECK(cfg.image_size == 32);
        CHECK(cfg.visual_prefix == 4);
        CHECK(cfg.img_tokens == 8);
        CHECK(cfg.mapper_queries == 16);
        CHECK(cfg.guidance_w == doctest::Approx(3.0));
        CHECK(cfg.align_target == "fused");
        CHECK(cfg.continuation == true);
        CHECK(cfg.mix_fused == doctest::Approx(0.8));
    }

    SUBCASE("serialization is a parse fixpoint") {
        RunConfig cfg = tiny_config();
        cfg.beta_max = 0.02173;
        cfg.guidance_w = 2.5;
        cfg.lambda_align = 0.37;
        cfg.seed = 123456789012345ull;
        cfg.continuation = false;
        const std::string text = serialize_config(cfg);
        const RunConfig back = parse_config_text(text);
        CHECK(serialize_config(back) == text);
        CHECK(back.beta_max == cfg.beta_max);  // bitwise, %.17g echo
        CHECK(back.guidance_w == cfg.guidance_w);
        CHECK(back.lambda_align == cfg.lambda_align);
        CHECK(back.seed == cfg.seed);
        CHECK(back.continuation == false);
        CHECK(back.caption_len == 10);
    }

    SUBCASE("comments, blanks, and overrides") {
        const RunConfig cfg = parse_config_text(
            "# comment line\n"
            "\n"
            "guidance_w: 2.0  # trailing comment\n"
            "episodes: 50\n"
            "guidance_w: 4.0\n");
        CHECK(cfg.episodes == 50);
        CHECK(cfg.guidance_w == doctest::Approx(4.0));  // last value wins
    }

    SUBCASE("unknown keys are rejected by name") {
        CHECK_THROWS_WITH_AS(parse_config_text("warp_speed: 9\n"),
                             doctest::Contains("unknown config key 'warp_speed'"), ConfigError);
    }

    SUBCASE("type errors name the key and the offending value") {
        CHECK_THROWS_WITH_AS(parse_config_text("episodes: soon\n"),
                             doctest::Contains("expects an integer"), ConfigError);
        CHECK_THROWS_WITH_AS(parse_config_text("guidance_w: big\n"),
                             doctest::Contains("expects a number"), ConfigError);
        CHECK_THROWS_WITH_AS(parse_config_text("continuation: maybe\n"),
                             doctest::Contains("expects 'true' or 'false'"), ConfigError);
        CHECK_THROWS_WITH_AS(parse_config_text("episodes 50\n"),
                             doctest::Contains("not 'key: value'"), ConfigError);
    }

    SUBCASE("line numbers and file paths prefix parse errors") {
        CHECK_THROWS_WITH_AS(parse_config_text("episodes: 5\nbogus: 1\n"),
                             doctest::Contains("line 2"), ConfigError);
        const std::string path = "/tmp/sv_cfg_bad.txt";
        std::ofstream(path) << "bogus: 1\n";
        CHECK_THROWS_WITH_AS(parse_config(path), doctest::Contains(path.c_str()), ConfigError);
        std::remove(path.c_str());
        CHECK_THROWS_WITH_AS(parse_config("/tmp/sv_cfg_missing.txt"),
                             doctest::Contains("cannot open config file"), ConfigError);
    }

    SUBCASE("validation catches inconsistent settings") {
        RunConfig cfg = tiny_config();
        cfg.mix_null = 0.3;  // sum now 1.2
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("must sum to 1"), ConfigError);
        cfg = tiny_config();
        cfg.image_size = 15;
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("image_size"), ConfigError);
        cfg = tiny_config();
        cfg.align_target = "both";
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("align_target"), ConfigError);
        cfg = tiny_config();
        cfg.mapper_queries = 8;
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("mapper_queries"), ConfigError);
        cfg = tiny_config();
        cfg.ddim_steps = 100;
        CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("ddim_steps"), ConfigError);
    }
}

TEST_CASE("stage-1 checkpoints round trip bit-exactly") {
    const RunConfig cfg = tiny_config();
    auto bundle = tiny_bundle(cfg);
    const std::string path = "/tmp/sv_ckpt_s1.bin";

    CheckpointState state =
        checkpoint_from_stage1(bundle->stage1, serialize_config(cfg), "rng-stream-state");
    save_checkpoint(state, path);

    SUBCASE("loaded state matches the saved one field for field") {
        const CheckpointState back = load_checkpoint(path);
        CHECK(back.schema_version == 1);
        CHECK(back.stage == "stage1");
        CHECK(back.config_echo == state.config_echo);
        CHECK(back.vocab == state.vocab);
        CHECK(back.roster == state.roster);
        CHECK(back.rng_state == "rng-stream-state");
        REQUIRE(back.params.size() == state.params.size());
        for (size_t i = 0; i < state.params.size(); ++i) {
            CHECK(back.params[i].name == state.params[i].name);
            CHECK(back.params[i].rows == state.params[i].rows);
            CHECK(back.params[i].cols == state.params[i].cols);
            CHECK(back.params[i].data == state.params[i].data);  // bit-exact floats
        }
        CHECK(checkpoint_stage(path) == "stage1");
    }

    SUBCASE("restoring into differently seeded weights reproduces the source") {
        RunConfig other = cfg;
        other.seed = 999;
        auto fresh = make_bundle(other);
        CHECK(hash_params(fresh->stage1.store) != hash_params(bundle->stage1.store));
        restore_stage1(fresh->stage1, load_checkpoint(path));
        CHECK(hash_params(fresh->stage1.store) == hash_params(bundle->stage1.store));
        CHECK(fresh->stage1.trained);
    }

    SUBCASE("a flipped payload byte is an integrity error") {
        auto bytes = file_bytes(path);
        bytes[bytes.size() / 2] ^= 0x40;
        put_bytes(path, bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("integrity"), DataError);
    }

    SUBCASE("truncation is caught, by the checksum or the framing") {
        auto bytes = file_bytes(path);
        auto tail_cut = bytes;
        tail_cut.resize(bytes.size() - 9);  // the trailing checksum is gone
        put_bytes(path, tail_cut);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("integrity"), DataError);
        auto head_cut = bytes;
        head_cut.resize(10);  // ends inside the fixed header
        put_bytes(path, head_cut);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), DataError);
    }

    SUBCASE("foreign files fail the magic check") {
        put_bytes(path, {'P', 'K', 0x03, 0x04, 0, 0, 0, 0, 0, 0, 0, 0});
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("not a checkpoint"),
                             DataError);
    }

    SUBCASE("schema version mismatches are refused before anything else") {
        auto bytes = file_bytes(path);
        bytes[4] = 7;  // version word follows the 4-byte magic
        put_bytes(path, bytes);
        CHECK_THROWS_WITH_AS(load_checkpoint(path),
                             doctest::Contains("schema version mismatch"), DataError);
        CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("expects 1"), DataError);
    }

    SUBCASE("parameter set mismatches are named") {
        CheckpointState missing = state;
        const std::string dropped = missing.params.back().name;
        missing.params.pop_back();
        auto fresh = make_bundle(cfg);
        CHECK_THROWS_WITH_AS(restore_stage1(fresh->stage1, missing),
                             doctest::Contains(("missing parameter '" + dropped + "'").c_str()), DataError);

        CheckpointState extra = state;
        extra.params.push_back({"unet.bogus.w", 1, 1, {0.0f}});
        CHECK_THROWS_WITH_AS(restore_stage1(fresh->stage1, extra),
                             doctest::Contains("unknown parameter 'unet.bogus.w'"), DataError);

        CheckpointState reshaped = state;
        reshaped.params[0].rows += 1;
        reshaped.params[0].data.resize(
            size_t(reshaped.params[0].rows) * size_t(reshaped.params[0].cols));
        CHECK_THROWS_AS(restore_stage1(fresh->stage1, reshaped), DataError);
    }

    std::remove(path.c_str());
}

TEST_CASE("stage-2 checkpoints carry both stores") {
    const RunConfig cfg = tiny_config();
    auto bundle = tiny_bundle(cfg);
    const std::string path = "/tmp/sv_ckpt_s2.bin";
    CheckpointState state = checkpoint_from_stage2(bundle->stage1, bundle->stage2,
                                                   serialize_config(cfg), "rng2");
    save_checkpoint(state, path);

    SUBCASE("round trip restores stage-1 and stage-2 weights") {
        RunConfig other = cfg;
        other.seed = 555;
        auto fresh = make_bundle(other);
        restore_stage2(fresh->stage1, fresh->stage2, load_checkpoint(path));
        CHECK(hash_params(fresh->stage1.store) == hash_params(bundle->stage1.store));
        CHECK(hash_params(fresh->stage2.store) == hash_params(bundle->stage2.store));
        CHECK(fresh->stage1.trained);
        CHECK(fresh->stage2.trained);
        CHECK(fresh->stage2.pretrained);
        CHECK(checkpoint_stage(path) == "stage2");
    }

    SUBCASE("stage tags gate the restore direction") {
        auto fresh = make_bundle(cfg);
        // A stage-2 file is not a stage-1 checkpoint.
        CHECK_THROWS_WITH_AS(restore_stage1(fresh->stage1, load_checkpoint(path)),
                             doctest::Contains("tagged 'stage2'"), StageError);
        // A stage-1 file cannot drive the two-stage restore.
        const CheckpointState s1 =
            checkpoint_from_stage1(bundle->stage1, serialize_config(cfg), "");
        CHECK_THROWS_AS(restore_stage2(fresh->stage1, fresh->stage2, s1), StageError);
    }

    SUBCASE("bundle_from_checkpoint enforces the expected stage") {
        const CheckpointState loaded = load_checkpoint(path);
        auto restored = bundle_from_checkpoint(loaded, "stage2");
        CHECK(hash_params(restored->stage1.store) == hash_params(bundle->stage1.store));
        CHECK(hash_params(restored->stage2.store) == hash_params(bundle->stage2.store));
        CHECK(restored->config.caption_len == cfg.caption_len);

        const CheckpointState s1 =
            load_checkpoint((save_checkpoint(checkpoint_from_stage1(bundle->stage1,
                                                                    serialize_config(cfg), ""),
                                             path),
                             path));
        CHECK_THROWS_AS(bundle_from_checkpoint(s1, "stage2"), StageError);
    }

    SUBCASE("vocabulary mismatches are data errors") {
        CheckpointState tweaked = load_checkpoint(path);
        tweaked.vocab.push_back("extra");
        auto fresh = make_bundle(cfg);
        CHECK_THROWS_WITH_AS(restore_stage2(fresh->stage1, fresh->stage2, tweaked),
                             doctest::Contains("vocabulary"), DataError);
    }

    std::remove(path.c_str());
}

TEST_CASE("visualize_story renders one deterministic frame per caption") {
    auto bundle = tiny_bundle();
    const std::vector<std::string> captions = {
        "Fred is waving in the kitchen .",
        "Wilma is cooking in the kitchen .",
        "He is jumping in the kitchen .",
    };

    StoryResult story = visualize_story(*bundle, captions, 42);
    REQUIRE(story.frames.size() == 3);
    CHECK(story.captions == captions);
    CHECK(story.seed == 42);

    // Context accounting: frame i sees the kept (frame, caption) pairs at
    // visual_prefix slots each plus the current caption.
    const auto& tok = bundle->stage2.tokenizer;
    int rolling = 0;
    for (size_t i = 0; i < captions.size(); ++i) {
        const int len = int(tok.encode_raw(captions[i]).size());
        CHECK(story.frames[i].context_len == rolling + len);
        CHECK_FALSE(story.frames[i].context_truncated);
        rolling += 2 + len;  // visual_prefix + caption
        CHECK(story.frames[i].frame.w == 16);
        CHECK(story.frames[i].frame.h == 16);
        CHECK(story.frames[i].attention.layers.size() > 0);
        CHECK(story.frames[i].img_agreement >= 0);
        CHECK(story.frames[i].img_agreement <= 3);
        CHECK(story.frames[i].seconds >= 0);
    }

    SUBCASE("the same seed reproduces every frame bit for bit") {
        const StoryResult again = visualize_story(*bundle, captions, 42);
        for (size_t i = 0; i < 3; ++i)
            CHECK(again.frames[i].frame.rgb == story.frames[i].frame.rgb);
    }

    SUBCASE("a different seed changes the pixels") {
        const StoryResult other = visualize_story(*bundle, captions, 43);
        bool differs = false;
        for (size_t i = 0; i < 3; ++i)
            differs = differs || other.frames[i].frame.rgb != story.frames[i].frame.rgb;
        CHECK(differs);
    }

    SUBCASE("degenerate inputs") {
        CHECK_THROWS_AS(visualize_story(*bundle, {}, 1), DataError);
        auto untrained = make_bundle(tiny_config());
        CHECK_THROWS_AS(visualize_story(*untrained, captions, 1), StageError);
    }
}

TEST_CASE("long stories truncate the context but keep the anchor pair") {
    auto bundle = tiny_bundle();
    std::vector<std::string> captions(12, "Fred is waving in the kitchen .");
    const StoryResult story = visualize_story(*bundle, captions, 7);
    REQUIRE(story.frames.size() == 12);
    const int len = int(bundle->stage2.tokenizer.encode_raw(captions[0]).size());
    // max_seq 48 minus 3 reserved image slots leaves 45; each pair costs
    // 2 + len. Later frames must be truncated but still fit.
    bool any_truncated = false;
    for (size_t i = 0; i < 12; ++i) {
        CHECK(story.frames[i].context_len <= 45);
        CHECK(story.frames[i].context_len >= len);
        any_truncated = any_truncated || story.frames[i].context_truncated;
    }
    CHECK(any_truncated);
}

TEST_CASE("continue_story extends a story caption by caption") {
    RunConfig cfg = tiny_config();
    auto bundle = tiny_bundle(cfg);
    const DatasetConfig ds = cfg.dataset();
    const StoryEpisode ep = generate_episode(3, ds);
    const std::vector<std::string> captions(ep.captions_referential.begin(),
                                            ep.captions_referential.begin() + 2);
    const std::vector<Image8> frames(ep.frames.begin(), ep.frames.begin() + 2);

    SUBCASE("produces exactly n_extra steps with rendered frames") {
        const auto steps = continue_story(*bundle, captions, frames, 2, 11, 12);
        REQUIRE(steps.size() == 2);
        for (const auto& s : steps) {
            CHECK_FALSE(s.caption.empty());
            CHECK(int(bundle->stage2.tokenizer.encode_raw(s.caption).size()) <= 12);
            CHECK(s.frame.w == 16);
            CHECK(s.frame.h == 16);
        }
        const auto again = continue_story(*bundle, captions, frames, 2, 11, 12);
        for (size_t i = 0; i < steps.size(); ++i) {
            CHECK(again[i].caption == steps[i].caption);
            CHECK(again[i].frame.rgb == steps[i].frame.rgb);
        }
    }

    SUBCASE("decoded captions contain only words") {
        const auto steps = continue_story(*bundle, captions, frames, 1, 5, 8);
        const auto ids = bundle->stage2.tokenizer.encode_raw(steps[0].caption);
        for (int id : ids) CHECK(id >= 2);
    }

    SUBCASE("capability and argument gates") {
        RunConfig off = cfg;
        off.continuation = false;
        auto plain = tiny_bundle(off);
        CHECK_THROWS_WITH_AS(continue_story(*plain, captions, frames, 1, 1, 8),
                             doctest::Contains("continuation"), StageError);
        CHECK_THROWS_AS(continue_story(*bundle, captions, frames, 0, 1, 8), ConfigError);
        CHECK_THROWS_AS(continue_story(*bundle, captions, frames, 1, 1, 0), ConfigError);
        CHECK_THROWS_AS(continue_story(*bundle, {}, {}, 1, 1, 8), DataError);
        CHECK_THROWS_AS(continue_story(*bundle, captions, {frames[0]}, 1, 1, 8), DataError);
    }
}

TEST_CASE("decode_condition produces a caption-shaped condition") {
    auto bundle = tiny_bundle();
    const auto ids = bundle->stage2.tokenizer.encode_raw("Fred is waving in the kitchen .");
    const ImgDecodeResult dec = decode_condition(*bundle, {ids}, {});
    CHECK(dec.condition.rows == 10);  // mapper queries == caption_len
    CHECK(dec.condition.cols == 16);  // cond_width
    CHECK(dec.context_len == int(ids.size()));
    CHECK_FALSE(dec.truncated);
    CHECK(dec.agreement >= 0);
    CHECK(dec.agreement <= 3);
}

TEST_CASE("evaluate_run scores a bundle end to end") {
    RunConfig cfg = tiny_config();
    auto bundle = tiny_bundle(cfg);
    const DatasetConfig ds = cfg.dataset();
    std::vector<StoryEpisode> split;
    for (uint64_t s = 70; s < 73; ++s) split.push_back(generate_episode(s, ds));

    SUBCASE("stage-2 mode reports classification but no caption-aligned attention") {
        EvalOptions opt;
        opt.mode = EvalMode::stage2;
        opt.max_episodes = 2;
        const EvalReport rep = evaluate_run(*bundle, split, opt);
        CHECK(rep.mode == "stage2");
        CHECK(rep.episodes == 2);
        CHECK(rep.classify.frames == 6);
        CHECK(rep.classify.char_acc >= 0.0);
        CHECK(rep.classify.char_acc <= 1.0);
        CHECK(rep.ffd == -1);           // no probe supplied
        CHECK(rep.attn_in_mask == -1);  // mapper rows carry no character identity
        CHECK(rep.attn_frames == 0);
    }

    SUBCASE("stage-1 text mode fills the attention metric when characters appear") {
        EvalOptions opt;
        opt.mode = EvalMode::stage1_text;
        opt.max_episodes = 2;
        Probe probe(ds, 4);
        opt.probe = &probe;
        const EvalReport rep = evaluate_run(*bundle, split, opt);
        CHECK(rep.mode == "stage1-text");
        CHECK(rep.attn_frames + rep.attn_omitted == rep.classify.frames);
        if (rep.attn_frames > 0) {
            CHECK(rep.attn_in_mask >= 0.0);
            CHECK(rep.attn_in_mask <= 1.0);
        }
        CHECK(rep.ffd >= 0.0);  // probe present, so the distance is defined

        const std::string path = "/tmp/sv_report_run.json";
        write_report_json(rep, path);
        std::ifstream in(path);
        REQUIRE(bool(in));
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        CHECK(text.find("\"mode\": \"stage1-text\"") != std::string::npos);
        std::remove(path.c_str());
    }

    SUBCASE("empty split is an error") {
        CHECK_THROWS_AS(evaluate_run(*bundle, {}, EvalOptions{}), DataError);
    }
}

TEST_CASE("story transcripts record the oracle's reading") {
    RunConfig cfg = tiny_config();
    auto bundle = tiny_bundle(cfg);
    const StoryResult story =
        visualize_story(*bundle, {"Fred is waving in the kitchen ."}, 9);
    const std::string path = "/tmp/sv_story_test.json";
    write_story_json(story, cfg.dataset(), path);
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("\"seed\": 9") != std::string::npos);
    CHECK(text.find("\"captions\"") != std::string::npos);
    CHECK(text.find("\"img_agreement\"") != std::string::npos);
    CHECK(text.find("\"background\"") != std::string::npos);
    std::remove(path.c_str());
}
