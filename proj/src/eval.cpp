#include "storyviz/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace storyviz {

namespace {

double color_dist2(const uint8_t* px, const std::array<uint8_t, 3>& ref) {
    double d2 = 0;
    for (int c = 0; c < 3; ++c) {
        const double d = (double(px[c]) - double(ref[c])) / 255.0;
        d2 += d * d;
    }
    return d2;
}

}  // namespace

OracleDetection pixel_oracle(const Image8& frame, const DatasetConfig& config, double color_tol,
                             int min_area) {
    const int S = frame.w;
    if (frame.h != S || S <= 0) throw DataError("oracle expects a square frame");
    const double tol2 = color_tol * color_tol;
    const int n_chars = int(config.roster.size());

    // Nearest roster color within tolerance claims the pixel.
    std::vector<int> char_label(size_t(S) * S, -1);
    for (int p = 0; p < S * S; ++p) {
        const uint8_t* px = frame.rgb.data() + size_t(p) * 3;
        int best = -1;
        double best_d2 = tol2;
        for (int k = 0; k < n_chars; ++k) {
            const double d2 = color_dist2(px, config.roster[size_t(k)].color);
            if (d2 <= best_d2) {
                best_d2 = d2;
                best = k;
            }
        }
        char_label[size_t(p)] = best;
    }

    // 4-connected components per character; only areas >= min_area count.
    OracleDetection out;
    std::vector<int> stack;
    for (int k = 0; k < n_chars; ++k) {
        std::vector<uint8_t> keep(size_t(S) * S, 0);
        std::vector<uint8_t> seen(size_t(S) * S, 0);
        bool any = false;
        for (int p0 = 0; p0 < S * S; ++p0) {
            if (char_label[size_t(p0)] != k || seen[size_t(p0)]) continue;
            stack.assign(1, p0);
            seen[size_t(p0)] = 1;
            std::vector<int> comp;
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                comp.push_back(p);
                const int x = p % S, y = p / S;
                const int nb[4] = {x > 0 ? p - 1 : -1, x + 1 < S ? p + 1 : -1,
                                   y > 0 ? p - S : -1, y + 1 < S ? p + S : -1};
                for (int q : nb) {
                    if (q < 0 || seen[size_t(q)] || char_label[size_t(q)] != k) continue;
                    seen[size_t(q)] = 1;
                    stack.push_back(q);
                }
            }
            if (int(comp.size()) >= min_area) {
                any = true;
                for (int p : comp) keep[size_t(p)] = 1;
            }
        }
        if (any) {
            out.chars.push_back(config.roster[size_t(k)].name);
            out.masks.push_back(std::move(keep));
        }
    }

    // Background: majority nearest palette color over non-character pixels
    // (all pixels when everything was claimed).
    std::vector<int> votes(config.backgrounds.size(), 0);
    bool have_free = false;
    for (int pass = 0; pass < 2 && !have_free; ++pass) {
        for (int p = 0; p < S * S; ++p) {
            if (pass == 0 && char_label[size_t(p)] >= 0) continue;
            have_free = true;
            const uint8_t* px = frame.rgb.data() + size_t(p) * 3;
            int best = 0;
            double best_d2 = color_dist2(px, config.backgrounds[0].color);
            for (size_t b = 1; b < config.backgrounds.size(); ++b) {
                const double d2 = color_dist2(px, config.backgrounds[b].color);
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = int(b);
                }
            }
            ++votes[size_t(best)];
        }
    }
    out.background =
        config.backgrounds[size_t(std::max_element(votes.begin(), votes.end()) - votes.begin())]
            .label;
    return out;
}

CharMetrics char_metrics(const std::vector<OracleDetection>& detected,
                         const std::vector<FrameTruth>& truth) {
    if (detected.size() != truth.size())
        throw DataError("detection/truth frame counts differ (" + std::to_string(detected.size()) +
                        " vs " + std::to_string(truth.size()) + ")");
    if (detected.empty()) throw DataError("no frames to score");

    CharMetrics m;
    m.frames = int(detected.size());
    int set_hits = 0, bg_hits = 0;
    for (size_t i = 0; i < detected.size(); ++i) {
        const std::set<std::string> det(detected[i].chars.begin(), detected[i].chars.end());
        const std::set<std::string> want(truth[i].chars.begin(), truth[i].chars.end());
        if (det == want) ++set_hits;
        for (const auto& c : det) (want.count(c) ? m.tp : m.fp) += 1;
        for (const auto& c : want)
            if (!det.count(c)) m.fn += 1;
        if (detected[i].background == truth[i].background) ++bg_hits;
    }
    m.char_acc = double(set_hits) / double(m.frames);
    const double denom = double(2 * m.tp + m.fp + m.fn);
    m.char_f1 = denom > 0 ? 2.0 * double(m.tp) / denom : 1.0;
    m.bg_acc = double(bg_hits) / double(m.frames);
    m.bg_f1 = m.bg_acc;  // micro-F1 with one label per frame
    return m;
}

namespace {

// Covariance with the documented stabilizers: unbiased normalization,
// shrinkage toward the scaled identity below d+1 samples, spectrum floored
// at 1e-10.
Eigen::MatrixXd stable_covariance(const Eigen::MatrixXd& x) {
    const auto n = x.rows();
    const auto d = x.cols();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    if (n > 1) {
        const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
        cov = centered.transpose() * centered / double(n - 1);
    }
    if (n < d + 1) {
        const double gamma = 0.1;
        const double scale = d > 0 ? cov.trace() / double(d) : 0.0;
        cov = (1.0 - gamma) * cov + gamma * scale * Eigen::MatrixXd::Identity(d, d);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(1e-10);
    return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_feature_distance(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.rows < 1 || b.rows < 1) throw DataError("feature set is empty");
    if (a.cols != b.cols || a.cols < 1) throw DataError("feature widths differ");
    const int d = a.cols;

    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        ma(a.data.data(), a.rows, d), mb(b.data.data(), b.rows, d);
    const Eigen::VectorXd mu_a = ma.colwise().mean(), mu_b = mb.colwise().mean();
    const Eigen::MatrixXd cov_a = stable_covariance(ma), cov_b = stable_covariance(mb);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_a(cov_a);
    const Eigen::MatrixXd sqrt_a = eig_a.eigenvectors() *
                                   eig_a.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                                   eig_a.eigenvectors().transpose();
    Eigen::MatrixXd cross = sqrt_a * cov_b * sqrt_a;
    cross = 0.5 * (cross + cross.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_c(cross);
    const double tr_cross = eig_c.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
}

double attention_localization(const AttentionRecord<float>& record,
                              const std::vector<std::vector<uint8_t>>& char_masks,
                              const std::vector<int>& char_cols, int image_size) {
    if (char_masks.size() != char_cols.size()) throw DataError("mask/column count mismatch");
    if (char_masks.empty()) throw DataError("no characters supplied for localization");
    if (record.layers.empty()) throw DataError("attention record is empty");

    double sum = 0;
    int terms = 0;
    for (size_t k = 0; k < char_masks.size(); ++k) {
        for (const auto& layer : record.layers) {
            if (char_cols[k] < 0 || char_cols[k] >= layer.attn.cols)
                throw DataError("condition column out of range for attention record");
            const auto small =
                downsample_mask(char_masks[k], image_size, image_size, layer.w, layer.h);
            double inside = 0, total = 0;
            for (int p = 0; p < layer.attn.rows; ++p) {
                const double v = layer.attn.at(p, char_cols[k]);
                total += v;
                if (small[size_t(p)]) inside += v;
            }
            if (total > 0) {
                sum += inside / total;
                ++terms;
            }
        }
    }
    return terms > 0 ? sum / terms : 0.0;
}

void write_attention_grid(const std::string& path, const AttentionRecord<float>& record,
                          int image_size) {
    if (record.layers.empty()) throw DataError("attention record is empty");
    const int S = image_size, gap = 1;
    const int cols = record.layers[0].attn.cols;
    const int layers = int(record.layers.size());
    const int W = cols * S + (cols - 1) * gap;
    const int H = layers * S + (layers - 1) * gap;
    std::vector<uint8_t> gray(size_t(W) * H, 0);

    for (int l = 0; l < layers; ++l) {
        const auto& layer = record.layers[size_t(l)];
        if (layer.attn.cols != cols) throw DataError("attention layers disagree on column count");
        for (int c = 0; c < cols; ++c) {
            float peak = 0;
            for (int p = 0; p < layer.attn.rows; ++p)
                peak = std::max(peak, layer.attn.at(p, c));
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    const int sy = y * layer.h / S, sx = x * layer.w / S;
                    const float v = layer.attn.at(sy * layer.w + sx, c);
                    const int gy = l * (S + gap) + y, gx = c * (S + gap) + x;
                    gray[size_t(gy) * W + gx] =
                        uint8_t(peak > 0 ? std::lround(255.0 * v / peak) : 0);
                }
            }
        }
    }
    write_png_gray8(path, W, H, gray);
}

// ---------------------------------------------------------------------------
// Probe classifier
// ---------------------------------------------------------------------------

namespace {

EncoderDims probe_dims(int feat_width) {
    EncoderDims d;
    d.vocab = 3;  // unused by the conv body
    d.d_i = feat_width;
    d.crop_c1 = 8;
    d.crop_c2 = 16;
    return d;
}

}  // namespace

Probe::Probe(const DatasetConfig& config, uint64_t seed, int feat_width)
    : config_(config), dims_(probe_dims(feat_width)), body_(dims_, "probe.") {
    Rng rng(derive_seed(seed, 707));
    body_.register_params(store_, rng);
    const int nc = int(config.roster.size()), nb = int(config.backgrounds.size());
    store_.add("probe_head.char.w", init_xavier<float>(feat_width, nc, rng));
    store_.add("probe_head.char.b", init_zeros<float>(1, nc));
    store_.add("probe_head.bg.w", init_xavier<float>(feat_width, nb, rng));
    store_.add("probe_head.bg.b", init_zeros<float>(1, nb));
}

typename Graph<float>::Id Probe::logits_pair(Graph<float>& g, const Image8& frame,
                                             typename Graph<float>::Id* bg_logits) {
    const auto feat =
        body_.forward(g, store_, image_to_chw(frame), frame.w, frame.h);
    if (bg_logits)
        *bg_logits = linear(g, feat, g.param(store_.get("probe_head.bg.w")),
                            g.param(store_.get("probe_head.bg.b")));
    return linear(g, feat, g.param(store_.get("probe_head.char.w")),
                  g.param(store_.get("probe_head.char.b")));
}

double Probe::train_step(const std::vector<const Image8*>& frames,
                         const std::vector<FrameTruth>& truth, Adam<float>& opt) {
    if (frames.empty() || frames.size() != truth.size())
        throw DataError("probe batch is empty or mismatched");
    store_.zero_grad();
    double total = 0;
    for (size_t i = 0; i < frames.size(); ++i) {
        Tensor<float> multihot(1, int(config_.roster.size()));
        for (const auto& name : truth[i].chars) {
            const auto it = std::find_if(config_.roster.begin(), config_.roster.end(),
                                         [&](const CharacterSpec& c) { return c.name == name; });
            if (it == config_.roster.end())
                throw DataError("probe truth names unknown character '" + name + "'");
            multihot.at(0, int(it - config_.roster.begin())) = 1.0f;
        }
        int bg = -1;
        for (size_t b = 0; b < config_.backgrounds.size(); ++b)
            if (config_.backgrounds[b].label == truth[i].background) bg = int(b);
        if (bg < 0)
            throw DataError("probe truth names unknown background '" + truth[i].background + "'");

        Graph<float> g(true);
        typename Graph<float>::Id bg_logits = -1;
        const auto char_logits = logits_pair(g, *frames[i], &bg_logits);
        const auto loss = g.add(g.sigmoid_bce(char_logits, std::move(multihot)),
                                g.cross_entropy_rows(bg_logits, {bg}));
        g.backward(g.scale(loss, float(1.0 / double(frames.size()))));
        g.flush_param_grads();
        total += double(g.val(loss).at(0, 0));
    }
    opt.step(store_);
    return total / double(frames.size());
}

Tensor<float> Probe::features(const Image8& frame) {
    Graph<float> g(false);
    return g.val(body_.forward(g, store_, image_to_chw(frame), frame.w, frame.h));
}

FrameTruth Probe::predict(const Image8& frame) {
    Graph<float> g(false);
    typename Graph<float>::Id bg_logits = -1;
    const auto char_logits = g.val(logits_pair(g, frame, &bg_logits));
    const auto bg = g.val(bg_logits);
    FrameTruth out;
    for (int k = 0; k < char_logits.cols; ++k)
        if (char_logits.at(0, k) > 0) out.chars.push_back(config_.roster[size_t(k)].name);
    int best = 0;
    for (int b = 1; b < bg.cols; ++b)
        if (bg.at(0, b) > bg.at(0, best)) best = b;
    out.background = config_.backgrounds[size_t(best)].label;
    return out;
}

Probe train_probe(const std::vector<StoryEpisode>& episodes, const DatasetConfig& config,
                  int steps, int batch, uint64_t seed) {
    if (episodes.empty()) throw DataError("probe training needs episodes");
    Probe probe(config, seed);
    std::vector<std::pair<const Image8*, FrameTruth>> pool;
    for (const auto& ep : episodes) {
        for (size_t i = 0; i < ep.frames.size(); ++i) {
            FrameTruth t;
            for (const auto& ann : ep.annotations[i]) t.chars.push_back(ann.name);
            t.background = config.backgrounds[size_t(ep.backgrounds[i])].label;
            pool.push_back({&ep.frames[i], std::move(t)});
        }
    }
    Rng rng(derive_seed(seed, 708));
    Adam<float> opt({.lr = 2e-3});
    for (int s = 0; s < steps; ++s) {
        std::vector<const Image8*> frames;
        std::vector<FrameTruth> truth;
        for (int b = 0; b < batch; ++b) {
            const auto& pick = pool[rng.uniform_int(pool.size())];
            frames.push_back(pick.first);
            truth.push_back(pick.second);
        }
        probe.train_step(frames, truth, opt);
    }
    return probe;
}

// ---------------------------------------------------------------------------
// Evaluation runs
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kProtocol =
    "char_acc: per-frame exact character-set match; char_f1: micro-F1 over per-character "
    "presence; bg_acc: per-frame background-label accuracy; bg_f1: micro-F1 over one label "
    "per frame, which coincides with bg_acc; ffd: Frechet distance between probe features of "
    "generated and ground-truth frames; attn_in_mask: mean cross-attention mass inside the "
    "oracle's character masks, caption-conditioned modes only.";

const char* mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::stage2: return "stage2";
        case EvalMode::stage1_fused: return "stage1-fused";
        default: return "stage1-text";
    }
}

}  // namespace

EvalReport evaluate_run(ModelBundle& bundle, const std::vector<StoryEpisode>& split,
                        const EvalOptions& options) {
    if (split.empty()) throw DataError("evaluation split is empty");
    const DatasetConfig ds = bundle.config.dataset();
    const int n_eval = options.max_episodes < 0
                           ? int(split.size())
                           : std::min<int>(options.max_episodes, int(split.size()));

    EvalReport report;
    report.protocol = kProtocol;
    report.mode = mode_name(options.mode);
    report.episodes = n_eval;

    std::vector<OracleDetection> detections;
    std::vector<FrameTruth> truths;
    std::vector<Tensor<float>> gen_feats, gt_feats;
    double attn_sum = 0;

    for (int e = 0; e < n_eval; ++e) {
        const auto& ep = split[size_t(e)];
        const auto& captions =
            options.referential ? ep.captions_referential : ep.captions_original;
        std::vector<Image8> frames;
        std::vector<AttentionRecord<float>> records;

        if (options.mode == EvalMode::stage2) {
            StoryResult story =
                visualize_story(bundle, captions, derive_seed(options.seed, 900 + uint64_t(e)));
            for (auto& fr : story.frames) {
                frames.push_back(std::move(fr.frame));
                records.push_back(std::move(fr.attention));
            }
        } else {
            auto& s1 = bundle.stage1;
            for (size_t i = 0; i < captions.size(); ++i) {
                const Tokenized tk = s1.tokenizer.tokenize(captions[i]);
                ConditionEmbedding<float> cond = s1.encoders.encode_text(s1.store, tk.ids);
                if (options.mode == EvalMode::stage1_fused && !tk.char_token_indices.empty()) {
                    std::vector<CharacterFeature<float>> feats;
                    for (const auto& ann : ep.annotations[i])
                        if (tk.char_token_indices.count(ann.name))
                            feats.push_back(
                                s1.encoders.encode_character(s1.store, ann.crop, ann.name));
                    if (feats.size() == tk.char_token_indices.size())
                        cond = s1.encoders.fuse_embedding(s1.store, cond, tk.char_token_indices,
                                                          feats);
                }
                SampleConfig sc = bundle.config.sampling();
                sc.seed = derive_seed(options.seed, 900 + uint64_t(e) * 64 + uint64_t(i));
                auto [img, rec] = sample_stage1(s1, cond.values, sc);
                frames.push_back(std::move(img));
                records.push_back(std::move(rec));
            }
        }

        for (size_t i = 0; i < frames.size(); ++i) {
            OracleDetection det = pixel_oracle(frames[i], ds);
            FrameTruth t;
            for (const auto& ann : ep.annotations[i]) t.chars.push_back(ann.name);
            t.background = ds.backgrounds[size_t(ep.backgrounds[i])].label;

            if (options.mode != EvalMode::stage2) {
                // Columns are caption token positions; only detected
                // characters named in the caption contribute.
                const Tokenized tk = bundle.stage1.tokenizer.tokenize(captions[i]);
                std::vector<std::vector<uint8_t>> masks;
                std::vector<int> cols;
                for (size_t k = 0; k < det.chars.size(); ++k) {
                    const auto it = tk.char_token_indices.find(det.chars[k]);
                    if (it != tk.char_token_indices.end()) {
                        masks.push_back(det.masks[k]);
                        cols.push_back(it->second);
                    }
                }
                if (masks.empty()) {
                    ++report.attn_omitted;
                } else {
                    attn_sum += attention_localization(records[i], masks, cols, ds.image_size);
                    ++report.attn_frames;
                }
            }

            if (options.probe) {
                gen_feats.push_back(options.probe->features(frames[i]));
                gt_feats.push_back(options.probe->features(ep.frames[i]));
            }
            detections.push_back(std::move(det));
            truths.push_back(std::move(t));
        }
    }

    report.classify = char_metrics(detections, truths);
    if (options.probe && !gen_feats.empty()) {
        const int d = options.probe->feat_width();
        Tensor<double> a(int(gen_feats.size()), d), b(int(gt_feats.size()), d);
        for (size_t i = 0; i < gen_feats.size(); ++i)
            for (int c = 0; c < d; ++c) {
                a.at(int(i), c) = double(gen_feats[i].at(0, c));
                b.at(int(i), c) = double(gt_feats[i].at(0, c));
            }
        report.ffd = std::max(0.0, frechet_feature_distance(a, b));
    }
    if (report.attn_frames > 0) report.attn_in_mask = attn_sum / double(report.attn_frames);
    return report;
}

void write_report_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["protocol"] = report.protocol;
    j["mode"] = report.mode;
    j["episodes"] = report.episodes;
    j["frames"] = report.classify.frames;
    j["char_acc"] = report.classify.char_acc;
    j["char_f1"] = report.classify.char_f1;
    j["bg_acc"] = report.classify.bg_acc;
    j["bg_f1"] = report.classify.bg_f1;
    j["char_tp"] = report.classify.tp;
    j["char_fp"] = report.classify.fp;
    j["char_fn"] = report.classify.fn;
    if (report.ffd >= 0)
        j["ffd"] = report.ffd;
    else
        j["ffd"] = nullptr;
    if (report.attn_in_mask >= 0)
        j["attn_in_mask"] = report.attn_in_mask;
    else
        j["attn_in_mask"] = nullptr;
    j["attn_frames"] = report.attn_frames;
    j["attn_omitted"] = report.attn_omitted;

    const std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void write_story_json(const StoryResult& story, const DatasetConfig& config,
                      const std::string& path) {
    nlohmann::json j;
    j["seed"] = story.seed;
    j["captions"] = story.captions;
    auto& frames = j["frames"] = nlohmann::json::array();
    for (const auto& fr : story.frames) {
        const OracleDetection det = pixel_oracle(fr.frame, config);
        frames.push_back({{"detected_chars", det.chars},
                          {"background", det.background},
                          {"context_len", fr.context_len},
                          {"context_truncated", fr.context_truncated},
                          {"img_agreement", fr.img_agreement},
                          {"seconds", fr.seconds}});
    }
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(path, std::vector<uint8_t>(text.begin(), text.end()));
}

}  // namespace storyviz
