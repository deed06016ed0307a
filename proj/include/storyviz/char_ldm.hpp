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
#include "storyviz/sprite_data.hpp"

namespace storyviz {

// ---------------------------------------------------------------------------
// NoiseSchedule: linear DDPM betas with cached alpha products.
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;       // betas[i] applies at t = i+1
    std::vector<double> alpha_bars;  // alpha_bars[i] = prod_{s<=i} (1 - betas[s])

    static NoiseSchedule linear(int T, double beta_min = 1e-4, double beta_max = 0.02) {
        if (T < 2) throw ConfigError("noise schedule needs at least 2 steps");
        if (!(0 < beta_min && beta_min < beta_max && beta_max < 1))
            throw ConfigError("noise schedule betas must satisfy 0 < beta_min < beta_max < 1");
        NoiseSchedule s;
        s.steps = T;
        s.betas.resize(size_t(T));
        s.alpha_bars.resize(size_t(T));
        double prod = 1.0;
        for (int i = 0; i < T; ++i) {
            s.betas[size_t(i)] = beta_min + (beta_max - beta_min) * double(i) / double(T - 1);
            prod *= 1.0 - s.betas[size_t(i)];
            s.alpha_bars[size_t(i)] = prod;
        }
        return s;
    }

    double beta(int t) const { return betas[size_t(check_t(t) - 1)]; }
    double alpha_bar(int t) const { return alpha_bars[size_t(check_t(t) - 1)]; }

    int check_t(int t) const {
        if (t < 1 || t > steps)
            throw DataError("diffusion timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps) + "]");
        return t;
    }
};

// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const NoiseSchedule& sched, const Tensor<T>& x0, int t, const Tensor<T>& eps) {
    if (!x0.same_shape(eps)) throw DataError("q_sample: x0/eps shape mismatch");
    const double ab = sched.alpha_bar(t);
    const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
    Tensor<T> z(x0.rows, x0.cols);
    for (size_t i = 0; i < z.data.size(); ++i) z.data[i] = a * x0.data[i] + b * eps.data[i];
    return z;
}

// ---------------------------------------------------------------------------
// Attention capture
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionRecord {
    struct Layer {
        Tensor<T> attn;  // (h*w, max_len), row-stochastic
        int h = 0, w = 0;
    };
    std::vector<Layer> layers;  // one per cross-attention site, forward order
};

struct DiffusionDims {
    int image_size = 32;  // must divide by 4 (three resolutions)
    int base = 32;        // full-resolution width
    int mid = 48;         // half-resolution width
    int deep = 96;        // quarter-resolution width
    int time_dim = 64;    // sinusoidal embedding width (even)
    int time_hidden = 128;
    int steps = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;

    void validate() const {
        if (image_size < 4 || image_size % 4 != 0)
            throw ConfigError("image_size must be a positive multiple of 4");
        if (base < 2 || mid < 2 || deep < 2) throw ConfigError("unet widths must be at least 2");
        if (time_dim % 2 != 0) throw ConfigError("time embedding width must be even");
    }
};

// ---------------------------------------------------------------------------
// DiffusionUNet: three resolutions; residual blocks everywhere, one
// self-attention plus one cross-attention block at the half and quarter
// resolutions. Cross-attention probabilities are capturable per layer.
// ---------------------------------------------------------------------------

template <typename T>
class DiffusionUNet {
  public:
    using Id = typename Graph<T>::Id;

    struct Capture {
        std::vector<Id> nodes;                  // softmax outputs, (h*w, max_len)
        std::vector<std::pair<int, int>> res;   // matching (h, w)
    };

    DiffusionUNet(DiffusionDims dims, EncoderDims enc_dims, std::string prefix)
        : dims_(dims), enc_(enc_dims), prefix_(std::move(prefix)) {
        dims_.validate();
    }

    void register_params(ParamStore<T>& store, Rng& rng) const {
        const int b = dims_.base, m = dims_.mid, d = dims_.deep;
        conv_params(store, rng, "stem", b, 3);
        store.add(prefix_ + "time.w1", init_xavier<T>(dims_.time_dim, dims_.time_hidden, rng));
        store.add(prefix_ + "time.b1", init_zeros<T>(1, dims_.time_hidden));
        store.add(prefix_ + "time.w2", init_xavier<T>(dims_.time_hidden, dims_.time_hidden, rng));
        store.add(prefix_ + "time.b2", init_zeros<T>(1, dims_.time_hidden));
        conv_params(store, rng, "down1", m, b);
        res_params(store, rng, "enc2", m, m);
        conv_params(store, rng, "down2", d, m);
        res_params(store, rng, "mid.res1", d, d);
        self_params(store, rng, "mid.self", d);
        cross_params(store, rng, "mid.cross", d);
        res_params(store, rng, "mid.res2", d, d);
        conv_params(store, rng, "up1", m, d);
        res_params(store, rng, "dec2.res", 2 * m, m);
        self_params(store, rng, "dec2.self", m);
        cross_params(store, rng, "dec2.cross", m);
        conv_params(store, rng, "up2", b, m);
        res_params(store, rng, "dec1.res", 2 * b, b);
        store.add(prefix_ + "head.gn.g", init_ones<T>(b, 1));
        store.add(prefix_ + "head.gn.b", init_zeros<T>(b, 1));
        store.add(prefix_ + "head.w", init_zeros<T>(3, b * 9));
        store.add(prefix_ + "head.b", init_zeros<T>(3, 1));
    }

    // z is (3, S*S), cond is (max_len, d_c); returns (3, S*S)
    Id forward(Graph<T>& g, ParamStore<T>& store, Id z, int t, Id cond,
               Capture* capture = nullptr) const {
        const int S = dims_.image_size;
        {
            const auto& zv = g.val(z);
            if (zv.rows != 3 || zv.cols != S * S)
                throw DataError("denoiser input shape mismatch");
            const auto& cv = g.val(cond);
            if (cv.rows != enc_.max_len || cv.cols != enc_.d_c)
                throw DataError("condition embedding shape mismatch");
        }
        const int S2 = S / 2, S4 = S / 4;
        Id temb = time_mlp(g, store, t);

        Id h0 = conv(g, store, "stem", z, S, S, 1);
        Id h1 = conv(g, store, "down1", h0, S, S, 2);
        h1 = res_block(g, store, "enc2", h1, temb, S2, S2);
        Id h2 = conv(g, store, "down2", h1, S2, S2, 2);
        h2 = res_block(g, store, "mid.res1", h2, temb, S4, S4);
        h2 = self_block(g, store, "mid.self", h2);
        h2 = cross_block(g, store, "mid.cross", h2, cond, S4, S4, capture);
        h2 = res_block(g, store, "mid.res2", h2, temb, S4, S4);

        Id u1 = conv(g, store, "up1", g.upsample_nearest2x(h2, S4, S4), S2, S2, 1);
        u1 = res_block(g, store, "dec2.res", g.concat_rows(u1, h1), temb, S2, S2);
        u1 = self_block(g, store, "dec2.self", u1);
        u1 = cross_block(g, store, "dec2.cross", u1, cond, S2, S2, capture);

        Id u0 = conv(g, store, "up2", g.upsample_nearest2x(u1, S2, S2), S, S, 1);
        u0 = res_block(g, store, "dec1.res", g.concat_rows(u0, h0), temb, S, S);

        Id out = norm_affine(g, store, u0, prefix_ + "head.gn");
        out = g.conv2d(g.silu(out), g.param(store.get(prefix_ + "head.w")), S, S, 3, 3, 1, 1);
        return g.add_col_broadcast(out, g.param(store.get(prefix_ + "head.b")));
    }

    int cross_layer_count() const { return 2; }
    const DiffusionDims& dims() const { return dims_; }
    const EncoderDims& enc_dims() const { return enc_; }

    Tensor<T> sinusoidal_time(int t) const {
        const int half = dims_.time_dim / 2;
        Tensor<T> e(1, dims_.time_dim);
        for (int i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
            e.at(0, i) = T(std::sin(double(t) * f));
            e.at(0, half + i) = T(std::cos(double(t) * f));
        }
        return e;
    }

  private:
    DiffusionDims dims_;
    EncoderDims enc_;
    std::string prefix_;

    void conv_params(ParamStore<T>& store, Rng& rng, const std::string& name, int out_c,
                     int in_c) const {
        store.add(prefix_ + name + ".w", init_kaiming<T>(out_c, in_c * 9, rng));
        store.add(prefix_ + name + ".b", init_zeros<T>(out_c, 1));
    }

    void res_params(ParamStore<T>& store, Rng& rng, const std::string& name, int cin,
                    int cout) const {
        store.add(prefix_ + name + ".gn1.g", init_ones<T>(cin, 1));
        store.add(prefix_ + name + ".gn1.b", init_zeros<T>(cin, 1));
        store.add(prefix_ + name + ".conv1.w", init_kaiming<T>(cout, cin * 9, rng));
        store.add(prefix_ + name + ".conv1.b", init_zeros<T>(cout, 1));
        store.add(prefix_ + name + ".tproj.w", init_xavier<T>(dims_.time_hidden, cout, rng));
        store.add(prefix_ + name + ".tproj.b", init_zeros<T>(1, cout));
        store.add(prefix_ + name + ".gn2.g", init_ones<T>(cout, 1));
        store.add(prefix_ + name + ".gn2.b", init_zeros<T>(cout, 1));
        // second conv starts at zero so each block begins as identity
        store.add(prefix_ + name + ".conv2.w", init_zeros<T>(cout, cout * 9));
        store.add(prefix_ + name + ".conv2.b", init_zeros<T>(cout, 1));
        if (cin != cout) store.add(prefix_ + name + ".skip.w", init_xavier<T>(cout, cin, rng));
    }

    void self_params(ParamStore<T>& store, Rng& rng, const std::string& name, int c) const {
        store.add(prefix_ + name + ".gn.g", init_ones<T>(c, 1));
        store.add(prefix_ + name + ".gn.b", init_zeros<T>(c, 1));
        store.add(prefix_ + name + ".wq", init_xavier<T>(c, c, rng));
        store.add(prefix_ + name + ".wk", init_xavier<T>(c, c, rng));
        store.add(prefix_ + name + ".wv", init_xavier<T>(c, c, rng));
        store.add(prefix_ + name + ".wo", init_zeros<T>(c, c));
    }

    void cross_params(ParamStore<T>& store, Rng& rng, const std::string& name, int c) const {
        store.add(prefix_ + name + ".gn.g", init_ones<T>(c, 1));
        store.add(prefix_ + name + ".gn.b", init_zeros<T>(c, 1));
        store.add(prefix_ + name + ".wq", init_xavier<T>(c, c, rng));
        store.add(prefix_ + name + ".wk", init_xavier<T>(enc_.d_c, c, rng));
        store.add(prefix_ + name + ".wv", init_xavier<T>(enc_.d_c, c, rng));
        store.add(prefix_ + name + ".wo", init_zeros<T>(c, c));
    }

    Id time_mlp(Graph<T>& g, ParamStore<T>& store, int t) const {
        Id e = g.input(sinusoidal_time(t));
        e = linear(g, e, g.param(store.get(prefix_ + "time.w1")),
                   g.param(store.get(prefix_ + "time.b1")));
        return linear(g, g.silu(e), g.param(store.get(prefix_ + "time.w2")),
                      g.param(store.get(prefix_ + "time.b2")));
    }

    Id conv(Graph<T>& g, ParamStore<T>& store, const std::string& name, Id x, int H, int W,
            int stride) const {
        Id y = g.conv2d(x, g.param(store.get(prefix_ + name + ".w")), H, W, 3, 3, stride, 1);
        return g.add_col_broadcast(y, g.param(store.get(prefix_ + name + ".b")));
    }

    Id norm_affine(Graph<T>& g, ParamStore<T>& store, Id x, const std::string& name) const {
        const int c = g.val(x).rows;
        Id n = g.group_norm(x, detail::norm_groups(c));
        n = g.mul_col_broadcast(n, g.param(store.get(name + ".g")));
        return g.add_col_broadcast(n, g.param(store.get(name + ".b")));
    }

    Id res_block(Graph<T>& g, ParamStore<T>& store, const std::string& name, Id x, Id temb, int H,
                 int W) const {
        const std::string p = prefix_ + name;
        Id h = g.silu(norm_affine(g, store, x, p + ".gn1"));
        h = g.conv2d(h, g.param(store.get(p + ".conv1.w")), H, W, 3, 3, 1, 1);
        h = g.add_col_broadcast(h, g.param(store.get(p + ".conv1.b")));
        Id tb = linear(g, g.silu(temb), g.param(store.get(p + ".tproj.w")),
                       g.param(store.get(p + ".tproj.b")));
        h = g.add_col_broadcast(h, g.transpose(tb));
        h = g.silu(norm_affine(g, store, h, p + ".gn2"));
        h = g.conv2d(h, g.param(store.get(p + ".conv2.w")), H, W, 3, 3, 1, 1);
        h = g.add_col_broadcast(h, g.param(store.get(p + ".conv2.b")));
        Id skip = store.has(p + ".skip.w") ? g.matmul(g.param(store.get(p + ".skip.w")), x) : x;
        return g.add(skip, h);
    }

    Id self_block(Graph<T>& g, ParamStore<T>& store, const std::string& name, Id x) const {
        const std::string p = prefix_ + name;
        const int c = g.val(x).rows;
        Id n = g.transpose(norm_affine(g, store, x, p + ".gn"));  // (HW, C)
        Id q = g.matmul(n, g.param(store.get(p + ".wq")));
        Id k = g.matmul(n, g.param(store.get(p + ".wk")));
        Id v = g.matmul(n, g.param(store.get(p + ".wv")));
        Id att = g.softmax_rows(g.scale(g.matmul_nt(q, k), T(1.0 / std::sqrt(double(c)))));
        Id out = g.matmul(g.matmul(att, v), g.param(store.get(p + ".wo")));
        return g.add(x, g.transpose(out));
    }

    Id cross_block(Graph<T>& g, ParamStore<T>& store, const std::string& name, Id x, Id cond,
                   int H, int W, Capture* capture) const {
        const std::string p = prefix_ + name;
        const int c = g.val(x).rows;
        Id n = g.transpose(norm_affine(g, store, x, p + ".gn"));  // (HW, C)
        Id q = g.matmul(n, g.param(store.get(p + ".wq")));
        Id k = g.matmul(cond, g.param(store.get(p + ".wk")));
        Id v = g.matmul(cond, g.param(store.get(p + ".wv")));
        Id att = g.softmax_rows(g.scale(g.matmul_nt(q, k), T(1.0 / std::sqrt(double(c)))));
        if (capture) {
            capture->nodes.push_back(att);
            capture->res.emplace_back(H, W);
        }
        Id out = g.matmul(g.matmul(att, v), g.param(store.get(p + ".wo")));
        return g.add(x, g.transpose(out));
    }
};

// ---------------------------------------------------------------------------
// Attention regularization: push character-token attention mass into the
// character's mask. Per valid (character, layer) pair the term is
// sum(A outside)/|outside| - sum(A inside)/|inside|; the loss is the mean
// over valid pairs, 0 when none qualify.
// ---------------------------------------------------------------------------

// On-tape version used while training.
template <typename T>
typename Graph<T>::Id attention_reg_on_tape(Graph<T>& g,
                                            const typename DiffusionUNet<T>::Capture& captured,
                                            const std::vector<std::vector<uint8_t>>& masks,
                                            const std::vector<int>& token_positions,
                                            int image_size, int* skipped = nullptr) {
    using Id = typename Graph<T>::Id;
    if (masks.size() != token_positions.size())
        throw DataError("attention reg: mask/token count mismatch");
    Id acc = -1;
    int terms = 0;
    for (size_t li = 0; li < captured.nodes.size(); ++li) {
        const auto [h, w] = captured.res[li];
        for (size_t k = 0; k < masks.size(); ++k) {
            const auto dm = downsample_mask(masks[k], image_size, image_size, w, h);
            int inside = 0;
            for (uint8_t v : dm) inside += v;
            const int outside = w * h - inside;
            if (inside == 0 || outside == 0) {
                if (skipped) ++(*skipped);
                continue;
            }
            Tensor<T> m_in(w * h, 1), m_out(w * h, 1);
            for (int i = 0; i < w * h; ++i) {
                m_in.at(i, 0) = T(dm[size_t(i)]);
                m_out.at(i, 0) = T(1 - dm[size_t(i)]);
            }
            Id col = g.slice_cols(captured.nodes[size_t(li)], token_positions[k], 1);
            Id pos = g.scale(g.sum_all(g.mul(col, g.input(std::move(m_in)))), T(1.0 / inside));
            Id neg = g.scale(g.sum_all(g.mul(col, g.input(std::move(m_out)))), T(1.0 / outside));
            Id term = g.sub(neg, pos);
            acc = acc < 0 ? term : g.add(acc, term);
            ++terms;
        }
    }
    if (terms == 0) return g.scalar(T(0));
    return g.scale(acc, T(1.0 / terms));
}

// ---------------------------------------------------------------------------
// Stage1Model: tokenizer + encoders + denoiser sharing one parameter store.
// ---------------------------------------------------------------------------

template <typename T>
struct Stage1Model {
    Tokenizer tokenizer;
    EncoderStack<T> encoders;
    DiffusionUNet<T> unet;
    NoiseSchedule schedule;
    ParamStore<T> store;
    bool trained = false;

    Stage1Model(Tokenizer tok, EncoderDims enc_dims, DiffusionDims diff_dims, uint64_t seed)
        : tokenizer(std::move(tok)),
          encoders(patch_vocab(enc_dims, tokenizer)),
          unet(diff_dims, patch_vocab(enc_dims, tokenizer), "unet."),
          schedule(NoiseSchedule::linear(diff_dims.steps, diff_dims.beta_min, diff_dims.beta_max)) {
        Rng rng(derive_seed(seed, 101));
        encoders.register_params(store, rng);
        unet.register_params(store, rng);
    }

    static EncoderDims patch_vocab(EncoderDims d, const Tokenizer& t) {
        d.vocab = t.vocab_size();
        if (t.max_len() != d.max_len) throw ConfigError("tokenizer/encoder max_len disagree");
        return d;
    }
};

// Images live in [0,1]; the diffusion model works on [-1,1] so the noise
// prior is symmetric around the data.
template <typename T>
Tensor<T> to_model_space(const Image8& img) {
    Tensor<T> x = image_to_chw(img).template cast<T>();
    for (auto& v : x.data) v = T(2) * v - T(1);
    return x;
}

template <typename T>
Image8 from_model_space(const Tensor<T>& y, int w, int h) {
    TensorF x(y.rows, y.cols);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] = float((double(y.data[i]) + 1.0) / 2.0);
    return chw_to_image(x, w, h);
}

// The spec'd plain forward: eps prediction plus optional capture.
template <typename T>
std::pair<Tensor<T>, AttentionRecord<T>> unet_forward(Stage1Model<T>& model, const Tensor<T>& z_t,
                                                      int t, const Tensor<T>& cond_values,
                                                      bool capture) {
    model.schedule.check_t(t);
    Graph<T> g(false);
    typename DiffusionUNet<T>::Capture cap;
    auto out = model.unet.forward(g, model.store, g.input(Tensor<T>(z_t)), t,
                                  g.input(Tensor<T>(cond_values)), capture ? &cap : nullptr);
    AttentionRecord<T> rec;
    if (capture) {
        for (size_t i = 0; i < cap.nodes.size(); ++i)
            rec.layers.push_back({g.val(cap.nodes[i]), cap.res[i].first, cap.res[i].second});
    }
    return {g.val(out), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Stage-1 training
// ---------------------------------------------------------------------------

enum class CondChoice { null_cond, text_only, fused };

inline CondChoice draw_condition(Rng& rng, double p_null, double p_text) {
    const double u = rng.uniform();
    if (u < p_null) return CondChoice::null_cond;
    if (u < p_null + p_text) return CondChoice::text_only;
    return CondChoice::fused;
}

struct Stage1Item {
    const Image8* frame = nullptr;
    const std::string* caption = nullptr;  // original, non-referential
    const std::vector<CharAnnotation>* annotations = nullptr;
};

struct Stage1TrainConfig {
    double lambda_reg = 0.01;
    bool reg_enabled = true;
    double p_null = 0.1;
    double p_text = 0.1;
};

struct Stage1StepStats {
    double l_diffusion = 0;
    double l_reg = 0;  // mean over fused samples that carried the term
    int n_null = 0, n_text = 0, n_fused = 0;
    int skipped_masks = 0;
    double grad_norm = 0;
};

// Node handles for one training sample's loss graph. l_reg is -1 when the
// sample carried no regularization term.
template <typename T>
struct Stage1LossNodes {
    typename Graph<T>::Id loss = -1;
    typename Graph<T>::Id l_diff = -1;
    typename Graph<T>::Id l_reg = -1;
};

// Builds the full per-sample loss on the tape: condition per `choice`, noised
// frame at timestep t, eps-prediction MSE, plus the attention term on fused
// samples. Shared by the trainer and by gradient checks.
template <typename T>
Stage1LossNodes<T> stage1_sample_loss(Graph<T>& g, Stage1Model<T>& model, const Stage1Item& item,
                                      CondChoice choice, int t, Tensor<T> eps,
                                      const Stage1TrainConfig& cfg, int* skipped = nullptr) {
    using Id = typename Graph<T>::Id;
    const int S = model.unet.dims().image_size;
    if (item.frame->w != S || item.frame->h != S)
        throw DataError("training frame size disagrees with the model");
    const Tokenized tok = model.tokenizer.tokenize(*item.caption);
    const Tensor<T> x0 = to_model_space<T>(*item.frame);
    Tensor<T> z = q_sample(model.schedule, x0, t, eps);
    const bool want_reg = choice == CondChoice::fused && cfg.reg_enabled &&
                          cfg.lambda_reg != 0.0 && !item.annotations->empty();

    Id cond = -1;
    std::vector<std::vector<uint8_t>> masks;
    std::vector<int> positions;
    switch (choice) {
        case CondChoice::null_cond:
            cond = model.encoders.null_condition(g, model.store);
            break;
        case CondChoice::text_only:
            cond = model.encoders.text().forward(g, model.store, tok.ids);
            break;
        case CondChoice::fused: {
            Id text = model.encoders.text().forward(g, model.store, tok.ids);
            std::vector<Id> feats;
            for (const auto& ann : *item.annotations) {
                if (ann.token_index < 0 || ann.token_index >= model.tokenizer.max_len())
                    throw DataError("annotation token index outside the caption window");
                feats.push_back(model.encoders.crop().forward(
                    g, model.store, image_to_chw(ann.crop).template cast<T>(), ann.crop.w,
                    ann.crop.h));
                positions.push_back(ann.token_index);
                masks.push_back(ann.mask);
            }
            cond = model.encoders.fusion().forward(g, model.store, text, positions, feats);
            break;
        }
    }

    typename DiffusionUNet<T>::Capture cap;
    Id eps_hat = model.unet.forward(g, model.store, g.input(std::move(z)), t, cond,
                                    want_reg ? &cap : nullptr);
    Stage1LossNodes<T> nodes;
    nodes.l_diff = mse(g, eps_hat, g.input(std::move(eps)));
    nodes.loss = nodes.l_diff;
    if (want_reg) {
        nodes.l_reg = attention_reg_on_tape(g, cap, masks, positions, S, skipped);
        nodes.loss = axpy(g, nodes.l_diff, T(cfg.lambda_reg), nodes.l_reg);
    }
    return nodes;
}

template <typename T>
Stage1StepStats train_stage1_step(Stage1Model<T>& model, const std::vector<Stage1Item>& batch,
                                  Adam<T>& opt, Rng& rng, const Stage1TrainConfig& cfg,
                                  int64_t step) {
    if (batch.empty()) throw DataError("stage-1 training batch is empty");
    Stage1StepStats stats;
    int reg_terms = 0;
    model.store.zero_grad();

    for (const auto& item : batch) {
        const int t = 1 + int(rng.uniform_int(uint64_t(model.schedule.steps)));
        Tensor<T> eps(3, size_t(item.frame->w) * size_t(item.frame->h));
        for (auto& v : eps.data) v = T(rng.normal());
        const CondChoice choice = draw_condition(rng, cfg.p_null, cfg.p_text);
        switch (choice) {
            case CondChoice::null_cond: ++stats.n_null; break;
            case CondChoice::text_only: ++stats.n_text; break;
            case CondChoice::fused: ++stats.n_fused; break;
        }

        Graph<T> g(true);
        auto nodes = stage1_sample_loss(g, model, item, choice, t, std::move(eps), cfg,
                                        &stats.skipped_masks);
        g.backward(g.scale(nodes.loss, T(1.0 / double(batch.size()))));
        g.flush_param_grads();

        stats.l_diffusion += double(g.val(nodes.l_diff).at(0, 0));
        if (nodes.l_reg >= 0) {
            stats.l_reg += double(g.val(nodes.l_reg).at(0, 0));
            ++reg_terms;
        }
    }

    stats.l_diffusion /= double(batch.size());
    if (reg_terms > 0) stats.l_reg /= double(reg_terms);

    double norm_sq = 0;
    for (size_t i = 0; i < model.store.size(); ++i) {
        const auto& p = model.store.at(i);
        if (!p.trainable) continue;
        for (const T& gv : p.grad.data) norm_sq += double(gv) * double(gv);
    }
    stats.grad_norm = std::sqrt(norm_sq);

    if (!std::isfinite(stats.l_diffusion) || !std::isfinite(stats.l_reg) ||
        !std::isfinite(stats.grad_norm))
        throw NumericError("stage-1 training diverged at step " + std::to_string(step) +
                           ": loss=" + std::to_string(stats.l_diffusion) +
                           " reg=" + std::to_string(stats.l_reg) +
                           " lr=" + std::to_string(opt.config().lr) +
                           " grad_norm=" + std::to_string(stats.grad_norm));
    opt.step(model.store);
    model.trained = true;
    return stats;
}

// ---------------------------------------------------------------------------
// Deterministic DDIM sampling with classifier-free guidance
// ---------------------------------------------------------------------------

inline std::vector<int> ddim_taus(int schedule_steps, int ddim_steps) {
    if (ddim_steps < 1 || ddim_steps > schedule_steps)
        throw ConfigError("ddim_steps must lie in [1, schedule steps]");
    std::vector<int> taus(size_t(ddim_steps), 0);
    for (int j = 0; j < ddim_steps; ++j)
        taus[size_t(j)] = std::max(
            1, int(std::llround(double(j + 1) * double(schedule_steps) / double(ddim_steps))));
    return taus;  // ascending, ends at schedule_steps
}

// One guided eps prediction. w=1 is exactly the conditional pass and w=0
// exactly the unconditional pass (no arithmetic), so those identities are
// bit-exact.
template <typename T>
Tensor<T> guided_eps(Stage1Model<T>& model, const Tensor<T>& z, int t, const Tensor<T>& cond_values,
                     const Tensor<T>& null_values, double w,
                     AttentionRecord<T>* record = nullptr) {
    const bool cap = record != nullptr;
    if (w == 1.0) {
        auto [eps_c, rec] = unet_forward(model, z, t, cond_values, cap);
        if (cap) *record = std::move(rec);
        return eps_c;
    }
    if (w == 0.0) {
        auto [eps_u, rec] = unet_forward(model, z, t, null_values, cap);
        if (cap) *record = std::move(rec);
        return eps_u;
    }
    auto [eps_u, rec_u] = unet_forward(model, z, t, null_values, false);
    auto [eps_c, rec_c] = unet_forward(model, z, t, cond_values, cap);
    if (cap) *record = std::move(rec_c);
    Tensor<T> eps(eps_c.rows, eps_c.cols);
    for (size_t i = 0; i < eps.data.size(); ++i)
        eps.data[i] = eps_u.data[i] + T(w) * (eps_c.data[i] - eps_u.data[i]);
    return eps;
}

struct SampleConfig {
    double guidance_w = 3.0;
    int ddim_steps = 20;
    uint64_t seed = 0;
    bool capture_attention = true;
};

// Deterministic DDIM (eta=0) sampler. Returns the decoded image and the
// cross-attention maps averaged over the sampling steps.
template <typename T>
std::pair<Image8, AttentionRecord<T>> sample_stage1(Stage1Model<T>& model,
                                                    const Tensor<T>& cond_values,
                                                    const SampleConfig& cfg) {
    if (!model.trained)
        throw StageError("stage-1 model has no trained weights; train or load a checkpoint first");
    const int S = model.unet.dims().image_size;
    const auto& sched = model.schedule;
    const std::vector<int> taus = ddim_taus(sched.steps, cfg.ddim_steps);
    const Tensor<T> null_values = [&] {
        Graph<T> g(false);
        return g.val(model.encoders.null_condition(g, model.store));
    }();

    Rng rng(derive_seed(cfg.seed, 202));
    Tensor<T> z(3, size_t(S) * size_t(S));
    for (auto& v : z.data) v = T(rng.normal());

    AttentionRecord<T> avg;
    int captured_steps = 0;
    for (size_t j = taus.size(); j-- > 0;) {
        const int t = taus[j];
        const int t_prev = j == 0 ? 0 : taus[j - 1];
        AttentionRecord<T> rec;
        Tensor<T> eps = guided_eps(model, z, t, cond_values, null_values, cfg.guidance_w,
                                   cfg.capture_attention ? &rec : nullptr);
        if (cfg.capture_attention && !rec.layers.empty()) {
            if (avg.layers.empty()) {
                avg = rec;
            } else {
                for (size_t l = 0; l < avg.layers.size(); ++l)
                    for (size_t i = 0; i < avg.layers[l].attn.data.size(); ++i)
                        avg.layers[l].attn.data[i] += rec.layers[l].attn.data[i];
            }
            ++captured_steps;
        }

        const double ab_t = sched.alpha_bar(t);
        Tensor<T> x0(z.rows, z.cols);
        for (size_t i = 0; i < z.data.size(); ++i) {
            double v = (double(z.data[i]) - std::sqrt(1.0 - ab_t) * double(eps.data[i])) /
                       std::sqrt(ab_t);
            x0.data[i] = T(std::clamp(v, -1.0, 1.0));
        }
        if (t_prev == 0) {
            z = std::move(x0);
        } else {
            const double ab_p = sched.alpha_bar(t_prev);
            for (size_t i = 0; i < z.data.size(); ++i)
                z.data[i] = T(std::sqrt(ab_p) * double(x0.data[i]) +
                              std::sqrt(1.0 - ab_p) * double(eps.data[i]));
        }
    }

    if (captured_steps > 0)
        for (auto& layer : avg.layers)
            for (auto& v : layer.attn.data) v /= T(captured_steps);
    return {from_model_space(z, S, S), std::move(avg)};
}

// Plain version for analysis of a captured record.
template <typename T>
double attention_reg_loss(const AttentionRecord<T>& record,
                          const std::vector<std::vector<uint8_t>>& masks,
                          const std::vector<int>& token_positions, int image_size,
                          int* skipped = nullptr) {
    if (masks.size() != token_positions.size())
        throw DataError("attention reg: mask/token count mismatch");
    double acc = 0;
    int terms = 0;
    for (const auto& layer : record.layers) {
        for (size_t k = 0; k < masks.size(); ++k) {
            if (token_positions[k] < 0 || token_positions[k] >= layer.attn.cols)
                throw DataError("attention reg: token position out of range");
            const auto dm = downsample_mask(masks[k], image_size, image_size, layer.w, layer.h);
            int inside = 0;
            for (uint8_t v : dm) inside += v;
            const int outside = layer.w * layer.h - inside;
            if (inside == 0 || outside == 0) {
                if (skipped) ++(*skipped);
                continue;
            }
            double pos = 0, neg = 0;
            for (int i = 0; i < layer.w * layer.h; ++i) {
                const double a = double(layer.attn.at(i, token_positions[k]));
                if (dm[size_t(i)])
                    pos += a;
                else
                    neg += a;
            }
            acc += neg / outside - pos / inside;
            ++terms;
        }
    }
    return terms == 0 ? 0.0 : acc / terms;
}

}  // namespace storyviz
