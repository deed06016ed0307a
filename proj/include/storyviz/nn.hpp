#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "storyviz/rng.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> adam_m;
    Tensor<T> adam_v;
    bool trainable = true;

    Parameter(std::string n, Tensor<T> v, bool train = true)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.rows, value.cols),
          adam_m(value.rows, value.cols),
          adam_v(value.rows, value.cols),
          trainable(train) {}

    int64_t numel() const { return value.numel(); }
};

// Owns all parameters of a model. Registration order is fixed and drives the
// optimizer update order, which keeps training bit-reproducible.
template <typename T>
class ParamStore {
   public:
    Parameter<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        params_.push_back(std::make_unique<Parameter<T>>(name, std::move(init), trainable));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    size_t size() const { return params_.size(); }
    Parameter<T>& at(size_t i) { return *params_[i]; }
    const Parameter<T>& at(size_t i) const { return *params_[i]; }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->numel();
        return n;
    }
    int64_t trainable_params() const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (p->trainable) n += p->numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
    }

    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for (auto& p : params_)
            if (p->name.rfind(prefix, 0) == 0) p->trainable = trainable;
    }

   private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // 0 disables; otherwise global L2 clip over trainable grads
};

template <typename T>
class Adam {
   public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Returns the pre-clip global grad norm (useful for logging).
    double step(ParamStore<T>& store) {
        ++t_;
        double norm_sq = 0.0;
        for (size_t i = 0; i < store.size(); ++i) {
            const auto& p = store.at(i);
            if (!p.trainable) continue;
            for (const T& g : p.grad.data) norm_sq += double(g) * double(g);
        }
        const double norm = std::sqrt(norm_sq);
        double scale = 1.0;
        if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;

        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < store.size(); ++i) {
            auto& p = store.at(i);
            if (!p.trainable) continue;
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double g = double(p.grad.data[j]) * scale;
                double m = cfg_.beta1 * double(p.adam_m.data[j]) + (1.0 - cfg_.beta1) * g;
                double v = cfg_.beta2 * double(p.adam_v.data[j]) + (1.0 - cfg_.beta2) * g * g;
                p.adam_m.data[j] = T(m);
                p.adam_v.data[j] = T(v);
                const double mh = m / bc1;
                const double vh = v / bc2;
                p.value.data[j] -= T(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
        return norm;
    }

    int64_t steps_taken() const { return t_; }
    void set_steps_taken(int64_t t) { t_ = t; }
    AdamConfig& config() { return cfg_; }

   private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// Hash of parameter values whose names start with `prefix` (empty = all).
// Used to assert that a frozen subtree really stayed frozen across training.
template <typename T>
uint64_t hash_params(const ParamStore<T>& store, const std::string& prefix = "") {
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.at(i);
        if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) continue;
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.value.data.data(), p.value.data.size() * sizeof(T), h);
    }
    return h;
}

// Initialization helpers.
template <typename T>
Tensor<T> init_normal(int r, int c, Rng& rng, double stddev) {
    Tensor<T> t(r, c);
    for (auto& v : t.data) v = T(rng.normal() * stddev);
    return t;
}

template <typename T>
Tensor<T> init_xavier(int r, int c, Rng& rng) {
    return init_normal<T>(r, c, rng, std::sqrt(2.0 / double(r + c)));
}

// fan_in-scaled init for conv weights stored (out_c, in_c*kh*kw).
template <typename T>
Tensor<T> init_kaiming(int out_c, int fan_in, Rng& rng) {
    return init_normal<T>(out_c, fan_in, rng, std::sqrt(2.0 / double(fan_in)));
}

template <typename T>
Tensor<T> init_zeros(int r, int c) {
    return Tensor<T>(r, c);
}

template <typename T>
Tensor<T> init_ones(int r, int c) {
    return Tensor<T>::full(r, c, T(1));
}

}  // namespace storyviz
