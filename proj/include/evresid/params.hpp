#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "evresid/autodiff.hpp"
#include "evresid/tensor.hpp"

namespace evresid {

struct Param {
    Tensor value;
    Tensor grad;     // accumulated across a batch, cleared by the optimizer step
    bool trainable = true;
};

// Named parameter table. Iteration order is the registration order, which
// makes optimizer sweeps and checkpoints deterministic.
class ParamStore {
public:
    Param& add(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        params_.push_back(Param{std::move(value), {}, trainable});
        Param& p = params_.back();
        p.grad = Tensor(p.value.shape());
        return p;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return params_[it->second];
    }
    const Param& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return params_.size(); }
    Param& operator[](size_t i) { return params_[i]; }
    const Param& operator[](size_t i) const { return params_[i]; }

    void zero_grad() {
        for (auto& p : params_) p.grad.fill(0.0);
    }

    int64_t count_scalars() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void set_all_trainable(bool t) {
        for (auto& p : params_) p.trainable = t;
    }

private:
    std::map<std::string, size_t> index_;
    std::vector<std::string> names_;
    std::vector<Param> params_;
};

// Per-graph view of the store: leafs each parameter into the graph once and
// remembers the node so gradients can be pulled back out after backward().
template <typename T>
class ParamBinding {
public:
    ParamBinding(GraphT<T>& g, ParamStore& store) : g_(g), store_(store) {}

    VarT<T> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Param& p = store_.at(name);
        VarT<T> v;
        if constexpr (std::is_same_v<T, double>) {
            v = g_.leaf(p.value, p.trainable);
        } else {
            v = g_.leaf(p.value.template cast<T>(), p.trainable);
        }
        bound_.emplace(name, v);
        return v;
    }

    // Accumulate graph gradients into the store (double graphs only).
    void harvest_grads(double weight = 1.0) {
        static_assert(std::is_same_v<T, double>, "gradients are harvested in 64-bit mode");
        for (auto& [name, var] : bound_) {
            Param& p = store_.at(name);
            if (!p.trainable || !var.g->has_grad(var.id)) continue;
            const TensorT<T>& gsrc = var.g->grad(var.id);
            for (int64_t i = 0; i < gsrc.numel(); ++i) p.grad[i] += weight * gsrc[i];
        }
    }

private:
    GraphT<T>& g_;
    ParamStore& store_;
    std::map<std::string, VarT<T>> bound_;
};

// Adaptive-moment update with bias correction. Frozen parameters are
// skipped entirely; their bytes never change.
class AdamOptimizer {
public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 1.0; // global gradient-norm clip; <= 0 disables
    };

    AdamOptimizer() = default;
    explicit AdamOptimizer(Config cfg) : cfg_(cfg) {}

    void step(ParamStore& store) {
        if (m_.empty()) {
            m_.resize(store.size());
            v_.resize(store.size());
            for (size_t i = 0; i < store.size(); ++i) {
                m_[i] = Tensor(store[i].value.shape());
                v_[i] = Tensor(store[i].value.shape());
            }
        }
        double clip_scale = 1.0;
        if (cfg_.clip_norm > 0) {
            double sq = 0.0;
            for (size_t i = 0; i < store.size(); ++i) {
                if (!store[i].trainable) continue;
                const Tensor& gr = store[i].grad;
                for (int64_t j = 0; j < gr.numel(); ++j) sq += gr[j] * gr[j];
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < store.size(); ++i) {
            Param& p = store[i];
            if (!p.trainable) continue;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (int64_t j = 0; j < p.value.numel(); ++j) {
                const double gj = p.grad[j] * clip_scale;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mh = m[j] / bc1;
                const double vh = v[j] / bc2;
                p.value[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
        store.zero_grad();
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }

private:
    Config cfg_{};
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// Checkpoint file ("EVCK"): named parameter table with raw 32-bit data.
void save_checkpoint(const ParamStore& store, const std::string& path);
void load_checkpoint(ParamStore& store, const std::string& path);

// weight init helpers
Tensor he_init(Shape shape, int64_t fan_in, Rng& rng);

} // namespace evresid
