#pragma once

// Named parameter registry and Adam with decoupled weight decay.

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ehrseq/tensor.hpp"

namespace ehrseq {

/// Insertion-ordered registry of named trainable tensors. The fixed order
/// makes optimizer sweeps and checkpoint layout deterministic.
class ParameterStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name))
            throw std::invalid_argument("parameter '" + name + "' already registered");
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t count() const { return items_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

    void zero_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (applied directly to weights)
};

/// First/second moment buffers per parameter plus the shared step counter.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;

    void reset(const ParameterStore& params) {
        m.clear();
        v.clear();
        step = 0;
        for (const auto& [name, t] : params.items()) {
            m.emplace_back(t.size(), 0.0);
            v.emplace_back(t.size(), 0.0);
        }
    }
};

/// One Adam step over all parameters. Skips parameters whose gradient was
/// never touched this step; rejects non-finite gradients by parameter name
/// without mutating anything.
inline void adam_step(ParameterStore& params, AdamState& state, const AdamConfig& cfg) {
    if (cfg.lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
    if (state.m.size() != params.count()) state.reset(params);
    for (std::size_t p = 0; p < params.count(); ++p) {
        const auto& [name, t] = params.items()[p];
        if (!t.has_grad()) continue;
        for (double g : t.node()->grad)
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient in parameter '" +
                                         name + "'");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.count(); ++p) {
        auto& [name, t] = params.items()[p];
        if (!t.has_grad()) continue;
        auto& grad = t.node()->grad;
        auto& data = t.node()->data;
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (std::size_t i = 0; i < data.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * data[i]);
        }
    }
}

}  // namespace ehrseq
