#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pnsamp/net.hpp"

namespace pnsamp {

template <typename T>
struct AdamConfig {
    T lr = static_cast<T>(1e-3);
    T beta1 = static_cast<T>(0.9);
    T beta2 = static_cast<T>(0.999);
    T eps = static_cast<T>(1e-8);
};

/// One bias-corrected Adam update on a flat parameter block. t is the 1-based
/// step number this update belongs to.
template <typename T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads, std::vector<T>& m,
               std::vector<T>& v, std::uint64_t t, const AdamConfig<T>& cfg) {
    if (params.size() != grads.size() || m.size() != params.size() || v.size() != params.size()) {
        throw ShapeError("adam_step: parameter/gradient/moment sizes disagree");
    }
    for (const T g : grads) {
        if (!std::isfinite(static_cast<double>(g))) {
            throw ValueError("adam_step: non-finite gradient, step aborted");
        }
    }
    const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(t));
    const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g * g;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

/// Adam over every trainable tensor of a model. Moments are addressable by
/// name ("opt.m.<param>", "opt.v.<param>") for checkpointing.
template <typename T>
class Adam {
public:
    Adam(Model<T>& model, AdamConfig<T> cfg) : model_(&model), cfg_(cfg) {
        model.visit_params([&](const std::string& name, Tensor<T>& t, bool trainable) {
            if (!trainable) return;
            t.ensure_grad();
            slots_.push_back({name, &t, std::vector<T>(t.numel(), T(0)),
                              std::vector<T>(t.numel(), T(0))});
        });
    }

    std::uint64_t step_count() const { return t_; }
    const AdamConfig<T>& config() const { return cfg_; }

    void zero_grad() {
        for (auto& s : slots_) s.param->zero_grad();
    }

    /// Applies one update from the accumulated gradients. Throws (without
    /// touching any parameter) if any gradient is non-finite.
    void step() {
        for (const auto& s : slots_) {
            for (const T g : s.param->grad) {
                if (!std::isfinite(static_cast<double>(g))) {
                    throw ValueError(detail::cat("adam_step: non-finite gradient in '", s.name,
                                                 "', step aborted"));
                }
            }
        }
        ++t_;
        for (auto& s : slots_) {
            adam_step(s.param->data, s.param->grad, s.m, s.v, t_, cfg_);
        }
    }

    std::map<std::string, Tensor<T>> moments() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& s : slots_) {
            out.emplace(detail::cat("opt.m.", s.name), Tensor<T>(s.param->shape, s.m));
            out.emplace(detail::cat("opt.v.", s.name), Tensor<T>(s.param->shape, s.v));
        }
        return out;
    }

    void restore_moments(const std::map<std::string, Tensor<T>>& extras, std::uint64_t t) {
        for (auto& s : slots_) {
            auto m_it = extras.find(detail::cat("opt.m.", s.name));
            auto v_it = extras.find(detail::cat("opt.v.", s.name));
            if (m_it == extras.end() || v_it == extras.end()) {
                throw ValueError(detail::cat("restore_moments: missing moments for '", s.name, "'"));
            }
            if (m_it->second.numel() != s.m.size() || v_it->second.numel() != s.v.size()) {
                throw ShapeError(detail::cat("restore_moments: shape mismatch for '", s.name, "'"));
            }
            s.m = m_it->second.data;
            s.v = v_it->second.data;
        }
        t_ = t;
    }

private:
    struct Slot {
        std::string name;
        Tensor<T>* param;
        std::vector<T> m;
        std::vector<T> v;
    };

    Model<T>* model_;
    AdamConfig<T> cfg_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

}  // namespace pnsamp
