#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>

#include "fedmgp/errors.hpp"
#include "fedmgp/tensor.hpp"

namespace fedmgp {

// Adam with per-parameter moment slots. Slots are keyed by tensor identity so
// parameters can join late (e.g. prompt-pool entries created mid-stream) and
// keep their state across tasks. The step clears gradients afterwards;
// gradients are never cleared by the tape.
struct AdamState {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    struct Slot {
        std::shared_ptr<detail::TensorData> holder;  // keeps the key pointer alive
        std::vector<double> m, v;
        std::uint64_t step = 0;
    };
    std::unordered_map<const void*, Slot> slots;

    void apply(std::span<const Tensor> params) {
        for (const Tensor& p : params) {
            if (!p.requires_grad()) {
                throw FrozenParameterError("adam step on frozen parameter");
            }
            if (p.grad().size() != p.size()) {
                throw MissingGradientError("adam step on parameter without gradient");
            }
        }
        for (const Tensor& p : params) {
            Slot& slot = slots[p.id()];
            if (slot.m.empty()) {
                slot.holder = p.handle();
                slot.m.assign(p.size(), 0.0);
                slot.v.assign(p.size(), 0.0);
            }
            slot.step += 1;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.step));
            Tensor param = p;
            std::span<double> values = param.values_mut();
            std::span<const double> grad = param.grad();
            for (std::size_t i = 0; i < values.size(); ++i) {
                const double g = grad[i];
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                const double m_hat = slot.m[i] / bc1;
                const double v_hat = slot.v[i] / bc2;
                values[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + epsilon);
            }
            param.zero_grad();
        }
    }
};

inline void adam_step(std::span<const Tensor> params, AdamState& state) {
    state.apply(params);
}

}  // namespace fedmgp
