#pragma once

// Adam with decoupled weight decay. Moment state is keyed by parameter name,
// so one optimizer instance can serve the detector and the mapping network
// side by side, and parameters keep their history across calls.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "owd/common.hpp"
#include "owd/tensor.hpp"

namespace owd {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // decoupled: applied directly to the parameter
};

class AdamW {
  public:
    explicit AdamW(AdamWConfig config = {}) : cfg_(config) {
        if (cfg_.lr <= 0.0) throw parameter_error("adamw: lr must be positive");
        if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
            throw parameter_error("adamw: betas must lie in [0, 1)");
        if (cfg_.weight_decay < 0.0) throw parameter_error("adamw: weight_decay must be >= 0");
    }

    const AdamWConfig& config() const { return cfg_; }

    // One update over a named parameter list; gradients must already be
    // populated (a missing gradient buffer counts as zero).
    void step(std::vector<std::pair<std::string, Tensor>>& params) {
        for (auto& [name, t] : params) {
            if (!t.requires_grad())
                throw protocol_error("adamw: parameter '" + name + "' is frozen");
            Slot& s = slots_[name];
            if (s.m.empty()) {
                s.m.assign(t.size(), 0.0);
                s.v.assign(t.size(), 0.0);
            } else if (s.m.size() != t.size()) {
                throw shape_error("adamw: parameter '" + name + "' changed size mid-run");
            }
            s.t += 1;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, s.t);
            const double bc2 = 1.0 - std::pow(cfg_.beta2, s.t);
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double g = t.g(i);
                if (!std::isfinite(g))
                    throw numeric_error("adamw: non-finite gradient in '" + name + "'");
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                t.v(i) -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                     cfg_.weight_decay * t.v(i));
            }
        }
    }

    void reset() { slots_.clear(); }

  private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
        long t = 0;
    };
    AdamWConfig cfg_;
    std::map<std::string, Slot> slots_;
};

}  // namespace owd
