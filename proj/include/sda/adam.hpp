#pragma once

#include <map>
#include <string>

#include "sda/matrix.hpp"

namespace sda {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction and zero weight decay. State is keyed by
// parameter name; shapes are fixed on first use.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::map<std::string, Matrix>& params, const std::map<std::string, Matrix>& grads);
    int steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct State {
        Matrix m;
        Matrix v;
    };
    AdamConfig cfg_;
    std::map<std::string, State> state_;
    int t_ = 0;
};

// Rescales grads in place so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Matrix>& grads, double max_norm);

} // namespace sda
