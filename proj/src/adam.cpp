#include "sda/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace sda {

void AdamOptimizer::step(std::map<std::string, Matrix>& params,
                         const std::map<std::string, Matrix>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw std::invalid_argument("Adam: missing gradient for '" + name + "'");
        const Matrix& g = git->second;
        if (!g.same_shape(p)) throw std::invalid_argument("Adam: gradient shape mismatch for '" + name + "'");
        auto [it, inserted] = state_.try_emplace(name);
        if (inserted) {
            it->second.m = Matrix::zeros_like(p);
            it->second.v = Matrix::zeros_like(p);
        }
        State& s = it->second;
        for (std::size_t i = 0; i < p.data().size(); ++i) {
            const double gi = g.data()[i];
            double& m = s.m.data()[i];
            double& v = s.v.data()[i];
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.data()[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double clip_global_norm(std::map<std::string, Matrix>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.data()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& [name, g] : grads) g *= s;
    }
    return norm;
}

} // namespace sda
