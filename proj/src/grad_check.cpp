#include "sda/grad_check.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sda {

std::string GradCheckResult::describe() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " max_error=" << max_error;
    if (!worst_param.empty()) {
        os << " at " << worst_param << "(" << worst_row << "," << worst_col << ")"
           << " analytic=" << analytic << " numeric=" << numeric;
    }
    return os.str();
}

namespace {

double eval_loss(const ScalarFn& f, const ParamMap& params) {
    Tape tape(/*record=*/false);
    std::map<std::string, Var> vars;
    for (const auto& [name, m] : params) vars.emplace(name, tape.param(name, m));
    Var loss = f(tape, vars);
    const Matrix& v = loss.value();
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("grad_check: f must return 1x1");
    return v(0, 0);
}

} // namespace

GradCheckResult grad_check(const ScalarFn& f, const ParamMap& params, double eps, double tol) {
    if (eps < 1e-7 || eps > 1e-4) {
        throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
    }

    // Analytic gradients from one recorded pass.
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, m] : params) vars.emplace(name, tape.param(name, m));
    Var loss = f(tape, vars);
    if (loss.value().rows() != 1 || loss.value().cols() != 1) {
        throw std::invalid_argument("grad_check: f must return 1x1");
    }
    tape.backward(loss);
    ParamMap analytic;
    for (const auto& [name, m] : params) analytic.emplace(name, tape.grad(name));

    GradCheckResult result;
    result.passed = true;
    ParamMap work = params;
    for (auto& [name, m] : work) {
        for (int r = 0; r < m.rows(); ++r) {
            for (int c = 0; c < m.cols(); ++c) {
                const double orig = m(r, c);
                m(r, c) = orig + eps;
                const double fp = eval_loss(f, work);
                m(r, c) = orig - eps;
                const double fm = eval_loss(f, work);
                m(r, c) = orig;

                const double num = (fp - fm) / (2.0 * eps);
                const double ana = analytic.at(name)(r, c);
                const double mag = std::max(std::fabs(num), std::fabs(ana));
                const double err = mag < 1e-8 ? std::fabs(num - ana) : std::fabs(num - ana) / mag;
                if (err > result.max_error) {
                    result.max_error = err;
                    result.worst_param = name;
                    result.worst_row = r;
                    result.worst_col = c;
                    result.analytic = ana;
                    result.numeric = num;
                }
            }
        }
    }
    result.passed = result.max_error <= tol;
    return result;
}

} // namespace sda
