#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sda/matrix.hpp"

namespace sda {

class Tape;

using ParamMap = std::map<std::string, Matrix>;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
class Var {
public:
    Var() = default;
    const Matrix& value() const;
    int index() const { return idx_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int idx) : tape_(tape), idx_(idx) {}
    Tape* tape_ = nullptr;
    int idx_ = -1;
};

// Reverse-mode tape over matrix-valued nodes. Nodes are created in forward
// (topological) order; backward() walks them once in reverse. Single-threaded.
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    // Registers a gradient leaf under a unique name.
    Var param(const std::string& name, Matrix value);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double c);
    // s must be 1x1; scales every entry of a by s.
    Var mul_scalar(Var a, Var s);
    Var hadamard(Var a, Var b);
    Var transpose(Var a);
    Var softmax_rows(Var a);
    Var log_softmax_rows(Var a);
    // ln(max(x, kProbFloor)); gradient is 0 in the floored region.
    Var log(Var a);
    Var tanh(Var a);
    Var softplus(Var a);
    Var sigmoid(Var a);
    Var sum(Var a);      // 1x1
    Var mean(Var a);     // 1x1
    Var row_sums(Var a); // n x 1
    Var l2_normalize_rows(Var a);
    Var gather_rows(Var a, std::vector<int> idx);
    Var slice(Var a, int r0, int c0, int rows, int cols);
    Var concat_rows(const std::vector<Var>& parts);
    // a is n x m, row is 1 x m; adds row to every row of a.
    Var add_row_broadcast(Var a, Var row);
    Var dot(Var a, Var b); // 1x1

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients for every node.
    // loss must be 1x1. May be called once per tape.
    void backward(Var loss);

    const Matrix& value(Var v) const { return nodes_[v.idx_].value; }
    const Matrix& grad(Var v) const;
    const Matrix& grad(const std::string& param_name) const;
    bool has_param(const std::string& name) const { return params_.count(name) > 0; }
    Var param_var(const std::string& name) const;
    const std::map<std::string, int>& params() const { return params_; }

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&, int)> backprop; // empty for leaves / no-record
    };

    Var push(Matrix value, std::function<void(Tape&, int)> backprop);
    void check_tape(Var v) const;

    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
    bool record_ = true;
    bool backward_done_ = false;
};

} // namespace sda
