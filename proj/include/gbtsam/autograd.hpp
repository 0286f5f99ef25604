#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices of doubles. Every value is a (rows x cols) matrix; vectors are
// 1 x n. Graph nodes are created by the free functions below and released
// when the last Var referencing them goes away.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace gbtsam::ag {

struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad; // empty unless requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward; // pushes this->grad into parents
};

class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(std::size_t rows, std::size_t cols, std::vector<double> values);
    static Var zeros(std::size_t rows, std::size_t cols);

    bool defined() const { return node_ != nullptr; }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->value.size(); }

    std::span<double const> value() const { return node_->value; }
    std::span<double> mutable_value() { return node_->value; }
    std::span<double const> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad; }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    // Only meaningful on leaves. Enabling allocates a zeroed gradient buffer;
    // disabling drops it.
    void set_requires_grad(bool on);
    void zero_grad();

    Node* node() const { return node_.get(); }
    std::shared_ptr<Node> const& shared() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 and propagates through every reachable node
// that requires a gradient. root must be 1 x 1.
void backward(Var const& root);

Var matmul(Var const& a, Var const& b);
Var add(Var const& a, Var const& b);
// x (m x n) + row (1 x n) broadcast over rows.
Var add_row(Var const& x, Var const& row);
Var scale(Var const& x, double s);
Var gelu(Var const& x);
Var softmax_rows(Var const& x);
Var layer_norm_rows(Var const& x, Var const& gamma, Var const& beta, double eps = 1e-5);
Var transpose(Var const& x);
Var reshape(Var const& x, std::size_t rows, std::size_t cols);
Var slice_rows(Var const& x, std::size_t begin, std::size_t end);
Var slice_cols(Var const& x, std::size_t begin, std::size_t end);
Var concat_rows(std::vector<Var> const& parts);
Var concat_cols(std::vector<Var> const& parts);
// out[i] = x[index[i]] over flat storage; shape (rows x cols) of the result.
Var gather(Var const& x, std::size_t rows, std::size_t cols, std::vector<std::size_t> index);
Var sum(Var const& x);
// sum_i x[i] * weights[i]
Var dot_const(Var const& x, std::span<double const> weights);
// Mean binary cross-entropy of sigmoid(logits) against {0,1} targets, in
// the overflow-free form max(z,0) - z*y + log(1 + exp(-|z|)).
Var bce_with_logits(Var const& logits, std::span<double const> targets);

} // namespace gbtsam::ag
