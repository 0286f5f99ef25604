#include "gbtsam/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include "gbtsam/error.hpp"

namespace gbtsam::ag {

namespace {

std::string shape_str(Var const& v) {
    return "(" + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) + ")";
}

void require(bool ok, char const* op, std::string const& detail) {
    if (!ok) {
        throw Error(std::string(op) + ": " + detail);
    }
}

// Creates a result node; wires parents and backward only when some input
// needs a gradient so that inference builds no closures.
Var make_node(std::size_t rows, std::size_t cols, std::vector<double> value,
              std::vector<Var> const& inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(value);
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [](Var const& v) { return v.requires_grad(); });
    if (needs) {
        node->requires_grad = true;
        node->grad.assign(node->value.size(), 0.0);
        node->parents.reserve(inputs.size());
        for (auto const& in : inputs) {
            node->parents.push_back(in.shared());
        }
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

inline bool wants(Node const* n) { return n->requires_grad; }

} // namespace

Var Var::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    if (values.size() != rows * cols) {
        throw Error("constant: value count " + std::to_string(values.size()) +
                    " does not match shape " + std::to_string(rows) + "x" +
                    std::to_string(cols));
    }
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(values);
    return Var(std::move(node));
}

Var Var::zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
}

double Var::item() const {
    if (size() != 1) {
        throw Error("item: expected a 1x1 value, got " + shape_str(*this));
    }
    return node_->value[0];
}

void Var::set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
        node_->grad.assign(node_->value.size(), 0.0);
    } else {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }
}

void Var::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void backward(Var const& root) {
    if (root.size() != 1) {
        throw Error("backward: root must be scalar, got " + shape_str(root));
    }
    if (!root.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) {
            (*it)->backward(**it);
        }
    }
}

Var matmul(Var const& a, Var const& b) {
    require(a.cols() == b.rows(), "matmul",
            "inner dimensions differ " + shape_str(a) + " * " + shape_str(b));
    std::size_t const m = a.rows();
    std::size_t const k = a.cols();
    std::size_t const n = b.cols();
    std::vector<double> out(m * n, 0.0);
    auto av = a.value();
    auto bv = b.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double const aip = av[i * k + p];
            if (aip == 0.0) {
                continue;
            }
            double const* brow = &bv[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += aip * brow[j];
            }
        }
    }
    return make_node(m, n, std::move(out), {a, b}, [m, k, n](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        auto const& g = self.grad;
        if (wants(pa)) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    double const* grow = &g[i * n];
                    double const* brow = &pb->value[p * n];
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += grow[j] * brow[j];
                    }
                    pa->grad[i * k + p] += acc;
                }
            }
        }
        if (wants(pb)) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                double const* grow = &g[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    double const aip = pa->value[i * k + p];
                    if (aip == 0.0) {
                        continue;
                    }
                    double* gb = &pb->grad[p * n];
                    for (std::size_t j = 0; j < n; ++j) {
                        gb[j] += aip * grow[j];
                    }
                }
            }
        }
    });
}

Var add(Var const& a, Var const& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add",
            "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    std::vector<double> out(a.size());
    auto av = a.value();
    auto bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return make_node(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
        for (auto const& parent : self.parents) {
            if (wants(parent.get())) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    parent->grad[i] += self.grad[i];
                }
            }
        }
    });
}

Var add_row(Var const& x, Var const& row) {
    require(row.rows() == 1 && row.cols() == x.cols(), "add_row",
            "row " + shape_str(row) + " does not broadcast over " + shape_str(x));
    std::size_t const m = x.rows();
    std::size_t const n = x.cols();
    std::vector<double> out(x.size());
    auto xv = x.value();
    auto rv = row.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = xv[i * n + j] + rv[j];
        }
    }
    return make_node(m, n, std::move(out), {x, row}, [m, n](Node& self) {
        Node* px = self.parents[0].get();
        Node* pr = self.parents[1].get();
        if (wants(px)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                px->grad[i] += self.grad[i];
            }
        }
        if (wants(pr)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    pr->grad[j] += self.grad[i * n + j];
                }
            }
        }
    });
}

Var scale(Var const& x, double s) {
    std::vector<double> out(x.value().begin(), x.value().end());
    for (auto& v : out) {
        v *= s;
    }
    return make_node(x.rows(), x.cols(), std::move(out), {x}, [s](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            px->grad[i] += s * self.grad[i];
        }
    });
}

Var gelu(Var const& x) {
    std::vector<double> out(x.size());
    auto xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double const v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    }
    return make_node(x.rows(), x.cols(), std::move(out), {x}, [](Node& self) {
        Node* px = self.parents[0].get();
        double const inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double const v = px->value[i];
            double const cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            double const pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            px->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Var softmax_rows(Var const& x) {
    std::size_t const m = x.rows();
    std::size_t const n = x.cols();
    std::vector<double> out(x.size());
    auto xv = x.value();
    for (std::size_t i = 0; i < m; ++i) {
        double mx = xv[i * n];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, xv[i * n + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(xv[i * n + j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] /= z;
        }
    }
    return make_node(m, n, std::move(out), {x}, [m, n](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dot += self.grad[i * n + j] * self.value[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                double const y = self.value[i * n + j];
                px->grad[i * n + j] += y * (self.grad[i * n + j] - dot);
            }
        }
    });
}

Var layer_norm_rows(Var const& x, Var const& gamma, Var const& beta, double eps) {
    std::size_t const m = x.rows();
    std::size_t const n = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
            "layer_norm_rows", "affine parameters must be 1x" + std::to_string(n));
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(m);
    auto xv = x.value();
    auto gv = gamma.value();
    auto bv = beta.value();
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += xv[i * n + j];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double const d = xv[i * n + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (xv[i * n + j] - mean) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
        }
    }
    return make_node(
        m, n, std::move(out), {x, gamma, beta},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node* px = self.parents[0].get();
            Node* pg = self.parents[1].get();
            Node* pb = self.parents[2].get();
            auto const& g = self.grad;
            if (wants(pg) || wants(pb)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        if (wants(pg)) {
                            pg->grad[j] += g[i * n + j] * xhat[i * n + j];
                        }
                        if (wants(pb)) {
                            pb->grad[j] += g[i * n + j];
                        }
                    }
                }
            }
            if (wants(px)) {
                double const inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double sum_dy = 0.0;
                    double sum_dy_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double const dy = g[i * n + j] * pg->value[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        double const dy = g[i * n + j] * pg->value[j];
                        px->grad[i * n + j] +=
                            inv_std[i] * (dy - inv_n * sum_dy - xhat[i * n + j] * inv_n * sum_dy_xhat);
                    }
                }
            }
        });
}

Var transpose(Var const& x) {
    std::size_t const m = x.rows();
    std::size_t const n = x.cols();
    std::vector<double> out(x.size());
    auto xv = x.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = xv[i * n + j];
        }
    }
    return make_node(n, m, std::move(out), {x}, [m, n](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                px->grad[i * n + j] += self.grad[j * m + i];
            }
        }
    });
}

Var reshape(Var const& x, std::size_t rows, std::size_t cols) {
    require(rows * cols == x.size(), "reshape",
            shape_str(x) + " cannot become " + std::to_string(rows) + "x" + std::to_string(cols));
    std::vector<double> out(x.value().begin(), x.value().end());
    return make_node(rows, cols, std::move(out), {x}, [](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            px->grad[i] += self.grad[i];
        }
    });
}

Var slice_rows(Var const& x, std::size_t begin, std::size_t end) {
    require(begin < end && end <= x.rows(), "slice_rows",
            "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                shape_str(x));
    std::size_t const n = x.cols();
    auto xv = x.value();
    std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * n),
                            xv.begin() + static_cast<std::ptrdiff_t>(end * n));
    return make_node(end - begin, n, std::move(out), {x}, [begin, n](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            px->grad[begin * n + i] += self.grad[i];
        }
    });
}

Var slice_cols(Var const& x, std::size_t begin, std::size_t end) {
    require(begin < end && end <= x.cols(), "slice_cols",
            "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                shape_str(x));
    std::size_t const m = x.rows();
    std::size_t const n = x.cols();
    std::size_t const w = end - begin;
    std::vector<double> out(m * w);
    auto xv = x.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out[i * w + j] = xv[i * n + begin + j];
        }
    }
    return make_node(m, w, std::move(out), {x}, [m, n, w, begin](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                px->grad[i * n + begin + j] += self.grad[i * w + j];
            }
        }
    });
}

Var concat_rows(std::vector<Var> const& parts) {
    require(!parts.empty(), "concat_rows", "no inputs");
    std::size_t const n = parts.front().cols();
    std::size_t rows = 0;
    for (auto const& p : parts) {
        require(p.cols() == n, "concat_rows", "column count mismatch " + shape_str(p));
        rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(rows * n);
    for (auto const& p : parts) {
        out.insert(out.end(), p.value().begin(), p.value().end());
    }
    return make_node(rows, n, std::move(out), parts, [](Node& self) {
        std::size_t offset = 0;
        for (auto const& parent : self.parents) {
            if (wants(parent.get())) {
                for (std::size_t i = 0; i < parent->value.size(); ++i) {
                    parent->grad[i] += self.grad[offset + i];
                }
            }
            offset += parent->value.size();
        }
    });
}

Var concat_cols(std::vector<Var> const& parts) {
    require(!parts.empty(), "concat_cols", "no inputs");
    std::size_t const m = parts.front().rows();
    std::size_t cols = 0;
    for (auto const& p : parts) {
        require(p.rows() == m, "concat_cols", "row count mismatch " + shape_str(p));
        cols += p.cols();
    }
    std::vector<double> out(m * cols);
    std::size_t col0 = 0;
    for (auto const& p : parts) {
        auto pv = p.value();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < p.cols(); ++j) {
                out[i * cols + col0 + j] = pv[i * p.cols() + j];
            }
        }
        col0 += p.cols();
    }
    return make_node(m, cols, std::move(out), parts, [m, cols](Node& self) {
        std::size_t col = 0;
        for (auto const& parent : self.parents) {
            std::size_t const w = parent->cols;
            if (wants(parent.get())) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        parent->grad[i * w + j] += self.grad[i * cols + col + j];
                    }
                }
            }
            col += w;
        }
    });
}

Var gather(Var const& x, std::size_t rows, std::size_t cols, std::vector<std::size_t> index) {
    require(index.size() == rows * cols, "gather", "index count does not match result shape");
    std::vector<double> out(index.size());
    auto xv = x.value();
    for (std::size_t i = 0; i < index.size(); ++i) {
        require(index[i] < xv.size(), "gather", "index out of range");
        out[i] = xv[index[i]];
    }
    return make_node(rows, cols, std::move(out), {x}, [index = std::move(index)](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < index.size(); ++i) {
            px->grad[index[i]] += self.grad[i];
        }
    });
}

Var sum(Var const& x) {
    double total = 0.0;
    for (double v : x.value()) {
        total += v;
    }
    return make_node(1, 1, {total}, {x}, [](Node& self) {
        Node* px = self.parents[0].get();
        for (auto& g : px->grad) {
            g += self.grad[0];
        }
    });
}

Var dot_const(Var const& x, std::span<double const> weights) {
    require(weights.size() == x.size(), "dot_const", "weight count mismatch");
    double total = 0.0;
    auto xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        total += xv[i] * weights[i];
    }
    std::vector<double> w(weights.begin(), weights.end());
    return make_node(1, 1, {total}, {x}, [w = std::move(w)](Node& self) {
        Node* px = self.parents[0].get();
        for (std::size_t i = 0; i < w.size(); ++i) {
            px->grad[i] += self.grad[0] * w[i];
        }
    });
}

Var bce_with_logits(Var const& logits, std::span<double const> targets) {
    require(targets.size() == logits.size(), "bce_with_logits",
            "target count " + std::to_string(targets.size()) + " does not match logits " +
                shape_str(logits));
    require(!targets.empty(), "bce_with_logits", "empty input");
    auto zv = logits.value();
    double total = 0.0;
    for (std::size_t i = 0; i < zv.size(); ++i) {
        double const z = zv[i];
        total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    double const inv_n = 1.0 / static_cast<double>(zv.size());
    std::vector<double> y(targets.begin(), targets.end());
    return make_node(1, 1, {total * inv_n}, {logits}, [y = std::move(y), inv_n](Node& self) {
        Node* pz = self.parents[0].get();
        for (std::size_t i = 0; i < y.size(); ++i) {
            double const z = pz->value[i];
            double const s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            pz->grad[i] += self.grad[0] * inv_n * (s - y[i]);
        }
    });
}

} // namespace gbtsam::ag
