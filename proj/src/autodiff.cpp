#include "wemoe/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace wemoe::ad {

const Tensor & Var::value() const {
    if (!tape) throw ContractError("use of an unbound Var");
    return tape->value(id);
}

Tensor Gradients::of(Var leaf) const {
    if (auto it = grads_.find(leaf.id); it != grads_.end()) return it->second;
    return Tensor::zeros(leaf.value().shape());
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, true});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, true});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(std::string_view op, Shape shape, std::vector<double> data, std::vector<std::uint32_t> parents,
                 BackwardFn backward) {
    if (precision() == Precision::F32) {
        for (auto & x : data) x = static_cast<double>(static_cast<float>(x));
    }
    if (finite_checks()) {
        for (double x : data) {
            if (!std::isfinite(x)) throw NumericalError(std::string(op) + " produced a non-finite value");
        }
    }
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    nodes_.push_back(Node{Tensor(std::move(shape), std::move(data)), std::move(parents),
                          rg ? std::move(backward) : BackwardFn{}, rg, false});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
    auto & g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
    return g;
}

Gradients Tape::backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (consumed_) throw ContractError("backward: tape already consumed");
    if (nodes_.empty()) throw ContractError("backward: empty tape");
    if (value(loss.id).size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss.id).shape()));
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    Gradients out;
    for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].is_leaf && nodes_[i].requires_grad) out.leaf_shapes_[i] = nodes_[i].value.shape();
    }
    if (nodes_[loss.id].requires_grad) {
        grad_buffer(loss.id)[0] = 1.0;
        for (std::int64_t i = loss.id; i >= 0; --i) {
            auto & node = nodes_[static_cast<std::size_t>(i)];
            auto & g = grads_[static_cast<std::size_t>(i)];
            if (!node.requires_grad || g.empty() || !node.backward) continue;
            node.backward(*this, g);
            // interior gradients are not needed once propagated
            if (!node.is_leaf) std::vector<double>().swap(g);
        }
    }
    for (auto & [id, shape] : out.leaf_shapes_) {
        if (grads_[id].empty()) {
            out.grads_.emplace(id, Tensor::zeros(shape));
        } else {
            out.grads_.emplace(id, Tensor(shape, std::move(grads_[id])));
        }
    }
    return out;
}

namespace {

Tape & tape_of(Var a) {
    if (!a.tape) throw ContractError("operation on an unbound Var");
    return *a.tape;
}

Tape & tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw ContractError("operands live on different tapes");
    return tape_of(a);
}

void require_same_shape(const char * op, const Tensor & a, const Tensor & b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_matrix(const char * op, const Tensor & a) {
    if (a.rank() != 1 && a.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(a.shape()));
    }
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

} // namespace

Var matmul(Var a, Var b) {
    auto & t = tape_of(a, b);
    const Tensor & A = a.value();
    const Tensor & B = b.value();
    require_matrix("matmul", A);
    require_matrix("matmul", B);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (B.rows() != k) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double * pa = A.data().data();
    const double * pb = B.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double * orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double * brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const auto ia = a.id, ib = b.id;
    return t.record("matmul", {m, n}, std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape & tp, std::span<const double> g) {
        const double * pa = tp.value(ia).data().data();
        const double * pb = tp.value(ib).data().data();
        if (tp.requires_grad(ia)) {
            auto ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < m; ++i) {
                const double * grow = g.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double * brow = pb + p * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + p] += s;
                }
            }
        }
        if (tp.requires_grad(ib)) {
            auto gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i) {
                const double * grow = g.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = pa[i * k + p];
                    double * gbrow = gb.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

namespace {

template <typename Fwd, typename GradA, typename GradB>
Var binary_elementwise(const char * name, Var a, Var b, Fwd fwd, GradA grad_a, GradB grad_b) {
    auto & t = tape_of(a, b);
    require_same_shape(name, a.value(), b.value());
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[i]);
    const auto ia = a.id, ib = b.id;
    return t.record(name, a.shape(), std::move(out), {ia, ib}, [=](Tape & tp, std::span<const double> g) {
        const auto A = tp.value(ia).data();
        const auto B = tp.value(ib).data();
        if (tp.requires_grad(ia)) {
            auto ga = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += grad_a(g[i], A[i], B[i]);
        }
        if (tp.requires_grad(ib)) {
            auto gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += grad_b(g[i], A[i], B[i]);
        }
    });
}

template <typename Fwd, typename Deriv>
Var unary_elementwise(const char * name, Var x, Fwd fwd, Deriv deriv) {
    auto & t = tape_of(x);
    const auto X = x.value().data();
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(X[i]);
    const auto ix = x.id;
    return t.record(name, x.shape(), std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        const auto X = tp.value(ix).data();
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(X[i]);
    });
}

} // namespace

Var add(Var a, Var b) {
    return binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
    return binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
    return binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Var scale(Var a, double s) {
    return unary_elementwise("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_bias(Var x, Var b) {
    auto & t = tape_of(x, b);
    const Tensor & X = x.value();
    require_matrix("add_bias", X);
    const std::size_t m = X.rows(), n = X.cols();
    if (b.value().size() != n) {
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(X.shape()));
    }
    const auto xd = X.data();
    const auto bd = b.value().data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + bd[j];
    const auto ix = x.id, ib = b.id;
    return t.record("add_bias", X.shape(), std::move(out), {ix, ib}, [=](Tape & tp, std::span<const double> g) {
        if (tp.requires_grad(ix)) {
            auto gx = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.requires_grad(ib)) {
            auto gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

Var relu(Var x) {
    return unary_elementwise(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
    return unary_elementwise(
        "gelu", x,
        [](double v) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](double v) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        });
}

Var softmax_lastdim(Var x) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    const std::size_t n = X.shape().back();
    if (n < 1) throw ShapeError("softmax_lastdim: empty last dimension");
    const std::size_t m = X.size() / n;
    const auto xd = X.data();
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < m; ++i) {
        const double * row = xd.data() + i * n;
        double * orow = out.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= s;
    }
    const auto ix = x.id;
    const auto self = static_cast<std::uint32_t>(t.size());
    return t.record("softmax", X.shape(), std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        const auto y = tp.value(self).data();
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    auto & t = tape_of(x, gamma);
    tape_of(x, beta);
    const Tensor & X = x.value();
    const std::size_t d = X.shape().back();
    if (d < 2) throw ShapeError("layer_norm: feature dimension must be at least 2");
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    if (gamma.value().size() != d || beta.value().size() != d) {
        throw ShapeError("layer_norm: gamma/beta do not match feature dimension " + std::to_string(d));
    }
    const std::size_t m = X.size() / d;
    const auto xd = X.data();
    const auto gd = gamma.value().data();
    const auto bd = beta.value().data();
    std::vector<double> out(X.size());
    std::vector<double> xhat(X.size());
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double * row = xd.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mu) * inv_std[i];
            out[i * d + j] = gd[j] * xhat[i * d + j] + bd[j];
        }
    }
    const auto ix = x.id, ig = gamma.id, ib = beta.id;
    return t.record("layer_norm", X.shape(), std::move(out), {ix, ig, ib},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape & tp, std::span<const double> g) {
                        const auto gd = tp.value(ig).data();
                        if (tp.requires_grad(ix)) {
                            auto gx = tp.grad_buffer(ix);
                            const double invd = 1.0 / static_cast<double>(d);
                            for (std::size_t i = 0; i < m; ++i) {
                                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dxh = g[i * d + j] * gd[j];
                                    mean_dxh += dxh;
                                    mean_dxh_xh += dxh * xhat[i * d + j];
                                }
                                mean_dxh *= invd;
                                mean_dxh_xh *= invd;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dxh = g[i * d + j] * gd[j];
                                    gx[i * d + j] += inv_std[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
                                }
                            }
                        }
                        if (tp.requires_grad(ig)) {
                            auto gg = tp.grad_buffer(ig);
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                        if (tp.requires_grad(ib)) {
                            auto gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                        }
                    });
}

Var transpose(Var x) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    require_matrix("transpose", X);
    const std::size_t m = X.rows(), n = X.cols();
    const auto xd = X.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
    const auto ix = x.id;
    return t.record("transpose", {n, m}, std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
}

Var reshape(Var x, Shape shape) {
    auto & t = tape_of(x);
    if (shape_numel(shape) != x.value().size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const auto ix = x.id;
    return t.record("reshape", std::move(shape), x.value().to_vector(), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    require_matrix("slice_rows", X);
    const std::size_t n = X.cols();
    if (begin >= end || end > X.rows()) throw ShapeError("slice_rows: bad range for " + shape_str(X.shape()));
    const auto xd = X.data();
    std::vector<double> out(xd.begin() + static_cast<std::ptrdiff_t>(begin * n),
                            xd.begin() + static_cast<std::ptrdiff_t>(end * n));
    const auto ix = x.id;
    return t.record("slice_rows", {end - begin, n}, std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
    });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    require_matrix("slice_cols", X);
    const std::size_t m = X.rows(), n = X.cols(), w = end - begin;
    if (begin >= end || end > n) throw ShapeError("slice_cols: bad range for " + shape_str(X.shape()));
    const auto xd = X.data();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xd[i * n + begin + j];
    const auto ix = x.id;
    return t.record("slice_cols", {m, w}, std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no operands");
    auto & t = tape_of(parts[0]);
    const std::size_t n = parts[0].value().cols();
    std::vector<double> out;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    for (const auto & p : parts) {
        tape_of(parts[0], p);
        require_matrix("concat_rows", p.value());
        if (p.value().cols() != n) throw ShapeError("concat_rows: column count mismatch");
        offsets.push_back(out.size());
        const auto d = p.value().data();
        out.insert(out.end(), d.begin(), d.end());
        ids.push_back(p.id);
    }
    const std::size_t m = out.size() / n;
    return t.record("concat_rows", {m, n}, std::move(out), ids, [=](Tape & tp, std::span<const double> g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.requires_grad(ids[k])) continue;
            auto gp = tp.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no operands");
    auto & t = tape_of(parts[0]);
    const std::size_t m = parts[0].value().rows();
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> widths, offsets;
    std::size_t n = 0;
    for (const auto & p : parts) {
        tape_of(parts[0], p);
        require_matrix("concat_cols", p.value());
        if (p.value().rows() != m) throw ShapeError("concat_cols: row count mismatch");
        ids.push_back(p.id);
        offsets.push_back(n);
        widths.push_back(p.value().cols());
        n += p.value().cols();
    }
    std::vector<double> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto d = parts[k].value().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out[i * n + offsets[k] + j] = d[i * widths[k] + j];
    }
    return t.record("concat_cols", {m, n}, std::move(out), ids, [=](Tape & tp, std::span<const double> g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.requires_grad(ids[k])) continue;
            auto gp = tp.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * n + offsets[k] + j];
        }
    });
}

Var mean_rows(Var x) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    require_matrix("mean_rows", X);
    const std::size_t m = X.rows(), n = X.cols();
    const auto xd = X.data();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += xd[i * n + j];
    for (auto & v : out) v /= static_cast<double>(m);
    const auto ix = x.id;
    return t.record("mean_rows", {n}, std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
    });
}

Var sum(Var x) {
    auto & t = tape_of(x);
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    const auto ix = x.id;
    return t.record("sum", {1}, {s}, {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (auto & v : gx) v += g[0];
    });
}

Var element(Var x, std::size_t i) {
    auto & t = tape_of(x);
    if (i >= x.value().size()) throw ShapeError("element: index out of range");
    const auto ix = x.id;
    return t.record("element", {1}, {x.value()[i]}, {ix}, [=](Tape & tp, std::span<const double> g) {
        tp.grad_buffer(ix)[i] += g[0];
    });
}

Var scale_by(Var s, Var x) {
    auto & t = tape_of(s, x);
    if (s.value().size() != 1) throw ShapeError("scale_by: scale must be a scalar");
    const double sv = s.value()[0];
    const auto xd = x.value().data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * xd[i];
    const auto is = s.id, ix = x.id;
    return t.record("scale_by", x.shape(), std::move(out), {is, ix}, [=](Tape & tp, std::span<const double> g) {
        const auto xd = tp.value(ix).data();
        if (tp.requires_grad(is)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
            tp.grad_buffer(is)[0] += acc;
        }
        if (tp.requires_grad(ix)) {
            const double sv = tp.value(is)[0];
            auto gx = tp.grad_buffer(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
        }
    });
}

Var weighted_sum(Var base, std::span<const Tensor * const> deltas, Var lambda) {
    auto & t = tape_of(base, lambda);
    const Tensor & B = base.value();
    if (lambda.value().size() != deltas.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(deltas.size()) + " deltas but lambda has " +
                         std::to_string(lambda.value().size()) + " entries");
    }
    for (const auto * d : deltas) require_same_shape("weighted_sum", B, *d);
    std::vector<double> out = B.to_vector();
    const auto lam = lambda.value().data();
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        const auto dd = deltas[k]->data();
        const double l = lam[k];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += l * dd[i];
    }
    std::vector<const Tensor *> held(deltas.begin(), deltas.end());
    const auto ib = base.id, il = lambda.id;
    return t.record("weighted_sum", B.shape(), std::move(out), {ib, il}, [=](Tape & tp, std::span<const double> g) {
        if (tp.requires_grad(ib)) {
            auto gb = tp.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
        if (tp.requires_grad(il)) {
            auto gl = tp.grad_buffer(il);
            for (std::size_t k = 0; k < held.size(); ++k) {
                const auto dd = held[k]->data();
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * dd[i];
                gl[k] += acc;
            }
        }
    });
}

Var sparse_weighted_sum(Var base, std::span<const SparseTensor * const> deltas, Var lambda) {
    auto & t = tape_of(base, lambda);
    const Tensor & B = base.value();
    if (lambda.value().size() != deltas.size()) {
        throw ShapeError("sparse_weighted_sum: lambda length does not match delta count");
    }
    for (const auto * d : deltas) {
        if (d->dense_shape != B.shape()) {
            throw ShapeError("sparse_weighted_sum: sparse shape " + shape_str(d->dense_shape) + " vs base " +
                             shape_str(B.shape()));
        }
    }
    std::vector<double> out = B.to_vector();
    const auto lam = lambda.value().data();
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        const auto & s = *deltas[k];
        for (std::size_t e = 0; e < s.nnz(); ++e) out[s.indices[e]] += lam[k] * s.values[e];
    }
    std::vector<const SparseTensor *> held(deltas.begin(), deltas.end());
    const auto ib = base.id, il = lambda.id;
    return t.record("sparse_weighted_sum", B.shape(), std::move(out), {ib, il},
                    [=](Tape & tp, std::span<const double> g) {
                        if (tp.requires_grad(ib)) {
                            auto gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                        }
                        if (tp.requires_grad(il)) {
                            auto gl = tp.grad_buffer(il);
                            for (std::size_t k = 0; k < held.size(); ++k) {
                                const auto & s = *held[k];
                                double acc = 0.0;
                                for (std::size_t e = 0; e < s.nnz(); ++e) acc += g[s.indices[e]] * s.values[e];
                                gl[k] += acc;
                            }
                        }
                    });
}

Var sparse_matmul(Var x, const SparseTensor & s) {
    auto & t = tape_of(x);
    const Tensor & X = x.value();
    require_matrix("sparse_matmul", X);
    if (s.dense_shape.size() != 2) throw ShapeError("sparse_matmul: sparse operand must be a matrix");
    const std::size_t m = X.rows(), k = X.cols(), n = s.dense_shape[1];
    if (s.dense_shape[0] != k) {
        throw ShapeError("sparse_matmul: inner dimensions differ, " + shape_str(X.shape()) + " x " +
                         shape_str(s.dense_shape));
    }
    const auto xd = X.data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t e = 0; e < s.nnz(); ++e) {
        const std::size_t r = s.indices[e] / n, c = s.indices[e] % n;
        const double v = s.values[e];
        for (std::size_t i = 0; i < m; ++i) out[i * n + c] += xd[i * k + r] * v;
    }
    const auto ix = x.id;
    const SparseTensor * sp = &s;
    return t.record("sparse_matmul", {m, n}, std::move(out), {ix}, [=](Tape & tp, std::span<const double> g) {
        auto gx = tp.grad_buffer(ix);
        for (std::size_t e = 0; e < sp->nnz(); ++e) {
            const std::size_t r = sp->indices[e] / n, c = sp->indices[e] % n;
            const double v = sp->values[e];
            for (std::size_t i = 0; i < m; ++i) gx[i * k + r] += g[i * n + c] * v;
        }
    });
}

Var entropy_mean(Var probs, double clamp) {
    auto & t = tape_of(probs);
    const Tensor & P = probs.value();
    require_matrix("entropy_mean", P);
    const std::size_t b = P.rows(), c = P.cols();
    const auto pd = P.data();
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double rs = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = pd[i * c + j];
            if (p < -1e-12) throw ContractError("entropy_mean: negative probability");
            rs += p;
            total -= p * std::log(std::max(p, clamp));
        }
        if (std::abs(rs - 1.0) > 1e-5) {
            throw ContractError("entropy_mean: row " + std::to_string(i) + " sums to " + std::to_string(rs));
        }
    }
    const auto ip = probs.id;
    const double inv_b = 1.0 / static_cast<double>(b);
    return t.record("entropy_mean", {1}, {total * inv_b}, {ip}, [=](Tape & tp, std::span<const double> g) {
        const auto pd = tp.value(ip).data();
        auto gp = tp.grad_buffer(ip);
        for (std::size_t i = 0; i < pd.size(); ++i) {
            const double p = pd[i];
            const double d = p >= clamp ? -(std::log(p) + 1.0) : -std::log(clamp);
            gp[i] += g[0] * inv_b * d;
        }
    });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
    auto & t = tape_of(logits);
    const Tensor & Z = logits.value();
    require_matrix("cross_entropy", Z);
    const std::size_t b = Z.rows(), c = Z.cols();
    if (labels.size() != b) throw ShapeError("cross_entropy: label count does not match batch");
    const auto zd = Z.data();
    std::vector<double> soft(b * c);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw ContractError("cross_entropy: label out of range");
        }
        const double * row = zd.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < c; ++j) soft[i * c + j] = std::exp(row[j] - lse);
    }
    const auto iz = logits.id;
    std::vector<int> lab(labels.begin(), labels.end());
    const double inv_b = 1.0 / static_cast<double>(b);
    return t.record("cross_entropy", {1}, {total * inv_b}, {iz},
                    [=, soft = std::move(soft), lab = std::move(lab)](Tape & tp, std::span<const double> g) {
                        auto gz = tp.grad_buffer(iz);
                        for (std::size_t i = 0; i < b; ++i)
                            for (std::size_t j = 0; j < c; ++j) {
                                const double y = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
                                gz[i * c + j] += g[0] * inv_b * (soft[i * c + j] - y);
                            }
                    });
}

Tensor finite_diff_grad(const std::function<double(const Tensor &)> & f, const Tensor & x, double h) {
    if (h <= 0.0) throw ContractError("finite_diff_grad: step must be positive");
    std::vector<double> g(x.size());
    std::vector<double> probe = x.to_vector();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(Tensor(x.shape(), probe));
        probe[i] = orig - h;
        const double fm = f(Tensor(x.shape(), probe));
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor(x.shape(), std::move(g));
}

} // namespace wemoe::ad
