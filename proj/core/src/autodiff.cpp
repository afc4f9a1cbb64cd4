#include "pmg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pmg::ad {
namespace {

using NodePtr = std::shared_ptr<Node>;

Var make(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = std::any_of(parents.begin(), parents.end(),
                                      [](const NodePtr& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
    if (v.shape().size() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + shape_string(v.shape()));
    }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

}  // namespace

Tensor Var::grad() const {
    Tensor g(node_->value.shape);
    if (node_->grad.size() == g.size()) g.data = node_->grad;
    return g;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var variable(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

void backward(const Var& out) {
    if (out.size() != 1) throw std::invalid_argument("backward: output must be a scalar");
    if (!out.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{&out.node(), 0}};
    seen.insert(&out.node());
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

    out.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    NodePtr pa = a.ptr(), pb = b.ptr();
    return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        for (NodePtr p : {pa, pb}) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    NodePtr pa = a.ptr(), pb = b.ptr();
    return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    NodePtr pa = a.ptr(), pb = b.ptr();
    return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, s](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Var add_row(const Var& a, const Var& row) {
    require_rank(a, 2, "add_row");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (row.size() != n) throw std::invalid_argument("add_row: row length mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row.value()[j];
    NodePtr pa = a.ptr(), pr = row.ptr();
    return make(std::move(out), {pa, pr}, [pa, pr, m, n](Node& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pr->requires_grad) {
            auto& g = pr->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
    });
}

Var tanh(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = std::tanh(v);
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Var reshape(const Var& a, Shape shape) {
    if (numel(shape) != a.size()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(std::move(shape), a.value().data);
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Matrices

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_string(a.shape()) +
                                    " x " + shape_string(b.shape()));
    }
    Tensor out({m, n});
    const auto& A = a.value().data;
    const auto& B = b.value().data;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
        }
    NodePtr pa = a.ptr(), pb = b.ptr();
    return make(std::move(out), {pa, pb}, [pa, pb, m, k, n](Node& self) {
        const auto& G = self.grad;
        if (pa->requires_grad) {
            auto& ga = pa->grad_buffer();
            const auto& B = pb->value.data;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                    ga[i * k + p] += s;
                }
        }
        if (pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            const auto& A = pa->value.data;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
                }
        }
    });
}

Var transpose(const Var& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t n = parts.front().shape().at(1);
    std::size_t rows = 0;
    std::vector<NodePtr> parents;
    for (const Var& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.shape()[1] != n) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.shape()[0];
        parents.push_back(p.ptr());
    }
    Tensor out({rows, n});
    std::size_t offset = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + offset);
        offset += p.size();
    }
    return make(std::move(out), parents, [parents](Node& self) {
        std::size_t off = 0;
        for (const NodePtr& p : parents) {
            const std::size_t len = p->value.size();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
    require_rank(a, 2, "slice_rows");
    const std::size_t n = a.shape()[1];
    if (begin + count > a.shape()[0]) throw std::out_of_range("slice_rows: range out of bounds");
    Tensor out({count, n});
    std::copy_n(a.value().data.begin() + begin * n, count * n, out.data.begin());
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, begin, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = parts.front().shape().at(0);
    std::size_t cols = 0;
    std::vector<NodePtr> parents;
    for (const Var& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.shape()[0] != m) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.shape()[1];
        parents.push_back(p.ptr());
    }
    Tensor out({m, cols});
    std::size_t c0 = 0;
    for (const Var& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * cols + c0 + j] = p.value()[i * w + j];
        c0 += w;
    }
    return make(std::move(out), parents, [parents, m, cols](Node& self) {
        std::size_t c0 = 0;
        for (const NodePtr& p : parents) {
            const std::size_t w = p->value.shape[1];
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * cols + c0 + j];
            }
            c0 += w;
        }
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    require_rank(a, 2, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin + count > n) throw std::out_of_range("slice_cols: range out of bounds");
    Tensor out({m, count});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * n + begin + j];
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, begin, count, m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
    });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
    require_rank(table, 2, "gather_rows");
    const std::size_t n = table.shape()[1];
    Tensor out({ids.size(), n});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= table.shape()[0]) throw std::out_of_range("gather_rows: id out of range");
        std::copy_n(table.value().data.begin() + ids[r] * n, n, out.data.begin() + r * n);
    }
    NodePtr pt = table.ptr();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return make(std::move(out), {pt}, [pt, idx, n](Node& self) {
        auto& g = pt->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
    });
}

Var sum_rows(const Var& a) {
    require_rank(a, 2, "sum_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a.value()[i * n + j];
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
    });
}

Var mean_rows(const Var& a) {
    require_rank(a, 2, "mean_rows");
    if (a.shape()[0] == 0) throw std::invalid_argument("mean_rows: empty input");
    return scale(sum_rows(a), 1.0 / static_cast<double>(a.shape()[0]));
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps) {
    require_rank(a, 2, "layer_norm_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (gain.size() != n || bias.size() != n) throw std::invalid_argument("layer_norm_rows: gain/bias size");
    Tensor out({m, n});
    std::vector<double> xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += a.value()[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = a.value()[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (a.value()[i * n + j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gain.value()[j] + bias.value()[j];
        }
    }
    NodePtr pa = a.ptr(), pg = gain.ptr(), pb = bias.ptr();
    return make(std::move(out), {pa, pg, pb},
                [pa, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](Node& self) {
                    const auto& G = self.grad;
                    if (pg->requires_grad) {
                        auto& g = pg->grad_buffer();
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j] * xhat[i * n + j];
                    }
                    if (pb->requires_grad) {
                        auto& g = pb->grad_buffer();
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j];
                    }
                    if (pa->requires_grad) {
                        auto& g = pa->grad_buffer();
                        const double inv_n = 1.0 / static_cast<double>(n);
                        for (std::size_t i = 0; i < m; ++i) {
                            double mean_d = 0.0, mean_dx = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                                const double d = G[i * n + j] * pg->value[j];
                                mean_d += d;
                                mean_dx += d * xhat[i * n + j];
                            }
                            mean_d *= inv_n;
                            mean_dx *= inv_n;
                            for (std::size_t j = 0; j < n; ++j) {
                                const double d = G[i * n + j] * pg->value[j];
                                g[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                            }
                        }
                    }
                });
}

Var normalize_rows(const Var& a) {
    require_rank(a, 2, "normalize_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({m, n});
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j] * a.value()[i * n + j];
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0) throw std::domain_error("normalize_rows: zero-norm row");
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value()[i * n + j] / norms[i];
    }
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, norms = std::move(norms), m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            double yd = 0.0;
            for (std::size_t j = 0; j < n; ++j) yd += self.value[i * n + j] * self.grad[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += (self.grad[i * n + j] - self.value[i * n + j] * yd) / norms[i];
        }
    });
}

Var rms_normalize_rows(const Var& a, double eps) {
    require_rank(a, 2, "rms_normalize_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({m, n});
    std::vector<double> rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a.value()[i * n + j] * a.value()[i * n + j];
        rms[i] = std::sqrt(s / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.value()[i * n + j] / rms[i];
    }
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, rms = std::move(rms), m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            double xg = 0.0;
            for (std::size_t j = 0; j < n; ++j) xg += pa->value[i * n + j] * self.grad[i * n + j];
            const double r3n = rms[i] * rms[i] * rms[i] * static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += self.grad[i * n + j] / rms[i] - pa->value[i * n + j] * xg / r3n;
        }
    });
}

Var causal_softmax_rows(const Var& a, std::size_t visible_prefix) {
    require_rank(a, 2, "causal_softmax_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t visible = std::min(n, visible_prefix + i + 1);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, a.value()[i * n + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
            out[i * n + j] = std::exp(a.value()[i * n + j] - mx);
            s += out[i * n + j];
        }
        for (std::size_t j = 0; j < visible; ++j) out[i * n + j] /= s;
    }
    NodePtr pa = a.ptr();
    return make(std::move(out), {pa}, [pa, m, n](Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += self.value[i * n + j] * self.grad[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - s);
        }
    });
}

// ---------------------------------------------------------------------------
// Images

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
    require_rank(x, 3, "conv2d");
    require_rank(weight, 4, "conv2d");
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const std::size_t O = weight.shape()[0], K = weight.shape()[2];
    if (weight.shape()[1] != C || weight.shape()[3] != K || K % 2 == 0) {
        throw std::invalid_argument("conv2d: weight shape " + shape_string(weight.shape()) +
                                    " incompatible with input " + shape_string(x.shape()));
    }
    if (bias.size() != O) throw std::invalid_argument("conv2d: bias size");
    const long pad = static_cast<long>(K / 2);
    Tensor out({O, H, W});
    const auto& X = x.value().data;
    const auto& Wt = weight.value().data;
    for (std::size_t o = 0; o < O; ++o) {
        double* dst = out.data.data() + o * H * W;
        std::fill_n(dst, H * W, bias.value()[o]);
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = X.data() + c * H * W;
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const double w = Wt[((o * C + c) * K + ky) * K + kx];
                    const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                    for (long yy = std::max(0L, -dy); yy < std::min<long>(H, H - dy); ++yy)
                        for (long xx = std::max(0L, -dx); xx < std::min<long>(W, W - dx); ++xx)
                            dst[yy * W + xx] += w * src[(yy + dy) * W + (xx + dx)];
                }
        }
    }
    NodePtr px = x.ptr(), pw = weight.ptr(), pb = bias.ptr();
    return make(std::move(out), {px, pw, pb}, [px, pw, pb, C, H, W, O, K, pad](Node& self) {
        const auto& G = self.grad;
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t i = 0; i < H * W; ++i) g[o] += G[o * H * W + i];
        }
        const bool want_x = px->requires_grad, want_w = pw->requires_grad;
        if (!want_x && !want_w) return;
        std::vector<double>* gx = want_x ? &px->grad_buffer() : nullptr;
        std::vector<double>* gw = want_w ? &pw->grad_buffer() : nullptr;
        const auto& X = px->value.data;
        const auto& Wt = pw->value.data;
        for (std::size_t o = 0; o < O; ++o) {
            const double* go = G.data() + o * H * W;
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < K; ++ky)
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                        const double w = Wt[widx];
                        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
                        double acc = 0.0;
                        for (long yy = std::max(0L, -dy); yy < std::min<long>(H, H - dy); ++yy)
                            for (long xx = std::max(0L, -dx); xx < std::min<long>(W, W - dx); ++xx) {
                                const std::size_t src = c * H * W + (yy + dy) * W + (xx + dx);
                                const double gv = go[yy * W + xx];
                                if (gx) (*gx)[src] += w * gv;
                                acc += X[src] * gv;
                            }
                        if (gw) (*gw)[widx] += acc;
                    }
        }
    });
}

Var avg_pool2(const Var& x) {
    require_rank(x, 3, "avg_pool2");
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
    const std::size_t h = H / 2, w = W / 2;
    Tensor out({C, h, w});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const double* s = x.value().data.data() + c * H * W;
                out[(c * h + i) * w + j] = 0.25 * (s[2 * i * W + 2 * j] + s[2 * i * W + 2 * j + 1] +
                                                   s[(2 * i + 1) * W + 2 * j] + s[(2 * i + 1) * W + 2 * j + 1]);
            }
    NodePtr px = x.ptr();
    return make(std::move(out), {px}, [px, C, H, W, h, w](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const double v = 0.25 * self.grad[(c * h + i) * w + j];
                    double* d = g.data() + c * H * W;
                    d[2 * i * W + 2 * j] += v;
                    d[2 * i * W + 2 * j + 1] += v;
                    d[(2 * i + 1) * W + 2 * j] += v;
                    d[(2 * i + 1) * W + 2 * j + 1] += v;
                }
    });
}

Var upsample2(const Var& x) {
    require_rank(x, 3, "upsample2");
    const std::size_t C = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t H = 2 * h, W = 2 * w;
    Tensor out({C, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                out[(c * H + i) * W + j] = x.value()[(c * h + i / 2) * w + j / 2];
    NodePtr px = x.ptr();
    return make(std::move(out), {px}, [px, C, H, W, h, w](Node& self) {
        auto& g = px->grad_buffer();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    g[(c * h + i / 2) * w + j / 2] += self.grad[(c * H + i) * W + j];
    });
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const std::size_t H = parts.front().shape().at(1), W = parts.front().shape().at(2);
    std::size_t C = 0;
    std::vector<NodePtr> parents;
    for (const Var& p : parts) {
        require_rank(p, 3, "concat_channels");
        if (p.shape()[1] != H || p.shape()[2] != W)
            throw std::invalid_argument("concat_channels: spatial mismatch");
        C += p.shape()[0];
        parents.push_back(p.ptr());
    }
    Tensor out({C, H, W});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
        off += p.size();
    }
    return make(std::move(out), parents, [parents](Node& self) {
        std::size_t off = 0;
        for (const NodePtr& p : parents) {
            const std::size_t len = p->value.size();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
    require_rank(x, 3, "film");
    const std::size_t C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
    if (gamma.size() != C || beta.size() != C) throw std::invalid_argument("film: modulation size");
    Tensor out = x.value();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i)
            out[c * HW + i] = out[c * HW + i] * (1.0 + gamma.value()[c]) + beta.value()[c];
    NodePtr px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
    return make(std::move(out), {px, pg, pb}, [px, pg, pb, C, HW](Node& self) {
        const auto& G = self.grad;
        if (px->requires_grad) {
            auto& g = px->grad_buffer();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) g[c * HW + i] += G[c * HW + i] * (1.0 + pg->value[c]);
        }
        if (pg->requires_grad) {
            auto& g = pg->grad_buffer();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) g[c] += G[c * HW + i] * px->value[c * HW + i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) g[c] += G[c * HW + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

Var mse(const Var& a, const Var& b) {
    require_same_shape(a, b, "mse");
    const std::size_t n = a.size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    Tensor out({1}, {s / static_cast<double>(n)});
    NodePtr pa = a.ptr(), pb = b.ptr();
    return make(std::move(out), {pa, pb}, [pa, pb, n](Node& self) {
        const double k = 2.0 * self.grad[0] / static_cast<double>(n);
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += k * (pa->value[i] - pb->value[i]);
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] -= k * (pa->value[i] - pb->value[i]);
        }
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    NodePtr pa = a.ptr();
    return make(Tensor({1}, {s}), {pa}, [pa](Node& self) {
        auto& g = pa->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets) {
    require_rank(logits, 2, "cross_entropy_rows");
    const std::size_t m = logits.shape()[0], n = logits.shape()[1];
    if (targets.size() != m) throw std::invalid_argument("cross_entropy_rows: target count");
    std::vector<double> probs(m * n);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits.value()[i * n + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(logits.value()[i * n + j] - mx);
            s += probs[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
        loss -= std::log(std::max(probs[i * n + targets[i]], 1e-300));
    }
    NodePtr pl = logits.ptr();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return make(Tensor({1}, {loss / static_cast<double>(m)}), {pl},
                [pl, probs = std::move(probs), tg, m, n](Node& self) {
                    auto& g = pl->grad_buffer();
                    const double k = self.grad[0] / static_cast<double>(m);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                            g[i * n + j] += k * (probs[i * n + j] - (j == tg[i] ? 1.0 : 0.0));
                });
}

}  // namespace pmg::ad
