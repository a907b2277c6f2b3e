#include "stealth/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <unordered_set>

namespace stealth::ad {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RMat>;
using CMatMap = Eigen::Map<const RMat>;

namespace {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        n->parents.push_back(p.node());
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var(std::move(n));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
}

Var unary_op(const Var& x, Tensor value, std::function<double(double, double, double)> dfn) {
    // dfn(x_i, y_i, gout_i) -> contribution to dx_i
    auto xv = x.node();
    return make_node(std::move(value), {x}, [xv, dfn](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& gx = xv->ensure_grad();
        const Tensor& go = n.grad;
        for (size_t i = 0; i < gx.numel(); ++i)
            gx[i] += dfn(xv->value[i], n.value[i], go[i]);
    });
}

}  // namespace

void backward(const Var& root) {
    if (root.value().numel() != 1) throw ShapeError("backward root must be scalar");
    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->requires_grad && n->grad.same_shape(n->value)) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            Tensor& g = an->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            Tensor& g = an->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_node(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            Tensor& g = an->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor& g = bn->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * an->value[i];
        }
    });
}

Var add_scalar(const Var& x, double s) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] + s;
    return unary_op(x, std::move(out), [](double, double, double g) { return g; });
}

Var mul_scalar(const Var& x, double s) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * s;
    return unary_op(x, std::move(out), [s](double, double, double g) { return g * s; });
}

Var mul_const(const Var& x, const Tensor& c) {
    if (!x.value().same_shape(c)) throw ShapeError("mul_const shape mismatch");
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * c[i];
    auto xv = x.node();
    Tensor cc = c;
    return make_node(std::move(out), {x}, [xv, cc](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * cc[i];
    });
}

Var relu(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] > 0 ? x.value()[i] : 0.0;
    return unary_op(x, std::move(out),
                    [](double xi, double, double g) { return xi > 0 ? g : 0.0; });
}

Var silu(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x.value()[i]));
        out[i] = x.value()[i] * s;
    }
    return unary_op(x, std::move(out), [](double xi, double, double g) {
        double s = 1.0 / (1.0 + std::exp(-xi));
        return g * (s + xi * s * (1.0 - s));
    });
}

Var sigmoid(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.value()[i]));
    return unary_op(x, std::move(out),
                    [](double, double yi, double g) { return g * yi * (1.0 - yi); });
}

Var softplus(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) {
        double v = x.value()[i];
        out[i] = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    return unary_op(x, std::move(out), [](double xi, double, double g) {
        return g / (1.0 + std::exp(-xi));
    });
}

Var exp(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(x.value()[i]);
    return unary_op(x, std::move(out), [](double, double yi, double g) { return g * yi; });
}

Var sqrt(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(x.value()[i]);
    // Value is exact; only the gradient is guarded at zero.
    return unary_op(x, std::move(out), [](double, double yi, double g) {
        return g * 0.5 / std::max(yi, 1e-12);
    });
}

Var square(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * x.value()[i];
    return unary_op(x, std::move(out),
                    [](double xi, double, double g) { return g * 2.0 * xi; });
}

Var absval(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(x.value()[i]);
    return unary_op(x, std::move(out), [](double xi, double, double g) {
        return xi > 0 ? g : (xi < 0 ? -g : 0.0);
    });
}

Var clamp01(const Var& x) {
    Tensor out(x.value().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::min(1.0, std::max(0.0, x.value()[i]));
    return unary_op(x, std::move(out), [](double xi, double, double g) {
        return (xi > 0.0 && xi < 1.0) ? g : 0.0;
    });
}

// ------------------------------------------------------------------- shapes

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(x.value().sum());
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
    });
}

Var mean_all(const Var& x) {
    double inv = 1.0 / static_cast<double>(x.value().numel());
    Tensor out = Tensor::scalar(x.value().sum() * inv);
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv, inv](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0] * inv;
    });
}

Var sum_except_dim0(const Var& x) {
    int n0 = x.value().dim(0);
    size_t rest = x.value().numel() / static_cast<size_t>(n0);
    Tensor out({n0});
    for (int i = 0; i < n0; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < rest; ++j) s += x.value()[i * rest + j];
        out[i] = s;
    }
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv, rest](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        int n0 = n.value.dim(0);
        for (int i = 0; i < n0; ++i)
            for (size_t j = 0; j < rest; ++j) g[i * rest + j] += n.grad[i];
    });
}

Var gap(const Var& x) {
    const Tensor& v = x.value();
    if (v.ndim() != 4) throw ShapeError("gap expects NCHW");
    int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
    double inv = 1.0 / (static_cast<double>(H) * W);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            const double* p = v.data() + ((static_cast<size_t>(n) * C + c) * H * W);
            for (int i = 0; i < H * W; ++i) s += p[i];
            out.at2(n, c) = s * inv;
        }
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv, inv](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        int N = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                double gv = n.grad.at2(b, c) * inv;
                double* p = g.data() + ((static_cast<size_t>(b) * C + c) * H * W);
                for (int i = 0; i < H * W; ++i) p[i] += gv;
            }
    });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul shape mismatch");
    int m = av.dim(0), k = av.dim(1), n2 = bv.dim(1);
    Tensor out({m, n2});
    CMatMap A(av.data(), m, k), B(bv.data(), k, n2);
    MatMap(out.data(), m, n2).noalias() = A * B;
    auto an = a.node(), bn = b.node();
    return make_node(std::move(out), {a, b}, [an, bn, m, k, n2](Node& nd) {
        CMatMap G(nd.grad.data(), m, n2);
        if (an->requires_grad) {
            MatMap GA(an->ensure_grad().data(), m, k);
            CMatMap B(bn->value.data(), k, n2);
            GA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
            MatMap GB(bn->ensure_grad().data(), k, n2);
            CMatMap A(an->value.data(), m, k);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1))
        throw ShapeError("linear shape mismatch");
    int N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
    if (b.value().numel() != static_cast<size_t>(O)) throw ShapeError("linear bias mismatch");
    Tensor out({N, O});
    CMatMap X(xv.data(), N, F), W(wv.data(), O, F);
    MatMap Y(out.data(), N, O);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < O; ++j) out.at2(i, j) += b.value()[j];
    auto xn = x.node(), wn = w.node(), bn2 = b.node();
    return make_node(std::move(out), {x, w, b}, [xn, wn, bn2, N, F, O](Node& nd) {
        CMatMap G(nd.grad.data(), N, O);
        if (xn->requires_grad) {
            MatMap GX(xn->ensure_grad().data(), N, F);
            CMatMap W(wn->value.data(), O, F);
            GX.noalias() += G * W;
        }
        if (wn->requires_grad) {
            MatMap GW(wn->ensure_grad().data(), O, F);
            CMatMap X(xn->value.data(), N, F);
            GW.noalias() += G.transpose() * X;
        }
        if (bn2->requires_grad) {
            Tensor& gb = bn2->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < O; ++j) gb[j] += G(i, j);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != 3 || bv.ndim() != 3 || av.dim(0) != bv.dim(0))
        throw ShapeError("bmm expects [B,·,·] pairs");
    int B = av.dim(0);
    int ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
    int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
    int k2 = trans_b ? bc : br, n2 = trans_b ? br : bc;
    if (k != k2) throw ShapeError("bmm inner dim mismatch");
    Tensor out({B, m, n2});
    for (int i = 0; i < B; ++i) {
        CMatMap A(av.data() + static_cast<size_t>(i) * ar * ac, ar, ac);
        CMatMap Bm(bv.data() + static_cast<size_t>(i) * br * bc, br, bc);
        MatMap Y(out.data() + static_cast<size_t>(i) * m * n2, m, n2);
        if (!trans_a && !trans_b)
            Y.noalias() = A * Bm;
        else if (trans_a && !trans_b)
            Y.noalias() = A.transpose() * Bm;
        else if (!trans_a && trans_b)
            Y.noalias() = A * Bm.transpose();
        else
            Y.noalias() = A.transpose() * Bm.transpose();
    }
    auto an = a.node(), bn = b.node();
    return make_node(std::move(out), {a, b},
                     [an, bn, B, ar, ac, br, bc, m, n2, trans_a, trans_b](Node& nd) {
        for (int i = 0; i < B; ++i) {
            CMatMap G(nd.grad.data() + static_cast<size_t>(i) * m * n2, m, n2);
            CMatMap A(an->value.data() + static_cast<size_t>(i) * ar * ac, ar, ac);
            CMatMap Bm(bn->value.data() + static_cast<size_t>(i) * br * bc, br, bc);
            if (an->requires_grad) {
                MatMap GA(an->ensure_grad().data() + static_cast<size_t>(i) * ar * ac, ar, ac);
                // d(opA) = G * opB^T; transpose back if needed
                if (!trans_a) {
                    if (!trans_b)
                        GA.noalias() += G * Bm.transpose();
                    else
                        GA.noalias() += G * Bm;
                } else {
                    if (!trans_b)
                        GA.noalias() += Bm * G.transpose();
                    else
                        GA.noalias() += Bm.transpose() * G.transpose();
                }
            }
            if (bn->requires_grad) {
                MatMap GB(bn->ensure_grad().data() + static_cast<size_t>(i) * br * bc, br, bc);
                // d(opB) = opA^T * G
                if (!trans_b) {
                    if (!trans_a)
                        GB.noalias() += A.transpose() * G;
                    else
                        GB.noalias() += A * G;
                } else {
                    if (!trans_a)
                        GB.noalias() += G.transpose() * A;
                    else
                        GB.noalias() += G.transpose() * A.transpose();
                }
            }
        }
    });
}

Var softmax_lastdim(const Var& x) {
    const Tensor& v = x.value();
    int D = v.dim(v.ndim() - 1);
    size_t rows = v.numel() / static_cast<size_t>(D);
    Tensor out(v.shape());
    for (size_t r = 0; r < rows; ++r) {
        const double* in = v.data() + r * D;
        double* o = out.data() + r * D;
        double mx = in[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, in[i]);
        double s = 0.0;
        for (int i = 0; i < D; ++i) {
            o[i] = std::exp(in[i] - mx);
            s += o[i];
        }
        double inv = 1.0 / s;
        for (int i = 0; i < D; ++i) o[i] *= inv;
    }
    auto xv = x.node();
    return make_node(std::move(out), {x}, [xv, D, rows](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * D;
            const double* go = n.grad.data() + r * D;
            double* gx = g.data() + r * D;
            double dot = 0.0;
            for (int i = 0; i < D; ++i) dot += go[i] * y[i];
            for (int i = 0; i < D; ++i) gx[i] += y[i] * (go[i] - dot);
        }
    });
}

Var mat_left_const(const Tensor& m, const Var& x) {
    const Tensor& v = x.value();
    if (v.ndim() < 2 || m.ndim() != 2) throw ShapeError("mat_left_const shapes");
    int H = v.dim(v.ndim() - 2), W = v.dim(v.ndim() - 1);
    if (m.dim(1) != H) throw ShapeError("mat_left_const inner dim");
    int R = m.dim(0);
    size_t planes = v.numel() / (static_cast<size_t>(H) * W);
    std::vector<int> oshape(v.shape());
    oshape[oshape.size() - 2] = R;
    Tensor out(oshape);
    CMatMap M(m.data(), R, H);
    for (size_t p = 0; p < planes; ++p) {
        CMatMap X(v.data() + p * H * W, H, W);
        MatMap Y(out.data() + p * R * W, R, W);
        Y.noalias() = M * X;
    }
    auto xv = x.node();
    Tensor mc = m;
    return make_node(std::move(out), {x}, [xv, mc, R, H, W, planes](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        CMatMap M(mc.data(), R, H);
        for (size_t p = 0; p < planes; ++p) {
            CMatMap G(n.grad.data() + p * R * W, R, W);
            MatMap GX(g.data() + p * H * W, H, W);
            GX.noalias() += M.transpose() * G;
        }
    });
}

Var mat_right_constT(const Var& x, const Tensor& m) {
    const Tensor& v = x.value();
    if (v.ndim() < 2 || m.ndim() != 2) throw ShapeError("mat_right_constT shapes");
    int H = v.dim(v.ndim() - 2), W = v.dim(v.ndim() - 1);
    if (m.dim(1) != W) throw ShapeError("mat_right_constT inner dim");
    int R = m.dim(0);
    size_t planes = v.numel() / (static_cast<size_t>(H) * W);
    std::vector<int> oshape(v.shape());
    oshape[oshape.size() - 1] = R;
    Tensor out(oshape);
    CMatMap M(m.data(), R, W);
    for (size_t p = 0; p < planes; ++p) {
        CMatMap X(v.data() + p * H * W, H, W);
        MatMap Y(out.data() + p * H * R, H, R);
        Y.noalias() = X * M.transpose();
    }
    auto xv = x.node();
    Tensor mc = m;
    return make_node(std::move(out), {x}, [xv, mc, R, H, W, planes](Node& n) {
        if (!xv->requires_grad) return;
        Tensor& g = xv->ensure_grad();
        CMatMap M(mc.data(), R, W);
        for (size_t p = 0; p < planes; ++p) {
            CMatMap G(n.grad.data() + p * H * R, H, R);
            MatMap GX(g.data() + p * H * W, H, W);
            GX.noalias() += G * M;
        }
    });
}

// ---------------------------------------------------------------- conv / image

namespace {

struct ConvDims {
    int N, Ci, H, W, Co, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d expects NCHW x and OIHW w");
    if (x.dim(1) != w.dim(1)) throw ShapeError("conv2d channel mismatch");
    ConvDims d;
    d.N = x.dim(0);
    d.Ci = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.Ho <= 0 || d.Wo <= 0) throw ShapeError("conv2d output would be empty");
    return d;
}

void im2col(const double* x, const ConvDims& d, int stride, int pad, double* cols) {
    // cols: row-major [Ci*kh*kw, Ho*Wo]
    const int L = d.Ho * d.Wo;
    for (int ci = 0; ci < d.Ci; ++ci) {
        const double* xc = x + static_cast<size_t>(ci) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                double* row = cols + (static_cast<size_t>(ci) * d.kh * d.kw +
                                      static_cast<size_t>(ki) * d.kw + kj) * L;
                for (int oh = 0; oh < d.Ho; ++oh) {
                    int ih = oh * stride - pad + ki;
                    double* rp = row + static_cast<size_t>(oh) * d.Wo;
                    if (ih < 0 || ih >= d.H) {
                        std::fill(rp, rp + d.Wo, 0.0);
                        continue;
                    }
                    const double* xr = xc + static_cast<size_t>(ih) * d.W;
                    for (int ow = 0; ow < d.Wo; ++ow) {
                        int iw = ow * stride - pad + kj;
                        rp[ow] = (iw >= 0 && iw < d.W) ? xr[iw] : 0.0;
                    }
                }
            }
    }
}

void col2im_add(const double* cols, const ConvDims& d, int stride, int pad, double* gx) {
    const int L = d.Ho * d.Wo;
    for (int ci = 0; ci < d.Ci; ++ci) {
        double* xc = gx + static_cast<size_t>(ci) * d.H * d.W;
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                const double* row = cols + (static_cast<size_t>(ci) * d.kh * d.kw +
                                            static_cast<size_t>(ki) * d.kw + kj) * L;
                for (int oh = 0; oh < d.Ho; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= d.H) continue;
                    double* xr = xc + static_cast<size_t>(ih) * d.W;
                    const double* rp = row + static_cast<size_t>(oh) * d.Wo;
                    for (int ow = 0; ow < d.Wo; ++ow) {
                        int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < d.W) xr[iw] += rp[ow];
                    }
                }
            }
    }
}

Var conv2d_impl(const Var& x, const Var& w, const Var* b, int stride, int pad) {
    ConvDims d = conv_dims(x.value(), w.value(), stride, pad);
    const int K = d.Ci * d.kh * d.kw, L = d.Ho * d.Wo;
    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    std::vector<double> cols(static_cast<size_t>(K) * L);
    CMatMap W(w.value().data(), d.Co, K);
    for (int n = 0; n < d.N; ++n) {
        im2col(x.value().data() + static_cast<size_t>(n) * d.Ci * d.H * d.W, d, stride, pad,
               cols.data());
        CMatMap C(cols.data(), K, L);
        MatMap Y(out.data() + static_cast<size_t>(n) * d.Co * L, d.Co, L);
        Y.noalias() = W * C;
    }
    if (b) {
        const Tensor& bv = b->value();
        if (bv.numel() != static_cast<size_t>(d.Co)) throw ShapeError("conv2d bias mismatch");
        for (int n = 0; n < d.N; ++n)
            for (int co = 0; co < d.Co; ++co) {
                double* p = out.data() + (static_cast<size_t>(n) * d.Co + co) * L;
                for (int i = 0; i < L; ++i) p[i] += bv[co];
            }
    }
    auto xn = x.node(), wn = w.node();
    std::shared_ptr<Node> bn = b ? b->node() : nullptr;
    std::vector<Var> parents = b ? std::vector<Var>{x, w, *b} : std::vector<Var>{x, w};
    return make_node(std::move(out), parents, [xn, wn, bn, d, stride, pad, K, L](Node& nd) {
        std::vector<double> cols(static_cast<size_t>(K) * L);
        std::vector<double> gcols;
        if (xn->requires_grad) gcols.resize(static_cast<size_t>(K) * L);
        MatMap* gw_map = nullptr;
        for (int n = 0; n < d.N; ++n) {
            CMatMap G(nd.grad.data() + static_cast<size_t>(n) * d.Co * L, d.Co, L);
            if (wn->requires_grad || xn->requires_grad)
                im2col(xn->value.data() + static_cast<size_t>(n) * d.Ci * d.H * d.W, d, stride,
                       pad, cols.data());
            if (wn->requires_grad) {
                MatMap GW(wn->ensure_grad().data(), d.Co, K);
                CMatMap C(cols.data(), K, L);
                GW.noalias() += G * C.transpose();
            }
            if (xn->requires_grad) {
                CMatMap W(wn->value.data(), d.Co, K);
                MatMap GC(gcols.data(), K, L);
                GC.noalias() = W.transpose() * G;
                col2im_add(gcols.data(), d, stride, pad,
                           xn->ensure_grad().data() + static_cast<size_t>(n) * d.Ci * d.H * d.W);
            }
            if (bn && bn->requires_grad) {
                Tensor& gb = bn->ensure_grad();
                for (int co = 0; co < d.Co; ++co) {
                    const double* p = nd.grad.data() + (static_cast<size_t>(n) * d.Co + co) * L;
                    double s = 0.0;
                    for (int i = 0; i < L; ++i) s += p[i];
                    gb[co] += s;
                }
            }
        }
        (void)gw_map;
    });
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    return conv2d_impl(x, w, &b, stride, pad);
}

Var conv2d_nobias(const Var& x, const Var& w, int stride, int pad) {
    return conv2d_impl(x, w, nullptr, stride, pad);
}

Var depthwise_conv_valid(const Var& x, const Var& kernel) {
    const Tensor& v = x.value();
    const Tensor& k = kernel.value();
    if (v.ndim() != 4 || k.ndim() != 2) throw ShapeError("depthwise_conv_valid shapes");
    int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
    int kh = k.dim(0), kw = k.dim(1);
    int Ho = H - kh + 1, Wo = W - kw + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("depthwise_conv_valid kernel larger than input");
    Tensor out({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = v.data() + (static_cast<size_t>(n) * C + c) * H * W;
            double* op = out.data() + (static_cast<size_t>(n) * C + c) * Ho * Wo;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    double s = 0.0;
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj)
                            s += k.at2(ki, kj) * xp[(i + ki) * W + (j + kj)];
                    op[i * Wo + j] = s;
                }
        }
    auto xn = x.node(), kn = kernel.node();
    return make_node(std::move(out), {x, kernel}, [xn, kn, N, C, H, W, kh, kw, Ho, Wo](Node& nd) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* gp = nd.grad.data() + (static_cast<size_t>(n) * C + c) * Ho * Wo;
                if (xn->requires_grad) {
                    double* gx = xn->ensure_grad().data() + (static_cast<size_t>(n) * C + c) * H * W;
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) {
                            double gv = gp[i * Wo + j];
                            for (int ki = 0; ki < kh; ++ki)
                                for (int kj = 0; kj < kw; ++kj)
                                    gx[(i + ki) * W + (j + kj)] += gv * kn->value.at2(ki, kj);
                        }
                }
                if (kn->requires_grad) {
                    Tensor& gk = kn->ensure_grad();
                    const double* xp = xn->value.data() + (static_cast<size_t>(n) * C + c) * H * W;
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                            double s = 0.0;
                            for (int i = 0; i < Ho; ++i)
                                for (int j = 0; j < Wo; ++j)
                                    s += xp[(i + ki) * W + (j + kj)] * gp[i * Wo + j];
                            gk.at2(ki, kj) += s;
                        }
                }
            }
    });
}

Var pad_replicate(const Var& x, int p) {
    const Tensor& v = x.value();
    if (v.ndim() != 4) throw ShapeError("pad_replicate expects NCHW");
    int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
    int Hp = H + 2 * p, Wp = W + 2 * p;
    Tensor out({N, C, Hp, Wp});
    auto clampi = [](int i, int lo, int hi) { return i < lo ? lo : (i > hi ? hi : i); };
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = v.data() + (static_cast<size_t>(n) * C + c) * H * W;
            double* op = out.data() + (static_cast<size_t>(n) * C + c) * Hp * Wp;
            for (int i = 0; i < Hp; ++i) {
                int si = clampi(i - p, 0, H - 1);
                for (int j = 0; j < Wp; ++j) op[i * Wp + j] = xp[si * W + clampi(j - p, 0, W - 1)];
            }
        }
    auto xn = x.node();
    return make_node(std::move(out), {x}, [xn, N, C, H, W, p, Hp, Wp](Node& nd) {
        if (!xn->requires_grad) return;
        auto clampi = [](int i, int lo, int hi) { return i < lo ? lo : (i > hi ? hi : i); };
        Tensor& g = xn->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* gx = g.data() + (static_cast<size_t>(n) * C + c) * H * W;
                const double* gp = nd.grad.data() + (static_cast<size_t>(n) * C + c) * Hp * Wp;
                for (int i = 0; i < Hp; ++i) {
                    int si = clampi(i - p, 0, H - 1);
                    for (int j = 0; j < Wp; ++j)
                        gx[si * W + clampi(j - p, 0, W - 1)] += gp[i * Wp + j];
                }
            }
    });
}

Var pixel_shuffle2(const Var& x) {
    const Tensor& v = x.value();
    if (v.ndim() != 4 || v.dim(1) % 4 != 0) throw ShapeError("pixel_shuffle2 expects [N,4C,H,W]");
    int N = v.dim(0), C4 = v.dim(1), H = v.dim(2), W = v.dim(3);
    int C = C4 / 4;
    Tensor out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int di = 0; di < 2; ++di)
                for (int dj = 0; dj < 2; ++dj) {
                    const double* xp =
                        v.data() + ((static_cast<size_t>(n) * C4 + c * 4 + di * 2 + dj) * H * W);
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            out.at4(n, c, 2 * i + di, 2 * j + dj) = xp[i * W + j];
                }
    auto xn = x.node();
    return make_node(std::move(out), {x}, [xn, N, C4, H, W, C](Node& nd) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj) {
                        double* gp =
                            g.data() + ((static_cast<size_t>(n) * C4 + c * 4 + di * 2 + dj) * H * W);
                        for (int i = 0; i < H; ++i)
                            for (int j = 0; j < W; ++j)
                                gp[i * W + j] += nd.grad.at4(n, c, 2 * i + di, 2 * j + dj);
                    }
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    const Tensor& v = x.value();
    if (v.ndim() != 4) throw ShapeError("add_channel_bias expects NCHW");
    int N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
    if (b.value().numel() != static_cast<size_t>(C)) throw ShapeError("bias size mismatch");
    Tensor out(v.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = v.data() + (static_cast<size_t>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<size_t>(n) * C + c) * HW;
            double bv = b.value()[c];
            for (int i = 0; i < HW; ++i) op[i] = xp[i] + bv;
        }
    auto xn = x.node(), bn = b.node();
    return make_node(std::move(out), {x, b}, [xn, bn, N, C, HW](Node& nd) {
        if (xn->requires_grad) {
            Tensor& g = xn->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (bn->requires_grad) {
            Tensor& gb = bn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = nd.grad.data() + (static_cast<size_t>(n) * C + c) * HW;
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += gp[i];
                    gb[c] += s;
                }
        }
    });
}

Var add_sample_channel_bias(const Var& x, const Var& b) {
    const Tensor& v = x.value();
    if (v.ndim() != 4 || b.value().ndim() != 2) throw ShapeError("add_sample_channel_bias shapes");
    int N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
    if (b.value().dim(0) != N || b.value().dim(1) != C)
        throw ShapeError("add_sample_channel_bias bias mismatch");
    Tensor out(v.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = v.data() + (static_cast<size_t>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<size_t>(n) * C + c) * HW;
            double bv = b.value().at2(n, c);
            for (int i = 0; i < HW; ++i) op[i] = xp[i] + bv;
        }
    auto xn = x.node(), bn = b.node();
    return make_node(std::move(out), {x, b}, [xn, bn, N, C, HW](Node& nd) {
        if (xn->requires_grad) {
            Tensor& g = xn->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (bn->requires_grad) {
            Tensor& gb = bn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = nd.grad.data() + (static_cast<size_t>(n) * C + c) * HW;
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += gp[i];
                    gb.at2(n, c) += s;
                }
        }
    });
}

Var channel_affine(const Var& x, const Tensor& scale, const Tensor& shift) {
    const Tensor& v = x.value();
    if (v.ndim() != 4) throw ShapeError("channel_affine expects NCHW");
    int N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
    if (scale.numel() != static_cast<size_t>(C) || shift.numel() != static_cast<size_t>(C))
        throw ShapeError("channel_affine stats mismatch");
    Tensor out(v.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = v.data() + (static_cast<size_t>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) op[i] = xp[i] * scale[c] + shift[c];
        }
    auto xn = x.node();
    Tensor sc = scale;
    return make_node(std::move(out), {x}, [xn, sc, N, C, HW](Node& nd) {
        if (!xn->requires_grad) return;
        Tensor& g = xn->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* gx = g.data() + (static_cast<size_t>(n) * C + c) * HW;
                const double* gp = nd.grad.data() + (static_cast<size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) gx[i] += gp[i] * sc[c];
            }
    });
}

}  // namespace stealth::ad
