#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "evresid/nn_kernels.hpp"
#include "evresid/tensor.hpp"

// Reverse-mode differentiation over a dynamically recorded tape. A graph
// owns every intermediate value of one forward pass; node creation order is
// a valid topological order, so backward() is a single reverse sweep.
// Graphs are confined to one execution context; parameters live outside
// (see params.hpp) and enter a graph as leaves.

namespace evresid {

template <typename T>
class GraphT;

template <typename T>
struct VarT {
    GraphT<T>* g = nullptr;
    int32_t id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const TensorT<T>& val() const { return g->value(id); }
    const Shape& shape() const { return g->value(id).shape(); }
};

template <typename T>
class GraphT {
public:
    using BackwardFn = std::function<void(GraphT&)>;

    struct Node {
        TensorT<T> value;
        TensorT<T> grad; // lazily allocated
        bool requires_grad = false;
        BackwardFn backward;
    };

    VarT<T> leaf(TensorT<T> value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad && recording_, nullptr});
        return VarT<T>{this, int32_t(nodes_.size() - 1)};
    }
    VarT<T> constant(TensorT<T> value) { return leaf(std::move(value), false); }

    VarT<T> make(TensorT<T> value, std::vector<VarT<T>> parents, BackwardFn backward) {
        bool rg = false;
        if (recording_)
            for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : nullptr});
        return VarT<T>{this, int32_t(nodes_.size() - 1)};
    }

    const TensorT<T>& value(int32_t id) const { return nodes_[id].value; }
    bool requires_grad(int32_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer, allocated (zero) on first touch.
    TensorT<T>& grad(int32_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty() && n.value.numel() > 0) n.grad = TensorT<T>(n.value.shape());
        return n.grad;
    }
    bool has_grad(int32_t id) const { return !nodes_[id].grad.empty(); }

    void backward(VarT<T> loss) {
        if (loss.g != this) throw std::runtime_error("backward: var from another graph");
        if (nodes_[loss.id].value.numel() != 1)
            throw std::runtime_error("backward: loss must be scalar");
        grad(loss.id)[0] = T(1);
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this);
        }
    }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    bool recording_ = true;
};

using Graph = GraphT<double>;
using Var = VarT<double>;

namespace detail {
template <typename T>
void acc(TensorT<T>& dst, const TensorT<T>& src) {
    T* d = dst.data();
    const T* s = src.data();
    for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}
} // namespace detail

// ---- elementwise ----

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    if (a.val().shape() != b.val().shape()) throw std::runtime_error("add: shape mismatch");
    GraphT<T>& g = *a.g;
    TensorT<T> out = a.val();
    detail::acc(out, b.val());
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        if (g.requires_grad(ia)) detail::acc(g.grad(ia), go);
        if (g.requires_grad(ib)) detail::acc(g.grad(ib), go);
    });
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    if (a.val().shape() != b.val().shape()) throw std::runtime_error("sub: shape mismatch");
    GraphT<T>& g = *a.g;
    TensorT<T> out = a.val();
    {
        T* d = out.data();
        const T* s = b.val().data();
        for (int64_t i = 0; i < out.numel(); ++i) d[i] -= s[i];
    }
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        if (g.requires_grad(ia)) detail::acc(g.grad(ia), go);
        if (g.requires_grad(ib)) {
            TensorT<T>& gb = g.grad(ib);
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
        }
    });
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    if (a.val().shape() != b.val().shape()) throw std::runtime_error("mul: shape mismatch");
    GraphT<T>& g = *a.g;
    TensorT<T> out(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& va = g.value(ia);
        const TensorT<T>& vb = g.value(ib);
        if (g.requires_grad(ia)) {
            TensorT<T>& ga = g.grad(ia);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * vb[i];
        }
        if (g.requires_grad(ib)) {
            TensorT<T>& gb = g.grad(ib);
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += go[i] * va[i];
        }
    });
}

// elementwise quotient; the caller keeps the denominator strictly positive
template <typename T>
VarT<T> div(VarT<T> a, VarT<T> b) {
    if (a.val().shape() != b.val().shape()) throw std::runtime_error("div: shape mismatch");
    GraphT<T>& g = *a.g;
    TensorT<T> out(a.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] / b.val()[i];
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& va = g.value(ia);
        const TensorT<T>& vb = g.value(ib);
        if (g.requires_grad(ia)) {
            TensorT<T>& ga = g.grad(ia);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] / vb[i];
        }
        if (g.requires_grad(ib)) {
            TensorT<T>& gb = g.grad(ib);
            for (int64_t i = 0; i < gb.numel(); ++i)
                gb[i] -= go[i] * va[i] / (vb[i] * vb[i]);
        }
    });
}

// a*x + b, elementwise with scalar constants
template <typename T>
VarT<T> affine(VarT<T> x, T a, T b) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x.val()[i] + b;
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, a](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += a * go[i];
    });
}

template <typename T>
VarT<T> scale(VarT<T> x, T a) {
    return affine(x, a, T(0));
}

template <typename T>
VarT<T> relu(VarT<T> x) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] > T(0) ? x.val()[i] : T(0);
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vx = g.value(ix);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i)
            if (vx[i] > T(0)) gx[i] += go[i];
    });
}

template <typename T>
VarT<T> tanh_op(VarT<T> x) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(x.val()[i]);
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vo = g.value(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[i] * (T(1) - vo[i] * vo[i]);
    });
}

template <typename T>
VarT<T> sigmoid_op(VarT<T> x) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-x.val()[i]));
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vo = g.value(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[i] * vo[i] * (T(1) - vo[i]);
    });
}

template <typename T>
VarT<T> abs_op(VarT<T> x) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(x.val()[i]);
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vx = g.value(ix);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i)
            gx[i] += go[i] * (vx[i] > T(0) ? T(1) : (vx[i] < T(0) ? T(-1) : T(0)));
    });
}

// Subtract every channel's spatial mean (keeps matching features free of a
// shared bias component).
template <typename T>
VarT<T> sub_spatial_mean(VarT<T> x) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    const int64_t P = H * W;
    TensorT<T> out(x.val().shape());
    for (int64_t c = 0; c < C; ++c) {
        T mean = T(0);
        for (int64_t i = 0; i < P; ++i) mean += x.val()[c * P + i];
        mean /= T(P);
        for (int64_t i = 0; i < P; ++i) out[c * P + i] = x.val()[c * P + i] - mean;
    }
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, C, P](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t c = 0; c < C; ++c) {
            T mean = T(0);
            for (int64_t i = 0; i < P; ++i) mean += go[c * P + i];
            mean /= T(P);
            for (int64_t i = 0; i < P; ++i) gx[c * P + i] += go[c * P + i] - mean;
        }
    });
}

// Soft channel normalization at every spatial position: x / (|x| + kappa).
// With kappa near zero this is unit normalization; larger kappa keeps
// low-energy positions near zero instead of inflating them to unit length.
template <typename T>
VarT<T> l2_normalize_ch(VarT<T> x, T kappa = T(1e-8)) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    const int64_t P = H * W;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < P; ++i) {
        T sq = T(0);
        for (int64_t c = 0; c < C; ++c) sq += x.val()[c * P + i] * x.val()[c * P + i];
        const T inv = T(1) / (std::sqrt(sq) + kappa);
        for (int64_t c = 0; c < C; ++c) out[c * P + i] = x.val()[c * P + i] * inv;
    }
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, C, P, kappa](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vx = g.value(ix);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < P; ++i) {
            T sq = T(0), dot = T(0);
            for (int64_t c = 0; c < C; ++c) {
                sq += vx[c * P + i] * vx[c * P + i];
                dot += vx[c * P + i] * go[c * P + i];
            }
            const T r = std::sqrt(sq);
            const T inv = T(1) / (r + kappa);
            const T rr = std::max(r, T(1e-12));
            for (int64_t c = 0; c < C; ++c)
                gx[c * P + i] +=
                    go[c * P + i] * inv - vx[c * P + i] * dot / (rr * (r + kappa) * (r + kappa));
        }
    });
}

// x / (x + c) for x > 0, 0 otherwise: a saturating gate in [0, 1).
template <typename T>
VarT<T> soft_gate(VarT<T> x, T c) {
    GraphT<T>& g = *x.g;
    TensorT<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T v = x.val()[i];
        out[i] = v > T(0) ? v / (v + c) : T(0);
    }
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, c](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vx = g.value(ix);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) {
            const T v = vx[i];
            if (v > T(0)) gx[i] += go[i] * c / ((v + c) * (v + c));
        }
    });
}

// ---- reductions ----

template <typename T>
VarT<T> sum_all(VarT<T> x) {
    GraphT<T>& g = *x.g;
    T acc = T(0);
    for (int64_t i = 0; i < x.val().numel(); ++i) acc += x.val()[i];
    TensorT<T> out(Shape{1});
    out[0] = acc;
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const T go = g.grad(io)[0];
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go;
    });
}

template <typename T>
VarT<T> mean_all(VarT<T> x) {
    const int64_t n = x.val().numel();
    return scale(sum_all(x), T(1) / T(n));
}

// multiply (C,H,W) by a single-channel (1,H,W) weight map
template <typename T>
VarT<T> mul_bc_ch(VarT<T> x, VarT<T> w) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    if (w.val().shape() != Shape{1, H, W}) throw std::runtime_error("mul_bc_ch: weight shape");
    const int64_t P = H * W;
    TensorT<T> out(x.val().shape());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < P; ++i) out[c * P + i] = x.val()[c * P + i] * w.val()[i];
    const int32_t ix = x.id, iw = w.id, io = int32_t(g.size());
    return g.make(std::move(out), {x, w}, [ix, iw, io, C, P](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vx = g.value(ix);
        const TensorT<T>& vw = g.value(iw);
        if (g.requires_grad(ix)) {
            TensorT<T>& gx = g.grad(ix);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < P; ++i) gx[c * P + i] += go[c * P + i] * vw[i];
        }
        if (g.requires_grad(iw)) {
            TensorT<T>& gw = g.grad(iw);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < P; ++i) gw[i] += go[c * P + i] * vx[c * P + i];
        }
    });
}

// spatial mean per channel: (C,H,W) -> (C,1,1)
template <typename T>
VarT<T> global_avg_sp(VarT<T> x) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    const int64_t P = H * W;
    TensorT<T> out(Shape{C, 1, 1});
    for (int64_t c = 0; c < C; ++c) {
        T acc = T(0);
        for (int64_t i = 0; i < P; ++i) acc += x.val()[c * P + i];
        out[c] = acc / T(P);
    }
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, C, P](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t c = 0; c < C; ++c) {
            const T v = go[c] / T(P);
            for (int64_t i = 0; i < P; ++i) gx[c * P + i] += v;
        }
    });
}

// (C,1,1) -> (C,H,W)
template <typename T>
VarT<T> broadcast_sp(VarT<T> x, int64_t H, int64_t W) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0];
    TensorT<T> out(Shape{C, H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i) out[c * H * W + i] = x.val()[c];
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, C, H, W](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t c = 0; c < C; ++c) {
            T acc = T(0);
            for (int64_t i = 0; i < H * W; ++i) acc += go[c * H * W + i];
            gx[c] += acc;
        }
    });
}

// (1,H,W) -> (C,H,W)
template <typename T>
VarT<T> broadcast_ch(VarT<T> x, int64_t C) {
    GraphT<T>& g = *x.g;
    const int64_t H = x.val().shape()[1], W = x.val().shape()[2];
    const int64_t P = H * W;
    TensorT<T> out(Shape{C, H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < P; ++i) out[c * P + i] = x.val()[i];
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, C, P](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < P; ++i) gx[i] += go[c * P + i];
    });
}

// ---- structure ----

template <typename T>
VarT<T> concat_ch(const std::vector<VarT<T>>& xs) {
    if (xs.empty()) throw std::runtime_error("concat_ch: empty");
    GraphT<T>& g = *xs[0].g;
    const int64_t H = xs[0].val().shape()[1], W = xs[0].val().shape()[2];
    int64_t C = 0;
    for (const auto& x : xs) {
        if (x.val().shape().rank() != 3 || x.val().shape()[1] != H || x.val().shape()[2] != W)
            throw std::runtime_error("concat_ch: spatial mismatch");
        C += x.val().shape()[0];
    }
    TensorT<T> out(Shape{C, H, W});
    int64_t off = 0;
    std::vector<int32_t> ids;
    std::vector<int64_t> chans;
    for (const auto& x : xs) {
        const int64_t n = x.val().numel();
        std::copy(x.val().data(), x.val().data() + n, out.data() + off);
        off += n;
        ids.push_back(x.id);
        chans.push_back(x.val().shape()[0]);
    }
    const int32_t io = int32_t(g.size());
    return g.make(std::move(out), xs, [ids, chans, io, H, W](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        int64_t off = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            const int64_t n = chans[k] * H * W;
            if (g.requires_grad(ids[k])) {
                TensorT<T>& gx = g.grad(ids[k]);
                for (int64_t i = 0; i < n; ++i) gx[i] += go[off + i];
            }
            off += n;
        }
    });
}

template <typename T>
VarT<T> slice_ch(VarT<T> x, int64_t c0, int64_t c1) {
    GraphT<T>& g = *x.g;
    const int64_t H = x.val().shape()[1], W = x.val().shape()[2];
    TensorT<T> out(Shape{c1 - c0, H, W});
    std::copy(x.val().data() + c0 * H * W, x.val().data() + c1 * H * W, out.data());
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io, c0, H, W](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < go.numel(); ++i) gx[c0 * H * W + i] += go[i];
    });
}

// ---- linear algebra ----

// (m,k) x (k,n) -> (m,n)
template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
    GraphT<T>& g = *a.g;
    const int64_t m = a.val().shape()[0], k = a.val().shape()[1];
    const int64_t k2 = b.val().shape()[0], n = b.val().shape()[1];
    if (k != k2) throw std::runtime_error("matmul: inner dim mismatch");
    TensorT<T> out(Shape{m, n});
    kernels::gemm_acc(a.val().data(), b.val().data(), out.data(), m, k, n);
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io, m, k, n](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        if (g.requires_grad(ia)) // dA = dC * B^T
            kernels::gemm_bt_acc(go.data(), g.value(ib).data(), g.grad(ia).data(), m, n, k);
        if (g.requires_grad(ib)) // dB = A^T * dC
            kernels::gemm_at_acc(g.value(ia).data(), go.data(), g.grad(ib).data(), k, m, n);
    });
}

// a^T b with a stored (k,m): (k,m),(k,n) -> (m,n)
template <typename T>
VarT<T> matmul_at(VarT<T> a, VarT<T> b) {
    GraphT<T>& g = *a.g;
    const int64_t k = a.val().shape()[0], m = a.val().shape()[1];
    const int64_t k2 = b.val().shape()[0], n = b.val().shape()[1];
    if (k != k2) throw std::runtime_error("matmul_at: inner dim mismatch");
    TensorT<T> out(Shape{m, n});
    kernels::gemm_at_acc(a.val().data(), b.val().data(), out.data(), m, k, n);
    const int32_t ia = a.id, ib = b.id, io = int32_t(g.size());
    return g.make(std::move(out), {a, b}, [ia, ib, io, m, k, n](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        if (g.requires_grad(ia)) // dA = B * dC^T, dA is (k,m)
            kernels::gemm_bt_acc(g.value(ib).data(), go.data(), g.grad(ia).data(), k, n, m);
        if (g.requires_grad(ib)) // dB = A * dC, (k,m)x(m,n)
            kernels::gemm_acc(g.value(ia).data(), go.data(), g.grad(ib).data(), k, m, n);
    });
}

// ---- conv / sampling ----

template <typename T>
VarT<T> conv2d(VarT<T> x, VarT<T> w, VarT<T> b, int64_t stride = 1, int64_t pad = 0,
               kernels::PadMode mode = kernels::PadMode::kZero) {
    GraphT<T>& g = *x.g;
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    const int64_t Cout = w.val().shape()[0];
    const int64_t kh = w.val().shape()[2], kw = w.val().shape()[3];
    const bool unit = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
    TensorT<T> cols;
    TensorT<T> out = kernels::conv2d_forward(x.val(), w.val(), b.val(), stride, pad, mode,
                                             unit ? nullptr : &cols);
    const int64_t Ho = out.shape()[1], Wo = out.shape()[2];
    const int32_t ix = x.id, iw = w.id, ib = b.id, io = int32_t(g.size());
    auto cols_shared = std::make_shared<TensorT<T>>(std::move(cols));
    return g.make(std::move(out), {x, w, b},
                  [ix, iw, ib, io, C, H, W, Cout, kh, kw, stride, pad, mode, Ho, Wo, unit,
                   cols_shared](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const int64_t kdim = C * kh * kw;
        const int64_t plane = Ho * Wo;
        const T* cols_ptr = unit ? g.value(ix).data() : cols_shared->data();
        if (g.requires_grad(ib)) {
            TensorT<T>& gb = g.grad(ib);
            for (int64_t co = 0; co < Cout; ++co) {
                T acc = T(0);
                const T* p = go.data() + co * plane;
                for (int64_t i = 0; i < plane; ++i) acc += p[i];
                gb[co] += acc;
            }
        }
        if (g.requires_grad(iw)) // dW = dOut * cols^T
            kernels::gemm_bt_acc(go.data(), cols_ptr, g.grad(iw).data(), Cout, plane, kdim);
        if (g.requires_grad(ix)) {
            // dCols = W^T * dOut, then scatter back
            TensorT<T> dcols(Shape{kdim, plane});
            kernels::gemm_at_acc(g.value(iw).data(), go.data(), dcols.data(), kdim, Cout, plane);
            if (unit) {
                detail::acc(g.grad(ix), dcols);
            } else {
                kernels::col2im_acc(dcols.data(), C, H, W, kh, kw, stride, pad, mode,
                                    g.grad(ix).data());
            }
        }
    });
}

// value-preserving reshape
template <typename T>
VarT<T> reshape(VarT<T> x, Shape shape) {
    GraphT<T>& g = *x.g;
    if (shape.numel() != x.val().numel()) throw std::runtime_error("reshape: numel mismatch");
    TensorT<T> out(shape, x.val().vec());
    const int32_t ix = x.id, io = int32_t(g.size());
    return g.make(std::move(out), {x}, [ix, io](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += go[i];
    });
}

// Bilinear sampling of field (C,H,W) at coords (2,Hq,Wq); gradients flow to
// both the field and the coordinates unless stop_coord_grad is set.
template <typename T>
VarT<T> bilinear_sample(VarT<T> field, VarT<T> coords, bool stop_coord_grad = false) {
    GraphT<T>& g = *field.g;
    TensorT<T> out = kernels::bilinear_sample_forward(field.val(), coords.val());
    const int32_t ifd = field.id, ic = coords.id, io = int32_t(g.size());
    const int64_t C = field.val().shape()[0], H = field.val().shape()[1],
                  W = field.val().shape()[2];
    const int64_t q = coords.val().shape()[1] * coords.val().shape()[2];
    return g.make(std::move(out), {field, coords},
                  [ifd, ic, io, C, H, W, q, stop_coord_grad](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& cv = g.value(ic);
        const bool want_field = g.requires_grad(ifd);
        const bool want_coord = g.requires_grad(ic) && !stop_coord_grad;
        if (!want_field && !want_coord) return;
        const TensorT<T>& fv = g.value(ifd);
        TensorT<T>* gf = want_field ? &g.grad(ifd) : nullptr;
        TensorT<T>* gc = want_coord ? &g.grad(ic) : nullptr;
        for (int64_t i = 0; i < q; ++i) {
            T x = cv[i];
            T y = cv[q + i];
            const bool in_x = (x > T(0) && x < T(W - 1));
            const bool in_y = (y > T(0) && y < T(H - 1));
            x = std::min(std::max(x, T(0)), T(W - 1));
            y = std::min(std::max(y, T(0)), T(H - 1));
            const int64_t x0 = std::min(int64_t(x), W - 2 >= 0 ? W - 2 : 0);
            const int64_t y0 = std::min(int64_t(y), H - 2 >= 0 ? H - 2 : 0);
            const T fx = x - T(x0);
            const T fy = y - T(y0);
            const int64_t x1 = std::min(x0 + 1, W - 1);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            T dx = T(0), dy = T(0);
            for (int64_t c = 0; c < C; ++c) {
                const T gov = go[c * q + i];
                if (gov == T(0)) continue;
                if (gf) {
                    T* p = gf->data() + c * H * W;
                    p[y0 * W + x0] += gov * (T(1) - fx) * (T(1) - fy);
                    p[y0 * W + x1] += gov * fx * (T(1) - fy);
                    p[y1 * W + x0] += gov * (T(1) - fx) * fy;
                    p[y1 * W + x1] += gov * fx * fy;
                }
                if (gc) {
                    const T* p = fv.data() + c * H * W;
                    const T v00 = p[y0 * W + x0], v01 = p[y0 * W + x1];
                    const T v10 = p[y1 * W + x0], v11 = p[y1 * W + x1];
                    dx += gov * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += gov * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if (gc) {
                // clamped coordinates saturate: no gradient outside the frame
                if (in_x) (*gc)[i] += dx;
                if (in_y) (*gc)[q + i] += dy;
            }
        }
    });
}

template <typename T>
VarT<T> upsample_bilinear(VarT<T> x, int64_t s) {
    GraphT<T>& g = *x.g;
    if (s < 1) throw std::runtime_error("upsample_bilinear: factor must be >= 1");
    TensorT<T> out = kernels::upsample_bilinear_forward(x.val(), s);
    const int32_t ix = x.id, io = int32_t(g.size());
    const int64_t C = x.val().shape()[0], h = x.val().shape()[1], w = x.val().shape()[2];
    return g.make(std::move(out), {x}, [ix, io, C, h, w, s](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        const int64_t H = h * s, W = w * s;
        for (int64_t oy = 0; oy < H; ++oy) {
            T sy = (T(oy) + T(0.5)) / T(s) - T(0.5);
            sy = std::min(std::max(sy, T(0)), T(h - 1));
            const int64_t y0 = std::min(int64_t(sy), h - 2 >= 0 ? h - 2 : 0);
            const int64_t y1 = std::min(y0 + 1, h - 1);
            const T fy = sy - T(y0);
            for (int64_t ox = 0; ox < W; ++ox) {
                T sx = (T(ox) + T(0.5)) / T(s) - T(0.5);
                sx = std::min(std::max(sx, T(0)), T(w - 1));
                const int64_t x0 = std::min(int64_t(sx), w - 2 >= 0 ? w - 2 : 0);
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const T fx = sx - T(x0);
                for (int64_t c = 0; c < C; ++c) {
                    const T gov = go[(c * H + oy) * W + ox];
                    if (gov == T(0)) continue;
                    T* p = gx.data() + c * h * w;
                    p[y0 * w + x0] += gov * (T(1) - fy) * (T(1) - fx);
                    p[y0 * w + x1] += gov * (T(1) - fy) * fx;
                    p[y1 * w + x0] += gov * fy * (T(1) - fx);
                    p[y1 * w + x1] += gov * fy * fx;
                }
            }
        }
    });
}

template <typename T>
VarT<T> avg_pool2(VarT<T> x) {
    GraphT<T>& g = *x.g;
    TensorT<T> out = kernels::avg_pool2_forward(x.val());
    const int32_t ix = x.id, io = int32_t(g.size());
    const int64_t C = x.val().shape()[0], H = x.val().shape()[1], W = x.val().shape()[2];
    return g.make(std::move(out), {x}, [ix, io, C, H, W](GraphT<T>& g) {
        if (!g.requires_grad(ix)) return;
        const TensorT<T>& go = g.grad(io);
        TensorT<T>& gx = g.grad(ix);
        const int64_t Ho = H / 2, Wo = W / 2;
        for (int64_t c = 0; c < C; ++c) {
            const T* p = go.data() + c * Ho * Wo;
            T* q = gx.data() + c * H * W;
            for (int64_t y = 0; y < Ho; ++y)
                for (int64_t x2 = 0; x2 < Wo; ++x2) {
                    const T v = p[y * Wo + x2] * T(0.25);
                    q[(2 * y) * W + 2 * x2] += v;
                    q[(2 * y) * W + 2 * x2 + 1] += v;
                    q[(2 * y + 1) * W + 2 * x2] += v;
                    q[(2 * y + 1) * W + 2 * x2 + 1] += v;
                }
        }
    });
}

// ---- composite blocks ----

template <typename T>
struct GruParams {
    VarT<T> wz, bz, wr, br, wh, bh; // conv weights over concat(hidden, input)
    kernels::PadMode pad_mode = kernels::PadMode::kZero;
};

// h' = (1-z) ⊙ h + z ⊙ h~ ; z=1 hands the state to the candidate.
template <typename T>
VarT<T> gru_cell(VarT<T> hidden, VarT<T> input, const GruParams<T>& p) {
    VarT<T> hx = concat_ch<T>({hidden, input});
    VarT<T> z = sigmoid_op(conv2d(hx, p.wz, p.bz, 1, 1, p.pad_mode));
    VarT<T> r = sigmoid_op(conv2d(hx, p.wr, p.br, 1, 1, p.pad_mode));
    VarT<T> rhx = concat_ch<T>({mul(r, hidden), input});
    VarT<T> hc = tanh_op(conv2d(rhx, p.wh, p.bh, 1, 1, p.pad_mode));
    VarT<T> keep = mul(affine(z, T(-1), T(1)), hidden);
    return add(keep, mul(z, hc));
}

} // namespace evresid
