#pragma once

#include <string>
#include <vector>

#include "evresid/autodiff.hpp"
#include "evresid/model.hpp"

// Graph-building blocks of the two-stage estimator, templated on the scalar
// type so the same code serves 64-bit training/verification and 32-bit
// inference. All convolutions use replicate padding: a spatially constant
// input stays constant through every block.

namespace evresid {

template <typename T>
VarT<T> corr_window_lookup(VarT<T> volume, VarT<T> coords, int radius, bool coord_grad);

// Expected offset under a softmax over the similarity window: a soft-argmax
// displacement readout in window pixel units, (2, fh, fw) per window block.
// Channels out: expected x offset, expected y offset, expected similarity
// (a match confidence), all under softmax(beta * corr) over the window.
template <typename T>
VarT<T> window_soft_argmax(VarT<T> corr, int radius, T beta) {
    GraphT<T>& g = *corr.g;
    const int64_t win = 2 * radius + 1;
    const int64_t wc = win * win;
    const int64_t fh = corr.val().shape()[1], fw = corr.val().shape()[2];
    if (corr.val().shape()[0] != wc)
        throw std::runtime_error("window_soft_argmax: channel count != window size");
    const int64_t P = fh * fw;
    TensorT<T> out(Shape{3, fh, fw});
    const TensorT<T>& cv = corr.val();
    std::vector<T> prob(static_cast<size_t>(wc));
    for (int64_t i = 0; i < P; ++i) {
        T mx = cv[i];
        for (int64_t c = 1; c < wc; ++c) mx = std::max(mx, cv[c * P + i]);
        T z = T(0);
        for (int64_t c = 0; c < wc; ++c) {
            prob[size_t(c)] = std::exp(beta * (cv[c * P + i] - mx));
            z += prob[size_t(c)];
        }
        T ex = T(0), ey = T(0), ec = T(0);
        for (int64_t c = 0; c < wc; ++c) {
            const T p = prob[size_t(c)] / z;
            ex += p * T(c % win - radius);
            ey += p * T(c / win - radius);
            ec += p * cv[c * P + i];
        }
        out[i] = ex;
        out[P + i] = ey;
        out[2 * P + i] = ec;
    }
    const int32_t ic = corr.id, io = int32_t(g.size());
    return g.make(std::move(out), {corr}, [ic, io, wc, win, radius, P, beta](GraphT<T>& g) {
        if (!g.requires_grad(ic)) return;
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& cv = g.value(ic);
        const TensorT<T>& vo = g.value(io);
        TensorT<T>& gc = g.grad(ic);
        std::vector<T> prob(static_cast<size_t>(wc));
        for (int64_t i = 0; i < P; ++i) {
            const T gox = go[i], goy = go[P + i], goc = go[2 * P + i];
            if (gox == T(0) && goy == T(0) && goc == T(0)) continue;
            T mx = cv[i];
            for (int64_t c = 1; c < wc; ++c) mx = std::max(mx, cv[c * P + i]);
            T z = T(0);
            for (int64_t c = 0; c < wc; ++c) {
                prob[size_t(c)] = std::exp(beta * (cv[c * P + i] - mx));
                z += prob[size_t(c)];
            }
            const T ox = vo[i], oy = vo[P + i], oc = vo[2 * P + i];
            for (int64_t c = 0; c < wc; ++c) {
                const T p = prob[size_t(c)] / z;
                gc[c * P + i] += beta * p *
                                     ((T(c % win - radius) - ox) * gox +
                                      (T(c / win - radius) - oy) * goy) +
                                 p * (T(1) + beta * (cv[c * P + i] - oc)) * goc;
            }
        }
    });
}

// Density-weighted global correlation vote, computed on plain values with
// an argmax + parabola subpixel fit. Used as a fixed estimator inside the
// update loops (it enters graphs as a constant).
template <typename T>
inline void correlation_vote(const std::vector<const TensorT<T>*>& vol_levels,
                             const TensorT<T>& coords_base, const TensorT<T>& density,
                             int radius, double& vx, double& vy) {
    const int64_t win = 2 * radius + 1;
    const int64_t P = density.numel();
    double best_support = -1;
    vx = vy = 0;
    double lscale = 1.0;
    for (size_t l = 0; l < vol_levels.size(); ++l) {
        const TensorT<T>& vol = *vol_levels[l];
        const int64_t Hl = vol.shape()[1], Wl = vol.shape()[2];
        std::vector<double> pooled(size_t(win * win));
        double wsum = 0;
        for (int64_t i = 0; i < P; ++i) {
            const double w = double(density[i]);
            if (w <= 0.02) continue;
            const double cx = double(coords_base[i]) / lscale;
            const double cy = double(coords_base[P + i]) / lscale;
            const T* plane = vol.data() + i * Hl * Wl;
            int64_t o = 0;
            for (int64_t dy = -radius; dy <= radius; ++dy)
                for (int64_t dx = -radius; dx <= radius; ++dx, ++o) {
                    double x = std::min(std::max(cx + dx, 0.0), double(Wl - 1));
                    double y = std::min(std::max(cy + dy, 0.0), double(Hl - 1));
                    const int64_t x0 = std::min(int64_t(x), Wl >= 2 ? Wl - 2 : int64_t(0));
                    const int64_t y0 = std::min(int64_t(y), Hl >= 2 ? Hl - 2 : int64_t(0));
                    const double fx = x - x0, fy = y - y0;
                    const int64_t x1 = std::min(x0 + 1, Wl - 1);
                    const int64_t y1 = std::min(y0 + 1, Hl - 1);
                    pooled[size_t(o)] +=
                        w * ((1 - fy) * ((1 - fx) * double(plane[y0 * Wl + x0]) +
                                         fx * double(plane[y0 * Wl + x1])) +
                             fy * ((1 - fx) * double(plane[y1 * Wl + x0]) +
                                   fx * double(plane[y1 * Wl + x1])));
                }
            wsum += w;
        }
        if (wsum <= 0) continue;
        for (auto& v : pooled) v /= wsum;
        int64_t bi = 0;
        for (int64_t o = 1; o < win * win; ++o)
            if (pooled[size_t(o)] > pooled[size_t(bi)]) bi = o;
        const int64_t px = bi % win, py = bi / win;
        auto parab = [&](int64_t c0, int64_t cm, int64_t cp, bool at_edge) {
            if (at_edge) return 0.0;
            const double d = pooled[size_t(cm)] - 2 * pooled[size_t(c0)] + pooled[size_t(cp)];
            if (d >= -1e-12) return 0.0;
            double off = 0.5 * (pooled[size_t(cm)] - pooled[size_t(cp)]) / d;
            return std::min(std::max(off, -0.5), 0.5);
        };
        const double sx = parab(bi, bi - 1, bi + 1, px == 0 || px == win - 1);
        const double sy = parab(bi, bi - win, bi + win, py == 0 || py == win - 1);
        const bool saturated = (px == 0 || px == win - 1 || py == 0 || py == win - 1);
        // peak height relative to the window mean, a support score
        double mean = 0;
        for (auto& v : pooled) mean += v;
        mean /= double(win * win);
        const double support = (pooled[size_t(bi)] - mean) * (saturated ? 0.5 : 1.0);
        if (l == 0 && !saturated) {
            vx = (double(px - radius) + sx) * lscale;
            vy = (double(py - radius) + sy) * lscale;
            return; // the finest level wins unless its window saturates
        }
        if (support > best_support) {
            best_support = support;
            vx = (double(px - radius) + sx) * lscale;
            vy = (double(py - radius) + sy) * lscale;
        }
        lscale *= 2.0;
    }
}

template <typename T>
struct ModelOps {
    const ModelConfig& cfg;
    GraphT<T>& g;
    ParamBinding<T> p;

    static constexpr kernels::PadMode kPad = kernels::PadMode::kReplicate;

    ModelOps(const ModelConfig& c, GraphT<T>& graph, ParamStore& store)
        : cfg(c), g(graph), p(graph, store) {}

    VarT<T> blur_kernel_;
    VarT<T> blur_bias_;
    VarT<T> density_gate_; // (1, fh, fw), event-evidence weights for voting

    // offset-independent voting weights from the reference voxel grid
    void set_density_from(const Tensor& ref_voxel) {
        const int64_t B = ref_voxel.shape()[0];
        const int64_t H = ref_voxel.shape()[1], W = ref_voxel.shape()[2];
        const int64_t ds = cfg.downsample;
        const int64_t fh = H / ds, fw = W / ds;
        Tensor m(Shape{1, fh, fw});
        for (int64_t y = 0; y < fh; ++y)
            for (int64_t x = 0; x < fw; ++x) {
                double acc = 0;
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t yy = y * ds; yy < (y + 1) * ds; ++yy)
                        for (int64_t xx = x * ds; xx < (x + 1) * ds; ++xx)
                            acc += std::abs(ref_voxel.at3(b, yy, xx));
                m[y * fw + x] = acc / (acc + 2.0);
            }
        density_gate_ = leaf_const(m);
    }

    VarT<T> density_gate() {
        if (!density_gate_.valid())
            throw std::runtime_error("density gate not set for this sample");
        return density_gate_;
    }

    VarT<T> conv(VarT<T> x, const std::string& name, int64_t stride, int64_t pad) {
        return conv2d(x, p(name + ".w"), p(name + ".b"), stride, pad, kPad);
    }

    // stop-gradient: the value feeds forward, nothing flows back
    VarT<T> detach(VarT<T> x) {
        if (!cfg.detach_estimators) return x;
        return g.leaf(x.val(), false);
    }

    VarT<T> leaf_const(const Tensor& t) {
        if constexpr (std::is_same_v<T, double>) {
            return g.constant(t);
        } else {
            return g.constant(t.template cast<T>());
        }
    }

    // matching features are unit-normalized per position and rescaled so the
    // Eq.-style /sqrt(D) similarity lands in [-1, 1]
    VarT<T> encode(VarT<T> voxel) {
        VarT<T> x = relu(conv(voxel, "enc.c1", 2, 1));
        x = relu(conv(x, "enc.c2", cfg.downsample == 4 ? 2 : 1, 1));
        x = conv(x, "enc.c3", 1, 1);
        x = sub_spatial_mean(x);
        // soft normalization: low-energy (event-free) positions stay near
        // zero so their similarities cannot fake confident matches
        return scale(l2_normalize_ch(x, T(0.5)), T(std::pow(double(cfg.feat_dim), 0.25)));
    }

    VarT<T> context(VarT<T> voxel) {
        VarT<T> x = relu(conv(voxel, "ctx.c1", 2, 1));
        x = relu(conv(x, "ctx.c2", cfg.downsample == 4 ? 2 : 1, 1));
        return relu(conv(x, "ctx.c3", 1, 1));
    }

    VarT<T> global_h0(VarT<T> ctx) { return tanh_op(conv(ctx, "ginit", 1, 1)); }
    VarT<T> refiner_h0(VarT<T> ctx) { return tanh_op(conv(ctx, "rinit", 1, 1)); }

    // all-pairs similarity pyramid between reference and one target
    std::vector<VarT<T>> cost_volume(VarT<T> e0, VarT<T> en) {
        const int64_t D = e0.val().shape()[0];
        const int64_t fh = e0.val().shape()[1], fw = e0.val().shape()[2];
        const int64_t P = fh * fw;
        VarT<T> a = reshape(e0, Shape{D, P});
        VarT<T> b = reshape(en, Shape{D, P});
        VarT<T> c = scale(matmul_at(a, b), T(1.0 / std::sqrt(double(D))));
        std::vector<VarT<T>> levels;
        levels.push_back(reshape(c, Shape{P, fh, fw}));
        for (int l = 1; l < cfg.pyramid_levels; ++l)
            levels.push_back(avg_pool2(levels.back()));
        return levels;
    }

    VarT<T> coords_grid(int64_t fh, int64_t fw) {
        Tensor grid(Shape{2, fh, fw});
        for (int64_t y = 0; y < fh; ++y)
            for (int64_t x = 0; x < fw; ++x) {
                grid.at3(0, y, x) = double(x);
                grid.at3(1, y, x) = double(y);
            }
        return leaf_const(grid);
    }

    // window similarities around flow-shifted coordinates, concatenated
    // across pyramid levels -> (levels*(2r+1)^2, fh, fw)
    VarT<T> lookup(const std::vector<VarT<T>>& volume, VarT<T> flow) {
        const int64_t fh = flow.val().shape()[1], fw = flow.val().shape()[2];
        VarT<T> base = add(coords_grid(fh, fw), flow);
        std::vector<VarT<T>> per_level;
        T inv = T(1);
        for (size_t l = 0; l < volume.size(); ++l) {
            VarT<T> coords = scale(base, inv);
            per_level.push_back(
                corr_window_lookup(volume[l], coords, cfg.lookup_radius, cfg.coord_grad));
            inv *= T(0.5);
        }
        return concat_ch(per_level);
    }

    // per-level window readout: [dx, dy, confidence] with the offsets in
    // level-0 feature pixels
    VarT<T> window_readout(VarT<T> corr) {
        const int64_t wc = (2 * cfg.lookup_radius + 1) * (2 * cfg.lookup_radius + 1);
        std::vector<VarT<T>> per_level;
        T level_scale = T(1);
        for (int l = 0; l < cfg.pyramid_levels; ++l) {
            VarT<T> block = slice_ch(corr, l * wc, (l + 1) * wc);
            VarT<T> r = window_soft_argmax(block, cfg.lookup_radius, T(16));
            per_level.push_back(scale(slice_ch(r, 0, 2), level_scale));
            per_level.push_back(slice_ch(r, 2, 3));
            level_scale *= T(2);
        }
        return concat_ch(per_level);
    }

    // motion feature: encoded similarities and flow, with the raw flow and
    // the window readout (offsets + confidence) appended as explicit channels
    VarT<T> motion_features(VarT<T> corr, VarT<T> flow) {
        VarT<T> c = relu(conv(corr, "me.corr", 1, 0));
        VarT<T> f = relu(conv(flow, "me.flow", 1, 1));
        VarT<T> m = relu(conv(concat_ch<T>({c, f}), "me.mix", 1, 1));
        return concat_ch<T>({m, flow, window_readout(corr)});
    }

    // readout channels appended at the tail of a motion feature
    VarT<T> mf_readout(VarT<T> mf) {
        return slice_ch(mf, cfg.motion_dim - 3 * cfg.pyramid_levels, cfg.motion_dim);
    }

    // confidence-gated displacement estimate from one readout block:
    // mean over levels of gate(conf) * (dx, dy)
    VarT<T> gated_step(VarT<T> readout) {
        VarT<T> acc;
        for (int l = 0; l < cfg.pyramid_levels; ++l) {
            VarT<T> d = slice_ch(readout, 3 * l, 3 * l + 2);
            VarT<T> cr = relu(slice_ch(readout, 3 * l + 2, 3 * l + 3));
            VarT<T> c = soft_gate(mul(cr, cr), T(0.015));
            VarT<T> g2 = concat_ch<T>({c, c});
            VarT<T> term = mul(d, g2);
            acc = (l == 0) ? term : add(acc, term);
        }
        return scale(acc, T(1.0 / cfg.pyramid_levels));
    }

    // mean confidence gate across levels, (1, fh, fw)
    VarT<T> gate_avg(VarT<T> readout) {
        VarT<T> acc;
        for (int l = 0; l < cfg.pyramid_levels; ++l) {
            VarT<T> cr = relu(slice_ch(readout, 3 * l + 2, 3 * l + 3));
            VarT<T> c = soft_gate(mul(cr, cr), T(0.015));
            acc = (l == 0) ? c : add(acc, c);
        }
        return scale(acc, T(1.0 / cfg.pyramid_levels));
    }

    // fixed single-channel gaussian blur used by the normalized propagation
    VarT<T> blur1(VarT<T> x) {
        if (!blur_kernel_.valid()) {
            const int k = 9;
            const double sigma = 2.0;
            Tensor w(Shape{1, 1, k, k});
            double sum = 0;
            for (int y = 0; y < k; ++y)
                for (int xk = 0; xk < k; ++xk) {
                    const double dy = y - k / 2, dx = xk - k / 2;
                    const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                    w[y * k + xk] = v;
                    sum += v;
                }
            for (int64_t i = 0; i < w.numel(); ++i) w[i] /= sum;
            blur_kernel_ = leaf_const(w);
            blur_bias_ = leaf_const(Tensor(Shape{1}));
        }
        return conv2d(x, blur_kernel_, blur_bias_, 1, 4, kernels::PadMode::kZero);
    }

    // normalized-convolution propagation: spread confidence-weighted steps
    // into low-confidence neighborhoods
    VarT<T> propagate_step(VarT<T> weighted_step, VarT<T> gate) {
        VarT<T> den = affine(blur1(gate), T(1), T(0.01));
        VarT<T> px = div(blur1(slice_ch(weighted_step, 0, 1)), den);
        VarT<T> py = div(blur1(slice_ch(weighted_step, 1, 2)), den);
        return concat_ch<T>({px, py});
    }

    VarT<T> aggregate(const std::vector<VarT<T>>& mfs) {
        VarT<T> x = relu(conv(concat_ch(mfs), "agg.c1", 1, 0));
        return relu(conv(x, "agg.c2", 1, 1));
    }

    GruParams<T> gru_params(const std::string& prefix) {
        GruParams<T> gp;
        gp.wz = p(prefix + ".wz.w");
        gp.bz = p(prefix + ".wz.b");
        gp.wr = p(prefix + ".wr.w");
        gp.br = p(prefix + ".wr.b");
        gp.wh = p(prefix + ".wh.w");
        gp.bh = p(prefix + ".wh.b");
        gp.pad_mode = kPad;
        return gp;
    }

    // learned update steps are tanh-bounded so a miscalibrated head cannot
    // push the flow far off the structural estimate
    VarT<T> flow_head(VarT<T> hidden, VarT<T> extras) {
        VarT<T> x = concat_ch<T>({hidden, extras});
        return scale(tanh_op(conv(relu(conv(x, "ghead.c1", 1, 1)), "ghead.c2", 1, 1)),
                     T(0.3));
    }
    VarT<T> delta_head(VarT<T> hidden, VarT<T> extras) {
        VarT<T> x = concat_ch<T>({hidden, extras});
        return scale(tanh_op(conv(relu(conv(x, "rhead.c1", 1, 1)), "rhead.c2", 1, 1)),
                     T(1.25));
    }

    // feature-resolution flow -> full resolution (values scaled by r)
    VarT<T> upsample_to_full(VarT<T> flow_feat) {
        return scale(upsample_bilinear(flow_feat, cfg.downsample), T(cfg.downsample));
    }

    struct GlobalTrace {
        VarT<T> flow;
        std::vector<VarT<T>> iter_flows;
        VarT<T> hidden;
    };

    // one target's frame-level vote at the current flow, plain values
    void target_vote(const std::vector<VarT<T>>& volume, const TensorT<T>& flow_value,
                     double frac, double& vx, double& vy) {
        const int64_t fh = flow_value.shape()[1], fw = flow_value.shape()[2];
        const int64_t P = fh * fw;
        TensorT<T> coords(Shape{2, fh, fw});
        for (int64_t y = 0; y < fh; ++y)
            for (int64_t x = 0; x < fw; ++x) {
                coords[y * fw + x] = T(x) + T(frac) * flow_value[y * fw + x];
                coords[P + y * fw + x] = T(y) + T(frac) * flow_value[P + y * fw + x];
            }
        std::vector<const TensorT<T>*> levels;
        for (const auto& v : volume) levels.push_back(&v.val());
        correlation_vote(levels, coords, density_gate().val(), cfg.lookup_radius, vx, vy);
    }

    // consensus LTR step: per-target frame-level votes on the residual
    // displacement, rescaled by N/n and combined with n^2 weights; a fixed
    // estimator that enters the graph as a constant
    VarT<T> consensus_step(const std::vector<std::vector<VarT<T>>>& volumes,
                           const TensorT<T>& flow_value) {
        const int N = int(volumes.size());
        const int64_t fh = flow_value.shape()[1], fw = flow_value.shape()[2];
        double wsum = 0;
        for (int n = 1; n <= N; ++n) wsum += double(n) * double(n);
        double ax = 0, ay = 0;
        for (int n = 1; n <= N; ++n) {
            double vx = 0, vy = 0;
            target_vote(volumes[size_t(n - 1)], flow_value, double(n) / double(N), vx, vy);
            const double w = double(n) * double(n) / wsum * double(N) / double(n);
            ax += w * vx;
            ay += w * vy;
        }
        Tensor step(Shape{2, fh, fw});
        for (int64_t i = 0; i < fh * fw; ++i) {
            step[i] = ax;
            step[fh * fw + i] = ay;
        }
        return leaf_const(step);
    }

    GlobalTrace global_stage(const std::vector<std::vector<VarT<T>>>& volumes, VarT<T> ctx,
                             int iters) {
        const int64_t fh = ctx.val().shape()[1], fw = ctx.val().shape()[2];
        GlobalTrace trace;
        trace.flow = leaf_const(Tensor(Shape{2, fh, fw}));
        trace.hidden = global_h0(ctx);
        const GruParams<T> gp = gru_params("ggru");
        const int N = int(volumes.size());
        for (int j = 0; j < iters; ++j) {
            std::vector<VarT<T>> mfs;
            for (int n = 1; n <= N; ++n) {
                VarT<T> fn = scale(trace.flow, T(double(n) / double(N)));
                VarT<T> corr = lookup(volumes[size_t(n - 1)], fn);
                mfs.push_back(motion_features(corr, fn));
            }
            VarT<T> mfa = aggregate(mfs);
            VarT<T> x = concat_ch<T>({mfa, ctx});
            trace.hidden = gru_cell(trace.hidden, x, gp);
            // structural step toward the frame-level correlation vote plus a
            // bounded learned correction; without fixed estimators the
            // pipeline is purely learned (and exactly differentiable)
            VarT<T> consensus = cfg.detach_estimators
                                    ? consensus_step(volumes, trace.flow.val())
                                    : leaf_const(Tensor(Shape{2, fh, fw}));
            VarT<T> extras = concat_ch<T>({mfa, consensus});
            trace.flow = add(add(trace.flow, consensus),
                             flow_head(trace.hidden, extras));
            trace.iter_flows.push_back(trace.flow);
        }
        return trace;
    }

    // one extra update of the global stage whose lookups are driven by an
    // externally supplied flow (the residual-stage output)
    VarT<T> global_update_from(const std::vector<std::vector<VarT<T>>>& volumes, VarT<T> ctx,
                               VarT<T> hidden, VarT<T> flow) {
        const int N = int(volumes.size());
        std::vector<VarT<T>> mfs;
        for (int n = 1; n <= N; ++n) {
            VarT<T> fn = scale(flow, T(double(n) / double(N)));
            VarT<T> corr = lookup(volumes[size_t(n - 1)], fn);
            mfs.push_back(motion_features(corr, fn));
        }
        VarT<T> mfa = aggregate(mfs);
        VarT<T> x = concat_ch<T>({mfa, ctx});
        VarT<T> h = gru_cell(hidden, x, gru_params("ggru"));
        const int64_t fh = ctx.val().shape()[1], fw = ctx.val().shape()[2];
        VarT<T> consensus = cfg.detach_estimators
                                ? consensus_step(volumes, flow.val())
                                : leaf_const(Tensor(Shape{2, fh, fw}));
        VarT<T> extras = concat_ch<T>({mfa, consensus});
        return add(add(flow, consensus), flow_head(h, extras));
    }

    struct RefineTrace {
        std::vector<VarT<T>> states;
        VarT<T> hidden;
    };

    // shared-weights refiner; state is velocity-domain when the velocity
    // transform is on, flow-domain otherwise
    RefineTrace residual_refine(const std::vector<VarT<T>>& volume, VarT<T> ctx, VarT<T> hidden,
                                VarT<T> state0, double tau, int iters) {
        RefineTrace trace;
        trace.hidden = hidden;
        VarT<T> state = state0;
        const int64_t fh = ctx.val().shape()[1], fw = ctx.val().shape()[2];
        const GruParams<T> gp = gru_params("rgru");
        for (int i = 0; i < iters; ++i) {
            VarT<T> flow = cfg.velocity_transform ? scale(state, T(tau)) : state;
            VarT<T> corr = lookup(volume, flow);
            VarT<T> mf = motion_features(corr, flow);
            VarT<T> x = concat_ch<T>({mf, ctx, state, flow});
            trace.hidden = gru_cell(trace.hidden, x, gp);
            // displacement hints live in the lookup (flow) domain; map them
            // back to the state domain. One local (propagated) and one
            // frame-level (vote) estimate.
            VarT<T> ro = mf_readout(mf);
            VarT<T> local = detach(propagate_step(gated_step(ro), gate_avg(ro)));
            Tensor vote_t(Shape{2, fh, fw});
            if (cfg.detach_estimators) {
                double vvx = 0, vvy = 0;
                target_vote(volume, flow.val(), 1.0, vvx, vvy);
                for (int64_t i = 0; i < fh * fw; ++i) {
                    vote_t[i] = vvx;
                    vote_t[fh * fw + i] = vvy;
                }
            }
            VarT<T> vote = leaf_const(vote_t);
            VarT<T> hint = concat_ch<T>({local, vote});
            if (cfg.velocity_transform) hint = scale(hint, T(1.0 / tau));
            state = add(state, delta_head(trace.hidden, concat_ch<T>({mf, hint})));
            trace.states.push_back(state);
        }
        return trace;
    }
};

// Similarity window gather: volume (P, Hl, Wl) holds one target-space plane
// per reference position; coords (2, fh, fw) are level-space positions with
// P == fh*fw. Output ((2r+1)^2, fh, fw).
template <typename T>
VarT<T> corr_window_lookup(VarT<T> volume, VarT<T> coords, int radius, bool coord_grad) {
    GraphT<T>& g = *volume.g;
    const int64_t P = volume.val().shape()[0];
    const int64_t Hl = volume.val().shape()[1], Wl = volume.val().shape()[2];
    const int64_t fh = coords.val().shape()[1], fw = coords.val().shape()[2];
    if (P != fh * fw) throw std::runtime_error("corr_window_lookup: P != fh*fw");
    const int64_t win = 2 * radius + 1;
    const int64_t wc = win * win;

    TensorT<T> out(Shape{wc, fh, fw});
    const TensorT<T>& vol = volume.val();
    const TensorT<T>& cv = coords.val();
    for (int64_t i = 0; i < P; ++i) {
        const T* plane = vol.data() + i * Hl * Wl;
        const T cx = cv[i];
        const T cy = cv[P + i];
        int64_t o = 0;
        for (int64_t dy = -radius; dy <= radius; ++dy) {
            for (int64_t dx = -radius; dx <= radius; ++dx, ++o) {
                T x = std::min(std::max(cx + T(dx), T(0)), T(Wl - 1));
                T y = std::min(std::max(cy + T(dy), T(0)), T(Hl - 1));
                const int64_t x0 = std::min(int64_t(x), Wl >= 2 ? Wl - 2 : int64_t(0));
                const int64_t y0 = std::min(int64_t(y), Hl >= 2 ? Hl - 2 : int64_t(0));
                const T fx = x - T(x0);
                const T fy = y - T(y0);
                const int64_t x1 = std::min(x0 + 1, Wl - 1);
                const int64_t y1 = std::min(y0 + 1, Hl - 1);
                out[o * P + i] = (T(1) - fy) * ((T(1) - fx) * plane[y0 * Wl + x0] +
                                                fx * plane[y0 * Wl + x1]) +
                                 fy * ((T(1) - fx) * plane[y1 * Wl + x0] +
                                       fx * plane[y1 * Wl + x1]);
            }
        }
    }

    const int32_t iv = volume.id, ic = coords.id, io = int32_t(g.size());
    return g.make(std::move(out), {volume, coords},
                  [iv, ic, io, P, Hl, Wl, radius, coord_grad](GraphT<T>& g) {
        const TensorT<T>& go = g.grad(io);
        const TensorT<T>& vol = g.value(iv);
        const TensorT<T>& cv = g.value(ic);
        const bool want_vol = g.requires_grad(iv);
        const bool want_coord = g.requires_grad(ic) && coord_grad;
        if (!want_vol && !want_coord) return;
        TensorT<T>* gv = want_vol ? &g.grad(iv) : nullptr;
        TensorT<T>* gc = want_coord ? &g.grad(ic) : nullptr;
        for (int64_t i = 0; i < P; ++i) {
            const T* plane = vol.data() + i * Hl * Wl;
            T* gplane = gv ? gv->data() + i * Hl * Wl : nullptr;
            const T cx = cv[i];
            const T cy = cv[P + i];
            T dx_acc = T(0), dy_acc = T(0);
            int64_t o = 0;
            for (int64_t dy = -radius; dy <= radius; ++dy) {
                for (int64_t dx = -radius; dx <= radius; ++dx, ++o) {
                    const T gov = go[o * P + i];
                    if (gov == T(0)) continue;
                    T x = cx + T(dx);
                    T y = cy + T(dy);
                    const bool in_x = (x > T(0) && x < T(Wl - 1));
                    const bool in_y = (y > T(0) && y < T(Hl - 1));
                    x = std::min(std::max(x, T(0)), T(Wl - 1));
                    y = std::min(std::max(y, T(0)), T(Hl - 1));
                    const int64_t x0 = std::min(int64_t(x), Wl >= 2 ? Wl - 2 : int64_t(0));
                    const int64_t y0 = std::min(int64_t(y), Hl >= 2 ? Hl - 2 : int64_t(0));
                    const T fx = x - T(x0);
                    const T fy = y - T(y0);
                    const int64_t x1 = std::min(x0 + 1, Wl - 1);
                    const int64_t y1 = std::min(y0 + 1, Hl - 1);
                    const T v00 = plane[y0 * Wl + x0], v01 = plane[y0 * Wl + x1];
                    const T v10 = plane[y1 * Wl + x0], v11 = plane[y1 * Wl + x1];
                    if (gv) {
                        gplane[y0 * Wl + x0] += gov * (T(1) - fx) * (T(1) - fy);
                        gplane[y0 * Wl + x1] += gov * fx * (T(1) - fy);
                        gplane[y1 * Wl + x0] += gov * (T(1) - fx) * fy;
                        gplane[y1 * Wl + x1] += gov * fx * fy;
                    }
                    if (gc) {
                        if (in_x) dx_acc += gov * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                        if (in_y) dy_acc += gov * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                }
            }
            if (gc) {
                (*gc)[i] += dx_acc;
                (*gc)[P + i] += dy_acc;
            }
        }
    });
}

} // namespace evresid
