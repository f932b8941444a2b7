#include "evresid/evalkit.hpp"

#include <cmath>
#include <fstream>

#include "evresid/binio.hpp"

namespace evresid {

namespace {

// splat value at fractional position with bilinear weights, clipped at borders
inline void splat(Tensor& img, double x, double y, double v) {
    const int64_t H = img.shape()[0], W = img.shape()[1];
    const int64_t x0 = int64_t(std::floor(x));
    const int64_t y0 = int64_t(std::floor(y));
    for (int64_t yy = y0; yy <= y0 + 1; ++yy) {
        if (yy < 0 || yy >= H) continue;
        const double wy = 1.0 - std::abs(y - double(yy));
        if (wy <= 0) continue;
        for (int64_t xx = x0; xx <= x0 + 1; ++xx) {
            if (xx < 0 || xx >= W) continue;
            const double wx = 1.0 - std::abs(x - double(xx));
            if (wx <= 0) continue;
            img[yy * W + xx] += v * wy * wx;
        }
    }
}

inline void sample2(const Tensor& field, double x, double y, double& u, double& v) {
    const int64_t H = field.shape()[1], W = field.shape()[2];
    x = std::min(std::max(x, 0.0), double(W - 1));
    y = std::min(std::max(y, 0.0), double(H - 1));
    const int64_t x0 = std::min(int64_t(x), W >= 2 ? W - 2 : int64_t(0));
    const int64_t y0 = std::min(int64_t(y), H >= 2 ? H - 2 : int64_t(0));
    const double fx = x - double(x0);
    const double fy = y - double(y0);
    const int64_t x1 = std::min(x0 + 1, W - 1);
    const int64_t y1 = std::min(y0 + 1, H - 1);
    auto bilerp = [&](int64_t c) {
        const double* p = field.data() + c * H * W;
        return (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
               fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
    };
    u = bilerp(0);
    v = bilerp(1);
}

inline double sample1(const Tensor& field, double x, double y) {
    const int64_t H = field.shape()[1], W = field.shape()[2];
    x = std::min(std::max(x, 0.0), double(W - 1));
    y = std::min(std::max(y, 0.0), double(H - 1));
    const int64_t x0 = std::min(int64_t(x), W >= 2 ? W - 2 : int64_t(0));
    const int64_t y0 = std::min(int64_t(y), H >= 2 ? H - 2 : int64_t(0));
    const double fx = x - double(x0);
    const double fy = y - double(y0);
    const int64_t x1 = std::min(x0 + 1, W - 1);
    const int64_t y1 = std::min(y0 + 1, H - 1);
    const double* p = field.data();
    return (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
           fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
}

// splat `payload` carried by `carrier` displacement (both (2,H,W) at source
// pixels); weighted average at landing points.
struct Propagated {
    Tensor field; // (2,H,W)
    Tensor mask;  // (1,H,W)
};
Propagated propagate(const Tensor& carrier, const Tensor& payload, double eps) {
    const int64_t H = carrier.shape()[1], W = carrier.shape()[2];
    Tensor num(Shape{2, H, W});
    Tensor den(Shape{H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            const double gx = double(x) + carrier.at3(0, y, x);
            const double gy = double(y) + carrier.at3(1, y, x);
            const double pu = payload.at3(0, y, x);
            const double pv = payload.at3(1, y, x);
            const int64_t x0 = int64_t(std::floor(gx));
            const int64_t y0 = int64_t(std::floor(gy));
            for (int64_t yy = y0; yy <= y0 + 1; ++yy) {
                if (yy < 0 || yy >= H) continue;
                const double wy = 1.0 - std::abs(gy - double(yy));
                if (wy <= 0) continue;
                for (int64_t xx = x0; xx <= x0 + 1; ++xx) {
                    if (xx < 0 || xx >= W) continue;
                    const double wx = 1.0 - std::abs(gx - double(xx));
                    if (wx <= 0) continue;
                    const double w = wy * wx;
                    num.at3(0, yy, xx) += w * pu;
                    num.at3(1, yy, xx) += w * pv;
                    den[yy * W + xx] += w;
                }
            }
        }
    Propagated out;
    out.field = Tensor(Shape{2, H, W});
    out.mask = Tensor(Shape{1, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        if (den[i] >= eps) {
            out.field[i] = num[i] / den[i];
            out.field[H * W + i] = num[H * W + i] / den[i];
            out.mask[i] = 1.0;
        }
    }
    return out;
}

} // namespace

BackwardFlow forward_to_backward(const FlowField& fwd, double eps) {
    Propagated p = propagate(fwd.data, fwd.data, eps);
    BackwardFlow out;
    out.flow.t_a = fwd.t_b;
    out.flow.t_b = fwd.t_a;
    out.flow.data = Tensor(fwd.data.shape());
    for (int64_t i = 0; i < p.field.numel(); ++i) out.flow.data[i] = -p.field[i];
    out.mask = std::move(p.mask);
    return out;
}

Iwe render_iwe(const EventStream& events, const std::vector<FlowField>& flows, WarpMode mode,
               bool signed_polarity) {
    if (flows.empty()) throw FormatError("render_iwe: no flows given");
    const int64_t t_start = flows.front().t_a;
    for (const FlowField& f : flows)
        if (f.t_a != t_start) throw FormatError("render_iwe: flows must share the start time");
    const int64_t t_end = flows.back().t_b;
    if (t_end <= t_start) throw FormatError("render_iwe: empty time cover");
    const int64_t H = events.height, W = events.width;

    Iwe out;
    out.image = Tensor(Shape{H, W});

    if (mode == WarpMode::kLtrLinear) {
        const FlowField& full = flows.back();
        BackwardFlow bwd = forward_to_backward(full);
        const double span = double(t_end - t_start);
        for (const Event& e : events.events) {
            if (e.t < t_start || e.t > t_end) continue;
            ++out.events_used;
            const double alpha = double(e.t - t_start) / span;
            double u, v;
            sample2(bwd.flow.data, double(e.x), double(e.y), u, v);
            const double m = sample1(bwd.mask, double(e.x), double(e.y));
            double px = double(e.x), py = double(e.y);
            if (m > 0.5) { // invalid backward pixels keep identity
                px += alpha * u;
                py += alpha * v;
            }
            splat(out.image, px, py, signed_polarity ? double(e.p) : 1.0);
        }
        return out;
    }

    // piecewise: per-segment backward flows at each boundary, composed to t_start
    const size_t M = flows.size();
    std::vector<Propagated> seg(M);
    Tensor zero(flows[0].data.shape());
    for (size_t i = 0; i < M; ++i) {
        const Tensor& prev = (i == 0) ? zero : flows[i - 1].data;
        Tensor payload(flows[i].data.shape());
        for (int64_t j = 0; j < payload.numel(); ++j)
            payload[j] = flows[i].data[j] - prev[j];
        seg[i] = propagate(flows[i].data, payload, 1e-6);
        for (int64_t j = 0; j < seg[i].field.numel(); ++j) seg[i].field[j] = -seg[i].field[j];
    }
    std::vector<int64_t> bounds(M + 1);
    bounds[0] = t_start;
    for (size_t i = 0; i < M; ++i) {
        bounds[i + 1] = flows[i].t_b;
        if (bounds[i + 1] <= bounds[i])
            throw FormatError("render_iwe: flow end times must be increasing");
    }

    for (const Event& e : events.events) {
        if (e.t < t_start || e.t > t_end) continue;
        ++out.events_used;
        double px = double(e.x), py = double(e.y);
        if (e.t > t_start) {
            size_t si = 0;
            while (si + 1 < M && e.t > bounds[si + 1]) ++si;
            const double u_frac =
                double(e.t - bounds[si]) / double(bounds[si + 1] - bounds[si]);
            double u, v;
            sample2(seg[si].field, px, py, u, v);
            if (sample1(seg[si].mask, px, py) > 0.5) {
                px += u_frac * u;
                py += u_frac * v;
            }
            for (size_t j = si; j-- > 0;) {
                sample2(seg[j].field, px, py, u, v);
                if (sample1(seg[j].mask, px, py) > 0.5) {
                    px += u;
                    py += v;
                }
            }
        }
        splat(out.image, px, py, signed_polarity ? double(e.p) : 1.0);
    }
    return out;
}

double population_variance(const Tensor& image) {
    const int64_t n = image.numel();
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += image[i];
    mean /= double(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = image[i] - mean;
        var += d * d;
    }
    return var / double(n);
}

double fwl(const EventStream& events, const std::vector<FlowField>& flows, WarpMode mode,
           bool signed_polarity) {
    Iwe warped = render_iwe(events, flows, mode, signed_polarity);
    std::vector<FlowField> zero_flows;
    FlowField zf;
    zf.t_a = flows.front().t_a;
    zf.t_b = flows.back().t_b;
    zf.data = Tensor(flows.back().data.shape());
    zero_flows.push_back(std::move(zf));
    Iwe identity = render_iwe(events, zero_flows, WarpMode::kLtrLinear, signed_polarity);
    const double base = population_variance(identity.image);
    if (base <= 0.0) throw FormatError("fwl undefined: identity warp has zero variance");
    return population_variance(warped.image) / base;
}

double epe(const FlowField& estimate, const FlowField& gt, const Tensor& mask) {
    if (estimate.data.shape() != gt.data.shape())
        throw FormatError("epe: flow shapes differ");
    const int64_t H = gt.data.shape()[1], W = gt.data.shape()[2];
    double acc = 0;
    int64_t count = 0;
    for (int64_t i = 0; i < H * W; ++i) {
        if (mask[i] <= 0.5) continue;
        const double du = estimate.data[i] - gt.data[i];
        const double dv = estimate.data[H * W + i] - gt.data[H * W + i];
        acc += std::sqrt(du * du + dv * dv);
        ++count;
    }
    if (count == 0) throw FormatError("epe: empty valid mask");
    return acc / double(count);
}

double out3(const FlowField& estimate, const FlowField& gt, const Tensor& mask) {
    if (estimate.data.shape() != gt.data.shape())
        throw FormatError("out3: flow shapes differ");
    const int64_t H = gt.data.shape()[1], W = gt.data.shape()[2];
    int64_t bad = 0, count = 0;
    for (int64_t i = 0; i < H * W; ++i) {
        if (mask[i] <= 0.5) continue;
        const double du = estimate.data[i] - gt.data[i];
        const double dv = estimate.data[H * W + i] - gt.data[H * W + i];
        if (std::sqrt(du * du + dv * dv) > 3.0) ++bad;
        ++count;
    }
    if (count == 0) throw FormatError("out3: empty valid mask");
    return 100.0 * double(bad) / double(count);
}

WarpComparison compare_warp(const EventStream& events, const FlowField& fwd,
                            bool signed_polarity) {
    WarpComparison cmp;
    std::vector<FlowField> flows{fwd};
    cmp.fwl_propagated = fwl(events, flows, WarpMode::kLtrLinear, signed_polarity);

    // straightforward warp: negate the forward flow at the event's location
    const int64_t t_start = fwd.t_a, t_end = fwd.t_b;
    const double span = double(t_end - t_start);
    Tensor img(Shape{int64_t(events.height), int64_t(events.width)});
    for (const Event& e : events.events) {
        if (e.t < t_start || e.t > t_end) continue;
        const double alpha = double(e.t - t_start) / span;
        double u, v;
        sample2(fwd.data, double(e.x), double(e.y), u, v);
        splat(img, double(e.x) - alpha * u, double(e.y) - alpha * v,
              signed_polarity ? double(e.p) : 1.0);
    }
    std::vector<FlowField> zero_flows;
    FlowField zf;
    zf.t_a = t_start;
    zf.t_b = t_end;
    zf.data = Tensor(fwd.data.shape());
    zero_flows.push_back(std::move(zf));
    Iwe identity = render_iwe(events, zero_flows, WarpMode::kLtrLinear, signed_polarity);
    const double base = population_variance(identity.image);
    if (base <= 0.0) throw FormatError("fwl undefined: identity warp has zero variance");
    cmp.fwl_naive = population_variance(img) / base;
    return cmp;
}

void write_metric_csv(const std::vector<MetricRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "scene,t_a_us,t_b_us,epe,out3,fwl_ltr,fwl_htr,fwl_delta\n";
    auto field = [](double v) { return v < 0 ? std::string() : std::to_string(v); };
    for (const MetricRow& r : rows) {
        os << r.scene << "," << r.t_a << "," << r.t_b << "," << field(r.epe) << ","
           << field(r.out3) << "," << field(r.fwl_ltr) << "," << field(r.fwl_htr) << ",";
        if (r.fwl_ltr >= 0 && r.fwl_htr >= 0) os << std::to_string(r.fwl_htr - r.fwl_ltr);
        os << "\n";
    }
    os.flush();
    if (!os) throw IoError("write failed: " + path);
}

} // namespace evresid
