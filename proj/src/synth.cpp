#include "evresid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "evresid/binio.hpp"
#include "evresid/rng.hpp"

namespace evresid {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

// 2x2 solve of (I + tau*M + s*Ms) x0 = rhs
inline void solve2(const double a11, const double a12, const double a21, const double a22,
                   double rx, double ry, double& x, double& y) {
    const double det = a11 * a22 - a12 * a21;
    if (std::abs(det) < 1e-12) throw FormatError("motion model is singular at query time");
    x = (a22 * rx - a12 * ry) / det;
    y = (-a21 * rx + a11 * ry) / det;
}
} // namespace

void MotionModel::position(double x0, double y0, double tau, double& x, double& y) const {
    const double s = std::sin(kTwoPi * omega * tau);
    x = x0 + (m[0][0] * x0 + m[0][1] * y0 + c[0]) * tau + (ms[0][0] * x0 + ms[0][1] * y0 + b[0]) * s;
    y = y0 + (m[1][0] * x0 + m[1][1] * y0 + c[1]) * tau + (ms[1][0] * x0 + ms[1][1] * y0 + b[1]) * s;
}

void MotionModel::inverse(double x, double y, double tau, double& x0, double& y0) const {
    const double s = std::sin(kTwoPi * omega * tau);
    const double a11 = 1.0 + m[0][0] * tau + ms[0][0] * s;
    const double a12 = m[0][1] * tau + ms[0][1] * s;
    const double a21 = m[1][0] * tau + ms[1][0] * s;
    const double a22 = 1.0 + m[1][1] * tau + ms[1][1] * s;
    solve2(a11, a12, a21, a22, x - c[0] * tau - b[0] * s, y - c[1] * tau - b[1] * s, x0, y0);
}

// ---- ground truth ----

GroundTruthFlow::GroundTruthFlow(SceneSpec spec, std::vector<double> blob_cx,
                                 std::vector<double> blob_cy)
    : spec_(std::move(spec)), blob_cx_(std::move(blob_cx)), blob_cy_(std::move(blob_cy)) {}

double GroundTruthFlow::tau(int64_t t_us) const {
    if (t_us < 0 || t_us > spec_.duration_us)
        throw FormatError("ground-truth query outside scene duration: " + std::to_string(t_us));
    return (double(t_us) - double(spec_.t_k_us)) / spec_.unit_us();
}

bool GroundTruthFlow::on_foreground(double x, double y, double tau_q) const {
    if (spec_.texture.kind == TextureSpec::Kind::kCheckerboard) return true;
    double x0, y0;
    spec_.motion.inverse(x, y, tau_q, x0, y0);
    const double two_s2 = 2.0 * spec_.texture.blob_sigma * spec_.texture.blob_sigma;
    double transparent = 1.0;
    for (size_t i = 0; i < blob_cx_.size(); ++i) {
        const double dx = x0 - blob_cx_[i];
        const double dy = y0 - blob_cy_[i];
        transparent *= 1.0 - std::exp(-(dx * dx + dy * dy) / two_s2);
    }
    return (1.0 - transparent) > 0.05;
}

void GroundTruthFlow::flow_at_point(double x, double y, int64_t t1_us, int64_t t2_us,
                                    double& fx, double& fy) const {
    const double tau1 = tau(t1_us);
    const double tau2 = tau(t2_us);
    const MotionModel& mm =
        on_foreground(x, y, tau1) ? spec_.motion : spec_.background_motion;
    double x0, y0, x2, y2;
    mm.inverse(x, y, tau1, x0, y0);
    mm.position(x0, y0, tau2, x2, y2);
    fx = x2 - x;
    fy = y2 - y;
}

void GroundTruthFlow::velocity_at_point(double x, double y, int64_t t_us, double& vx,
                                        double& vy) const {
    velocity_at_point(x, y, double(t_us), vx, vy);
}

void GroundTruthFlow::velocity_at_point(double x, double y, double t_us, double& vx,
                                        double& vy) const {
    if (t_us < 0 || t_us > double(spec_.duration_us))
        throw FormatError("ground-truth query outside scene duration");
    const double tq = (t_us - double(spec_.t_k_us)) / spec_.unit_us();
    const MotionModel& mm = on_foreground(x, y, tq) ? spec_.motion : spec_.background_motion;
    double x0, y0;
    mm.inverse(x, y, tq, x0, y0);
    const double cs = kTwoPi * mm.omega * std::cos(kTwoPi * mm.omega * tq);
    vx = mm.m[0][0] * x0 + mm.m[0][1] * y0 + mm.c[0] + (mm.ms[0][0] * x0 + mm.ms[0][1] * y0 + mm.b[0]) * cs;
    vy = mm.m[1][0] * x0 + mm.m[1][1] * y0 + mm.c[1] + (mm.ms[1][0] * x0 + mm.ms[1][1] * y0 + mm.b[1]) * cs;
}

FlowField GroundTruthFlow::flow(int64_t t1_us, int64_t t2_us) const {
    const int64_t H = spec_.height, W = spec_.width;
    FlowField out;
    out.t_a = t1_us;
    out.t_b = t2_us;
    out.data = Tensor(Shape{2, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double fx, fy;
            flow_at_point(double(x), double(y), t1_us, t2_us, fx, fy);
            out.data.at3(0, y, x) = fx;
            out.data.at3(1, y, x) = fy;
        }
    return out;
}

Tensor GroundTruthFlow::valid_mask(int64_t t_us) const {
    const int64_t H = spec_.height, W = spec_.width;
    const double tq = tau(t_us);
    Tensor mask(Shape{1, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            mask.at3(0, y, x) = on_foreground(double(x), double(y), tq) ? 1.0 : 0.0;
    return mask;
}

FlowField gt_flow_at(const GroundTruthFlow& gt, int64_t t1_us, int64_t t2_us) {
    return gt.flow(t1_us, t2_us);
}

// ---- rendering ----

namespace {

struct LayerTexture {
    const SceneSpec* spec;
    const std::vector<double>* cx;
    const std::vector<double>* cy;

    // log intensity and coverage of the foreground layer at layer coords
    void eval_fg(double x0, double y0, double& level, double& alpha,
                 const std::vector<double>& amp) const {
        const TextureSpec& tx = spec->texture;
        if (tx.kind == TextureSpec::Kind::kCheckerboard) {
            const double sx = std::tanh(2.0 * std::sin(kTwoPi * x0 / (2.0 * tx.cell)));
            const double sy = std::tanh(2.0 * std::sin(kTwoPi * y0 / (2.0 * tx.cell)));
            level = 0.5 + 0.35 * sx * sy;
            alpha = 1.0;
            return;
        }
        const double two_s2 = 2.0 * tx.blob_sigma * tx.blob_sigma;
        double transparent = 1.0;
        double bump = 0.0;
        for (size_t i = 0; i < cx->size(); ++i) {
            const double dx = x0 - (*cx)[i];
            const double dy = y0 - (*cy)[i];
            const double g = std::exp(-(dx * dx + dy * dy) / two_s2);
            transparent *= 1.0 - g;
            bump += amp[i] * g;
        }
        alpha = 1.0 - transparent;
        level = 0.5 + bump;
    }

    double eval_bg(double x, double y, double tau) const {
        if (!spec->background_checker) return 0.5;
        double x0, y0;
        spec->background_motion.inverse(x, y, tau, x0, y0);
        const double cell = 14.0;
        const double sx = std::tanh(2.0 * std::sin(kTwoPi * x0 / (2.0 * cell)));
        const double sy = std::tanh(2.0 * std::sin(kTwoPi * y0 / (2.0 * cell)));
        return 0.5 + 0.3 * sx * sy;
    }
};

} // namespace

namespace {
void seeded_blob_layout(const SceneSpec& spec, std::vector<double>& cx,
                        std::vector<double>& cy, std::vector<double>& amp) {
    Rng rng(spec.seed);
    if (spec.texture.kind != TextureSpec::Kind::kGaussianBlobs) return;
    for (int i = 0; i < spec.texture.blob_count; ++i) {
        cx.push_back(rng.uniform(8.0, double(spec.width - 8)));
        cy.push_back(rng.uniform(8.0, double(spec.height - 8)));
        amp.push_back(rng.uniform(0.6, 1.1));
    }
}
} // namespace

GroundTruthFlow scene_ground_truth(const SceneSpec& spec) {
    std::vector<double> cx, cy, amp;
    seeded_blob_layout(spec, cx, cy, amp);
    return GroundTruthFlow(spec, cx, cy);
}

std::pair<EventStream, GroundTruthFlow> render_scene(const SceneSpec& spec) {
    if (spec.contrast_c <= 0) throw FormatError("scene contrast threshold must be positive");
    if (spec.duration_us <= 0) throw FormatError("scene duration must be positive");
    const int64_t H = spec.height, W = spec.width;

    std::vector<double> cx, cy, amp;
    seeded_blob_layout(spec, cx, cy, amp);

    GroundTruthFlow gt(spec, cx, cy);
    LayerTexture tex{&spec, &cx, &cy};

    const int kSteps = 1024;
    const double dt_us = double(spec.duration_us) / double(kSteps);
    const double unit = spec.unit_us();

    std::vector<double> prev(size_t(H * W)), cur(size_t(H * W)), ref(size_t(H * W));

    auto render_frame = [&](double t_us, std::vector<double>& img) {
        const double tq = (t_us - double(spec.t_k_us)) / unit;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                double x0, y0, level, alpha;
                spec.motion.inverse(double(x), double(y), tq, x0, y0);
                tex.eval_fg(x0, y0, level, alpha, amp);
                const double bg = tex.eval_bg(double(x), double(y), tq);
                img[size_t(y * W + x)] = (1.0 - alpha) * bg + alpha * level;
            }
    };

    render_frame(0.0, prev);
    ref = prev;
    // the sensor was running before t=0: start each pixel at a random
    // threshold phase so early motion triggers events immediately
    Rng phase_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto& r : ref) r += (phase_rng.uniform() - 0.5) * spec.contrast_c;

    struct Raw {
        double t;
        int32_t idx;
        int8_t p;
    };
    std::vector<Raw> raw;

    for (int k = 1; k <= kSteps; ++k) {
        const double t0 = dt_us * double(k - 1);
        const double t1 = dt_us * double(k);
        render_frame(t1, cur);
        for (int64_t i = 0; i < H * W; ++i) {
            const double a = prev[size_t(i)];
            const double b = cur[size_t(i)];
            if (a == b) continue;
            const double pol = b > a ? 1.0 : -1.0;
            double level = ref[size_t(i)];
            while (true) {
                const double next = level + pol * spec.contrast_c;
                const bool crossed = pol > 0 ? (next > a && next <= b) : (next < a && next >= b);
                if (!crossed) break;
                const double frac = (next - a) / (b - a);
                raw.push_back(Raw{t0 + frac * (t1 - t0), int32_t(i), int8_t(pol)});
                level = next;
            }
            ref[size_t(i)] = level;
        }
        std::swap(prev, cur);
    }

    // optional uniform sensor noise
    if (spec.noise_rate > 0) {
        Rng nrng(spec.seed ^ 0x5eed5eedULL);
        const double units = double(spec.duration_us) / unit;
        const int64_t count = int64_t(std::llround(spec.noise_rate * double(H * W) * units));
        for (int64_t i = 0; i < count; ++i) {
            const int32_t idx = int32_t(nrng.below(uint64_t(H * W)));
            const double t = nrng.uniform(0.0, double(spec.duration_us));
            raw.push_back(Raw{t, idx, int8_t(nrng.uniform() < 0.5 ? -1 : 1)});
        }
    }

    std::stable_sort(raw.begin(), raw.end(),
                     [](const Raw& a, const Raw& b) { return a.t < b.t; });

    EventStream stream;
    stream.width = uint32_t(W);
    stream.height = uint32_t(H);
    stream.events.reserve(raw.size());
    for (const Raw& r : raw) {
        Event e;
        e.t = std::min<int64_t>(spec.duration_us, std::max<int64_t>(0, llround(r.t)));
        e.x = uint16_t(r.idx % W);
        e.y = uint16_t(r.idx / W);
        e.p = r.p;
        stream.events.push_back(e);
    }
    // rounding to whole microseconds can locally reorder equal stamps
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return {std::move(stream), std::move(gt)};
}

// ---- dataset export ----

void export_dataset(const std::vector<NamedScene>& scenes, int n_targets,
                    const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("cannot write manifest in " + dir);
    manifest << "# scene seed t_k_us t_k1_us n_targets texture motion\n";
    for (const NamedScene& ns : scenes) {
        auto [events, gt] = render_scene(ns.spec);
        if (events.empty())
            manifest << "# warning: scene " << ns.name << " produced no events\n";
        save_events(events, dir + "/" + ns.name + ".evs");
        const SegmentPlan plan{ns.spec.t_k_us, ns.spec.t_k1_us(), n_targets};
        plan.validate();
        for (int n = 1; n <= n_targets; ++n) {
            FlowField f = gt.flow(ns.spec.t_k_us, plan.target_end(n));
            save_flow(f, dir + "/" + ns.name + "_flow_" + std::to_string(n) + ".evfl");
        }
        save_tensor(gt.valid_mask(ns.spec.t_k_us), dir + "/" + ns.name + "_mask.evtn");
        const MotionModel& m = ns.spec.motion;
        manifest << ns.name << " " << ns.spec.seed << " " << ns.spec.t_k_us << " "
                 << ns.spec.t_k1_us() << " " << n_targets << " "
                 << (ns.spec.texture.kind == TextureSpec::Kind::kGaussianBlobs ? "blobs"
                                                                               : "checker")
                 << " c=(" << m.c[0] << "," << m.c[1] << ")"
                 << " b=(" << m.b[0] << "," << m.b[1] << ")"
                 << " omega=" << m.omega << "\n";
    }
    manifest.flush();
    if (!manifest) throw IoError("manifest write failed in " + dir);
}

SceneSuite make_scene_suite(int width, int height, int train_n, int val_n, int test_n,
                            double contrast, int64_t t_k_us, int64_t duration_us,
                            uint64_t seed, double noise_rate) {
    SceneSuite suite;
    Rng rng(seed);

    auto base = [&](uint64_t scene_seed) {
        SceneSpec s;
        s.width = width;
        s.height = height;
        s.contrast_c = contrast;
        s.t_k_us = t_k_us;
        s.duration_us = duration_us;
        s.seed = scene_seed;
        s.noise_rate = noise_rate;
        return s;
    };

    auto sample_translation = [&](MotionModel& m) {
        const double speed = rng.uniform(4.5, 9.0);
        const double ang = rng.uniform(0.0, kTwoPi);
        m.c[0] = speed * std::cos(ang);
        m.c[1] = speed * std::sin(ang);
    };

    auto sample_sinusoid = [&](MotionModel& m) {
        const double bmag = rng.uniform(2.0, 4.0);
        const double ang = rng.uniform(0.0, kTwoPi);
        m.b[0] = bmag * std::cos(ang);
        m.b[1] = bmag * std::sin(ang);
        m.omega = 1.0; // whole period inside the LTR interval: endpoint flow stays linear
        // mild spatial variation of the amplitude, the residual pattern is regional
        const double r = rng.uniform(-0.012, 0.012);
        const double sc = rng.uniform(-0.012, 0.012);
        m.ms[0][0] = sc;
        m.ms[1][1] = sc;
        m.ms[0][1] = -r;
        m.ms[1][0] = r;
    };

    // blob textures only: periodic patterns alias the correlation windows
    // and have no unambiguous match, which is a property of the texture,
    // not of the estimator under test
    auto sample_texture = [&](SceneSpec& s) {
        s.texture.kind = TextureSpec::Kind::kGaussianBlobs;
        s.texture.blob_count = int(7 + rng.below(5));
        s.texture.blob_sigma = rng.uniform(3.2, 5.0);
    };

    for (int i = 0; i < train_n; ++i) {
        SceneSpec s = base(seed * 1000 + uint64_t(i));
        sample_texture(s);
        sample_translation(s.motion);
        if (i % 2 == 1) sample_sinusoid(s.motion); // half linear, half sinusoidal
        suite.train.push_back({"train_" + std::to_string(i), s});
    }
    for (int i = 0; i < val_n; ++i) {
        SceneSpec s = base(seed * 1000 + 500 + uint64_t(i));
        sample_texture(s);
        sample_translation(s.motion); // purely linear
        suite.val.push_back({"val_" + std::to_string(i), s});
    }
    for (int i = 0; i < test_n; ++i) {
        SceneSpec s = base(seed * 1000 + 900 + uint64_t(i));
        sample_texture(s);
        sample_translation(s.motion);
        sample_sinusoid(s.motion);
        suite.test.push_back({"test_" + std::to_string(i), s});
    }
    return suite;
}

} // namespace evresid
