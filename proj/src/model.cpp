#include "evresid/model.hpp"

#include <cmath>

#include "evresid/binio.hpp"
#include "evresid/model_ops.hpp"

namespace evresid {

std::vector<FlowField> temporal_linear_flows(const FlowField& ltr, const SegmentPlan& plan) {
    plan.validate();
    std::vector<FlowField> out;
    const int N = plan.n_targets;
    for (int n = 1; n <= N; ++n) {
        FlowField f;
        f.t_a = plan.t_k;
        f.t_b = plan.target_end(n);
        f.data = Tensor(ltr.data.shape());
        const double s = double(n) / double(N);
        for (int64_t i = 0; i < f.data.numel(); ++i) f.data[i] = s * ltr.data[i];
        out.push_back(std::move(f));
    }
    return out;
}

VelocityField flow_to_velocity(const FlowField& flow, int n, const SegmentPlan& plan) {
    plan.validate();
    if (n < 1 || n > plan.n_targets) throw FormatError("flow_to_velocity: n out of range");
    VelocityField v;
    v.data = Tensor(flow.data.shape());
    const double s = double(plan.n_targets) / double(n);
    for (int64_t i = 0; i < v.data.numel(); ++i) v.data[i] = s * flow.data[i];
    return v;
}

FlowField velocity_to_flow(const VelocityField& vel, int n, const SegmentPlan& plan) {
    plan.validate();
    if (n < 1 || n > plan.n_targets) throw FormatError("velocity_to_flow: n out of range");
    FlowField f;
    f.t_a = plan.t_k;
    f.t_b = plan.target_end(n);
    f.data = Tensor(vel.data.shape());
    const double s = double(n) / double(plan.n_targets);
    for (int64_t i = 0; i < f.data.numel(); ++i) f.data[i] = s * vel.data[i];
    return f;
}

ModelConfig ModelConfig::from_run(const RunConfig& rc) {
    ModelConfig c;
    c.bins = int(rc.geti("bins"));
    c.n_targets = int(rc.geti("n_targets"));
    c.feat_dim = int(rc.geti("feat_dim"));
    c.downsample = int(rc.geti("downsample"));
    c.lookup_radius = int(rc.geti("lookup_radius"));
    c.pyramid_levels = int(rc.geti("pyramid_levels"));
    c.global_iters = int(rc.geti("global_iters"));
    c.refine_iters = int(rc.geti("refine_iters"));
    c.hidden_dim = int(rc.geti("hidden_dim"));
    c.context_dim = int(rc.geti("context_dim"));
    c.motion_dim = int(rc.geti("motion_dim"));
    c.coord_grad = rc.getb("coord_grad");
    c.velocity_transform = rc.getb("velocity_transform");
    c.detach_estimators = rc.getb("detach_estimators");
    c.seed = uint64_t(rc.geti("model_seed"));
    if (c.downsample != 2 && c.downsample != 4)
        throw ConfigError("downsample must be 2 or 4");
    if (c.motion_dim <= 2) throw ConfigError("motion_dim must exceed 2");
    return c;
}

FlowModel::FlowModel(ModelConfig cfg) : cfg_(cfg) { init_params(); }

bool FlowModel::is_refiner_param(const std::string& name) {
    return name.rfind("rgru.", 0) == 0 || name.rfind("rhead.", 0) == 0 ||
           name.rfind("rinit.", 0) == 0;
}

void FlowModel::init_params() {
    Rng rng(cfg_.seed);
    auto conv_param = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k,
                          double gain = 1.0) {
        const int64_t fan_in = cin * k * k;
        Tensor w = he_init(Shape{cout, cin, k, k}, fan_in, rng);
        if (gain != 1.0)
            for (int64_t i = 0; i < w.numel(); ++i) w[i] *= gain;
        store_.add(name + ".w", std::move(w));
        store_.add(name + ".b", Tensor(Shape{cout}));
    };

    const int64_t B = cfg_.bins, d = cfg_.feat_dim, ctx = cfg_.context_dim;
    const int64_t hid = cfg_.hidden_dim, mf = cfg_.motion_dim;
    const int64_t ncorr = cfg_.corr_channels();

    conv_param("enc.c1", d, B, 3);
    conv_param("enc.c2", d, d, 3);
    conv_param("enc.c3", d, d, 3);
    conv_param("ctx.c1", ctx, B, 3);
    conv_param("ctx.c2", ctx, ctx, 3);
    conv_param("ctx.c3", ctx, ctx, 3);
    conv_param("ginit", hid, ctx, 3);
    conv_param("rinit", hid, ctx, 3);

    const int64_t disp = 3 * cfg_.pyramid_levels; // window readout channels in mf
    if (mf - 2 - disp < 2) throw ConfigError("motion_dim too small for the feature layout");
    conv_param("me.corr", 40, ncorr, 1);
    conv_param("me.flow", 12, 2, 3);
    conv_param("me.mix", mf - 2 - disp, 52, 3);

    conv_param("agg.c1", 48, int64_t(cfg_.n_targets) * mf, 1);
    conv_param("agg.c2", mf, 48, 3);

    const int64_t gin = hid + mf + ctx;
    conv_param("ggru.wz", hid, gin, 3);
    conv_param("ggru.wr", hid, gin, 3);
    conv_param("ggru.wh", hid, gin, 3);
    conv_param("ghead.c1", 48, hid + mf + 2, 3);
    conv_param("ghead.c2", 2, 48, 3, 0.1);

    const int64_t rin = hid + mf + ctx + 4;
    conv_param("rgru.wz", hid, rin, 3);
    conv_param("rgru.wr", hid, rin, 3);
    conv_param("rgru.wh", hid, rin, 3);
    conv_param("rhead.c1", 48, hid + mf + 4, 3);
    conv_param("rhead.c2", 2, 48, 3, 0.1);
}

namespace {

template <typename T>
Tensor to_double(const TensorT<T>& t) {
    if constexpr (std::is_same_v<T, double>) {
        return t;
    } else {
        return t.template cast<double>();
    }
}

template <typename T>
struct NoGradEngine {
    GraphT<T> graph;
    ModelOps<T> ops;
    NoGradEngine(const ModelConfig& cfg, ParamStore& store) : ops(cfg, graph, store) {
        graph.set_recording(false);
    }
    VarT<T> input(const Tensor& t) { return ops.leaf_const(t); }
};

template <typename T>
GlobalOutput run_global_impl(const ModelConfig& cfg, ParamStore& store,
                             const SampleInput& input) {
    NoGradEngine<T> e(cfg, store);
    auto& ops = e.ops;
    ops.set_density_from(input.reference);
    VarT<T> ctx = ops.context(e.input(input.reference));
    VarT<T> e0 = ops.encode(e.input(input.reference));
    std::vector<std::vector<VarT<T>>> volumes;
    for (const Tensor& tv : input.targets)
        volumes.push_back(ops.cost_volume(e0, ops.encode(e.input(tv))));
    auto trace = ops.global_stage(volumes, ctx, cfg.global_iters);

    GlobalOutput out;
    out.flow_feat = to_double(trace.flow.val());
    out.context = to_double(ctx.val());
    out.refiner_h0 = to_double(ops.refiner_h0(ctx).val());
    out.global_hidden = to_double(trace.hidden.val());
    out.flow_full.t_a = input.plan.t_k;
    out.flow_full.t_b = input.plan.t_k1;
    out.flow_full.data = to_double(ops.upsample_to_full(trace.flow).val());
    for (auto& itf : trace.iter_flows) {
        FlowField f;
        f.t_a = input.plan.t_k;
        f.t_b = input.plan.t_k1;
        f.data = to_double(ops.upsample_to_full(itf).val());
        out.iter_flows.push_back(std::move(f));
    }
    return out;
}

template <typename T>
std::vector<Tensor> refine_impl(const ModelConfig& cfg, ParamStore& store,
                                const VolumeLevels& volume, const Tensor& context,
                                const Tensor& hidden0, const Tensor& state0, double tau,
                                int iters, const Tensor* density_src) {
    NoGradEngine<T> e(cfg, store);
    auto& ops = e.ops;
    if (density_src) {
        ops.set_density_from(*density_src);
    } else {
        // neutral weights when no reference voxel accompanies the call
        Tensor ones(Shape{1, context.shape()[1], context.shape()[2]});
        ones.fill(0.5);
        ops.density_gate_ = ops.leaf_const(ones);
    }
    std::vector<VarT<T>> vol;
    for (const Tensor& v : volume) vol.push_back(e.input(v));
    auto trace = ops.residual_refine(vol, e.input(context), e.input(hidden0), e.input(state0),
                                     tau, iters);
    std::vector<Tensor> states;
    if (trace.states.empty()) states.push_back(state0);
    for (auto& s : trace.states) states.push_back(to_double(s.val()));
    return states;
}

} // namespace

Tensor FlowModel::encode(const Tensor& voxel, Precision prec) const {
    auto& store = const_cast<ParamStore&>(store_);
    if (prec == Precision::kF32) {
        NoGradEngine<float> e(cfg_, store);
        return to_double(e.ops.encode(e.input(voxel)).val());
    }
    NoGradEngine<double> e(cfg_, store);
    return e.ops.encode(e.input(voxel)).val();
}

Tensor FlowModel::context_features(const Tensor& voxel, Precision prec) const {
    auto& store = const_cast<ParamStore&>(store_);
    if (prec == Precision::kF32) {
        NoGradEngine<float> e(cfg_, store);
        return to_double(e.ops.context(e.input(voxel)).val());
    }
    NoGradEngine<double> e(cfg_, store);
    return e.ops.context(e.input(voxel)).val();
}

CostVolumeSet FlowModel::build_cost_volumes(const Tensor& e0,
                                            const std::vector<Tensor>& targets) const {
    auto& store = const_cast<ParamStore&>(store_);
    NoGradEngine<double> e(cfg_, store);
    CostVolumeSet set;
    set.fh = e0.shape()[1];
    set.fw = e0.shape()[2];
    VarT<double> v0 = e.input(e0);
    for (const Tensor& tn : targets) {
        auto levels = e.ops.cost_volume(v0, e.input(tn));
        VolumeLevels out;
        for (auto& l : levels) out.push_back(l.val());
        set.volumes.push_back(std::move(out));
    }
    return set;
}

Tensor FlowModel::lookup(const CostVolumeSet& vols, int n, const Tensor& flow_feat) const {
    if (n < 1 || n > int(vols.volumes.size())) throw FormatError("lookup: n out of range");
    auto& store = const_cast<ParamStore&>(store_);
    NoGradEngine<double> e(cfg_, store);
    std::vector<VarT<double>> vol;
    for (const Tensor& v : vols.volumes[size_t(n - 1)]) vol.push_back(e.input(v));
    return e.ops.lookup(vol, e.input(flow_feat)).val();
}

GlobalOutput FlowModel::run_global(const SampleInput& input, Precision prec) const {
    auto& store = const_cast<ParamStore&>(store_);
    if (prec == Precision::kF32) return run_global_impl<float>(cfg_, store, input);
    return run_global_impl<double>(cfg_, store, input);
}

std::vector<Tensor> FlowModel::residual_refine(const VolumeLevels& volume, const Tensor& context,
                                               const Tensor& hidden0, const Tensor& state0,
                                               double tau, int iters,
                                               const Tensor& reference_voxel,
                                               Precision prec) const {
    auto& store = const_cast<ParamStore&>(store_);
    if (prec == Precision::kF32)
        return refine_impl<float>(cfg_, store, volume, context, hidden0, state0, tau, iters,
                                  &reference_voxel);
    return refine_impl<double>(cfg_, store, volume, context, hidden0, state0, tau, iters,
                               &reference_voxel);
}

FlowField FlowModel::state_to_full_flow(const Tensor& state, double tau, int64_t t_a,
                                        int64_t t_b) const {
    Tensor flow_feat(state.shape());
    const double s = cfg_.velocity_transform ? tau : 1.0;
    for (int64_t i = 0; i < state.numel(); ++i) flow_feat[i] = s * state[i];
    FlowField f;
    f.t_a = t_a;
    f.t_b = t_b;
    TensorT<double> up = kernels::upsample_bilinear_forward(flow_feat, cfg_.downsample);
    for (int64_t i = 0; i < up.numel(); ++i) up[i] *= double(cfg_.downsample);
    f.data = std::move(up);
    return f;
}

SampleInput FlowModel::prepare_input(const EventStream& events, const SegmentPlan& plan,
                                     TimeNormalization norm) const {
    SplitResult split = split_segments(events, plan);
    SampleInput in;
    in.plan = plan;
    const int64_t dt = plan.delta_t();
    in.reference =
        voxelize(split.reference, cfg_.bins, plan.t_k - dt, plan.t_k, norm).data;
    for (int n = 1; n <= plan.n_targets; ++n)
        in.targets.push_back(voxelize(split.targets[size_t(n - 1)], cfg_.bins,
                                      plan.target_end(n) - dt, plan.target_end(n), norm)
                                 .data);
    return in;
}

namespace {

template <typename T>
std::vector<std::pair<int64_t, FlowField>> infer_htr_impl(const FlowModel& model,
                                                          const ModelConfig& cfg,
                                                          ParamStore& store,
                                                          const EventStream& events,
                                                          const SegmentPlan& plan, int freq) {
    if (freq < 1) throw FormatError("infer_htr: freq multiplier must be an integer >= 1");
    plan.validate();
    const int64_t span = plan.t_k1 - plan.t_k;
    const int64_t steps = int64_t(freq) * plan.n_targets;
    if (span % steps != 0)
        throw FormatError("infer_htr: interval of " + std::to_string(span) +
                          " us does not divide into " + std::to_string(steps) +
                          " uniform timestamps");
    const int64_t fine_dt = span / steps;
    const int64_t dt = plan.delta_t();

    SampleInput input = model.prepare_input(events, plan);

    NoGradEngine<T> e(cfg, store);
    auto& ops = e.ops;
    ops.set_density_from(input.reference);
    VarT<T> ctx = ops.context(e.input(input.reference));
    VarT<T> e0 = ops.encode(e.input(input.reference));
    std::vector<std::vector<VarT<T>>> volumes;
    for (const Tensor& tv : input.targets)
        volumes.push_back(ops.cost_volume(e0, ops.encode(e.input(tv))));
    auto trace = ops.global_stage(volumes, ctx, cfg.global_iters);
    VarT<T> h0 = ops.refiner_h0(ctx);
    VarT<T> v_init = trace.flow; // LTR flow over unit time doubles as the velocity init

    std::vector<std::pair<int64_t, FlowField>> out;
    for (int64_t j = 1; j <= steps; ++j) {
        const int64_t t_j = plan.t_k + j * fine_dt;
        const double tau = double(j) / double(steps);
        std::vector<VarT<T>> vol;
        if (j % freq == 0) {
            vol = volumes[size_t(j / freq - 1)]; // timestamp coincides with a target
        } else {
            // re-split at the original window width and binning, then encode
            EventStream seg;
            seg.width = events.width;
            seg.height = events.height;
            for (const Event& ev : events.events)
                if (ev.t >= t_j - dt && ev.t < t_j) seg.events.push_back(ev);
            VoxelGrid grid = voxelize(seg, cfg.bins, t_j - dt, t_j);
            vol = ops.cost_volume(e0, ops.encode(e.input(grid.data)));
        }
        VarT<T> state0 = cfg.velocity_transform ? v_init : scale(v_init, T(tau));
        auto ref = ops.residual_refine(vol, ctx, h0, state0, tau, cfg.refine_iters);
        const TensorT<T>& state =
            ref.states.empty() ? state0.val() : ref.states.back().val();
        out.emplace_back(t_j,
                         model.state_to_full_flow(to_double(state), tau, plan.t_k, t_j));
    }
    return out;
}

} // namespace

std::vector<std::pair<int64_t, FlowField>> FlowModel::infer_htr(const EventStream& events,
                                                                const SegmentPlan& plan,
                                                                int freq,
                                                                Precision prec) const {
    auto& store = const_cast<ParamStore&>(store_);
    if (prec == Precision::kF32)
        return infer_htr_impl<float>(*this, cfg_, store, events, plan, freq);
    return infer_htr_impl<double>(*this, cfg_, store, events, plan, freq);
}

} // namespace evresid
