#include "evresid/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evresid/binio.hpp"
#include "evresid/evalkit.hpp"
#include "evresid/model_ops.hpp"

namespace evresid {

NoiseSpec::Pattern NoiseSpec::pattern_from(const std::string& name) {
    if (name == "regional") return Pattern::kRegional;
    if (name == "white") return Pattern::kWhite;
    if (name == "none") return Pattern::kNone;
    throw ConfigError("unknown noise pattern: " + name);
}

Tensor make_white_noise(int64_t H, int64_t W, Rng& rng) {
    Tensor n(Shape{2, H, W});
    for (int64_t i = 0; i < n.numel(); ++i) n[i] = rng.normal();
    return n;
}

Tensor make_regional_noise(int64_t H, int64_t W, int64_t S, Rng& rng) {
    if (S < 1) throw ConfigError("regional noise: S must be >= 1");
    const int64_t h = (H + S - 1) / S;
    const int64_t w = (W + S - 1) / S;
    Tensor g = make_white_noise(h, w, rng);
    if (S == 1) return g;
    Tensor up = kernels::upsample_bilinear_forward(g, S);
    Tensor out(Shape{2, H, W});
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) out.at3(c, y, x) = up.at3(c, y, x);
    return out;
}

Tensor apply_noise(const Tensor& v, const Tensor& noise, double weight) {
    const int64_t plane = v.shape()[1] * v.shape()[2];
    double sigma = 0;
    for (int64_t i = 0; i < plane; ++i)
        sigma += std::sqrt(v[i] * v[i] + v[plane + i] * v[plane + i]);
    sigma /= double(plane);
    Tensor out = v;
    for (int64_t i = 0; i < v.numel(); ++i) out[i] += weight * sigma * noise[i];
    return out;
}

InjectResult inject_noise(const Tensor& v_init, const NoiseSpec& spec, Rng& rng,
                          bool training) {
    InjectResult res{v_init, false};
    if (!training || spec.pattern == NoiseSpec::Pattern::kNone || spec.weight <= 0) return res;
    const double draw = rng.uniform();
    // the noise field is always drawn so the rng stream does not depend on
    // the injection outcome
    const int64_t H = v_init.shape()[1], W = v_init.shape()[2];
    Tensor noise = spec.pattern == NoiseSpec::Pattern::kRegional
                       ? make_regional_noise(H, W, spec.s, rng)
                       : make_white_noise(H, W, rng);
    if (draw >= spec.p_inject) return res;
    res.field = apply_noise(v_init, noise, spec.weight);
    res.injected = true;
    return res;
}

Var masked_l1(Graph& g, Var pred, const Tensor& target, const Tensor& mask) {
    const int64_t H = target.shape()[1], W = target.shape()[2];
    if (!(pred.val().shape() == target.shape()))
        throw FormatError("masked_l1: prediction/target shape mismatch");
    double count = 0;
    Tensor mask2(Shape{2, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        const double m = mask[i] > 0.5 ? 1.0 : 0.0;
        mask2[i] = m;
        mask2[H * W + i] = m;
        count += m;
    }
    if (count == 0) throw FormatError("masked_l1: empty mask");
    Var diff = sub(pred, g.constant(target));
    Var weighted = mul(abs_op(diff), g.constant(std::move(mask2)));
    return scale(sum_all(weighted), 1.0 / count);
}

Var loss_l1(Graph& g, const std::vector<Var>& iter_preds, const Tensor& target,
            const Tensor& mask, const LossConfig& cfg) {
    if (iter_preds.empty()) throw FormatError("loss_l1: no iterates");
    const int m = int(iter_preds.size());
    Var total;
    for (int j = 1; j <= m; ++j) {
        Var term = masked_l1(g, iter_preds[size_t(j - 1)], target, mask);
        term = scale(term, std::pow(cfg.gamma, double(m - j)));
        total = (j == 1) ? term : add(total, term);
    }
    return total;
}

Var loss_l2(Graph& g, Var final_pred, const Tensor& target, const Tensor& mask) {
    return masked_l1(g, final_pred, target, mask);
}

// ---- dataset ----

SceneDataset SceneDataset::load(const std::string& dir, const ModelConfig& cfg) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw FormatError("dataset manifest not found in " + dir);
    SceneDataset ds;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string name;
        uint64_t seed;
        int64_t t_k, t_k1;
        int n_targets;
        if (!(is >> name >> seed >> t_k >> t_k1 >> n_targets))
            throw FormatError(dir + "/manifest.txt: malformed line: " + line);
        Entry e;
        e.name = name;
        e.dir = dir;
        EventStream events = load_events(dir + "/" + name + ".evs");
        SegmentPlan plan{t_k, t_k1, n_targets};
        plan.validate();
        if (n_targets != cfg.n_targets)
            throw FormatError("dataset n_targets " + std::to_string(n_targets) +
                              " does not match model config " +
                              std::to_string(cfg.n_targets));
        SplitResult split = split_segments(events, plan);
        e.input.plan = plan;
        const int64_t dt = plan.delta_t();
        e.input.reference =
            voxelize(split.reference, cfg.bins, plan.t_k - dt, plan.t_k).data;
        for (int n = 1; n <= n_targets; ++n)
            e.input.targets.push_back(voxelize(split.targets[size_t(n - 1)], cfg.bins,
                                               plan.target_end(n) - dt, plan.target_end(n))
                                          .data);
        ds.entries_.push_back(std::move(e));
    }
    if (ds.entries_.empty()) throw FormatError("dataset in " + dir + " lists no scenes");
    return ds;
}

const FlowField& SceneDataset::gt_ltr(size_t i) const {
    const Entry& e = entries_[i];
    if (!e.gt) {
        ++gt_reads_;
        e.gt = load_flow(e.dir + "/" + e.name + "_flow_" +
                         std::to_string(e.input.plan.n_targets) + ".evfl");
    }
    return *e.gt;
}

const Tensor& SceneDataset::gt_mask(size_t i) const {
    const Entry& e = entries_[i];
    if (!e.mask) {
        ++gt_reads_;
        Tensor m = load_tensor(e.dir + "/" + e.name + "_mask.evtn");
        e.mask = std::move(m);
    }
    return *e.mask;
}

Tensor SceneDataset::event_density_mask(size_t i) const {
    const SampleInput& in = entries_[i].input;
    const int64_t H = in.reference.shape()[1], W = in.reference.shape()[2];
    Tensor acc(Shape{1, H, W});
    auto accumulate = [&](const Tensor& voxel) {
        const int64_t B = voxel.shape()[0];
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < H * W; ++j) acc[j] += std::abs(voxel[b * H * W + j]);
    };
    accumulate(in.reference);
    for (const Tensor& t : in.targets) accumulate(t);
    // dilate so the mask covers the motion neighborhood
    Tensor mask(Shape{1, H, W});
    const int64_t rad = 2;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double m = 0;
            for (int64_t dy = -rad; dy <= rad && m == 0; ++dy)
                for (int64_t dx = -rad; dx <= rad; ++dx) {
                    const int64_t yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    if (acc[yy * W + xx] > 0.25) {
                        m = 1;
                        break;
                    }
                }
            mask[y * W + x] = m;
        }
    return mask;
}

// ---- trainers ----

TrainOptions TrainOptions::from_run(const RunConfig& rc) {
    TrainOptions o;
    o.steps = rc.geti("steps");
    o.batch = rc.geti("batch");
    o.lr = rc.getf("lr");
    o.clip = rc.getf("clip");
    o.gamma = rc.getf("gamma");
    o.warmup_steps = rc.geti("warmup_steps");
    o.log_every = rc.geti("log_every");
    o.val_every = rc.geti("val_every");
    o.seed = uint64_t(rc.geti("seed"));
    if (o.batch < 1) throw ConfigError("batch must be >= 1");
    return o;
}

namespace {

// mirror augmentation for the global stage: flips of the voxel grids with
// the matching sign changes on the target flow
struct FlipSpec {
    bool h = false;
    bool v = false;
};

Tensor flip_tensor(const Tensor& t, const FlipSpec& f) {
    if (!f.h && !f.v) return t;
    const int64_t C = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
    Tensor out(t.shape());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                out.at3(c, y, x) = t.at3(c, f.v ? H - 1 - y : y, f.h ? W - 1 - x : x);
    return out;
}

Tensor flip_flow(const Tensor& t, const FlipSpec& f) {
    Tensor out = flip_tensor(t, f);
    const int64_t P = t.shape()[1] * t.shape()[2];
    if (f.h)
        for (int64_t i = 0; i < P; ++i) out[i] = -out[i];
    if (f.v)
        for (int64_t i = 0; i < P; ++i) out[P + i] = -out[P + i];
    return out;
}

struct BatchSampler {
    Rng rng;
    std::vector<size_t> order;
    size_t cursor = 0;

    BatchSampler(size_t n, uint64_t seed) : rng(seed) {
        order.resize(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        shuffle();
    }
    void shuffle() {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.below(uint64_t(i)))]);
        cursor = 0;
    }
    size_t next() {
        if (cursor >= order.size()) shuffle();
        return order[cursor++];
    }
};

void check_finite(double v, const char* what, int64_t step) {
    if (!std::isfinite(v))
        throw NumericalError(std::string(what) + " is not finite at step " +
                             std::to_string(step));
}

double warmup_lr(const TrainOptions& opt, int64_t step) {
    if (opt.warmup_steps <= 0) return opt.lr;
    const double f = std::min(1.0, double(step) / double(opt.warmup_steps));
    return opt.lr * f;
}

} // namespace

double validation_epe(FlowModel& model, const SceneDataset& ds) {
    double acc = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        const SampleInput& in = ds.input(i);
        GlobalOutput g = model.run_global(in);
        CostVolumeSet vols = model.build_cost_volumes(
            model.encode(in.reference), {model.encode(in.targets.back())});
        std::vector<Tensor> states =
            model.residual_refine(vols.volumes[0], g.context, g.refiner_h0, g.flow_feat, 1.0,
                                  model.config().refine_iters, in.reference);
        FlowField refined =
            model.state_to_full_flow(states.back(), 1.0, ds.plan(i).t_k, ds.plan(i).t_k1);
        acc += epe(refined, ds.gt_ltr(i), ds.gt_mask(i));
    }
    return acc / double(ds.size());
}

TrainResult train_global(FlowModel& model, const SceneDataset& train, const SceneDataset* val,
                         const TrainOptions& opt) {
    ParamStore& store = model.params();
    store.set_all_trainable(true);
    AdamOptimizer optim({opt.lr, 0.9, 0.999, 1e-8, opt.clip});
    BatchSampler sampler(train.size(), opt.seed);
    const ModelConfig& mc = model.config();
    LossConfig lcfg{opt.gamma, mc.global_iters};

    TrainResult result;
    for (int64_t step = 1; step <= opt.steps; ++step) {
        optim.set_lr(warmup_lr(opt, step));
        double loss_acc = 0;
        for (int64_t b = 0; b < opt.batch; ++b) {
            const size_t idx = sampler.next();
            FlipSpec flip{sampler.rng.uniform() < 0.5, sampler.rng.uniform() < 0.5};
            const SampleInput& in = train.input(idx);
            const Tensor reference = flip_tensor(in.reference, flip);
            Graph g;
            ModelOps<double> ops(mc, g, store);
            ops.set_density_from(reference);
            Var ref = g.constant(reference);
            Var ctx = ops.context(ref);
            Var e0 = ops.encode(ref);
            std::vector<std::vector<Var>> volumes;
            for (const Tensor& t : in.targets)
                volumes.push_back(ops.cost_volume(e0, ops.encode(g.constant(flip_tensor(t, flip)))));
            auto trace = ops.global_stage(volumes, ctx, mc.global_iters);
            std::vector<Var> full;
            for (auto& f : trace.iter_flows) full.push_back(ops.upsample_to_full(f));
            Var loss = loss_l1(g, full, flip_flow(train.gt_ltr(idx).data, flip),
                               flip_tensor(train.gt_mask(idx), flip), lcfg);
            check_finite(loss.val()[0], "global training loss", step);
            loss_acc += loss.val()[0];
            g.backward(loss);
            ops.p.harvest_grads(1.0 / double(opt.batch));
        }
        optim.step(store);
        loss_acc /= double(opt.batch);

        TrainLogRow row;
        row.step = step;
        row.l1 = loss_acc;
        row.l2 = 0;
        row.total = loss_acc;
        if (val && opt.val_every > 0 && (step % opt.val_every == 0 || step == opt.steps)) {
            double acc = 0;
            for (size_t i = 0; i < val->size(); ++i) {
                GlobalOutput go = model.run_global(val->input(i));
                acc += epe(go.flow_full, val->gt_ltr(i), val->gt_mask(i));
            }
            row.epe_val = acc / double(val->size());
            result.final_val_epe = row.epe_val;
        }
        if (step % opt.log_every == 0 || step == 1 || step == opt.steps || row.epe_val >= 0)
            result.log.push_back(row);
    }
    return result;
}

TrainResult train_residual(FlowModel& model, const SceneDataset& train, const SceneDataset* val,
                           const NoiseSpec& noise, const TrainOptions& opt,
                           bool self_supervised) {
    ParamStore& store = model.params();
    for (size_t i = 0; i < store.size(); ++i)
        store[i].trainable = FlowModel::is_refiner_param(store.names()[i]);
    AdamOptimizer optim({opt.lr, 0.9, 0.999, 1e-8, opt.clip});
    BatchSampler sampler(train.size(), opt.seed + 1);
    Rng noise_rng(opt.seed * 977 + 13);
    const ModelConfig& mc = model.config();
    LossConfig lcfg{opt.gamma, mc.refine_iters};

    // the global stage is frozen: run it once per sample and reuse
    struct Cache {
        bool ready = false;
        CostVolumeSet vols;
        GlobalOutput global;
        Tensor loss_mask;
    };
    std::vector<Cache> cache(train.size());
    auto ensure_cache = [&](size_t idx) -> Cache& {
        Cache& c = cache[idx];
        if (c.ready) return c;
        const SampleInput& in = train.input(idx);
        c.global = model.run_global(in);
        std::vector<Tensor> target_feats;
        for (const Tensor& t : in.targets) target_feats.push_back(model.encode(t));
        c.vols = model.build_cost_volumes(model.encode(in.reference), target_feats);
        c.loss_mask = self_supervised ? train.event_density_mask(idx) : train.gt_mask(idx);
        c.ready = true;
        return c;
    };

    TrainResult result;
    for (int64_t step = 1; step <= opt.steps; ++step) {
        optim.set_lr(warmup_lr(opt, step));
        double l1_acc = 0, l2_acc = 0;
        for (int64_t b = 0; b < opt.batch; ++b) {
            const size_t idx = sampler.next();
            Cache& c = ensure_cache(idx);

            Graph g;
            ModelOps<double> ops(mc, g, store);
            ops.set_density_from(train.input(idx).reference);
            std::vector<std::vector<Var>> vols;
            for (const auto& levels : c.vols.volumes) {
                std::vector<Var> lv;
                for (const Tensor& t : levels) lv.push_back(g.constant(t));
                vols.push_back(std::move(lv));
            }
            Var ctx = g.constant(c.global.context);
            Var h0 = ops.refiner_h0(ctx); // in-graph so the initializer trains
            Var ghid = g.constant(c.global.global_hidden);

            InjectResult inj = inject_noise(c.global.flow_feat, noise, noise_rng, true);
            Var state0 = g.constant(inj.field);

            auto trace =
                ops.residual_refine(vols[size_t(mc.n_targets - 1)], ctx, h0, state0, 1.0,
                                    mc.refine_iters);
            std::vector<Var> full;
            for (auto& s : trace.states) full.push_back(ops.upsample_to_full(s));

            const Tensor& target =
                self_supervised ? c.global.flow_full.data : train.gt_ltr(idx).data;
            Var l1 = loss_l1(g, full, target, c.loss_mask, lcfg);
            Var fhat = ops.global_update_from(vols, ctx, ghid, trace.states.back());
            Var l2 = loss_l2(g, ops.upsample_to_full(fhat), target, c.loss_mask);
            Var total = add(l1, l2);
            check_finite(total.val()[0], "residual training loss", step);
            l1_acc += l1.val()[0];
            l2_acc += l2.val()[0];
            g.backward(total);
            ops.p.harvest_grads(1.0 / double(opt.batch));
        }
        optim.step(store);

        TrainLogRow row;
        row.step = step;
        row.l1 = l1_acc / double(opt.batch);
        row.l2 = l2_acc / double(opt.batch);
        row.total = row.l1 + row.l2;
        if (val && opt.val_every > 0 && (step % opt.val_every == 0 || step == opt.steps)) {
            row.epe_val = validation_epe(model, *val);
            result.final_val_epe = row.epe_val;
        }
        if (step % opt.log_every == 0 || step == 1 || step == opt.steps || row.epe_val >= 0)
            result.log.push_back(row);
    }
    return result;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "step,l1,l2,total,epe_val\n";
    for (const TrainLogRow& r : log) {
        os << r.step << "," << r.l1 << "," << r.l2 << "," << r.total << ",";
        if (r.epe_val >= 0) os << r.epe_val;
        os << "\n";
    }
}

} // namespace evresid
