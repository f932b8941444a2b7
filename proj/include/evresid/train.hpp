#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "evresid/autodiff.hpp"
#include "evresid/model.hpp"
#include "evresid/rng.hpp"
#include "evresid/synth.hpp"

namespace evresid {

struct NoiseSpec {
    enum class Pattern { kRegional, kWhite, kNone };
    Pattern pattern = Pattern::kRegional;
    int s = 6;             // regional downsampling factor
    double weight = 0.3;   // noise weight, relative to the mean speed
    double p_inject = 0.6; // per-sample injection probability

    static Pattern pattern_from(const std::string& name);
};

struct LossConfig {
    double gamma = 0.8; // decay factor over refiner iterations
    int iters = 4;
};

// Up(G, S) with G ~ N(0, I) at ceil(H/S) x ceil(W/S); spatially correlated,
// dominated by low frequencies.
Tensor make_regional_noise(int64_t H, int64_t W, int64_t S, Rng& rng);
Tensor make_white_noise(int64_t H, int64_t W, Rng& rng);

// v + weight * sigma_v * noise, where sigma_v is the spatial mean speed of v
Tensor apply_noise(const Tensor& v, const Tensor& noise, double weight);

struct InjectResult {
    Tensor field;
    bool injected = false;
};
// Training-mode perturbation; outside training this is the identity
// regardless of the spec.
InjectResult inject_noise(const Tensor& v_init, const NoiseSpec& spec, Rng& rng,
                          bool training);

// masked mean per-pixel 1-norm between prediction and target (graph form)
Var masked_l1(Graph& g, Var pred, const Tensor& target, const Tensor& mask);

// sum_j gamma^(m-j) * masked_l1(pred_j, target)
Var loss_l1(Graph& g, const std::vector<Var>& iter_preds, const Tensor& target,
            const Tensor& mask, const LossConfig& cfg);
Var loss_l2(Graph& g, Var final_pred, const Tensor& target, const Tensor& mask);

// File-backed training data. Ground-truth flow and mask files are loaded
// lazily and counted, so a self-supervised run can prove it never touched
// them.
class SceneDataset {
public:
    static SceneDataset load(const std::string& dir, const ModelConfig& cfg);

    size_t size() const { return entries_.size(); }
    const std::string& name(size_t i) const { return entries_[i].name; }
    const SampleInput& input(size_t i) const { return entries_[i].input; }
    const SegmentPlan& plan(size_t i) const { return entries_[i].input.plan; }

    const FlowField& gt_ltr(size_t i) const;  // counted access
    const Tensor& gt_mask(size_t i) const;    // counted access
    int64_t gt_reads() const { return gt_reads_; }

    // 1 where any segment deposited event mass nearby; ground-truth free
    Tensor event_density_mask(size_t i) const;

private:
    struct Entry {
        std::string name;
        std::string dir;
        SampleInput input;
        mutable std::optional<FlowField> gt;
        mutable std::optional<Tensor> mask;
    };
    std::vector<Entry> entries_;
    mutable int64_t gt_reads_ = 0;
};

struct TrainLogRow {
    int64_t step = 0;
    double l1 = 0;
    double l2 = 0;
    double total = 0;
    double epe_val = -1; // negative when not evaluated at this step
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double final_val_epe = -1;
};

struct TrainOptions {
    int64_t steps = 2000;
    int64_t batch = 2;
    double lr = 1e-4;
    double clip = 1.0;
    double gamma = 0.8;
    int64_t warmup_steps = 30;
    int64_t log_every = 10;
    int64_t val_every = 100;
    uint64_t seed = 0;

    static TrainOptions from_run(const RunConfig& rc);
};

// Global (LTR) stage training with a decayed sequence loss over its own
// iterates. Aborts with NumericalError on non-finite loss.
TrainResult train_global(FlowModel& model, const SceneDataset& train, const SceneDataset* val,
                         const TrainOptions& opt);

// Residual-stage training: global-side parameters frozen, supervision only
// at the final timestamp, loss = sequence L1 + lookup-consistency L2. With
// self_supervised the global-stage output replaces the ground truth and no
// ground-truth file is touched.
TrainResult train_residual(FlowModel& model, const SceneDataset& train, const SceneDataset* val,
                           const NoiseSpec& noise, const TrainOptions& opt,
                           bool self_supervised);

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path);

// mean LTR endpoint error of the refined model over a dataset
double validation_epe(FlowModel& model, const SceneDataset& ds);

} // namespace evresid
