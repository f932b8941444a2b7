#pragma once

#include <utility>
#include <vector>

#include "evresid/config.hpp"
#include "evresid/events.hpp"
#include "evresid/flowio.hpp"
#include "evresid/params.hpp"

namespace evresid {

// Dense 2-vector field in pixels per unit time, where the unit is the LTR
// interval t_k1 - t_k.
struct VelocityField {
    Tensor data;
};

// F_n = (n * dt / (t_k1 - t_k)) * F for n = 1..N
std::vector<FlowField> temporal_linear_flows(const FlowField& ltr, const SegmentPlan& plan);
// v_n = F_n * (t_k1 - t_k) / (n * dt), i.e. scale by N/n
VelocityField flow_to_velocity(const FlowField& flow, int n, const SegmentPlan& plan);
FlowField velocity_to_flow(const VelocityField& vel, int n, const SegmentPlan& plan);

struct ModelConfig {
    int bins = 2;
    int n_targets = 5;
    int feat_dim = 24;
    int downsample = 4; // 2 or 4
    int lookup_radius = 3;
    int pyramid_levels = 2;
    int global_iters = 4;
    int refine_iters = 4;
    int hidden_dim = 24;
    int context_dim = 24;
    int motion_dim = 24;
    bool coord_grad = true;
    bool velocity_transform = true;
    // treat the correlation-vote estimators as fixed (non-trainable) paths;
    // disable to make model gradients exact end-to-end
    bool detach_estimators = true;
    uint64_t seed = 1234;

    static ModelConfig from_run(const RunConfig& rc);
    int corr_channels() const {
        const int w = 2 * lookup_radius + 1;
        return pyramid_levels * w * w;
    }
};

enum class Precision { kF32, kF64 };

// Cost volumes for one target: per pyramid level a (P, Hl, Wl) tensor where
// P indexes reference positions row-major and each plane holds similarities
// over target positions.
using VolumeLevels = std::vector<Tensor>;

struct CostVolumeSet {
    std::vector<VolumeLevels> volumes; // [target n-1][level]
    int64_t fh = 0, fw = 0;
};

struct SampleInput {
    Tensor reference;            // (B, H, W) voxel grid
    std::vector<Tensor> targets; // N voxel grids
    SegmentPlan plan;
};

struct GlobalOutput {
    Tensor flow_feat;                    // (2, fh, fw), feature-resolution pixels
    FlowField flow_full;                 // upsampled to (2, H, W), spans the LTR interval
    std::vector<FlowField> iter_flows;   // per-iteration full-resolution flows
    Tensor context;                      // (ctx, fh, fw)
    Tensor refiner_h0;                   // (hid, fh, fw)
    Tensor global_hidden;                // final update hidden state
};

class FlowModel {
public:
    explicit FlowModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // Names of the parameters owned by the residual refiner; everything
    // else belongs to the global stage (and is frozen during residual
    // training).
    static bool is_refiner_param(const std::string& name);

    Tensor encode(const Tensor& voxel, Precision prec = Precision::kF64) const;
    Tensor context_features(const Tensor& voxel, Precision prec = Precision::kF64) const;
    CostVolumeSet build_cost_volumes(const Tensor& e0, const std::vector<Tensor>& targets) const;
    // similarity window around flow-shifted coordinates, all pyramid levels
    Tensor lookup(const CostVolumeSet& vols, int n, const Tensor& flow_feat) const;

    GlobalOutput run_global(const SampleInput& input, Precision prec = Precision::kF64) const;

    // m refinement iterations of the shared refiner at time fraction tau;
    // returns the per-iteration states (velocity domain when the velocity
    // transform is enabled). iters = 0 returns {state0}. The reference
    // voxel grid supplies the evidence weights for the correlation vote.
    std::vector<Tensor> residual_refine(const VolumeLevels& volume, const Tensor& context,
                                        const Tensor& hidden0, const Tensor& state0, double tau,
                                        int iters, const Tensor& reference_voxel,
                                        Precision prec = Precision::kF64) const;

    // Full pipeline at freq-multiplied temporal resolution; flows span from
    // t_k to each timestamp, at full resolution.
    std::vector<std::pair<int64_t, FlowField>> infer_htr(const EventStream& events,
                                                         const SegmentPlan& plan, int freq,
                                                         Precision prec = Precision::kF64) const;

    // feature-grid dims for a full-resolution input
    int64_t feat_h(int64_t H) const { return H / cfg_.downsample; }
    int64_t feat_w(int64_t W) const { return W / cfg_.downsample; }

    // state -> full-resolution flow covering fraction tau of the interval
    FlowField state_to_full_flow(const Tensor& state, double tau, int64_t t_a, int64_t t_b) const;

    SampleInput prepare_input(const EventStream& events, const SegmentPlan& plan,
                              TimeNormalization norm = TimeNormalization::kSpan) const;

private:
    ModelConfig cfg_;
    ParamStore store_;
    void init_params();
};

} // namespace evresid
