#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evresid/events.hpp"
#include "evresid/flowio.hpp"

namespace evresid {

// Forward->backward conversion by propagation: every source pixel splats its
// flow at the point it lands on, with bilinear weights; the per-pixel
// weighted average is negated. Pixels that receive less than eps total
// weight are invalid (flow 0, mask 0).
struct BackwardFlow {
    FlowField flow;
    Tensor mask; // (1,H,W)
};
BackwardFlow forward_to_backward(const FlowField& fwd, double eps = 1e-6);

struct Iwe {
    Tensor image; // (H,W)
    int64_t events_used = 0;
};

enum class WarpMode { kLtrLinear, kHtrPiecewise };

// Warp all events in [flows.front().t_a, flows.back().t_b] back to the
// start time and splat them bilinearly. Every flow must span from the same
// start time; in kLtrLinear mode only the last (full-interval) flow is used
// and scaled by the elapsed fraction, in kHtrPiecewise mode per-segment
// backward flows are composed down to the start.
Iwe render_iwe(const EventStream& events, const std::vector<FlowField>& flows, WarpMode mode,
               bool signed_polarity = false);

double fwl(const EventStream& events, const std::vector<FlowField>& flows, WarpMode mode,
           bool signed_polarity = false);

double epe(const FlowField& estimate, const FlowField& gt, const Tensor& mask);
double out3(const FlowField& estimate, const FlowField& gt, const Tensor& mask);

// FWL under the straightforward warp (negated forward flow sampled at the
// event location) versus the propagation-based warp, for the same LTR flow.
struct WarpComparison {
    double fwl_naive = 0.0;
    double fwl_propagated = 0.0;
};
WarpComparison compare_warp(const EventStream& events, const FlowField& fwd,
                            bool signed_polarity = false);

double population_variance(const Tensor& image);

struct MetricRow {
    std::string scene;
    int64_t t_a = 0;
    int64_t t_b = 0;
    double epe = -1.0;  // negative: not available
    double out3 = -1.0;
    double fwl_ltr = -1.0;
    double fwl_htr = -1.0;
};

// CSV columns: scene,t_a_us,t_b_us,epe,out3,fwl_ltr,fwl_htr,fwl_delta.
// Missing values are written as empty fields.
void write_metric_csv(const std::vector<MetricRow>& rows, const std::string& path);

} // namespace evresid
