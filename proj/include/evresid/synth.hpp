#pragma once

#include <optional>
#include <string>
#include <vector>

#include "evresid/events.hpp"
#include "evresid/flowio.hpp"

namespace evresid {

// Analytic motion of a rigid layer. A particle whose layer coordinate is x0
// sits at
//   x(tau) = x0 + (M x0 + c) * tau + (Ms x0 + b) * sin(2*pi*omega*tau)
// where tau is time in units of the LTR interval. With Ms = 0 and b a plain
// 2-vector this is the affine-plus-sinusoid model; b = 0 gives pure affine
// motion whose flow is linear in time.
struct MotionModel {
    double m[2][2] = {{0, 0}, {0, 0}};  // affine velocity part
    double c[2] = {0, 0};               // translation velocity, px per unit time
    double ms[2][2] = {{0, 0}, {0, 0}}; // spatially varying sinusoid amplitude
    double b[2] = {0, 0};               // sinusoid amplitude, px
    double omega = 1.0;                 // cycles per unit time

    bool is_linear() const {
        return b[0] == 0 && b[1] == 0 && ms[0][0] == 0 && ms[0][1] == 0 && ms[1][0] == 0 &&
               ms[1][1] == 0;
    }

    // position of layer point x0 at time tau
    void position(double x0, double y0, double tau, double& x, double& y) const;
    // layer coordinate of the point observed at (x, y) at time tau
    void inverse(double x, double y, double tau, double& x0, double& y0) const;
};

struct TextureSpec {
    enum class Kind { kGaussianBlobs, kCheckerboard };
    Kind kind = Kind::kGaussianBlobs;
    int blob_count = 8;
    double blob_sigma = 4.0;
    double cell = 12.0; // checkerboard cell size in px
};

struct SceneSpec {
    int width = 128;
    int height = 96;
    TextureSpec texture;
    MotionModel motion;
    double contrast_c = 0.2;   // event threshold, log-intensity units
    int64_t t_k_us = 9000;     // LTR interval start; reference segment precedes it
    int64_t duration_us = 54000; // scene covers [0, duration]; LTR end = duration
    uint64_t seed = 0;
    double noise_rate = 0.0;   // uniform noise events per pixel per unit time

    // optional static or slow background layer occluded by the blobs
    bool background_checker = false;
    MotionModel background_motion;

    int64_t t_k1_us() const { return duration_us; }
    double unit_us() const { return double(t_k1_us() - t_k_us); }
};

// Closed-form ground-truth flow querier for a rendered scene. Flow maps
// pixel positions at t1 to their positions at t2; the valid mask marks
// textured moving-layer pixels at t1.
class GroundTruthFlow {
public:
    GroundTruthFlow() = default;
    GroundTruthFlow(SceneSpec spec, std::vector<double> blob_cx, std::vector<double> blob_cy);

    FlowField flow(int64_t t1_us, int64_t t2_us) const;
    Tensor valid_mask(int64_t t_us) const; // (1,H,W), 1 on the textured moving layer

    void flow_at_point(double x, double y, int64_t t1_us, int64_t t2_us, double& fx,
                       double& fy) const;
    // velocity (px per unit time) of the layer point observed at (x,y,t);
    // the double-time overload avoids microsecond quantization
    void velocity_at_point(double x, double y, int64_t t_us, double& vx, double& vy) const;
    void velocity_at_point(double x, double y, double t_us, double& vx, double& vy) const;

    const SceneSpec& spec() const { return spec_; }

private:
    double tau(int64_t t_us) const;
    bool on_foreground(double x, double y, double tau) const;

    SceneSpec spec_;
    std::vector<double> blob_cx_, blob_cy_; // layer coordinates
};

// Simulate the sensor: per-pixel log intensity is sampled on a fine time
// grid and an event fires each time the accumulated change crosses +-C.
std::pair<EventStream, GroundTruthFlow> render_scene(const SceneSpec& spec);

// Ground truth alone, with the same seeded texture layout render_scene uses.
GroundTruthFlow scene_ground_truth(const SceneSpec& spec);

// Convenience accessor mirroring the flow query.
FlowField gt_flow_at(const GroundTruthFlow& gt, int64_t t1_us, int64_t t2_us);

struct NamedScene {
    std::string name;
    SceneSpec spec;
};

// Writes events plus ground-truth flows at the N target times for each
// scene, and a manifest listing scenes, seeds and motion parameters.
void export_dataset(const std::vector<NamedScene>& scenes, int n_targets,
                    const std::string& dir);

// Seeded scene suites. Validation scenes are purely linear; test scenes put
// a full sinusoid period inside the LTR interval so the endpoint flow stays
// linear while intermediate flows are not.
struct SceneSuite {
    std::vector<NamedScene> train, val, test;
};
class RunConfig;
SceneSuite make_scene_suite(int width, int height, int train_n, int val_n, int test_n,
                            double contrast, int64_t t_k_us, int64_t duration_us,
                            uint64_t seed, double noise_rate = 0.0);

} // namespace evresid
