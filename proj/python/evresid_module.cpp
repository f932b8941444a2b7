#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "evresid/evalkit.hpp"
#include "evresid/events.hpp"
#include "evresid/flowio.hpp"
#include "evresid/model.hpp"
#include "evresid/synth.hpp"
#include "evresid/train.hpp"

namespace py = pybind11;
using namespace evresid;

namespace {

py::array_t<double> tensor_to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> dims;
    for (int i = 0; i < t.shape().rank(); ++i) dims.push_back(py::ssize_t(t.shape()[i]));
    py::array_t<double> out(dims);
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

Tensor numpy_to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape;
    switch (a.ndim()) {
        case 1: shape = Shape{a.shape(0)}; break;
        case 2: shape = Shape{a.shape(0), a.shape(1)}; break;
        case 3: shape = Shape{a.shape(0), a.shape(1), a.shape(2)}; break;
        case 4: shape = Shape{a.shape(0), a.shape(1), a.shape(2), a.shape(3)}; break;
        default: throw std::runtime_error("expected an array of rank 1..4");
    }
    Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data());
    return t;
}

py::dict stream_to_dict(const EventStream& s) {
    const py::ssize_t n = py::ssize_t(s.size());
    py::array_t<int64_t> t(n);
    py::array_t<uint16_t> x(n), y(n);
    py::array_t<int8_t> p(n);
    for (py::ssize_t i = 0; i < n; ++i) {
        const Event& e = s.events[size_t(i)];
        t.mutable_data()[i] = e.t;
        x.mutable_data()[i] = e.x;
        y.mutable_data()[i] = e.y;
        p.mutable_data()[i] = e.p;
    }
    py::dict d;
    d["width"] = s.width;
    d["height"] = s.height;
    d["t"] = t;
    d["x"] = x;
    d["y"] = y;
    d["p"] = p;
    return d;
}

EventStream dict_to_stream(const py::dict& d) {
    EventStream s;
    s.width = d["width"].cast<uint32_t>();
    s.height = d["height"].cast<uint32_t>();
    auto t = d["t"].cast<py::array_t<int64_t>>();
    auto x = d["x"].cast<py::array_t<uint16_t>>();
    auto y = d["y"].cast<py::array_t<uint16_t>>();
    auto p = d["p"].cast<py::array_t<int8_t>>();
    const py::ssize_t n = t.size();
    s.events.reserve(size_t(n));
    for (py::ssize_t i = 0; i < n; ++i)
        s.events.push_back(Event{t.data()[i], x.data()[i], y.data()[i], p.data()[i]});
    return s;
}

FlowField make_flow(int64_t t_a, int64_t t_b, const py::array_t<double>& data) {
    FlowField f;
    f.t_a = t_a;
    f.t_b = t_b;
    f.data = numpy_to_tensor(data);
    if (f.data.shape().rank() != 3 || f.data.shape()[0] != 2)
        throw std::runtime_error("flow data must have shape (2, H, W)");
    return f;
}

SceneSpec scene_from_kwargs(int width, int height, const std::string& texture, int blob_count,
                            double blob_sigma, double cell, double cx, double cy, double bx,
                            double by, double omega, double contrast, int64_t t_k_us,
                            int64_t duration_us, uint64_t seed, double noise_rate,
                            bool background_checker) {
    SceneSpec s;
    s.width = width;
    s.height = height;
    s.texture.kind = texture == "checkerboard" ? TextureSpec::Kind::kCheckerboard
                                               : TextureSpec::Kind::kGaussianBlobs;
    s.texture.blob_count = blob_count;
    s.texture.blob_sigma = blob_sigma;
    s.texture.cell = cell;
    s.motion.c[0] = cx;
    s.motion.c[1] = cy;
    s.motion.b[0] = bx;
    s.motion.b[1] = by;
    s.motion.omega = omega;
    s.contrast_c = contrast;
    s.t_k_us = t_k_us;
    s.duration_us = duration_us;
    s.seed = seed;
    s.noise_rate = noise_rate;
    s.background_checker = background_checker;
    return s;
}

ModelConfig config_from_kwargs(int bins, int n_targets, int feat_dim, int downsample,
                               int lookup_radius, int pyramid_levels, int global_iters,
                               int refine_iters, int hidden_dim, int context_dim,
                               int motion_dim, bool velocity_transform, uint64_t seed) {
    ModelConfig c;
    c.bins = bins;
    c.n_targets = n_targets;
    c.feat_dim = feat_dim;
    c.downsample = downsample;
    c.lookup_radius = lookup_radius;
    c.pyramid_levels = pyramid_levels;
    c.global_iters = global_iters;
    c.refine_iters = refine_iters;
    c.hidden_dim = hidden_dim;
    c.context_dim = context_dim;
    c.motion_dim = motion_dim;
    c.velocity_transform = velocity_transform;
    c.seed = seed;
    return c;
}

} // namespace

PYBIND11_MODULE(evresid, m) {
    m.doc() = "residual-refined high-temporal-resolution event optical flow";

    m.def("load_events", [](const std::string& path) { return stream_to_dict(load_events(path)); },
          py::arg("path"));
    m.def("save_events",
          [](const py::dict& events, const std::string& path) {
              save_events(dict_to_stream(events), path);
          },
          py::arg("events"), py::arg("path"));

    m.def("voxelize",
          [](const py::dict& events, int bins, int64_t t_start, int64_t t_end,
             const std::string& norm) {
              return tensor_to_numpy(voxelize(dict_to_stream(events), bins, t_start, t_end,
                                              norm == "firstlast"
                                                  ? TimeNormalization::kFirstLast
                                                  : TimeNormalization::kSpan)
                                         .data);
          },
          py::arg("events"), py::arg("bins"), py::arg("t_start"), py::arg("t_end"),
          py::arg("norm") = "span");

    m.def("save_flow",
          [](int64_t t_a, int64_t t_b, const py::array_t<double>& data,
             const std::string& path) { save_flow(make_flow(t_a, t_b, data), path); });
    m.def("load_flow", [](const std::string& path) {
        FlowField f = load_flow(path);
        return py::make_tuple(f.t_a, f.t_b, tensor_to_numpy(f.data));
    });
    m.def("save_tensor", [](const py::array_t<double>& a, const std::string& path) {
        save_tensor(numpy_to_tensor(a), path);
    });
    m.def("load_tensor",
          [](const std::string& path) { return tensor_to_numpy(load_tensor(path)); });

    py::class_<GroundTruthFlow>(m, "GroundTruth")
        .def("flow",
             [](const GroundTruthFlow& gt, int64_t t1, int64_t t2) {
                 return tensor_to_numpy(gt.flow(t1, t2).data);
             },
             py::arg("t1_us"), py::arg("t2_us"))
        .def("valid_mask", [](const GroundTruthFlow& gt, int64_t t) {
            return tensor_to_numpy(gt.valid_mask(t));
        });

    m.def("render_scene",
          [](int width, int height, const std::string& texture, int blob_count,
             double blob_sigma, double cell, double cx, double cy, double bx, double by,
             double omega, double contrast, int64_t t_k_us, int64_t duration_us,
             uint64_t seed, double noise_rate, bool background_checker) {
              auto [events, gt] = render_scene(scene_from_kwargs(
                  width, height, texture, blob_count, blob_sigma, cell, cx, cy, bx, by, omega,
                  contrast, t_k_us, duration_us, seed, noise_rate, background_checker));
              return py::make_tuple(stream_to_dict(events), gt);
          },
          py::arg("width") = 128, py::arg("height") = 96, py::arg("texture") = "blobs",
          py::arg("blob_count") = 8, py::arg("blob_sigma") = 4.0, py::arg("cell") = 12.0,
          py::arg("cx") = 6.0, py::arg("cy") = 0.0, py::arg("bx") = 0.0, py::arg("by") = 0.0,
          py::arg("omega") = 1.0, py::arg("contrast") = 0.2, py::arg("t_k_us") = 9000,
          py::arg("duration_us") = 54000, py::arg("seed") = 0, py::arg("noise_rate") = 0.0,
          py::arg("background_checker") = false);

    m.def("make_regional_noise", [](int64_t H, int64_t W, int64_t S, uint64_t seed) {
        Rng rng(seed);
        return tensor_to_numpy(make_regional_noise(H, W, S, rng));
    });
    m.def("make_white_noise", [](int64_t H, int64_t W, uint64_t seed) {
        Rng rng(seed);
        return tensor_to_numpy(make_white_noise(H, W, rng));
    });

    m.def("forward_to_backward",
          [](const py::array_t<double>& fwd, double eps) {
              FlowField f = make_flow(0, 1, fwd);
              BackwardFlow b = forward_to_backward(f, eps);
              return py::make_tuple(tensor_to_numpy(b.flow.data), tensor_to_numpy(b.mask));
          },
          py::arg("forward_flow"), py::arg("eps") = 1e-6);

    m.def("fwl",
          [](const py::dict& events, const std::vector<py::tuple>& flows,
             const std::string& mode, bool signed_polarity) {
              EventStream s = dict_to_stream(events);
              std::vector<FlowField> fs;
              for (const py::tuple& t : flows)
                  fs.push_back(make_flow(t[0].cast<int64_t>(), t[1].cast<int64_t>(),
                                         t[2].cast<py::array_t<double>>()));
              return fwl(s, fs,
                         mode == "htr" ? WarpMode::kHtrPiecewise : WarpMode::kLtrLinear,
                         signed_polarity);
          },
          py::arg("events"), py::arg("flows"), py::arg("mode") = "ltr",
          py::arg("signed_polarity") = false);

    m.def("epe",
          [](const py::array_t<double>& est, const py::array_t<double>& gt,
             const py::array_t<double>& mask) {
              FlowField a = make_flow(0, 1, est);
              FlowField b = make_flow(0, 1, gt);
              return epe(a, b, numpy_to_tensor(mask));
          });
    m.def("out3",
          [](const py::array_t<double>& est, const py::array_t<double>& gt,
             const py::array_t<double>& mask) {
              FlowField a = make_flow(0, 1, est);
              FlowField b = make_flow(0, 1, gt);
              return out3(a, b, numpy_to_tensor(mask));
          });

    py::class_<FlowModel>(m, "FlowModel")
        .def(py::init([](int bins, int n_targets, int feat_dim, int downsample,
                         int lookup_radius, int pyramid_levels, int global_iters,
                         int refine_iters, int hidden_dim, int context_dim, int motion_dim,
                         bool velocity_transform, uint64_t seed) {
                 return FlowModel(config_from_kwargs(
                     bins, n_targets, feat_dim, downsample, lookup_radius, pyramid_levels,
                     global_iters, refine_iters, hidden_dim, context_dim, motion_dim,
                     velocity_transform, seed));
             }),
             py::arg("bins") = 2, py::arg("n_targets") = 5, py::arg("feat_dim") = 24,
             py::arg("downsample") = 4, py::arg("lookup_radius") = 3,
             py::arg("pyramid_levels") = 2, py::arg("global_iters") = 3,
             py::arg("refine_iters") = 4, py::arg("hidden_dim") = 24,
             py::arg("context_dim") = 24, py::arg("motion_dim") = 24,
             py::arg("velocity_transform") = true, py::arg("seed") = 1234)
        .def("load_checkpoint",
             [](FlowModel& m, const std::string& path) { load_checkpoint(m.params(), path); })
        .def("save_checkpoint",
             [](FlowModel& m, const std::string& path) { save_checkpoint(m.params(), path); })
        .def("encode",
             [](FlowModel& m, const py::array_t<double>& voxel) {
                 return tensor_to_numpy(m.encode(numpy_to_tensor(voxel)));
             })
        .def("infer_htr",
             [](FlowModel& m, const py::dict& events, int64_t t_k, int64_t t_k1, int freq,
                const std::string& precision) {
                 EventStream s = dict_to_stream(events);
                 SegmentPlan plan{t_k, t_k1, m.config().n_targets};
                 auto flows = m.infer_htr(s, plan, freq,
                                          precision == "f64" ? Precision::kF64
                                                             : Precision::kF32);
                 py::list out;
                 for (auto& [t, f] : flows)
                     out.append(py::make_tuple(t, tensor_to_numpy(f.data)));
                 return out;
             },
             py::arg("events"), py::arg("t_k_us"), py::arg("t_k1_us"), py::arg("freq") = 1,
             py::arg("precision") = "f32");
}
