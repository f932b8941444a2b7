#include "evresid/flowio.hpp"

#include <vector>

#include "evresid/binio.hpp"

namespace evresid {

namespace {
constexpr char kFlowMagic[4] = {'E', 'V', 'F', 'L'};
constexpr char kTensorMagic[4] = {'E', 'V', 'T', 'N'};
} // namespace

void save_flow(const FlowField& flow, const std::string& path) {
    if (flow.data.shape().rank() != 3 || flow.data.shape()[0] != 2)
        throw IoError("save_flow: data must be (2,H,W)");
    BinWriter w(path);
    w.magic(kFlowMagic);
    w.pod<uint32_t>(uint32_t(flow.width()));
    w.pod<uint32_t>(uint32_t(flow.height()));
    w.pod<int64_t>(flow.t_a);
    w.pod<int64_t>(flow.t_b);
    std::vector<float> f(size_t(flow.data.numel()));
    for (int64_t i = 0; i < flow.data.numel(); ++i) f[size_t(i)] = float(flow.data[i]);
    w.f32_array(f.data(), f.size());
    w.close();
}

FlowField load_flow(const std::string& path) {
    BinReader r(path);
    r.expect_magic(kFlowMagic);
    const uint32_t W = r.pod<uint32_t>();
    const uint32_t H = r.pod<uint32_t>();
    FlowField flow;
    flow.t_a = r.pod<int64_t>();
    flow.t_b = r.pod<int64_t>();
    flow.data = Tensor(Shape{2, int64_t(H), int64_t(W)});
    std::vector<float> f(size_t(2) * H * W);
    r.bytes(f.data(), f.size() * 4);
    for (size_t i = 0; i < f.size(); ++i) flow.data[int64_t(i)] = double(f[i]);
    return flow;
}

void save_tensor(const Tensor& t, const std::string& path) {
    BinWriter w(path);
    w.magic(kTensorMagic);
    w.pod<uint32_t>(uint32_t(t.shape().rank()));
    for (int d = 0; d < t.shape().rank(); ++d) w.pod<uint32_t>(uint32_t(t.shape()[d]));
    std::vector<float> f(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) f[size_t(i)] = float(t[i]);
    w.f32_array(f.data(), f.size());
    w.close();
}

Tensor load_tensor(const std::string& path) {
    BinReader r(path);
    r.expect_magic(kTensorMagic);
    const uint32_t rank = r.pod<uint32_t>();
    if (rank > 4) throw FormatError(path + ": tensor rank > 4");
    uint32_t dims[4] = {1, 1, 1, 1};
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
        dims[d] = r.pod<uint32_t>();
        numel *= dims[d];
    }
    Shape shape;
    switch (rank) {
        case 0: shape = Shape{}; break;
        case 1: shape = Shape{dims[0]}; break;
        case 2: shape = Shape{dims[0], dims[1]}; break;
        case 3: shape = Shape{dims[0], dims[1], dims[2]}; break;
        default: shape = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
    }
    std::vector<float> f(static_cast<size_t>(numel));
    r.bytes(f.data(), f.size() * 4);
    Tensor t(shape);
    for (int64_t i = 0; i < numel; ++i) t[i] = double(f[size_t(i)]);
    return t;
}

} // namespace evresid
