#pragma once

#include <cstdint>
#include <string>

#include "evresid/tensor.hpp"

namespace evresid {

// Dense 2-vector field over a time span; data is (2, H, W) with channel 0
// the x-displacement and channel 1 the y-displacement, in pixels.
struct FlowField {
    Tensor data;
    int64_t t_a = 0;
    int64_t t_b = 0;

    int64_t height() const { return data.shape()[1]; }
    int64_t width() const { return data.shape()[2]; }
};

// "EVFL" flow container: magic, u32 W, u32 H, i64 t_a_us, i64 t_b_us, then
// 2*H*W little-endian f32, channel-major (all u, then all v).
void save_flow(const FlowField& flow, const std::string& path);
FlowField load_flow(const std::string& path);

// "EVTN" tensor container: magic, u32 rank, u32 dims[rank], then f32 data
// in row-major order.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

// 16-bit grayscale PNG (values scaled so the data maximum maps to 65535,
// all-zero images stay black).
void save_png16(const Tensor& image, const std::string& path);

} // namespace evresid
