#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evresid/tensor.hpp"

namespace evresid {

// One polarity spike. Timestamps are microseconds; polarity is -1 or +1.
struct Event {
    int64_t t = 0;
    uint16_t x = 0;
    uint16_t y = 0;
    int8_t p = 1;
};

struct EventStream {
    uint32_t width = 0;
    uint32_t height = 0;
    std::vector<Event> events; // non-decreasing in t, ties keep ingestion order

    bool empty() const { return events.empty(); }
    size_t size() const { return events.size(); }
};

// Uniform split of the interval [t_k, t_k1] into n_targets segments of
// width delta_t; the reference segment precedes t_k.
struct SegmentPlan {
    int64_t t_k = 0;
    int64_t t_k1 = 0;
    int n_targets = 1;

    int64_t delta_t() const { return (t_k1 - t_k) / n_targets; }
    int64_t target_end(int n) const { return t_k + int64_t(n) * delta_t(); } // n in [1, N]
    void validate() const;
};

struct VoxelGrid {
    Tensor data; // (bins, H, W)
    int64_t t_start = 0;
    int64_t t_end = 0;
};

// EVS1 container: magic, u32 W, u32 H, u64 count, then 16-byte records
// {i64 t_us, u16 x, u16 y, i8 p, 3 pad}.
EventStream load_events(const std::string& path);
void save_events(const EventStream& stream, const std::string& path);

// Reference segment [t_k - delta_t, t_k) plus N half-open targets; the last
// target is closed at t_k1. The stream must cover the full range.
struct SplitResult {
    EventStream reference;
    std::vector<EventStream> targets; // index 0 holds target n=1
};
SplitResult split_segments(const EventStream& stream, const SegmentPlan& plan);

enum class TimeNormalization {
    kSpan,       // normalize by the segment span endpoints (default)
    kFirstLast,  // normalize by first/last event timestamps
};

// Trilinear deposition of signed polarity into (bins, H, W); events with
// integer coordinates put full spatial weight at their pixel, out-of-range
// kernel mass is clipped.
VoxelGrid voxelize(const EventStream& segment, int bins, int64_t t_start, int64_t t_end,
                   TimeNormalization norm = TimeNormalization::kSpan);

// One deposition of the kernel product p * k(x-xi) * k(y-yi) * k(b-ts) into
// grid (bins, H, W); accepts fractional coordinates.
void voxel_deposit(Tensor& grid, double x, double y, double ts, double p);

} // namespace evresid
