#include "evresid/events.hpp"

#include <algorithm>
#include <cmath>

#include "evresid/binio.hpp"

namespace evresid {

namespace {
constexpr char kMagic[4] = {'E', 'V', 'S', '1'};

#pragma pack(push, 1)
struct Record {
    int64_t t;
    uint16_t x;
    uint16_t y;
    int8_t p;
    uint8_t pad[3];
};
#pragma pack(pop)
static_assert(sizeof(Record) == 16);
} // namespace

void SegmentPlan::validate() const {
    if (n_targets < 1) throw FormatError("segment plan: n_targets must be >= 1");
    if (t_k1 <= t_k) throw FormatError("segment plan: t_k1 must exceed t_k");
    if ((t_k1 - t_k) % n_targets != 0)
        throw FormatError("segment plan: interval length " + std::to_string(t_k1 - t_k) +
                          " us not divisible by " + std::to_string(n_targets));
}

EventStream load_events(const std::string& path) {
    BinReader r(path);
    r.expect_magic(kMagic);
    EventStream s;
    s.width = r.pod<uint32_t>();
    s.height = r.pod<uint32_t>();
    if (s.width == 0 || s.height == 0)
        throw FormatError(path + ": zero resolution in header (byte offset 4)");
    const uint64_t count = r.pod<uint64_t>();
    s.events.reserve(count);
    int64_t prev_t = INT64_MIN;
    for (uint64_t i = 0; i < count; ++i) {
        const size_t off = r.offset();
        Record rec{};
        r.bytes(&rec, sizeof(rec));
        if (rec.p != 1 && rec.p != -1)
            throw FormatError(path + ": polarity " + std::to_string(int(rec.p)) +
                              " at byte offset " + std::to_string(off));
        if (rec.x >= s.width || rec.y >= s.height)
            throw FormatError(path + ": event (" + std::to_string(rec.x) + "," +
                              std::to_string(rec.y) + ") outside " + std::to_string(s.width) +
                              "x" + std::to_string(s.height) + " at byte offset " +
                              std::to_string(off));
        if (rec.t < prev_t)
            throw FormatError(path + ": non-monotonic timestamp at byte offset " +
                              std::to_string(off));
        prev_t = rec.t;
        s.events.push_back(Event{rec.t, rec.x, rec.y, rec.p});
    }
    return s;
}

void save_events(const EventStream& stream, const std::string& path) {
    BinWriter w(path);
    w.magic(kMagic);
    w.pod<uint32_t>(stream.width);
    w.pod<uint32_t>(stream.height);
    w.pod<uint64_t>(stream.events.size());
    for (const Event& e : stream.events) {
        Record rec{e.t, e.x, e.y, e.p, {0, 0, 0}};
        w.bytes(&rec, sizeof(rec));
    }
    w.close();
}

SplitResult split_segments(const EventStream& stream, const SegmentPlan& plan) {
    plan.validate();
    const int64_t dt = plan.delta_t();
    const int64_t lo = plan.t_k - dt;
    // an event stream only witnesses times between its first and last event;
    // sparse scenes may fire late, so reject only plans that clearly fall
    // outside the witnessed range
    if (stream.events.empty())
        throw FormatError("empty event stream cannot cover the segment plan");
    if (stream.events.front().t > plan.t_k1 - dt || stream.events.back().t < plan.t_k)
        throw FormatError("event stream [" + std::to_string(stream.events.front().t) + ", " +
                          std::to_string(stream.events.back().t) + "] does not cover [" +
                          std::to_string(lo) + ", " + std::to_string(plan.t_k1) + "] us");
    SplitResult out;
    out.reference.width = stream.width;
    out.reference.height = stream.height;
    out.targets.resize(size_t(plan.n_targets));
    for (auto& t : out.targets) {
        t.width = stream.width;
        t.height = stream.height;
    }
    for (const Event& e : stream.events) {
        if (e.t < lo) continue;
        if (e.t < plan.t_k) {
            out.reference.events.push_back(e);
        } else if (e.t < plan.t_k1) {
            const int n = int((e.t - plan.t_k) / dt); // 0-based target index
            out.targets[size_t(n)].events.push_back(e);
        } else if (e.t == plan.t_k1) {
            out.targets.back().events.push_back(e); // final target closed at t_k1
        }
    }
    return out;
}

VoxelGrid voxelize(const EventStream& segment, int bins, int64_t t_start, int64_t t_end,
                   TimeNormalization norm) {
    if (bins < 1) throw FormatError("voxelize: bins must be >= 1");
    if (t_end <= t_start) throw FormatError("voxelize: span must have positive length");
    VoxelGrid grid;
    grid.t_start = t_start;
    grid.t_end = t_end;
    grid.data = Tensor(Shape{bins, int64_t(segment.height), int64_t(segment.width)});

    double norm_t0 = double(t_start);
    double norm_t1 = double(t_end);
    if (norm == TimeNormalization::kFirstLast && segment.size() >= 2) {
        norm_t0 = double(segment.events.front().t);
        norm_t1 = double(segment.events.back().t);
    }
    const double denom = norm_t1 > norm_t0 ? (norm_t1 - norm_t0) : 1.0;

    for (const Event& e : segment.events) {
        const double ts = double(bins - 1) * (double(e.t) - norm_t0) / denom;
        voxel_deposit(grid.data, double(e.x), double(e.y), ts, double(e.p));
    }
    return grid;
}

void voxel_deposit(Tensor& grid, double x, double y, double ts, double p) {
    const int64_t B = grid.shape()[0], H = grid.shape()[1], W = grid.shape()[2];
    const int64_t bx = int64_t(std::floor(x));
    const int64_t by = int64_t(std::floor(y));
    const int64_t bb = int64_t(std::floor(ts));
    for (int64_t b = bb; b <= bb + 1; ++b) {
        if (b < 0 || b >= B) continue;
        const double wb = 1.0 - std::abs(ts - double(b));
        if (wb <= 0.0) continue;
        for (int64_t yy = by; yy <= by + 1; ++yy) {
            if (yy < 0 || yy >= H) continue;
            const double wy = 1.0 - std::abs(y - double(yy));
            if (wy <= 0.0) continue;
            for (int64_t xx = bx; xx <= bx + 1; ++xx) {
                if (xx < 0 || xx >= W) continue;
                const double wx = 1.0 - std::abs(x - double(xx));
                if (wx <= 0.0) continue;
                grid.at3(b, yy, xx) += p * wb * wy * wx;
            }
        }
    }
}

} // namespace evresid
