#include "evresid/params.hpp"

#include "evresid/binio.hpp"

namespace evresid {

namespace {
constexpr char kMagic[4] = {'E', 'V', 'C', 'K'};
constexpr uint32_t kVersion = 1;
} // namespace

void save_checkpoint(const ParamStore& store, const std::string& path) {
    BinWriter w(path);
    w.magic(kMagic);
    w.pod<uint32_t>(kVersion);
    w.pod<uint64_t>(store.names().size());
    for (size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.names()[i];
        const Param& p = store[i];
        w.pod<uint32_t>(uint32_t(name.size()));
        w.bytes(name.data(), name.size());
        w.pod<uint32_t>(uint32_t(p.value.shape().rank()));
        for (int d = 0; d < p.value.shape().rank(); ++d)
            w.pod<uint32_t>(uint32_t(p.value.shape()[d]));
        std::vector<float> f(size_t(p.value.numel()));
        for (int64_t j = 0; j < p.value.numel(); ++j) f[size_t(j)] = float(p.value[j]);
        w.f32_array(f.data(), f.size());
    }
    w.close();
}

void load_checkpoint(ParamStore& store, const std::string& path) {
    BinReader r(path);
    r.expect_magic(kMagic);
    const uint32_t version = r.pod<uint32_t>();
    if (version != kVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint64_t count = r.pod<uint64_t>();
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t nlen = r.pod<uint32_t>();
        std::string name(nlen, '\0');
        r.bytes(name.data(), nlen);
        const uint32_t rank = r.pod<uint32_t>();
        if (rank > 4) throw FormatError(path + ": parameter rank > 4 for " + name);
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
        Tensor value(shape);
        for (int64_t j = 0; j < numel; ++j) value[j] = double(f[size_t(j)]);
        if (store.has(name)) {
            Param& p = store.at(name);
            if (p.value.shape() != shape)
                throw FormatError(path + ": shape mismatch for " + name + ", file " +
                                  shape.str() + " vs model " + p.value.shape().str());
            p.value = std::move(value);
        } else {
            store.add(name, std::move(value));
        }
    }
}

Tensor he_init(Shape shape, int64_t fan_in, Rng& rng) {
    const double s = std::sqrt(2.0 / double(fan_in));
    return Tensor::randn(shape, rng, s);
}

} // namespace evresid
