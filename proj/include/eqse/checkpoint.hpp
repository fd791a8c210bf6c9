#pragma once

// Binary checkpoint container for named parameter tensors.
//
// Layout (little-endian):
//   magic "EQW1"
//   u32 parameter count
//   per parameter:
//     u16 name length, name bytes
//     u8  rank
//     u32 dims[rank]
//     f32 data, row-major
//
// Values are stored as f32 regardless of the in-memory Real; with f32
// parameters the round-trip is bit-exact.

#include <string>
#include <vector>

#include "eqse/common.hpp"
#include "eqse/optim.hpp"
#include "eqse/tensor.hpp"

namespace eqse {

inline constexpr char kCheckpointMagic[4] = {'E', 'Q', 'W', '1'};

template <typename Real>
void save_checkpoint(const std::string& path, const ParamStore<Real>& params) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(static_cast<uint32_t>(params.size()));
    for (size_t p = 0; p < params.size(); ++p) {
        const std::string& name = params.names[p];
        const Tensor<Real>& t = params.values[p];
        if (name.size() > 0xffff) throw IoError("checkpoint: parameter name too long: " + name);
        w.u16(static_cast<uint16_t>(name.size()));
        w.raw(name.data(), name.size());
        if (t.rank() > 0xff) throw IoError("checkpoint: rank too large for " + name);
        w.u8(static_cast<uint8_t>(t.rank()));
        for (int64_t d : t.shape) w.u32(static_cast<uint32_t>(d));
        for (int64_t i = 0; i < t.numel(); ++i) w.f32(static_cast<float>(t[i]));
    }
    w.save(path);
}

template <typename Real>
ParamStore<Real> load_checkpoint(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    if (r.str(4) != std::string(kCheckpointMagic, 4))
        throw IoError("checkpoint: bad magic in " + path);
    const uint32_t count = r.u32();
    ParamStore<Real> params;
    for (uint32_t p = 0; p < count; ++p) {
        const uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const uint8_t rank = r.u8();
        Shape shape(rank);
        for (uint8_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(r.u32());
        Tensor<Real> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Real>(r.f32());
        params.add(name, std::move(t));
    }
    if (!r.eof()) throw IoError("checkpoint: trailing bytes in " + path);
    return params;
}

/// Strict structural match: same names in the same order, same shapes.
template <typename Real>
void restore_into(ParamStore<Real>& dst, const ParamStore<Real>& src) {
    if (dst.size() != src.size())
        throw IoError("checkpoint: parameter count mismatch, model has " + std::to_string(dst.size()) + ", file has " + std::to_string(src.size()));
    for (size_t p = 0; p < dst.size(); ++p) {
        if (dst.names[p] != src.names[p])
            throw IoError("checkpoint: parameter order mismatch at " + std::to_string(p) + ": model '" + dst.names[p] + "' vs file '" + src.names[p] + "'");
        if (dst.values[p].shape != src.values[p].shape)
            throw IoError("checkpoint: shape mismatch for " + dst.names[p] + ": model " + shape_str(dst.values[p].shape) + " vs file " + shape_str(src.values[p].shape));
        dst.values[p] = src.values[p];
    }
}

} // namespace eqse
