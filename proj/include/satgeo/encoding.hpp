#pragma once

#include <cstdint>
#include <vector>

#include "satgeo/common.hpp"
#include "satgeo/tensor.hpp"

namespace satgeo {

struct EncodingSpec {
    int L = 10;                    // frequency count
    bool include_identity = true;  // raw x channels, prepended and never masked
    void validate() const {
        if (L < 1) throw ConfigError("EncodingSpec: L must be >= 1");
    }
    // output width per input dimension block
    int64_t dim_out(int64_t d) const { return (include_identity ? d : 0) + d * 2 * L; }
};

// Coarse-to-fine schedule over the positional encoding. At iteration t the
// active prefix is i < 2*(t*L/T + b); entries are interpreted as (sin, cos)
// pairs per band so a unit increase enables one full band. flat_index
// switches to the literal per-entry threshold.
struct GranularitySchedule {
    int64_t T = 1;   // final regularization iteration
    double b = 0.0;  // initial bias, in bands
    int L = 10;
    bool flat_index = false;
    void validate() const {
        if (T < 1) throw ConfigError("GranularitySchedule: T must be >= 1");
        if (b < 0 || b > double(L)) throw ConfigError("GranularitySchedule: b must be in [0, L]");
        if (L < 1) throw ConfigError("GranularitySchedule: L must be >= 1");
    }
};

// Per-dimension layout: identity channels for all dims first, then for each
// input dim the block [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x),
// cos(2^{L-1} pi x)]. Input lives in [-1, 1] per component.
Tensor pos_encode(const Tensor& x, const EncodingSpec& spec);

// 0/1 mask of length 2L, shared by every input dimension. All ones for t >= T.
std::vector<uint8_t> granularity_mask(int64_t t, const GranularitySchedule& sched);

// pos_encode with masked entries exactly zero and carrying zero gradient.
Tensor masked_encode(const Tensor& x, const EncodingSpec& spec, int64_t t,
                     const GranularitySchedule& sched);

}  // namespace satgeo
