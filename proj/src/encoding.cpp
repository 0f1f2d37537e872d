#include "satgeo/encoding.hpp"

#include <cmath>

namespace satgeo {

namespace {

// Shared fused kernel for pos_encode / masked_encode. The mask has 2L
// entries applied identically to every input dimension block.
Tensor encode_with_mask(const Tensor& x, const EncodingSpec& spec, std::vector<uint8_t> mask) {
    spec.validate();
    if (x.ndim() < 1) throw ShapeError("pos_encode: input must have at least one axis");
    const int64_t d = x.shape().back();
    const int64_t rows = x.size() / d;
    const int L = spec.L;
    const bool ident = spec.include_identity;
    const int64_t D = spec.dim_out(d);

    for (real v : x.values())
        if (std::abs(double(v)) > 1.0 + 1e-6)
            throw DomainError("pos_encode: component " + std::to_string(double(v)) +
                              " outside [-1, 1]");

    std::vector<real> out(size_t(rows * D), real(0));
    const real* px = x.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const real* xr = px + r * d;
        real* o = out.data() + r * D;
        for (int64_t j = 0; j < d; ++j) {
            if (ident) o[j] = xr[j];
            real* block = o + (ident ? d : 0) + j * 2 * L;
            // double-angle recurrence: one sincos, then
            // sin(2a) = 2 sin a cos a, cos(2a) = 1 - 2 sin^2 a
            double sk, ck;
            ::sincos(M_PI * double(xr[j]), &sk, &ck);
            for (int k = 0; k < L; ++k) {
                if (mask[size_t(2 * k)]) block[2 * k] = real(sk);
                if (mask[size_t(2 * k + 1)]) block[2 * k + 1] = real(ck);
                double s2 = 2.0 * sk * ck;
                ck = 1.0 - 2.0 * sk * sk;
                sk = s2;
            }
        }
    }

    Shape os = x.shape();
    os.back() = D;
    return Tensor::make_op(
        std::move(os), std::move(out), {x},
        [d, L, ident, D, mask = std::move(mask)](const Node& self, const std::vector<real>& g,
                                                 GradMap& gm) {
            const Node* nx = self.parents[0].get();
            if (!nx->requires_grad) return;
            std::vector<real>& gx = gm.buffer(nx);
            const int64_t rows = int64_t(nx->values.size()) / d;
            for (int64_t r = 0; r < rows; ++r) {
                const real* xr = nx->values.data() + r * d;
                const real* go = g.data() + r * D;
                for (int64_t j = 0; j < d; ++j) {
                    double acc = ident ? double(go[j]) : 0.0;
                    const real* gb = go + (ident ? d : 0) + j * 2 * L;
                    double sk, ck;
                    ::sincos(M_PI * double(xr[j]), &sk, &ck);
                    double w = M_PI;
                    for (int k = 0; k < L; ++k) {
                        if (mask[size_t(2 * k)]) acc += double(gb[2 * k]) * w * ck;
                        if (mask[size_t(2 * k + 1)]) acc -= double(gb[2 * k + 1]) * w * sk;
                        double s2 = 2.0 * sk * ck;
                        ck = 1.0 - 2.0 * sk * sk;
                        sk = s2;
                        w *= 2.0;
                    }
                    gx[size_t(r * d + j)] += real(acc);
                }
            }
        });
}

}  // namespace

Tensor pos_encode(const Tensor& x, const EncodingSpec& spec) {
    return encode_with_mask(x, spec, std::vector<uint8_t>(size_t(2 * spec.L), 1));
}

std::vector<uint8_t> granularity_mask(int64_t t, const GranularitySchedule& sched) {
    sched.validate();
    if (t < 0) throw Error("granularity_mask: iteration must be non-negative");
    std::vector<uint8_t> m(size_t(2 * sched.L), 1);
    if (t >= sched.T) return m;
    double theta = double(t) * double(sched.L) / double(sched.T) + sched.b;
    if (sched.flat_index) {
        for (int i = 0; i < 2 * sched.L; ++i) m[size_t(i)] = double(i) < 2.0 * theta ? 1 : 0;
    } else {
        for (int k = 0; k < sched.L; ++k) {
            uint8_t on = double(k) < theta ? 1 : 0;
            m[size_t(2 * k)] = on;
            m[size_t(2 * k + 1)] = on;
        }
    }
    return m;
}

Tensor masked_encode(const Tensor& x, const EncodingSpec& spec, int64_t t,
                     const GranularitySchedule& sched) {
    if (sched.L != spec.L)
        throw ConfigError("masked_encode: schedule L " + std::to_string(sched.L) +
                          " does not match encoding L " + std::to_string(spec.L));
    return encode_with_mask(x, spec, granularity_mask(t, sched));
}

}  // namespace satgeo
