#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "satgeo/encoding.hpp"
#include "satgeo/field.hpp"

using namespace satgeo;

namespace {

FieldArch tiny_arch() {
    FieldArch a;
    a.backbone_layers = 2;
    a.backbone_width = 16;
    a.proj_width = 8;
    a.embed_dim = 2;
    a.l_pos = 2;
    a.l_dir = 1;
    a.num_images = 3;
    return a;
}

struct EncBatch {
    Tensor x, dir, sun;
    std::vector<int64_t> ids;
};

EncBatch random_batch(const FieldArch& arch, int64_t n, uint64_t seed) {
    Rng rng(seed);
    Tensor pos = Tensor::uniform({n, 3}, -1, 1, rng);
    Tensor d = Tensor::uniform({n, 3}, real(-0.5), real(0.5), rng);
    EncBatch b;
    b.x = pos_encode(pos, EncodingSpec{arch.l_pos, true});
    b.dir = pos_encode(d, EncodingSpec{arch.l_dir, true});
    b.sun = Tensor::uniform({n, 3}, real(-0.5), real(0.5), rng);
    for (int64_t i = 0; i < n; ++i) b.ids.push_back(rng.uniform_int(arch.num_images));
    return b;
}

}  // namespace

TEST_CASE("zero final layers give activation identities") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 1);
    p.sigma_w.set_values(std::vector<real>(size_t(p.sigma_w.size()), 0));
    p.sigma_b.set_values({0});
    p.albedo_w.set_values(std::vector<real>(size_t(p.albedo_w.size()), 0));
    p.albedo_b.set_values({0, 0, 0});
    p.ambient_w.set_values(std::vector<real>(size_t(p.ambient_w.size()), 0));
    p.ambient_b.set_values({0, 0, 0});

    EncBatch b = random_batch(arch, 4, 9);
    FieldEval e = eval_field(p, b.x, b.dir, b.sun, b.ids);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(double(e.sigma[i]) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
        for (int k = 0; k < 3; ++k) CHECK(double(e.albedo[i * 3 + k]) == doctest::Approx(0.5));
    }
}

TEST_CASE("beta head floors at beta_min") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 1);
    p.beta_w.set_values(std::vector<real>(size_t(p.beta_w.size()), 0));
    p.beta_b.set_values({-10});
    EncBatch b = random_batch(arch, 2, 9);
    FieldEval e = eval_field(p, b.x, b.dir, b.sun, b.ids);
    for (int64_t i = 0; i < 2; ++i) {
        CHECK(double(e.beta[i]) >= double(arch.beta_min));
        CHECK(double(e.beta[i]) == doctest::Approx(double(arch.beta_min)).epsilon(1e-3));
    }
}

TEST_CASE("density path equals the full path exactly and shares gradients") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 2);
    EncBatch b = random_batch(arch, 100, 10);

    Tensor d = eval_density(p, b.x);
    FieldEval e = eval_field(p, b.x, b.dir, b.sun, b.ids);
    for (int64_t i = 0; i < 100; ++i) CHECK(d[i] == e.sigma[i]);

    GradMap g1 = backward(sum(d));
    GradMap g2 = backward(sum(eval_field(p, b.x, b.dir, b.sun, b.ids).sigma));
    for (size_t li = 0; li < p.backbone_w.size(); ++li) {
        auto a = g1.get(p.backbone_w[li]);
        auto c = g2.get(p.backbone_w[li]);
        REQUIRE(a.size() == c.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == c[i]);
    }
}

TEST_CASE("sigma gradient w.r.t. backbone weights checks against finite differences") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 3);
    EncBatch b = random_batch(arch, 5, 11);
    double err = grad_check(
        [&](const Tensor& w) {
            FieldParams q = p;
            q.backbone_w[1] = w;
            return sum(eval_density(q, b.x));
        },
        p.backbone_w[1].detach(), 3e-3);
    CHECK(err < (sizeof(real) == 4 ? 1e-3 : 1e-6));
}

TEST_CASE("same seed and config give bit-identical parameters and outputs") {
    FieldArch arch = tiny_arch();
    FieldParams a = FieldParams::init(arch, 42);
    FieldParams c = FieldParams::init(arch, 42);
    auto pa = a.parameters();
    auto pc = c.parameters();
    REQUIRE(pa.size() == pc.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->size() == pc[i]->size());
        for (int64_t j = 0; j < pa[i]->size(); ++j) CHECK((*pa[i])[j] == (*pc[i])[j]);
    }
    EncBatch b = random_batch(arch, 8, 12);
    FieldEval e1 = eval_field(a, b.x, b.dir, b.sun, b.ids);
    FieldEval e2 = eval_field(c, b.x, b.dir, b.sun, b.ids);
    for (int64_t i = 0; i < e1.sigma.size(); ++i) CHECK(e1.sigma[i] == e2.sigma[i]);
    for (int64_t i = 0; i < e1.albedo.size(); ++i) CHECK(e1.albedo[i] == e2.albedo[i]);
}

TEST_CASE("sigma is invariant to image id and sun direction") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 5);
    EncBatch b = random_batch(arch, 6, 13);
    FieldEval e1 = eval_field(p, b.x, b.dir, b.sun, {0, 0, 0, 0, 0, 0});
    Rng rng(77);
    Tensor sun2 = Tensor::uniform({6, 3}, -1, 1, rng);
    FieldEval e2 = eval_field(p, b.x, b.dir, sun2, {2, 1, 2, 1, 0, 2});
    for (int64_t i = 0; i < 6; ++i) CHECK(e1.sigma[i] == e2.sigma[i]);
}

TEST_CASE("permuting embeddings permutes beta/tau and leaves sigma/albedo unchanged") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 6);
    EncBatch b = random_batch(arch, 4, 14);

    FieldEval e_a = eval_field(p, b.x, b.dir, b.sun, {0, 1, 0, 1});

    // swap embedding rows 0 and 1, then query with swapped ids
    FieldParams q = p;
    std::vector<real> emb = p.embeddings.values();
    int64_t E = arch.embed_dim;
    for (int64_t k = 0; k < E; ++k) std::swap(emb[size_t(k)], emb[size_t(E + k)]);
    q.embeddings = Tensor::from(p.embeddings.shape(), emb, true);
    FieldEval e_b = eval_field(q, b.x, b.dir, b.sun, {1, 0, 1, 0});

    for (int64_t i = 0; i < 4; ++i) {
        CHECK(e_a.beta[i] == e_b.beta[i]);
        CHECK(e_a.tau[i] == e_b.tau[i]);
        CHECK(e_a.sigma[i] == e_b.sigma[i]);
        for (int k = 0; k < 3; ++k) CHECK(e_a.albedo[i * 3 + k] == e_b.albedo[i * 3 + k]);
    }
}

TEST_CASE("unknown image id is rejected") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 7);
    EncBatch b = random_batch(arch, 2, 15);
    CHECK_THROWS_AS(eval_field(p, b.x, b.dir, b.sun, {0, 5}), Error);
}

TEST_CASE("compose_color closed forms and batch parity") {
    FieldOutput o;
    o.albedo = {real(0.2), real(0.5), real(0.8)};
    o.ambient = {real(0.1), real(0.3), real(0.6)};
    std::array<real, 9> ident{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<real, 3> zero{0, 0, 0};

    auto c1 = compose_color(o, ident, zero, 1);
    for (int k = 0; k < 3; ++k) CHECK(c1[size_t(k)] == doctest::Approx(double(o.albedo[size_t(k)])));

    auto c0 = compose_color(o, ident, zero, 0);
    for (int k = 0; k < 3; ++k)
        CHECK(double(c0[size_t(k)]) ==
              doctest::Approx(double(o.albedo[size_t(k)]) * double(o.ambient[size_t(k)])));

    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        FieldOutput r;
        std::array<real, 9> A;
        std::array<real, 3> b;
        for (int k = 0; k < 3; ++k) {
            r.albedo[size_t(k)] = real(rng.uniform(0, 1));
            r.ambient[size_t(k)] = real(rng.uniform(0, 1));
            b[size_t(k)] = real(rng.uniform(-0.2, 0.2));
        }
        for (int k = 0; k < 9; ++k) A[size_t(k)] = real(rng.uniform(-0.5, 1.0));
        real s = real(rng.uniform(0, 1));
        auto want = compose_color(r, A, b, s);
        // independent recomputation through the batched path
        Tensor alb = Tensor::from({1, 3}, std::vector<real>(r.albedo.begin(), r.albedo.end()));
        Tensor amb = Tensor::from({1, 3}, std::vector<real>(r.ambient.begin(), r.ambient.end()));
        Tensor At = Tensor::from({1, 9}, std::vector<real>(A.begin(), A.end()));
        Tensor bt = Tensor::from({1, 3}, std::vector<real>(b.begin(), b.end()));
        Tensor st = Tensor::from({1, 1}, std::vector<real>{s});
        Tensor got = compose_color_batch(alb, amb, At, bt, st);
        for (int k = 0; k < 3; ++k)
            CHECK(double(got[k]) == doctest::Approx(double(want[size_t(k)])).epsilon(1e-5));
    }
}

TEST_CASE("checkpoint round trip, hash rejection, truncation rejection") {
    FieldArch arch = tiny_arch();
    FieldParams p = FieldParams::init(arch, 8);
    std::string path = "/tmp/satgeo_test_ckpt.bin";
    p.save(path);

    FieldParams q = FieldParams::load(path, arch);
    auto pp = p.parameters();
    auto qq = q.parameters();
    for (size_t i = 0; i < pp.size(); ++i)
        for (int64_t j = 0; j < pp[i]->size(); ++j) CHECK((*pp[i])[j] == (*qq[i])[j]);

    FieldArch other = arch;
    other.backbone_width = 17;
    CHECK_THROWS_AS(FieldParams::load(path, other), Error);

    // truncate the file
    {
        std::vector<char> buf;
        FILE* f = std::fopen(path.c_str(), "rb");
        REQUIRE(f);
        std::fseek(f, 0, SEEK_END);
        long sz = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        buf.resize(size_t(sz));
        REQUIRE(std::fread(buf.data(), 1, size_t(sz), f) == size_t(sz));
        std::fclose(f);
        f = std::fopen(path.c_str(), "wb");
        REQUIRE(std::fwrite(buf.data(), 1, size_t(sz) - 8, f) == size_t(sz) - 8);
        std::fclose(f);
    }
    CHECK_THROWS_AS(FieldParams::load(path, arch), Error);
    CHECK_THROWS_AS(FieldParams::load("/tmp/satgeo_missing_ckpt.bin", arch), IoError);
    std::remove(path.c_str());
}
