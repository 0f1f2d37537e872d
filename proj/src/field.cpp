#include "satgeo/field.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace satgeo {

void FieldArch::validate() const {
    if (backbone_layers < 1 || backbone_width < 1 || proj_width < 1)
        throw ConfigError("FieldArch: layer/width settings must be positive");
    if (embed_dim < 1) throw ConfigError("FieldArch: embed_dim must be positive");
    if (l_pos < 1 || l_dir < 1) throw ConfigError("FieldArch: encoding L must be >= 1");
    if (!(beta_min > 0)) throw ConfigError("FieldArch: beta_min must be positive");
    if (num_images < 1) throw ConfigError("FieldArch: num_images must be >= 1");
}

uint64_t FieldArch::config_hash() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "arch:%d:%d:%d:%d:%d:%d:%.6g:%d:real%zu", backbone_layers,
                  backbone_width, proj_width, embed_dim, l_pos, l_dir, double(beta_min), num_images,
                  sizeof(real));
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (const char* p = buf; *p; ++p) {
        h ^= uint64_t(uint8_t(*p));
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

// Kaiming-style uniform fan-in init.
Tensor init_weight(int64_t fan_in, int64_t fan_out, Rng& rng) {
    real bound = real(std::sqrt(6.0 / double(fan_in)));
    return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, true);
}

Tensor init_bias(int64_t n) { return Tensor::zeros({n}, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return matmul(x, w) + b; }

Tensor backbone_features(const FieldParams& p, const Tensor& enc_x) {
    Tensor h = relu(linear(enc_x, p.backbone_w[0], p.backbone_b[0]));
    for (size_t i = 1; i < p.backbone_w.size(); ++i) h = relu(linear(h, p.backbone_w[i], p.backbone_b[i]));
    return h;
}

Tensor sigma_from_features(const FieldParams& p, const Tensor& feat) {
    return softplus(linear(feat, p.sigma_w, p.sigma_b));
}

}  // namespace

FieldParams FieldParams::init(const FieldArch& arch, uint64_t seed) {
    arch.validate();
    Rng rng(hash_stream(seed, 0xf1e1d));
    FieldParams p;
    p.arch = arch;
    int64_t w = arch.backbone_width;
    p.backbone_w.push_back(init_weight(arch.pos_in(), w, rng));
    p.backbone_b.push_back(init_bias(w));
    for (int i = 1; i < arch.backbone_layers; ++i) {
        p.backbone_w.push_back(init_weight(w, w, rng));
        p.backbone_b.push_back(init_bias(w));
    }
    p.sigma_w = init_weight(w, 1, rng);
    p.sigma_b = init_bias(1);
    int64_t proj_in = w + arch.dir_in() + 3;
    p.proj_w = init_weight(proj_in, arch.proj_width, rng);
    p.proj_b = init_bias(arch.proj_width);
    p.albedo_w = init_weight(arch.proj_width, 3, rng);
    p.albedo_b = init_bias(3);
    p.ambient_w = init_weight(arch.proj_width, 3, rng);
    p.ambient_b = init_bias(3);
    int64_t head_in = arch.proj_width + arch.embed_dim;
    p.beta_w = init_weight(head_in, 1, rng);
    p.beta_b = init_bias(1);
    p.tau_w = init_weight(head_in, 1, rng);
    p.tau_b = init_bias(1);

    int64_t J = arch.num_images;
    p.embeddings = Tensor::normal({J, arch.embed_dim}, 0, real(0.01), rng, true);
    std::vector<real> ident(size_t(J * 9), real(0));
    for (int64_t j = 0; j < J; ++j) ident[size_t(j * 9)] = ident[size_t(j * 9 + 4)] = ident[size_t(j * 9 + 8)] = real(1);
    p.color_a = Tensor::from({J, 9}, std::move(ident), true);
    p.color_b = Tensor::zeros({J, 3}, true);
    p.pixel_q = Tensor::zeros({J, 2}, true);
    return p;
}

std::vector<Tensor*> FieldParams::parameters() {
    std::vector<Tensor*> out;
    for (size_t i = 0; i < backbone_w.size(); ++i) {
        out.push_back(&backbone_w[i]);
        out.push_back(&backbone_b[i]);
    }
    out.push_back(&sigma_w);
    out.push_back(&sigma_b);
    out.push_back(&proj_w);
    out.push_back(&proj_b);
    out.push_back(&albedo_w);
    out.push_back(&albedo_b);
    out.push_back(&ambient_w);
    out.push_back(&ambient_b);
    out.push_back(&beta_w);
    out.push_back(&beta_b);
    out.push_back(&tau_w);
    out.push_back(&tau_b);
    out.push_back(&embeddings);
    out.push_back(&color_a);
    out.push_back(&color_b);
    out.push_back(&pixel_q);
    return out;
}

std::vector<const Tensor*> FieldParams::parameters() const {
    auto mut = const_cast<FieldParams*>(this)->parameters();
    return std::vector<const Tensor*>(mut.begin(), mut.end());
}

int64_t FieldParams::total_size() const {
    int64_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
}

FieldParams FieldParams::detached() const {
    FieldParams out = *this;
    for (Tensor* t : out.parameters()) *t = t->detach();
    return out;
}

void FieldParams::copy_values_from(const FieldParams& other) {
    auto dst = parameters();
    auto src = other.parameters();
    if (dst.size() != src.size()) throw ShapeError("copy_values_from: parameter count mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst[i]->set_values(src[i]->values());
}

void FieldParams::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write("SGNF", 4);
    uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    uint64_t hash = arch.config_hash();
    out.write(reinterpret_cast<const char*>(&hash), 8);
    for (const Tensor* t : parameters())
        out.write(reinterpret_cast<const char*>(t->values().data()),
                  std::streamsize(t->values().size() * sizeof(real)));
    if (!out) throw IoError("failed while writing checkpoint: " + path);
}

FieldParams FieldParams::load(const std::string& path, const FieldArch& arch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SGNF", 4) != 0)
        throw Error("checkpoint " + path + ": bad magic");
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw Error("checkpoint " + path + ": unsupported version");
    uint64_t hash = 0;
    in.read(reinterpret_cast<char*>(&hash), 8);
    if (hash != arch.config_hash())
        throw Error("checkpoint " + path + ": config hash mismatch");

    FieldParams p = FieldParams::init(arch, 0);
    for (Tensor* t : p.parameters()) {
        std::vector<real> buf(t->values().size());
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(real)));
        if (!in) throw Error("checkpoint " + path + ": truncated parameter array");
        t->set_values(buf);
    }
    in.peek();
    if (!in.eof()) throw Error("checkpoint " + path + ": trailing data");
    return p;
}

Tensor eval_density(const FieldParams& params, const Tensor& enc_x) {
    return sigma_from_features(params, backbone_features(params, enc_x));
}

FieldEval eval_field(const FieldParams& params, const Tensor& enc_x, const Tensor& enc_dir,
                     const Tensor& sun_dir, const std::vector<int64_t>& image_ids) {
    const int64_t S = enc_x.shape()[0];
    if (int64_t(image_ids.size()) != S)
        throw ShapeError("eval_field: image_ids size does not match batch");
    for (int64_t id : image_ids)
        if (id < 0 || id >= params.arch.num_images)
            throw Error("eval_field: unknown image_id " + std::to_string(id));

    Tensor feat = backbone_features(params, enc_x);
    FieldEval out;
    out.sigma = sigma_from_features(params, feat);

    Tensor proj = relu(linear(concat({feat, enc_dir, sun_dir}, 1), params.proj_w, params.proj_b));
    out.albedo = sigmoid(linear(proj, params.albedo_w, params.albedo_b));
    out.ambient = sigmoid(linear(proj, params.ambient_w, params.ambient_b));

    Tensor emb = gather_rows(params.embeddings, image_ids);
    Tensor tfeat = concat({proj, emb}, 1);
    out.beta = softplus(linear(tfeat, params.beta_w, params.beta_b)) + params.arch.beta_min;
    out.tau = sigmoid(linear(tfeat, params.tau_w, params.tau_b));
    return out;
}

FieldOutput eval_field_single(const FieldParams& params, const std::vector<real>& enc_x,
                              const std::vector<real>& enc_dir, const Vec3& sun_dir, int image_id) {
    Tensor ex = Tensor::from({1, int64_t(enc_x.size())}, enc_x);
    Tensor ed = Tensor::from({1, int64_t(enc_dir.size())}, enc_dir);
    Tensor sd = Tensor::from({1, 3}, std::vector<double>{sun_dir.x, sun_dir.y, sun_dir.z});
    FieldEval e = eval_field(params, ex, ed, sd, {image_id});
    FieldOutput o;
    o.sigma = e.sigma[0];
    for (int k = 0; k < 3; ++k) {
        o.albedo[size_t(k)] = e.albedo[k];
        o.ambient[size_t(k)] = e.ambient[k];
    }
    o.beta = e.beta[0];
    o.tau = e.tau[0];
    return o;
}

std::array<real, 3> compose_color(const FieldOutput& out, const std::array<real, 9>& A,
                                  const std::array<real, 3>& b, real s) {
    std::array<real, 3> base;
    for (int k = 0; k < 3; ++k) {
        real amb = out.ambient[size_t(k)];
        base[size_t(k)] = out.albedo[size_t(k)] * (amb + (real(1) - amb) * s);
    }
    std::array<real, 3> c;
    for (int k = 0; k < 3; ++k) {
        real acc = b[size_t(k)];
        for (int m = 0; m < 3; ++m) acc += A[size_t(3 * k + m)] * base[size_t(m)];
        c[size_t(k)] = std::min(std::max(acc, real(0)), real(1));
    }
    return c;
}

Tensor compose_color_batch(const Tensor& albedo, const Tensor& ambient, const Tensor& A,
                           const Tensor& b, const Tensor& s) {
    Tensor base = albedo * (ambient + (real(1) - ambient) * s);
    std::vector<Tensor> chans;
    chans.reserve(3);
    for (int k = 0; k < 3; ++k) {
        Tensor acc = slice(b, 1, k, 1);
        for (int m = 0; m < 3; ++m)
            acc = acc + slice(A, 1, 3 * k + m, 1) * slice(base, 1, m, 1);
        chans.push_back(acc);
    }
    return clamp(concat(chans, 1), 0, 1);
}

}  // namespace satgeo
