#include "gi2i/network.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace gi2i {

using ops::add;
using ops::channel_affine;
using ops::concat_channels;
using ops::conv2d;
using ops::dense;
using ops::embed_rows;
using ops::global_mean_pool;
using ops::group_norm;
using ops::log_softmax;
using ops::select_scalar;
using ops::silu;
using ops::upsample2x;

void NetworkConfig::validate() const {
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (base_width % groups != 0) throw ConfigError("base_width must be divisible by groups");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be even and >= 2");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    const int down_factor = 1 << depth;
    if (image_size % down_factor != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by 2^depth = " +
                          std::to_string(down_factor));
    }
    if (image_size / down_factor < 1) throw ConfigError("image too small for depth");
    if (in_channels_x < 1 || out_channels_y < 1) throw ConfigError("channel counts must be >= 1");
}

namespace {

void init_conv(ParamMap& p, const std::string& prefix, int c_out, int c_in, int k, RngState& rng,
               bool zero = false) {
    if (zero) {
        p[prefix + ".w"] = Tensor::zeros({c_out, c_in, k, k});
    } else {
        p[prefix + ".w"] = Tensor::fan_in_uniform({c_out, c_in, k, k}, c_in * k * k, rng);
    }
    p[prefix + ".b"] = Tensor::zeros({c_out});
}

void init_dense(ParamMap& p, const std::string& prefix, int d, int e, RngState& rng, double gain = 1.0) {
    Tensor w = Tensor::fan_in_uniform({d, e}, d, rng);
    if (gain != 1.0) {
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= gain;
    }
    p[prefix + ".w"] = w;
    p[prefix + ".b"] = Tensor::zeros({e});
}

// Residual block parameters: conv1 -> AdaGN(site MLP) -> silu -> conv2, plus a
// 1x1 skip projection when the channel count changes. The AdaGN site keeps a
// 2-layer projection of the conditioning vector; its last bias starts at
// (k_s, k_b) = (1, 0) so the block begins as a plain group-norm block.
void init_res_block(ParamMap& p, const std::string& prefix, int c_in, int c_out, int embed_dim,
                    RngState& rng) {
    init_conv(p, prefix + ".conv1", c_out, c_in, 3, rng);
    init_dense(p, prefix + ".proj1", embed_dim, embed_dim, rng);
    init_dense(p, prefix + ".proj2", embed_dim, 2 * c_out, rng, 0.1);
    Tensor& b2 = p[prefix + ".proj2.b"];
    for (int c = 0; c < c_out; ++c) b2[c] = 1.0;
    init_conv(p, prefix + ".conv2", c_out, c_out, 3, rng);
    if (c_in != c_out) init_conv(p, prefix + ".skip", c_out, c_in, 1, rng);
}

void init_trunk(ParamMap& p, const NetworkConfig& cfg, int in_channels, RngState& rng) {
    init_conv(p, "stem", cfg.base_width, in_channels, 3, rng);
    for (int d = 0; d < cfg.depth; ++d) {
        const int w = cfg.width_at(d);
        init_res_block(p, "down" + std::to_string(d), w, w, cfg.embed_dim, rng);
        init_conv(p, "downsample" + std::to_string(d), cfg.width_at(d + 1), w, 3, rng);
    }
    init_res_block(p, "mid", cfg.width_at(cfg.depth), cfg.width_at(cfg.depth), cfg.embed_dim, rng);
}

Tensor res_block(const ParamMap& params, const std::string& prefix, const Tensor& h,
                 const Tensor& cond, int groups, Tape* tape) {
    const Tensor& c1w = params.at(prefix + ".conv1.w");
    Tensor a = conv2d(h, c1w, params.at(prefix + ".conv1.b"), 1, 1, tape);
    Tensor s = silu(dense(cond, params.at(prefix + ".proj1.w"), params.at(prefix + ".proj1.b"), tape), tape);
    a = adagn(a, s, params.at(prefix + ".proj2.w"), params.at(prefix + ".proj2.b"), groups, tape);
    a = silu(a, tape);
    a = conv2d(a, params.at(prefix + ".conv2.w"), params.at(prefix + ".conv2.b"), 1, 1, tape);
    Tensor skip = h;
    if (auto it = params.find(prefix + ".skip.w"); it != params.end()) {
        skip = conv2d(h, it->second, params.at(prefix + ".skip.b"), 1, 0, tape);
    }
    return add(a, skip, tape);
}

// Shared downsampling trunk. Fills `skips` (pre-downsample activations) when
// a decoder will consume them.
Tensor down_trunk(const ParamMap& params, const NetworkConfig& cfg, const Tensor& input,
                  const Tensor& cond, Tape* tape, std::vector<Tensor>* skips) {
    Tensor h = conv2d(input, params.at("stem.w"), params.at("stem.b"), 1, 1, tape);
    for (int d = 0; d < cfg.depth; ++d) {
        h = res_block(params, "down" + std::to_string(d), h, cond, cfg.groups, tape);
        if (skips) skips->push_back(h);
        h = conv2d(h, params.at("downsample" + std::to_string(d) + ".w"),
                   params.at("downsample" + std::to_string(d) + ".b"), 2, 1, tape);
    }
    return res_block(params, "mid", h, cond, cfg.groups, tape);
}

// Combined conditioning vector per sample: timestep embedding plus class row.
Tensor conditioning(const Tensor& class_table, const std::vector<int>& ts,
                    const std::vector<int>& class_rows, int embed_dim, int T, Tape* tape) {
    const int N = static_cast<int>(ts.size());
    Tensor temb({N, embed_dim});
    for (int n = 0; n < N; ++n) {
        Tensor e = timestep_embedding(ts[static_cast<std::size_t>(n)], embed_dim, T);
        std::copy_n(e.data(), embed_dim, temb.data() + static_cast<std::int64_t>(n) * embed_dim);
    }
    Tensor cemb = embed_rows(class_table, class_rows, tape);
    return add(temb, cemb, tape);
}

Tensor timestep_only_conditioning(const std::vector<int>& ts, int embed_dim, int T) {
    const int N = static_cast<int>(ts.size());
    Tensor temb({N, embed_dim});
    for (int n = 0; n < N; ++n) {
        Tensor e = timestep_embedding(ts[static_cast<std::size_t>(n)], embed_dim, T);
        std::copy_n(e.data(), embed_dim, temb.data() + static_cast<std::int64_t>(n) * embed_dim);
    }
    return temb;
}

}  // namespace

DenoiserModel DenoiserModel::init(const NetworkConfig& cfg, RngState& rng) {
    cfg.validate();
    DenoiserModel m;
    m.config = cfg;
    init_trunk(m.params, cfg, cfg.in_channels_x + cfg.out_channels_y, rng);
    for (int d = cfg.depth - 1; d >= 0; --d) {
        const int w = cfg.width_at(d);
        init_conv(m.params, "upconv" + std::to_string(d), w, cfg.width_at(d + 1), 3, rng);
        init_res_block(m.params, "up" + std::to_string(d), 2 * w, w, cfg.embed_dim, rng);
    }
    // Zero-initialized head: the untrained model predicts zero noise.
    init_conv(m.params, "head", cfg.out_channels_y, cfg.base_width, 3, rng, /*zero=*/true);
    // Zero-initialized class table: label influence must be learned.
    m.params["class_table"] = Tensor::zeros({cfg.num_classes, cfg.embed_dim});
    return m;
}

ClassifierModel ClassifierModel::init(const NetworkConfig& cfg, RngState& rng) {
    cfg.validate();
    ClassifierModel m;
    m.config = cfg;
    init_trunk(m.params, cfg, cfg.out_channels_y, rng);
    init_dense(m.params, "headfc", cfg.width_at(cfg.depth), cfg.num_classes, rng);
    return m;
}

Tensor& DenoiserModel::p(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("denoiser parameter missing: " + name);
    return it->second;
}
const Tensor& DenoiserModel::p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("denoiser parameter missing: " + name);
    return it->second;
}
Tensor& ClassifierModel::p(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("classifier parameter missing: " + name);
    return it->second;
}
const Tensor& ClassifierModel::p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("classifier parameter missing: " + name);
    return it->second;
}

void DenoiserModel::watch_all(Tape& tape) {
    for (auto& [name, t] : params) tape.watch(t);
}

void ClassifierModel::watch_all(Tape& tape) {
    for (auto& [name, t] : params) tape.watch(t);
}

Tensor timestep_embedding(int t, int embed_dim, int T) {
    if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
    if (t < 1 || t > T) throw InputError("timestep out of range: " + std::to_string(t));
    const int half = embed_dim / 2;
    Tensor e({embed_dim});
    for (int j = 0; j < half; ++j) {
        const double omega = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
        e[2 * j] = std::sin(static_cast<double>(t) * omega);
        e[2 * j + 1] = std::cos(static_cast<double>(t) * omega);
    }
    return e;
}

Tensor class_embedding(int k, const Tensor& table) {
    if (table.ndim() != 2) throw DimensionError("class table must be [num_classes, embed_dim]");
    if (k == kNullClass) return Tensor::zeros({table.dim(1)});
    if (k < 0 || k >= table.dim(0)) throw InputError("class label out of range: " + std::to_string(k));
    Tensor row({table.dim(1)});
    std::copy_n(table.data() + static_cast<std::int64_t>(k) * table.dim(1), table.dim(1), row.data());
    return row;
}

Tensor adagn(const Tensor& h, const Tensor& cond, const Tensor& proj_w, const Tensor& proj_b,
             int groups, Tape* tape) {
    const int C = h.dim(1);
    if (proj_w.ndim() != 2 || proj_w.dim(1) != 2 * C || proj_b.dim(0) != 2 * C) {
        throw ConfigError("adagn projection must map embed_dim -> 2C, got " + shape_str(proj_w.shape()));
    }
    Tensor ss = dense(cond, proj_w, proj_b, tape);
    Tensor gn = group_norm(h, groups, kNormEps, tape);
    return channel_affine(gn, ss, tape);
}

Tensor denoiser_forward_batch(const DenoiserModel& model, const Tensor& x, const Tensor& y_t,
                              const std::vector<int>& ts, const std::vector<int>& class_rows,
                              int T, Tape* tape) {
    const NetworkConfig& cfg = model.config;
    if (x.ndim() != 4 || y_t.ndim() != 4) throw DimensionError("denoiser inputs must be 4-d");
    if (x.dim(1) != cfg.in_channels_x || y_t.dim(1) != cfg.out_channels_y) {
        throw DimensionError("denoiser channel mismatch: x " + shape_str(x.shape()) + ", y " +
                             shape_str(y_t.shape()));
    }
    if (x.dim(0) != y_t.dim(0) || x.dim(2) != y_t.dim(2) || x.dim(3) != y_t.dim(3) ||
        x.dim(2) != cfg.image_size || x.dim(3) != cfg.image_size) {
        throw DimensionError("denoiser spatial mismatch: x " + shape_str(x.shape()) + ", y " +
                             shape_str(y_t.shape()) + ", image_size " + std::to_string(cfg.image_size));
    }
    if (ts.size() != static_cast<std::size_t>(x.dim(0)) || class_rows.size() != ts.size()) {
        throw DimensionError("denoiser: ts/class_rows must match batch size");
    }

    Tensor cond = conditioning(model.p("class_table"), ts, class_rows, cfg.embed_dim, T, tape);
    Tensor input = concat_channels(x, y_t, tape);
    std::vector<Tensor> skips;
    Tensor h = down_trunk(model.params, cfg, input, cond, tape, &skips);
    for (int d = cfg.depth - 1; d >= 0; --d) {
        h = upsample2x(h, tape);
        h = conv2d(h, model.p("upconv" + std::to_string(d) + ".w"),
                   model.p("upconv" + std::to_string(d) + ".b"), 1, 1, tape);
        h = concat_channels(h, skips[static_cast<std::size_t>(d)], tape);
        h = res_block(model.params, "up" + std::to_string(d), h, cond, cfg.groups, tape);
    }
    h = silu(h, tape);
    return conv2d(h, model.p("head.w"), model.p("head.b"), 1, 1, tape);
}

Tensor denoiser_forward(const DenoiserModel& model, const Tensor& x, const Tensor& y_t,
                        int t, int class_row, int T, Tape* tape) {
    const std::vector<int> ts(static_cast<std::size_t>(x.dim(0)), t);
    const std::vector<int> ks(static_cast<std::size_t>(x.dim(0)), class_row);
    return denoiser_forward_batch(model, x, y_t, ts, ks, T, tape);
}

Tensor classifier_forward_batch(const ClassifierModel& model, const Tensor& y_t,
                                const std::vector<int>& ts, int T, Tape* tape) {
    const NetworkConfig& cfg = model.config;
    if (y_t.ndim() != 4 || y_t.dim(1) != cfg.out_channels_y) {
        throw DimensionError("classifier input channel mismatch: " + shape_str(y_t.shape()));
    }
    if (ts.size() != static_cast<std::size_t>(y_t.dim(0))) {
        throw DimensionError("classifier: ts must match batch size");
    }
    Tensor cond = timestep_only_conditioning(ts, cfg.embed_dim, T);
    Tensor h = down_trunk(model.params, cfg, y_t, cond, tape, nullptr);
    h = silu(h, tape);
    Tensor pooled = global_mean_pool(h, tape);
    Tensor logits = dense(pooled, model.p("headfc.w"), model.p("headfc.b"), tape);
    return log_softmax(logits, tape);
}

Tensor classifier_forward(const ClassifierModel& model, const Tensor& y_t, int t, int T, Tape* tape) {
    const std::vector<int> ts(static_cast<std::size_t>(y_t.dim(0)), t);
    return classifier_forward_batch(model, y_t, ts, T, tape);
}

Tensor classifier_grad(const ClassifierModel& model, const Tensor& y_t, int t, int k, int T) {
    if (k < 0 || k >= model.config.num_classes) {
        throw InputError("classifier_grad label out of range: " + std::to_string(k));
    }
    if (y_t.dim(0) != 1) throw DimensionError("classifier_grad expects a single sample");
    Tape tape;
    Tensor y = y_t.clone();
    tape.watch(y);
    Tensor logp = classifier_forward(model, y, t, T, &tape);
    Tensor target = select_scalar(logp, k, &tape);
    tape.backward(target);
    Tensor g(y_t.shape());
    std::copy_n(y.grad(), y.numel(), g.data());
    return g;
}

namespace {

nlohmann::json config_to_json(const NetworkConfig& c) {
    return nlohmann::json{{"in_channels_x", c.in_channels_x}, {"out_channels_y", c.out_channels_y},
                          {"base_width", c.base_width},       {"depth", c.depth},
                          {"groups", c.groups},               {"embed_dim", c.embed_dim},
                          {"num_classes", c.num_classes},     {"image_size", c.image_size}};
}

NetworkConfig config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.in_channels_x = j.at("in_channels_x").get<int>();
    c.out_channels_y = j.at("out_channels_y").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.depth = j.at("depth").get<int>();
    c.groups = j.at("groups").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.image_size = j.at("image_size").get<int>();
    return c;
}

constexpr char kCkptMagic[] = "GI2ICKPT1\n";

}  // namespace

void save_checkpoint(const std::string& path, const std::string& kind,
                     const NetworkConfig& cfg, const ParamMap& params) {
    std::string blobs;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : params) {
        nlohmann::json entry;
        entry["offset"] = blobs.size();
        entry["shape"] = t.shape();
        tensors[name] = entry;
        write_tensor_bytes(blobs, t);
    }
    nlohmann::json manifest{{"format", "gi2i-ckpt"},
                            {"version", 1},
                            {"kind", kind},
                            {"config", config_to_json(cfg)},
                            {"tensors", tensors}};
    const std::string mjson = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kCkptMagic, 10);
    std::uint64_t len = mjson.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    f.write(lenbuf, 8);
    f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    f.write(blobs.data(), static_cast<std::streamsize>(blobs.size()));
    if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 18 || buf.compare(0, 10, kCkptMagic) != 0) throw IoError("bad checkpoint magic: " + path);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[10 + static_cast<std::size_t>(i)]))
               << (8 * i);
    }
    if (buf.size() < 18 + len) throw IoError("truncated checkpoint manifest: " + path);
    nlohmann::json manifest = nlohmann::json::parse(buf.substr(18, len));
    if (manifest.at("format") != "gi2i-ckpt") throw IoError("unknown checkpoint format");

    Checkpoint ck;
    ck.kind = manifest.at("kind").get<std::string>();
    ck.config = config_from_json(manifest.at("config"));
    const std::size_t blob_base = 18 + len;
    for (auto& [name, entry] : manifest.at("tensors").items()) {
        const std::size_t off = blob_base + entry.at("offset").get<std::size_t>();
        if (off >= buf.size()) throw IoError("checkpoint blob offset out of range");
        Tensor t = read_tensor_bytes(buf.data() + off, buf.size() - off);
        const Shape expect = entry.at("shape").get<Shape>();
        if (t.shape() != expect) throw IoError("checkpoint shape mismatch for " + name);
        ck.params[name] = t;
    }
    return ck;
}

}  // namespace gi2i
