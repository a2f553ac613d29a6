#pragma once

#include <atomic>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "strokekit/nn.hpp"

namespace strokekit {

struct ModelConfig {
    int image_h = 64, image_w = 64;
    std::vector<int> stage_widths{8, 16, 32, 64};
    int cardinality = 4;
    int stem_stride = 2;
    std::vector<int> stage_strides{1, 2, 2, 1}; // total stride 8: 8x8 tokens at 64x64
    int embed_dim = 64;
    int num_heads = 4;
    int num_encoder_layers = 3;
    int num_decoder_layers = 1;
    int num_queries = 10;
    std::vector<int> ppm_bins{1, 2, 3, 6};
    int mlp_hidden_dim = 128;
    int head_hidden_dim = 64;
    int seg_width = 16;
    double gpsa_locality = 1.0;
    static constexpr int num_quantiles = 3;

    int total_stride() const {
        int s = stem_stride;
        for (int st : stage_strides) s *= st;
        return s;
    }
    int feat_h() const { return image_h / total_stride(); }
    int feat_w() const { return image_w / total_stride(); }

    void validate() const {
        SK_CHECK(num_queries >= 1, ConfigError, "num_queries must be >= 1");
        SK_CHECK(num_heads >= 1 && embed_dim % num_heads == 0, ConfigError,
                 "embed_dim " << embed_dim << " not divisible by " << num_heads << " heads");
        SK_CHECK(embed_dim % 4 == 0, ConfigError,
                 "embed_dim must be divisible by 4 for the positional encoding, got "
                     << embed_dim);
        SK_CHECK(stage_widths.size() == 4 && stage_strides.size() == 4, ConfigError,
                 "backbone expects exactly 4 stages");
        SK_CHECK(stem_stride >= 2 && stem_stride % 2 == 0, ConfigError,
                 "stem_stride must be even, got " << stem_stride);
        for (int s : stage_strides)
            SK_CHECK(s == 1 || s == 2, ConfigError, "stage strides must be 1 or 2, got " << s);
        for (int w : stage_widths) {
            SK_CHECK(w >= 2 && w % 2 == 0, ConfigError, "stage width " << w << " must be even");
            SK_CHECK((w / 2) % cardinality == 0, ConfigError,
                     "stage width " << w << ": bottleneck width " << w / 2
                                    << " not divisible by cardinality " << cardinality);
        }
        const int ts = total_stride();
        SK_CHECK(ts >= 2 && (ts & (ts - 1)) == 0, ConfigError,
                 "total stride " << ts << " must be a power of two");
        SK_CHECK(image_h % ts == 0 && image_w % ts == 0, ConfigError,
                 "image " << image_h << "x" << image_w << " not divisible by stride " << ts);
        SK_CHECK(!ppm_bins.empty(), ConfigError, "ppm_bins must be nonempty");
        const int fh = feat_h(), fw = feat_w();
        for (int b : ppm_bins)
            SK_CHECK(b >= 1 && b <= std::min(fh, fw), ConfigError,
                     "ppm bin " << b << " exceeds feature map " << fh << "x" << fw);
        SK_CHECK(stage_widths.back() % static_cast<int>(ppm_bins.size()) == 0, ConfigError,
                 "backbone output width " << stage_widths.back() << " not divisible by "
                                          << ppm_bins.size() << " ppm branches");
        SK_CHECK(mlp_hidden_dim >= 1 && head_hidden_dim >= 1 && seg_width >= 4, ConfigError,
                 "hidden widths must be positive (seg_width >= 4)");
    }
};

// Fixed 2D sinusoidal encoding: first half of the channels encodes rows,
// second half columns; each half splits into sin then cos banks.
template <typename T>
Tensor<T> positional_encoding(int h, int w, int d) {
    SK_CHECK(d % 4 == 0, ConfigError, "positional encoding dim " << d
                                                                 << " must be divisible by 4");
    const int bank = d / 4;
    Tensor<T> pe = Tensor<T>::zeros({d, h, w});
    auto raw = pe.raw();
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int i = 0; i < bank; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / bank);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int64_t p = static_cast<int64_t>(y) * w + x;
                raw[(0 * bank + i) * hw + p] = static_cast<T>(std::sin(y * omega));
                raw[(1 * bank + i) * hw + p] = static_cast<T>(std::cos(y * omega));
                raw[(2 * bank + i) * hw + p] = static_cast<T>(std::sin(x * omega));
                raw[(3 * bank + i) * hw + p] = static_cast<T>(std::cos(x * omega));
            }
    }
    return pe;
}

// Relative offset features between all token pairs of an h x w grid:
// (dx, dy, dx^2 + dy^2) per (query, key) pair.
template <typename T>
Tensor<T> gpsa_rel_features(int h, int w) {
    const int t = h * w;
    Tensor<T> rel = Tensor<T>::zeros({t * t, 3});
    auto raw = rel.raw();
    for (int i = 0; i < t; ++i) {
        const int yi = i / w, xi = i % w;
        for (int j = 0; j < t; ++j) {
            const int yj = j / w, xj = j % w;
            const T dx = static_cast<T>(xj - xi);
            const T dy = static_cast<T>(yj - yi);
            raw[(static_cast<int64_t>(i) * t + j) * 3 + 0] = dx;
            raw[(static_cast<int64_t>(i) * t + j) * 3 + 1] = dy;
            raw[(static_cast<int64_t>(i) * t + j) * 3 + 2] = dx * dx + dy * dy;
        }
    }
    return rel;
}

namespace detail {

// Column-wise concatenation via transposed row concat.
template <typename T>
Tensor<T> concat_cols(std::vector<Tensor<T>> parts) {
    std::vector<Tensor<T>> tr;
    tr.reserve(parts.size());
    for (auto& p : parts) tr.push_back(ops::transpose(p));
    return ops::transpose(ops::concat0(tr));
}

} // namespace detail

template <typename T>
struct MhaParams {
    nn::Linear<T> q, k, v, o;

    MhaParams() = default;
    MhaParams(nn::ParamStore<T>& ps, const std::string& name, int d)
        : q(ps, name + ".q", d, d), k(ps, name + ".k", d, d), v(ps, name + ".v", d, d),
          o(ps, name + ".o", d, d) {}
};

// Standard multi-head attention. q_in: [Tq,d], k_in/v_in: [Tk,d].
template <typename T>
Tensor<T> mha(const MhaParams<T>& p, int heads, const Tensor<T>& q_in, const Tensor<T>& k_in,
              const Tensor<T>& v_in) {
    auto Q = p.q.forward(q_in);
    auto K = p.k.forward(k_in);
    auto V = p.v.forward(v_in);
    const int d = Q.extent(1);
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outs;
    for (int h = 0; h < heads; ++h) {
        auto Qh = ops::cols(Q, h * dh, (h + 1) * dh);
        auto Kh = ops::cols(K, h * dh, (h + 1) * dh);
        auto Vh = ops::cols(V, h * dh, (h + 1) * dh);
        auto A = ops::softmax_rows(ops::mul_scalar(ops::matmul(Qh, ops::transpose(Kh)), scale));
        outs.push_back(ops::matmul(A, Vh));
    }
    return p.o.forward(detail::concat_cols(std::move(outs)));
}

// Gated positional self-attention: each head mixes a content softmax and a
// positional softmax through sigma(lambda_h); lambda starts at 0 so both
// branches contribute equally, and the positional projection starts with a
// locality pattern (each head biased toward a fixed offset ring).
template <typename T>
struct GpsaLayer {
    nn::Linear<T> q, k, v, o;
    Tensor<T> vpos;   // [heads, 3]
    Tensor<T> lambda; // [heads]
    int heads = 1;

    GpsaLayer() = default;
    GpsaLayer(nn::ParamStore<T>& ps, const std::string& name, int d, int heads_,
              double locality)
        : q(ps, name + ".q", d, d), k(ps, name + ".k", d, d), v(ps, name + ".v", d, d),
          o(ps, name + ".o", d, d), heads(heads_) {
        std::vector<T> vp(static_cast<size_t>(heads_) * 3);
        for (int h = 0; h < heads_; ++h) {
            const double theta = 2.0 * M_PI * h / heads_;
            vp[static_cast<size_t>(h) * 3 + 0] = static_cast<T>(locality * 2.0 * std::cos(theta));
            vp[static_cast<size_t>(h) * 3 + 1] = static_cast<T>(locality * 2.0 * std::sin(theta));
            vp[static_cast<size_t>(h) * 3 + 2] = static_cast<T>(-locality);
        }
        vpos = ps.values(name + ".vpos", {heads_, 3}, std::move(vp));
        lambda = ps.zeros(name + ".lambda", {heads_});
    }

    // Content scores from x_qk, values from x_v; a layer's self-attention is
    // forward_qkv(x, x, ...). rel: [T*T, 3] offset features for the grid.
    Tensor<T> forward_qkv(const Tensor<T>& x_qk, const Tensor<T>& x_v, const Tensor<T>& pos,
                          const Tensor<T>& rel) const {
        const int t = x_qk.extent(0);
        auto qk_in = ops::add(x_qk, pos);
        auto Q = q.forward(qk_in);
        auto K = k.forward(qk_in);
        auto V = v.forward(x_v);
        const int d = Q.extent(1);
        const int dh = d / heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<Tensor<T>> outs;
        for (int h = 0; h < heads; ++h) {
            auto Qh = ops::cols(Q, h * dh, (h + 1) * dh);
            auto Kh = ops::cols(K, h * dh, (h + 1) * dh);
            auto Vh = ops::cols(V, h * dh, (h + 1) * dh);
            auto content =
                ops::softmax_rows(ops::mul_scalar(ops::matmul(Qh, ops::transpose(Kh)), scale));
            auto vh = ops::slice0(vpos, h, h + 1); // [1,3]
            auto pscore = ops::reshape(ops::matmul(rel, ops::transpose(vh)), {t, t});
            auto positional = ops::softmax_rows(pscore);
            auto g = ops::sigmoid(ops::slice0(lambda, h, h + 1)); // [1]
            auto one_minus_g = ops::add_scalar(ops::neg(g), T(1));
            auto blend = ops::add(ops::mul_bcast_scalar(content, one_minus_g),
                                  ops::mul_bcast_scalar(positional, g));
            outs.push_back(ops::matmul(blend, Vh));
        }
        return o.forward(detail::concat_cols(std::move(outs)));
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& pos, const Tensor<T>& rel) const {
        return forward_qkv(x, x, pos, rel);
    }
};

template <typename T>
struct EncoderLayer {
    GpsaLayer<T> attn;
    nn::LayerNorm<T> ln1, ln2;
    nn::Mlp<T> mlp;

    EncoderLayer() = default;
    EncoderLayer(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
        : attn(ps, name + ".gpsa", cfg.embed_dim, cfg.num_heads, cfg.gpsa_locality),
          ln1(ps, name + ".ln1", cfg.embed_dim), ln2(ps, name + ".ln2", cfg.embed_dim),
          mlp(ps, name + ".mlp", cfg.embed_dim, cfg.mlp_hidden_dim, cfg.embed_dim) {}

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& pos, const Tensor<T>& rel) const {
        auto y = ln1.forward(ops::add(x, attn.forward(x, pos, rel)));
        return ln2.forward(ops::add(y, mlp.forward(y)));
    }
};

template <typename T>
struct DecoderLayer {
    MhaParams<T> self_attn, cross_attn;
    nn::LayerNorm<T> ln1, ln2, ln3;
    nn::Mlp<T> mlp;
    int heads = 1;

    DecoderLayer() = default;
    DecoderLayer(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
        : self_attn(ps, name + ".self", cfg.embed_dim), cross_attn(ps, name + ".cross", cfg.embed_dim),
          ln1(ps, name + ".ln1", cfg.embed_dim), ln2(ps, name + ".ln2", cfg.embed_dim),
          ln3(ps, name + ".ln3", cfg.embed_dim),
          mlp(ps, name + ".mlp", cfg.embed_dim, cfg.mlp_hidden_dim, cfg.embed_dim),
          heads(cfg.num_heads) {}

    Tensor<T> forward(const Tensor<T>& tgt_in, const Tensor<T>& qpos, const Tensor<T>& mem,
                      const Tensor<T>& mem_pos) const {
        auto qk = ops::add(tgt_in, qpos);
        auto tgt = ln1.forward(ops::add(tgt_in, mha(self_attn, heads, qk, qk, tgt_in)));
        auto tgt2 = ln2.forward(ops::add(
            tgt, mha(cross_attn, heads, ops::add(tgt, qpos), ops::add(mem, mem_pos), mem)));
        return ln3.forward(ops::add(tgt2, mlp.forward(tgt2)));
    }
};

// Grouped-convolution bottleneck. Strided paths sample symmetric grids
// (even kernel in the grouped slot, area pooling on the shortcut) so the
// block commutes with horizontal flips once kernels are mirrored; an odd
// kernel at stride 2 on an even extent would shift the whole grid half a
// pixel instead.
template <typename T>
struct Bottleneck {
    nn::Conv<T> c1, c2, c3, sc;
    nn::GroupNorm<T> n1, n2, n3, nsc;
    int stride = 1;

    Bottleneck() = default;
    Bottleneck(nn::ParamStore<T>& ps, const std::string& name, int in, int out, int stride_,
               int cardinality)
        : c1(ps, name + ".c1", in, out / 2, 1, 1, 0, 1),
          c2(ps, name + ".c2", out / 2, out / 2, stride_ == 1 ? 3 : 4, stride_, 1, cardinality),
          c3(ps, name + ".c3", out / 2, out, 1, 1, 0, 1),
          sc(ps, name + ".sc", in, out, 1, 1, 0, 1), n1(ps, name + ".n1", out / 2),
          n2(ps, name + ".n2", out / 2), n3(ps, name + ".n3", out), nsc(ps, name + ".nsc", out),
          stride(stride_) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        auto h = ops::gelu(n1.forward(c1.forward(x)));
        h = ops::gelu(n2.forward(c2.forward(h)));
        h = n3.forward(c3.forward(h));
        auto s = x;
        if (stride > 1)
            s = ops::interpolate(s, x.extent(1) / stride, x.extent(2) / stride,
                                 ops::Interp::Area);
        s = nsc.forward(sc.forward(s));
        return ops::gelu(ops::add(h, s));
    }
};

template <typename T>
struct Ppm {
    std::vector<nn::Conv<T>> branch_convs;
    std::vector<nn::GroupNorm<T>> branch_norms;
    nn::Conv<T> fuse;
    nn::GroupNorm<T> fuse_norm;
    std::vector<int> bins;

    Ppm() = default;
    Ppm(nn::ParamStore<T>& ps, const std::string& name, int channels, std::vector<int> bins_,
        int out_dim)
        : bins(std::move(bins_)) {
        const int bw = channels / static_cast<int>(bins.size());
        for (size_t i = 0; i < bins.size(); ++i) {
            std::string bn = name + ".branch" + std::to_string(i);
            branch_convs.emplace_back(ps, bn + ".conv", channels, bw, 1, 1, 0, 1);
            branch_norms.emplace_back(ps, bn + ".norm", bw);
        }
        fuse = nn::Conv<T>(ps, name + ".fuse.conv", 2 * channels, out_dim, 1, 1, 0, 1);
        fuse_norm = nn::GroupNorm<T>(ps, name + ".fuse.norm", out_dim);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        const int h = x.extent(1), w = x.extent(2);
        for (int b : bins)
            SK_CHECK(b <= std::min(h, w), ConfigError,
                     "ppm bin " << b << " exceeds feature map " << h << "x" << w);
        std::vector<Tensor<T>> parts{x};
        for (size_t i = 0; i < bins.size(); ++i) {
            auto pooled = ops::interpolate(x, bins[i], bins[i], ops::Interp::Area);
            auto y = ops::gelu(branch_norms[i].forward(branch_convs[i].forward(pooled)));
            parts.push_back(ops::interpolate(y, h, w, ops::Interp::Bilinear));
        }
        auto cat = ops::concat0(parts);
        return ops::gelu(fuse_norm.forward(fuse.forward(cat)));
    }
};

// Full set prediction for one slice.
template <typename T>
struct SetPrediction {
    Tensor<T> lesion_logits; // [N,2], class 0 = lesion, class 1 = no object
    Tensor<T> boxes;         // [N,4] normalized (cx, cy, w, h)
    Tensor<T> mask_logits;   // [N,H,W]
    Tensor<T> age_quantiles; // [N,3] log-minutes
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg), params_(seed) {
        cfg_.validate();
        const int d = cfg_.embed_dim;

        stem_ = nn::Conv<T>(params_, "backbone.stem.conv", 1, cfg_.stage_widths[0],
                            2 * cfg_.stem_stride, cfg_.stem_stride, cfg_.stem_stride / 2, 1);
        stem_norm_ = nn::GroupNorm<T>(params_, "backbone.stem.norm", cfg_.stage_widths[0]);
        int in = cfg_.stage_widths[0];
        for (int s = 0; s < 4; ++s) {
            stages_.emplace_back(params_, "backbone.stage" + std::to_string(s + 1), in,
                                 cfg_.stage_widths[static_cast<size_t>(s)],
                                 cfg_.stage_strides[static_cast<size_t>(s)], cfg_.cardinality);
            in = cfg_.stage_widths[static_cast<size_t>(s)];
        }

        ppm_ = Ppm<T>(params_, "ppm", cfg_.stage_widths.back(), cfg_.ppm_bins, d);

        for (int l = 0; l < cfg_.num_encoder_layers; ++l)
            encoder_.emplace_back(params_, "encoder.layer" + std::to_string(l), cfg_);
        for (int l = 0; l < cfg_.num_decoder_layers; ++l)
            decoder_.emplace_back(params_, "decoder.layer" + std::to_string(l), cfg_);
        query_embed_ = params_.normal("decoder.query_embed", {cfg_.num_queries, d}, T(1));

        class_head_ = nn::Linear<T>(params_, "heads.lesion", d, 2);
        box_head_ = nn::Mlp3<T>(params_, "heads.box", d, cfg_.head_hidden_dim, 4);
        age_head_ = nn::Mlp3<T>(params_, "heads.age", d, cfg_.head_hidden_dim,
                                ModelConfig::num_quantiles);

        seg_q_ = nn::Linear<T>(params_, "seg.attn.q", d, d);
        seg_k_ = nn::Linear<T>(params_, "seg.attn.k", d, d);
        build_seg_chain();

        pos_enc_ = positional_encoding<T>(cfg_.feat_h(), cfg_.feat_w(), d);
        pos_tokens_ = to_tokens_const(pos_enc_);
        rel_ = gpsa_rel_features<T>(cfg_.feat_h(), cfg_.feat_w());
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }

    struct Core {
        Tensor<T> lesion_logits; // [N,2]
        Tensor<T> boxes;         // [N,4]
        Tensor<T> ages;          // [N,3]
        Tensor<T> memory;        // [T,d]
        Tensor<T> mem_map;       // [d,fh,fw]
        std::vector<Tensor<T>> seg_scores; // per head [N,T], rows softmaxed
        std::vector<Tensor<T>> skips;      // backbone stage activations
    };

    // Per-stage activations; the last entry feeds the PPM projection.
    std::vector<Tensor<T>> backbone(const Tensor<T>& slice) const {
        SK_CHECK(slice.rank() == 3 && slice.extent(0) == 1 && slice.extent(1) == cfg_.image_h &&
                     slice.extent(2) == cfg_.image_w,
                 InputError, "expected slice [1x" << cfg_.image_h << "x" << cfg_.image_w
                                                  << "], got " << shape_str(slice.shape()));
        std::vector<Tensor<T>> skips;
        auto x = ops::gelu(stem_norm_.forward(stem_.forward(slice)));
        for (const auto& stage : stages_) {
            x = stage.forward(x);
            skips.push_back(x);
        }
        return skips;
    }

    Core forward_core(const Tensor<T>& slice) const {
        Core core;
        core.skips = backbone(slice);

        auto fused = ppm_.forward(core.skips.back()); // [d, fh, fw]
        const int fh = fused.extent(1), fw = fused.extent(2);
        auto tokens = to_tokens(fused); // [T, d]

        for (const auto& layer : encoder_) tokens = layer.forward(tokens, pos_tokens_, rel_);
        core.memory = tokens;
        core.mem_map =
            ops::reshape(ops::transpose(tokens), {cfg_.embed_dim, fh, fw});

        auto tgt = Tensor<T>::zeros({cfg_.num_queries, cfg_.embed_dim});
        for (const auto& layer : decoder_)
            tgt = layer.forward(tgt, query_embed_, core.memory, pos_tokens_);

        core.lesion_logits = class_head_.forward(tgt);
        core.boxes = ops::sigmoid(box_head_.forward(tgt));
        core.ages = age_head_.forward(tgt);

        // seg attention: decoder embeddings against positioned memory
        auto Q = seg_q_.forward(tgt);
        auto K = seg_k_.forward(ops::add(core.memory, pos_tokens_));
        const int dh = cfg_.embed_dim / cfg_.num_heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        for (int h = 0; h < cfg_.num_heads; ++h) {
            auto Qh = ops::cols(Q, h * dh, (h + 1) * dh);
            auto Kh = ops::cols(K, h * dh, (h + 1) * dh);
            core.seg_scores.push_back(ops::softmax_rows(
                ops::mul_scalar(ops::matmul(Qh, ops::transpose(Kh)), scale)));
        }
        return core;
    }

    // Mask logits [K,H,W] for the selected queries only; training matches a
    // few queries per slice, so unmatched masks are never materialized.
    Tensor<T> masks_for(const Core& core, const std::vector<int>& queries) const {
        SK_CHECK(!queries.empty(), ContractError, "masks_for needs at least one query");
        const int fh = cfg_.feat_h(), fw = cfg_.feat_w();
        std::vector<Tensor<T>> rows;
        for (int qi : queries) {
            SK_CHECK(qi >= 0 && qi < cfg_.num_queries, ContractError,
                     "query index " << qi << " out of range");
            std::vector<Tensor<T>> maps;
            for (const auto& sc : core.seg_scores)
                maps.push_back(ops::reshape(ops::slice0(sc, qi, qi + 1), {1, fh, fw}));
            maps.push_back(core.mem_map);
            auto x = ops::gelu(seg_in_norm_.forward(seg_in_conv_.forward(ops::concat0(maps))));
            int h = fh, w = fw;
            for (size_t k = 0; k < seg_up_convs_.size(); ++k) {
                h *= 2;
                w *= 2;
                x = ops::interpolate(x, h, w, ops::Interp::Bilinear);
                if (seg_skip_[k] >= 0) {
                    std::vector<Tensor<T>> cat{x, core.skips[static_cast<size_t>(seg_skip_[k])]};
                    x = ops::concat0(cat);
                }
                x = ops::gelu(seg_up_norms_[k].forward(seg_up_convs_[k].forward(x)));
            }
            rows.push_back(seg_out_conv_.forward(x)); // [1,H,W]
        }
        return ops::concat0(rows);
    }

    SetPrediction<T> forward(const Tensor<T>& slice) const {
        Core core = forward_core(slice);
        std::vector<int> all(static_cast<size_t>(cfg_.num_queries));
        std::iota(all.begin(), all.end(), 0);
        SetPrediction<T> out;
        out.lesion_logits = core.lesion_logits;
        out.boxes = core.boxes;
        out.age_quantiles = core.ages;
        out.mask_logits = masks_for(core, all);
        return out;
    }

    // |d age_median / d input| normalized to [0,1]; parameters stay
    // untouched (gradients remain in the local tape).
    std::optional<Tensor<T>> saliency(const Tensor<T>& slice, int query) const {
        Tensor<T> input = Tensor<T>::from(slice.shape(),
                                          {slice.data().begin(), slice.data().end()});
        input.set_requires_grad(true);
        Tape<T> tape;
        Core core = forward_core(input);
        auto probs = ops::softmax_rows(core.lesion_logits);
        if (probs.at(query, 0) <= T(0.5)) return std::nullopt;
        auto median = ops::cols(ops::slice0(core.ages, query, query + 1), 1, 2);
        tape.backward_no_flush(ops::sum(median));
        auto g = tape.gradient_of(input);
        Tensor<T> map = Tensor<T>::zeros({cfg_.image_h, cfg_.image_w});
        auto raw = map.raw();
        T mx = T(0);
        for (int64_t i = 0; i < map.numel(); ++i) {
            raw[i] = std::abs(g[static_cast<size_t>(i)]);
            mx = std::max(mx, raw[i]);
        }
        if (mx > T(0))
            for (auto& v : raw) v /= mx;
        return map;
    }

    // Exposed for attention-behavior tests.
    const GpsaLayer<T>& gpsa_layer(int i) const { return encoder_[static_cast<size_t>(i)].attn; }
    GpsaLayer<T>& gpsa_layer(int i) { return encoder_[static_cast<size_t>(i)].attn; }
    const Tensor<T>& pos_tokens() const { return pos_tokens_; }
    const Tensor<T>& rel_features() const { return rel_; }
    const Tensor<T>& query_embed() const { return query_embed_; }

private:
    static Tensor<T> to_tokens(const Tensor<T>& map) { // [d,h,w] -> [h*w, d]
        const int d = map.extent(0);
        const int t = map.extent(1) * map.extent(2);
        return ops::transpose(ops::reshape(map, {d, t}));
    }

    static Tensor<T> to_tokens_const(const Tensor<T>& map) {
        const int d = map.extent(0);
        const int t = map.extent(1) * map.extent(2);
        Tensor<T> out = Tensor<T>::zeros({t, d});
        auto src = map.data();
        auto dst = out.raw();
        for (int c = 0; c < d; ++c)
            for (int p = 0; p < t; ++p) dst[static_cast<int64_t>(p) * d + c] = src[static_cast<int64_t>(c) * t + p];
        return out;
    }

    void build_seg_chain() {
        const int d = cfg_.embed_dim;
        int steps = 0;
        for (int ts = cfg_.total_stride(); ts > 1; ts /= 2) ++steps;

        // stage resolutions, as divisors of the input extent
        std::vector<int> stage_div(4);
        int div = cfg_.stem_stride;
        for (int s = 0; s < 4; ++s) {
            div *= cfg_.stage_strides[static_cast<size_t>(s)];
            stage_div[static_cast<size_t>(s)] = div;
        }

        seg_in_conv_ = nn::Conv<T>(params_, "seg.in.conv", cfg_.num_heads + d, cfg_.seg_width, 3,
                                   1, 1, 1);
        seg_in_norm_ = nn::GroupNorm<T>(params_, "seg.in.norm", cfg_.seg_width);

        int cur = cfg_.total_stride();
        int width = cfg_.seg_width;
        for (int k = 0; k < steps; ++k) {
            cur /= 2;
            // deepest of the first three stages matching this resolution
            int skip = -1;
            for (int s = 0; s < 3; ++s)
                if (stage_div[static_cast<size_t>(s)] == cur) skip = s;
            seg_skip_.push_back(skip);
            int in_ch = width + (skip >= 0 ? cfg_.stage_widths[static_cast<size_t>(skip)] : 0);
            int out_ch = std::max(4, width / (k >= 1 ? 2 : 1));
            std::string name = "seg.up" + std::to_string(k);
            seg_up_convs_.emplace_back(params_, name + ".conv", in_ch, out_ch, 3, 1, 1, 1);
            seg_up_norms_.emplace_back(params_, name + ".norm", out_ch);
            width = out_ch;
        }
        seg_out_conv_ = nn::Conv<T>(params_, "seg.out.conv", width, 1, 1, 1, 0, 1);
    }

    ModelConfig cfg_;
    nn::ParamStore<T> params_;

    nn::Conv<T> stem_;
    nn::GroupNorm<T> stem_norm_;
    std::vector<Bottleneck<T>> stages_;
    Ppm<T> ppm_;
    std::vector<EncoderLayer<T>> encoder_;
    std::vector<DecoderLayer<T>> decoder_;
    Tensor<T> query_embed_;
    nn::Linear<T> class_head_;
    nn::Mlp3<T> box_head_, age_head_;
    nn::Linear<T> seg_q_, seg_k_;
    nn::Conv<T> seg_in_conv_;
    nn::GroupNorm<T> seg_in_norm_;
    std::vector<nn::Conv<T>> seg_up_convs_;
    std::vector<nn::GroupNorm<T>> seg_up_norms_;
    std::vector<int> seg_skip_;
    nn::Conv<T> seg_out_conv_;

    Tensor<T> pos_enc_;    // [d,fh,fw]
    Tensor<T> pos_tokens_; // [T,d]
    Tensor<T> rel_;        // [T*T,3]
};

// Independent pure-forward evaluations (no tape on the worker threads);
// results land at their input's index, so any thread count produces the
// sequential answer.
template <typename T>
std::vector<SetPrediction<T>> forward_batch(const Model<T>& model,
                                            const std::vector<Tensor<T>>& slices,
                                            int threads = 1) {
    std::vector<SetPrediction<T>> out(slices.size());
    if (threads <= 1) {
        for (size_t i = 0; i < slices.size(); ++i) out[i] = model.forward(slices[i]);
        return out;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    const int n = std::min<int>(threads, static_cast<int>(slices.size()));
    for (int t = 0; t < n; ++t)
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < slices.size(); i = next.fetch_add(1))
                out[i] = model.forward(slices[i]);
        });
    for (auto& th : pool) th.join();
    return out;
}

} // namespace strokekit
