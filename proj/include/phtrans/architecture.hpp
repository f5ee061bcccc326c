#pragma once

#include "phtrans/layers.hpp"

namespace phtrans {

// All architecture hyperparameters. Stage s in [0, n1+n2) runs at resolution
// input/2^s with base_channels*2^s channels; the last n2 stages are hybrid
// (Trans&Conv), the first n1 are pure convolution.
struct PHTransConfig {
    int64_t n1 = 2;  // pure convolution stage count
    int64_t n2 = 3;  // hybrid stage count
    int64_t m1 = 2;  // ST blocks per hybrid stage
    int64_t m2 = 2;  // conv blocks per hybrid stage
    int64_t base_channels = 16;
    std::vector<int64_t> heads;     // one per hybrid stage
    std::vector<Window3> windows;   // one per hybrid stage
    int64_t mlp_ratio = 1;
    int64_t num_classes = 2;
    Shape input_shape;              // (D,H,W)
    int64_t in_channels = 1;
    int64_t downsample_count = 4;   // stage transitions; must equal n1+n2-1
    bool position_bias = true;
    // conv blocks at the deepest stage; -1 selects max(1, m2-1), which
    // reproduces the reference parameter budget (see count tests)
    int64_t bottleneck_conv_blocks = -1;
    uint64_t seed = 1234;

    int64_t stages() const { return n1 + n2; }
    int64_t channels_at(int64_t s) const { return base_channels << s; }
    Shape spatial_at(int64_t s) const {
        return {input_shape[0] >> s, input_shape[1] >> s, input_shape[2] >> s};
    }
    int64_t conv_blocks_at_hybrid(int64_t hybrid_idx) const {
        if (hybrid_idx == n2 - 1) return bottleneck_conv_blocks >= 0 ? bottleneck_conv_blocks : std::max<int64_t>(1, m2 - 1);
        return m2;
    }

    void validate() const {
        PH_CHECK(n1 >= 1 && n2 >= 1 && m1 >= 1 && m2 >= 1, "config: stage/block counts must be positive");
        PH_CHECK(downsample_count == n1 + n2 - 1, "config: downsample_count must equal n1+n2-1 (stage transitions), got ",
                 downsample_count, " for n1=", n1, ", n2=", n2);
        PH_CHECK(int64_t(heads.size()) == n2, "config: need one head count per hybrid stage (", n2, "), got ",
                 heads.size());
        PH_CHECK(int64_t(windows.size()) == n2, "config: need one window per hybrid stage (", n2, "), got ",
                 windows.size());
        PH_CHECK(input_shape.size() == 3, "config: input_shape must be (D,H,W)");
        int64_t div = int64_t(1) << (stages() - 1);
        for (int i = 0; i < 3; ++i)
            PH_CHECK(input_shape[size_t(i)] % div == 0, "config: input extent ", input_shape[size_t(i)],
                     " not divisible by 2^", stages() - 1);
        for (int64_t hs = 0; hs < n2; ++hs) {
            int64_t s = n1 + hs;
            Shape res = spatial_at(s);
            const Window3& w = windows[size_t(hs)];
            PH_CHECK(res[0] % w.d == 0 && res[1] % w.h == 0 && res[2] % w.w == 0, "config: hybrid stage ", s,
                     " resolution ", shape_str(res), " not divisible by window [", w.d, ",", w.h, ",", w.w, "]");
            PH_CHECK(channels_at(s) % heads[size_t(hs)] == 0, "config: stage ", s, " channels ", channels_at(s),
                     " not divisible by ", heads[size_t(hs)], " heads");
        }
        PH_CHECK(num_classes >= 2, "config: need at least 2 classes");
        PH_CHECK(mlp_ratio >= 1, "config: mlp_ratio must be >= 1");
    }
};

// Named presets from the reference configurations. PHTrans-L text lists
// heads [3,6,12,24] (constant head width 48); the alternative [3,4,12,24]
// that appears in the configuration table can be set via the heads field.
inline PHTransConfig preset(const std::string& name) {
    PHTransConfig c;
    if (name == "phtrans_l") {
        c.n1 = 2;
        c.n2 = 4;
        c.m1 = 2;
        c.m2 = 2;
        c.base_channels = 36;
        c.heads = {3, 6, 12, 24};
        c.windows = {{4, 5, 5}, {4, 5, 5}, {4, 5, 5}, {4, 5, 5}};
        c.mlp_ratio = 4;
        c.num_classes = 14;
        c.input_shape = {128, 160, 160};
        c.downsample_count = 5;
    } else if (name == "phtrans_s_coarse") {
        c.n1 = 2;
        c.n2 = 3;
        c.m1 = 2;
        c.m2 = 2;
        c.base_channels = 16;
        c.heads = {4, 4, 4};
        c.windows = {{4, 4, 4}, {4, 4, 4}, {4, 4, 4}};
        c.mlp_ratio = 1;
        c.num_classes = 2;
        c.input_shape = {64, 64, 64};
        c.downsample_count = 4;
    } else if (name == "phtrans_s_fine") {
        c.n1 = 2;
        c.n2 = 3;
        c.m1 = 2;
        c.m2 = 2;
        c.base_channels = 16;
        c.heads = {4, 4, 4};
        c.windows = {{4, 4, 4}, {4, 4, 4}, {3, 4, 4}};
        c.mlp_ratio = 1;
        c.num_classes = 14;
        c.input_shape = {96, 192, 192};
        c.downsample_count = 4;
    } else {
        fail("unknown preset '", name, "' (expected phtrans_l, phtrans_s_coarse or phtrans_s_fine)");
    }
    c.validate();
    return c;
}

// LN -> (S)W-MSA -> residual, LN -> MLP -> residual
template <class S>
struct STBlock {
    LayerNormLayer<S> ln1, ln2;
    WindowAttention<S> attn;
    MLPBlock<S> mlp;
    std::vector<int64_t> shift{0, 0, 0};

    STBlock() = default;
    STBlock(int64_t channels, int64_t heads, Window3 window, int64_t mlp_ratio, bool position_bias)
        : ln1(channels), ln2(channels), attn(channels, heads, window, position_bias), mlp(channels, mlp_ratio) {}

    Tensor<S> forward(const Tensor<S>& seq, const Tensor<S>& mask) const {
        Tensor<S> x = add(seq, attn.forward(ln1.forward(seq), mask));
        return add(x, mlp.forward(ln2.forward(x)));
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        ln1.collect(prefix + ".ln1", out);
        attn.collect(prefix + ".attn", out);
        ln2.collect(prefix + ".ln2", out);
        mlp.collect(prefix + ".mlp", out);
    }
};

// free-function form of the operation
template <class S>
Tensor<S> st_block(const Tensor<S>& seq, const STBlock<S>& block, const Tensor<S>& mask) {
    return block.forward(seq, mask);
}

// Parallel hybrid Trans&Conv block: ST path over windows plus a conv path,
// fused by addition. In the decoder the ST path consumes x_up + y_skip while
// the conv path consumes their channel concatenation.
template <class S>
struct HybridStage {
    Window3 window;
    Shape spatial;           // (D,H,W) at this stage
    std::vector<int64_t> shift;  // SW-MSA shift (floor(w/2), zero where window spans the axis)
    std::vector<STBlock<S>> blocks;
    std::vector<ConvUnit<S>> convs;
    Tensor<S> mask;          // precomputed for the shifted blocks
    bool decoder = false;
    int64_t channels = 0;

    HybridStage() = default;
    HybridStage(int64_t channels_, int64_t heads, Window3 window_, Shape spatial_, int64_t m1, int64_t conv_blocks,
                int64_t mlp_ratio, bool position_bias, bool decoder_)
        : window(window_), spatial(std::move(spatial_)), decoder(decoder_), channels(channels_) {
        shift = {window.d < spatial[0] ? window.d / 2 : 0, window.h < spatial[1] ? window.h / 2 : 0,
                 window.w < spatial[2] ? window.w / 2 : 0};
        for (int64_t i = 0; i < m1; ++i) {
            blocks.emplace_back(channels_, heads, window, mlp_ratio, position_bias);
            // W-MSA and SW-MSA alternate across consecutive blocks
            blocks.back().shift = (i % 2 == 0) ? std::vector<int64_t>{0, 0, 0} : shift;
        }
        for (int64_t i = 0; i < conv_blocks; ++i) {
            int64_t cin = (decoder_ && i == 0) ? 2 * channels_ : channels_;
            convs.emplace_back(cin, channels_);
        }
        if (m1 >= 2 && (shift[0] || shift[1] || shift[2])) mask = shift_mask<S>(spatial, window, shift);
    }

    Tensor<S> st_path(const Tensor<S>& x) const {
        Shape vol_shape = x.shape();
        Tensor<S> cur = x;
        for (const auto& blk : blocks) {
            bool shifted = blk.shift[0] || blk.shift[1] || blk.shift[2];
            Tensor<S> pre = shifted ? cyclic_roll(cur, {0, 0, -blk.shift[0], -blk.shift[1], -blk.shift[2]}) : cur;
            Tensor<S> seq = v2s(pre, window);
            Tensor<S> att = blk.forward(seq, shifted ? mask : Tensor<S>());
            Tensor<S> vol = s2v(att, window, vol_shape);
            cur = shifted ? cyclic_roll(vol, {0, 0, blk.shift[0], blk.shift[1], blk.shift[2]}) : vol;
        }
        return cur;
    }

    Tensor<S> conv_path(const Tensor<S>& x) const {
        Tensor<S> cur = x;
        for (const auto& cu : convs) cur = cu.forward(cur);
        return cur;
    }

    // encoder form: y = S2V(ST^{m1}(V2S(x))) + Conv^{m2}(x)
    Tensor<S> forward_encoder(const Tensor<S>& x) const {
        PH_CHECK(!decoder, "encoder forward on decoder stage");
        return add(st_path(x), conv_path(x));
    }

    // decoder form: z = S2V(ST^{m1}(V2S(x_up + y_skip))) + Conv^{m2}([x_up, y_skip])
    Tensor<S> forward_decoder(const Tensor<S>& x_up, const Tensor<S>& y_skip) const {
        PH_CHECK(decoder, "decoder forward on encoder stage");
        PH_CHECK(x_up.shape() == y_skip.shape(), "decoder stage: up-sampled input ", shape_str(x_up.shape()),
                 " and skip ", shape_str(y_skip.shape()), " must match");
        return add(st_path(add(x_up, y_skip)), conv_path(concat(x_up, y_skip, 1)));
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".st" + std::to_string(i), out);
        for (size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + ".conv" + std::to_string(i), out);
    }
};

// 1x1x1 convolution to class logits
template <class S>
struct SegHead {
    Tensor<S> weight, bias;
    SegHead() = default;
    SegHead(int64_t cin, int64_t classes) {
        weight = Tensor<S>::zeros({classes, cin, 1, 1, 1}, true);
        bias = Tensor<S>::zeros({classes}, true);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return conv3d(x, weight, bias, 1, 0); }
    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(1)});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
    }
};

// U-shaped PHTrans: n1 pure conv stages, n2 hybrid stages, symmetric decoder
// with skip fusion, and a deep-supervision head at every decoder stage
// (bottleneck included) for n1+n2 outputs.
template <class S>
struct PHTransModel {
    PHTransConfig cfg;

    std::vector<ConvUnit<S>> enc_pure;      // 2 per pure stage
    std::vector<Downsample<S>> downs;       // into each hybrid stage
    std::vector<HybridStage<S>> enc_hybrid;
    std::vector<Upsample<S>> ups;           // out of each decoder hybrid stage
    std::vector<HybridStage<S>> dec_hybrid;
    std::vector<TransConvUnit<S>> dec_pure_up;
    std::vector<ConvUnit<S>> dec_pure_conv;
    std::vector<SegHead<S>> heads;          // coarsest first

    explicit PHTransModel(PHTransConfig config) : cfg(std::move(config)) {
        cfg.validate();
        const int64_t S_ = cfg.stages();
        // encoder pure stages: two ConvUnits each, the first strided except at stage 0
        for (int64_t s = 0; s < cfg.n1; ++s) {
            int64_t cin = s == 0 ? cfg.in_channels : cfg.channels_at(s - 1);
            enc_pure.emplace_back(cin, cfg.channels_at(s), s == 0 ? 1 : 2);
            enc_pure.emplace_back(cfg.channels_at(s), cfg.channels_at(s));
        }
        // encoder hybrid stages, each entered through a downsample transition
        for (int64_t hs = 0; hs < cfg.n2; ++hs) {
            int64_t s = cfg.n1 + hs;
            downs.emplace_back(cfg.channels_at(s - 1));
            enc_hybrid.emplace_back(cfg.channels_at(s), cfg.heads[size_t(hs)], cfg.windows[size_t(hs)],
                                    cfg.spatial_at(s), cfg.m1, cfg.conv_blocks_at_hybrid(hs), cfg.mlp_ratio,
                                    cfg.position_bias, false);
        }
        // decoder hybrid stages (bottleneck excluded), highest stage first
        for (int64_t hs = cfg.n2 - 2; hs >= 0; --hs) {
            int64_t s = cfg.n1 + hs;
            ups.emplace_back(cfg.channels_at(s + 1));
            dec_hybrid.emplace_back(cfg.channels_at(s), cfg.heads[size_t(hs)], cfg.windows[size_t(hs)],
                                    cfg.spatial_at(s), cfg.m1, cfg.m2, cfg.mlp_ratio, cfg.position_bias, true);
        }
        // decoder pure stages: transposed unit up, then one ConvUnit on the concat
        for (int64_t s = cfg.n1 - 1; s >= 0; --s) {
            dec_pure_up.emplace_back(cfg.channels_at(s + 1), cfg.channels_at(s));
            dec_pure_conv.emplace_back(2 * cfg.channels_at(s), cfg.channels_at(s));
        }
        for (int64_t s = S_ - 1; s >= 0; --s) heads.emplace_back(cfg.channels_at(s), cfg.num_classes);
    }

    int64_t num_outputs() const { return cfg.stages(); }

    // returns n1+n2 logit maps, coarsest to finest
    std::vector<Tensor<S>> forward(const Tensor<S>& x) const {
        PH_CHECK(x.dim() == 5 && x.size(1) == cfg.in_channels && x.size(2) == cfg.input_shape[0] &&
                     x.size(3) == cfg.input_shape[1] && x.size(4) == cfg.input_shape[2],
                 "phtrans forward: input ", shape_str(x.shape()), " does not match configured shape ",
                 shape_str(cfg.input_shape));
        std::vector<Tensor<S>> skips;
        Tensor<S> cur = x;
        for (int64_t s = 0; s < cfg.n1; ++s) {
            cur = enc_pure[size_t(2 * s + 1)].forward(enc_pure[size_t(2 * s)].forward(cur));
            skips.push_back(cur);
        }
        for (int64_t hs = 0; hs < cfg.n2; ++hs) {
            cur = enc_hybrid[size_t(hs)].forward_encoder(downs[size_t(hs)].forward(cur));
            skips.push_back(cur);
        }

        std::vector<Tensor<S>> outputs;
        outputs.push_back(heads[0].forward(cur));  // bottleneck head, coarsest
        int64_t head_idx = 1;
        for (int64_t i = 0; i < int64_t(dec_hybrid.size()); ++i) {
            int64_t s = cfg.n1 + cfg.n2 - 2 - i;
            Tensor<S> up = ups[size_t(i)].forward(cur);
            cur = dec_hybrid[size_t(i)].forward_decoder(up, skips[size_t(s)]);
            outputs.push_back(heads[size_t(head_idx++)].forward(cur));
        }
        for (int64_t i = 0; i < cfg.n1; ++i) {
            int64_t s = cfg.n1 - 1 - i;
            Tensor<S> up = dec_pure_up[size_t(i)].forward(cur);
            cur = dec_pure_conv[size_t(i)].forward(concat(up, skips[size_t(s)], 1));
            outputs.push_back(heads[size_t(head_idx++)].forward(cur));
        }
        return outputs;
    }

    ParamList<S> parameters() {
        ParamList<S> out;
        for (size_t i = 0; i < enc_pure.size(); ++i) enc_pure[i].collect("enc.pure" + std::to_string(i), out);
        for (size_t i = 0; i < downs.size(); ++i) downs[i].collect("enc.down" + std::to_string(i), out);
        for (size_t i = 0; i < enc_hybrid.size(); ++i) enc_hybrid[i].collect("enc.hybrid" + std::to_string(i), out);
        for (size_t i = 0; i < ups.size(); ++i) ups[i].collect("dec.up" + std::to_string(i), out);
        for (size_t i = 0; i < dec_hybrid.size(); ++i) dec_hybrid[i].collect("dec.hybrid" + std::to_string(i), out);
        for (size_t i = 0; i < dec_pure_up.size(); ++i) dec_pure_up[i].collect("dec.pureup" + std::to_string(i), out);
        for (size_t i = 0; i < dec_pure_conv.size(); ++i)
            dec_pure_conv[i].collect("dec.pureconv" + std::to_string(i), out);
        for (size_t i = 0; i < heads.size(); ++i) heads[i].collect("head" + std::to_string(i), out);
        return out;
    }

    void init_weights() {
        ParamList<S> params = parameters();
        he_init(params, cfg.seed);
    }

    void zero_grads() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }
};

template <class S>
int64_t count_parameters(PHTransModel<S>& model) {
    int64_t n = 0;
    for (const auto& p : model.parameters()) n += p.tensor.numel();
    return n;
}

// per-layer (name, count) breakdown, aggregated at the module-path level
template <class S>
std::vector<std::pair<std::string, int64_t>> parameter_breakdown(PHTransModel<S>& model) {
    std::vector<std::pair<std::string, int64_t>> rows;
    for (const auto& p : model.parameters()) rows.emplace_back(p.name, p.tensor.numel());
    return rows;
}

}  // namespace phtrans
