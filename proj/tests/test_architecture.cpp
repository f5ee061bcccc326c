#include <doctest.h>

#include <cstdio>

#include "phtrans/checkpoint.hpp"
#include "phtrans/gradcheck.hpp"

using namespace phtrans;

namespace {

using TF = Tensor<float>;

template <class S>
Tensor<S> make_random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (auto& v : t.values()) v = S(rng.uniform(lo, hi));
    return t;
}

std::vector<float> random_weights(int64_t n, Rng& rng) {
    std::vector<float> w(static_cast<size_t>(n));
    for (auto& v : w) v = float(rng.uniform(0.5, 1.5));
    return w;
}

PHTransConfig tiny_config() {
    PHTransConfig c;
    c.n1 = 1;
    c.n2 = 1;
    c.m1 = 2;
    c.m2 = 2;
    c.base_channels = 4;
    c.heads = {2};
    c.windows = {{2, 2, 2}};
    c.mlp_ratio = 1;
    c.num_classes = 2;
    c.input_shape = {8, 8, 8};
    c.downsample_count = 1;
    c.bottleneck_conv_blocks = 2;
    c.seed = 77;
    return c;
}

void zero_params(ParamList<float>& params, const std::string& needle) {
    for (auto& p : params)
        if (p.name.find(needle) != std::string::npos)
            std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.f);
}

}  // namespace

TEST_CASE("presets: validation, resolutions, table values") {
    PHTransConfig fine = preset("phtrans_s_fine");
    CHECK(fine.stages() == 5);
    CHECK(fine.spatial_at(0) == Shape{96, 192, 192});
    CHECK(fine.spatial_at(1) == Shape{48, 96, 96});
    CHECK(fine.spatial_at(2) == Shape{24, 48, 48});
    CHECK(fine.spatial_at(3) == Shape{12, 24, 24});
    CHECK(fine.spatial_at(4) == Shape{6, 12, 12});
    // bottleneck window [3,4,4] divides [6,12,12]
    CHECK(fine.spatial_at(4)[0] % fine.windows[2].d == 0);
    CHECK(fine.spatial_at(4)[1] % fine.windows[2].h == 0);
    CHECK(fine.spatial_at(4)[2] % fine.windows[2].w == 0);

    PHTransConfig coarse = preset("phtrans_s_coarse");
    CHECK(coarse.input_shape == Shape{64, 64, 64});
    CHECK(coarse.num_classes == 2);
    CHECK(coarse.spatial_at(4) == Shape{4, 4, 4});

    PHTransConfig large = preset("phtrans_l");
    CHECK(large.mlp_ratio == 4);
    CHECK(large.stages() == 6);
    CHECK(large.heads == std::vector<int64_t>{3, 6, 12, 24});
    // constant head width across hybrid stages
    for (int64_t hs = 0; hs < large.n2; ++hs)
        CHECK(large.channels_at(large.n1 + hs) / large.heads[size_t(hs)] == 48);

    CHECK_THROWS_AS(preset("phtrans_xl"), Error);

    PHTransConfig bad = tiny_config();
    bad.heads = {3};  // 8 channels not divisible by 3
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = tiny_config();
    bad.windows = {{3, 2, 2}};  // 4 not divisible by 3
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = tiny_config();
    bad.downsample_count = 3;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("st_block: residual identity with zeroed projections, alternation") {
    Rng rng(211);
    STBlock<float> blk(6, 2, {2, 2, 2}, 2, true);
    ParamList<float> params;
    blk.collect("blk", params);
    he_init(params, 5);
    zero_params(params, ".attn.proj");
    zero_params(params, ".mlp.fc2");

    TF seq = make_random<float>({4, 8, 6}, rng);
    TF mask;
    TF out = blk.forward(seq, mask);
    for (int64_t i = 0; i < seq.numel(); ++i)
        CHECK(out.values()[size_t(i)] == doctest::Approx(seq.values()[size_t(i)]).epsilon(1e-6));

    // shape preserved for any valid sequence
    he_init(params, 6);
    CHECK(blk.forward(seq, mask).shape() == seq.shape());

    // alternation: first block regular, second shifted by floor(window/2)
    HybridStage<float> stage(8, 2, {4, 4, 4}, {8, 8, 8}, 2, 2, 1, true, false);
    CHECK(stage.blocks[0].shift == std::vector<int64_t>{0, 0, 0});
    CHECK(stage.blocks[1].shift == std::vector<int64_t>{2, 2, 2});
    // no shift along axes fully covered by the window
    HybridStage<float> bottleneck(8, 2, {4, 4, 4}, {4, 4, 8}, 2, 2, 1, true, false);
    CHECK(bottleneck.blocks[1].shift == std::vector<int64_t>{0, 0, 2});
}

TEST_CASE("trans_conv encoder: additive decomposition of the two paths") {
    Rng rng(223);
    HybridStage<float> stage(8, 2, {2, 2, 2}, {4, 4, 4}, 2, 2, 1, true, false);
    ParamList<float> params;
    stage.collect("stage", params);
    he_init(params, 9);

    TF x = make_random<float>({1, 8, 4, 4, 4}, rng);

    // conv path zeroed: final ConvUnit weights/bias and its norm affine to zero
    zero_params(params, ".conv1.");
    TF y = stage.forward_encoder(x);
    TF st_only = stage.st_path(x);
    for (int64_t i = 0; i < y.numel(); ++i)
        CHECK(y.values()[size_t(i)] == doctest::Approx(st_only.values()[size_t(i)]).epsilon(2e-5));

    // ST path zeroed: MSA and MLP out-projections -> ST stack is the identity
    he_init(params, 9);
    zero_params(params, ".attn.proj");
    zero_params(params, ".mlp.fc2");
    TF y2 = stage.forward_encoder(x);
    TF expect = add(x, stage.conv_path(x));
    for (int64_t i = 0; i < y2.numel(); ++i)
        CHECK(y2.values()[size_t(i)] == doctest::Approx(expect.values()[size_t(i)]).epsilon(2e-5));
}

TEST_CASE("trans_conv encoder: coarse stage-3 shape contract") {
    Rng rng(227);
    HybridStage<float> stage(64, 4, {4, 4, 4}, {16, 16, 16}, 2, 2, 1, true, false);
    ParamList<float> params;
    stage.collect("s", params);
    he_init(params, 13);
    TF x = make_random<float>({1, 64, 16, 16, 16}, rng);
    CHECK(stage.forward_encoder(x).shape() == Shape{1, 64, 16, 16, 16});
}

TEST_CASE("trans_conv decoder: concat conv path, gradients reach both inputs") {
    Rng rng(229);
    HybridStage<float> stage(8, 2, {2, 2, 2}, {4, 4, 4}, 2, 2, 1, true, true);
    ParamList<float> params;
    stage.collect("d", params);
    he_init(params, 17);

    TF x_up = make_random<float>({1, 8, 4, 4, 4}, rng);
    TF skip = make_random<float>({1, 8, 4, 4, 4}, rng);
    TF z = stage.forward_decoder(x_up, skip);
    CHECK(z.shape() == Shape{1, 8, 4, 4, 4});  // C_s out although conv input is 2*C_s
    CHECK(stage.convs[0].weight.size(1) == 16);

    Tape<float>::active().clear();
    x_up.set_requires_grad(true);
    skip.set_requires_grad(true);
    auto w = random_weights(z.numel(), rng);
    backward(weighted_mean(stage.forward_decoder(x_up, skip), w));
    double gx = 0, gs = 0;
    for (float g : x_up.grad()) gx += std::abs(double(g));
    for (float g : skip.grad()) gs += std::abs(double(g));
    CHECK(gx > 1e-6);
    CHECK(gs > 1e-6);

    CHECK_THROWS_AS(stage.forward_decoder(x_up, make_random<float>({1, 8, 2, 4, 4}, rng)), Error);
}

TEST_CASE("downsample / upsample: shape contracts and closed-form parameter count") {
    Rng rng(233);
    Downsample<float> down(16);
    ParamList<float> p;
    down.collect("t", p);
    he_init(p, 19);
    TF x = make_random<float>({1, 16, 64, 64, 64}, rng);
    CHECK(down.forward(x).shape() == Shape{1, 32, 32, 32, 32});

    // transition parameters: 2C*C*k^3 + 2C conv, + 2*2C norm affine (k=2)
    int64_t expect = 2 * 16 * 16 * 8 + 32 + 2 * 32;
    CHECK(count_parameters(p) == expect);

    // four chained transitions: 64^3 at 16ch -> 4^3 at 256ch
    TF cur = x;
    for (int64_t c = 16; c <= 128; c *= 2) {
        Downsample<float> d(c);
        ParamList<float> pp;
        d.collect("x", pp);
        he_init(pp, 21);
        cur = d.forward(cur);
    }
    CHECK(cur.shape() == Shape{1, 256, 4, 4, 4});

    Upsample<float> up(256);
    ParamList<float> pu;
    up.collect("u", pu);
    he_init(pu, 23);
    CHECK(up.forward(cur).shape() == Shape{1, 128, 8, 8, 8});
}

TEST_CASE("phtrans_forward: tiny model output schedule and shapes") {
    PHTransModel<float> model(tiny_config());
    model.init_weights();
    Rng rng(239);
    TF x = make_random<float>({1, 1, 8, 8, 8}, rng);
    auto outs = model.forward(x);
    REQUIRE(outs.size() == 2);
    CHECK(outs[0].shape() == Shape{1, 2, 4, 4, 4});  // coarsest first
    CHECK(outs[1].shape() == Shape{1, 2, 8, 8, 8});  // finest matches input resolution
    for (auto& o : outs)
        for (float v : o.values()) CHECK(std::isfinite(v));

    CHECK_THROWS_AS(model.forward(make_random<float>({1, 1, 4, 8, 8}, rng)), Error);

    // encoder/decoder symmetry: the finest head input went through n1+n2-1 upsamples
    CHECK(model.num_outputs() == 2);
}

TEST_CASE("phtrans_forward: zero-initialized projections stay finite and deterministic") {
    PHTransConfig cfg = tiny_config();
    PHTransModel<float> model(cfg);
    model.init_weights();
    auto params = model.parameters();
    zero_params(params, ".attn.proj");
    zero_params(params, ".mlp.fc2");
    zero_params(params, ".conv1.");
    Rng rng(241);
    TF x = make_random<float>({1, 1, 8, 8, 8}, rng);
    auto a = model.forward(x);
    auto b = model.forward(x);
    for (size_t i = 0; i < a.size(); ++i)
        for (int64_t j = 0; j < a[i].numel(); ++j) {
            CHECK(std::isfinite(a[i].values()[size_t(j)]));
            CHECK(a[i].values()[size_t(j)] == b[i].values()[size_t(j)]);
        }
}

TEST_CASE("count_parameters: ConvUnit closed form, forward invariance, quadratic scaling") {
    ConvUnit<float> cu(8, 8);
    ParamList<float> p;
    cu.collect("cu", p);
    CHECK(count_parameters(p) == 27 * 8 * 8 + 8 + 2 * 8);

    PHTransModel<float> model(tiny_config());
    model.init_weights();
    int64_t before = count_parameters(model);
    Rng rng(251);
    TF x = make_random<float>({1, 1, 8, 8, 8}, rng);
    (void)model.forward(x);
    CHECK(count_parameters(model) == before);

    PHTransConfig doubled = tiny_config();
    doubled.base_channels = 8;
    doubled.heads = {2};
    PHTransModel<float> model2(doubled);
    double ratio = double(count_parameters(model2)) / double(before);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
}

TEST_CASE("count_parameters: PHTrans-S lands on the reference budget") {
    PHTransModel<float> fine(preset("phtrans_s_fine"));
    int64_t n_fine = count_parameters(fine);
    PHTransModel<float> coarse(preset("phtrans_s_coarse"));
    int64_t n_coarse = count_parameters(coarse);
    const double reference = 6.66e6;
    MESSAGE("phtrans_s_fine parameters: ", n_fine);
    MESSAGE("phtrans_s_coarse parameters: ", n_coarse);
    CHECK(std::abs(double(n_fine) - reference) / reference < 0.15);
    CHECK(std::abs(double(n_coarse) - reference) / reference < 0.15);
}

TEST_CASE("end-to-end gradient check on a tiny config") {
    PHTransModel<float> model(tiny_config());
    model.init_weights();
    Rng rng(257);
    TF x = make_random<float>({1, 1, 8, 8, 8}, rng);
    std::vector<std::vector<float>> wts;
    wts.push_back(random_weights(2 * 4 * 4 * 4, rng));
    wts.push_back(random_weights(2 * 8 * 8 * 8, rng));

    auto loss_fn = [&] {
        auto outs = model.forward(x);
        return add(weighted_mean(outs[0], wts[0]), weighted_mean(outs[1], wts[1]));
    };

    auto params = model.parameters();
    Rng pick(263);
    int checked = 0;
    for (int trial = 0; trial < 10; ++trial) {
        auto& p = params[size_t(pick.uniform_int(0, int64_t(params.size()) - 1))];
        std::vector<int64_t> idx = {pick.uniform_int(0, p.tensor.numel() - 1)};
        auto rep = grad_check<float>(loss_fn, p.tensor, 1e-3, &idx);
        CHECK(rep.max_rel_err < 1e-2);
        ++checked;
    }
    CHECK(checked == 10);
}

TEST_CASE("checkpoint: bitwise round trip and forward reproducibility") {
    PHTransModel<float> model(tiny_config());
    model.init_weights();
    nlohmann::json meta;
    meta["epoch"] = 3;
    meta["note"] = "roundtrip";
    std::string p1 = "ckpt_rt_a.phtr", p2 = "ckpt_rt_b.phtr";
    save_model(p1, model, meta);

    CheckpointData data = read_checkpoint(p1);
    CHECK(data.meta.at("epoch") == 3);
    PHTransModel<float> loaded = load_model(data);
    write_checkpoint(p2, data.config, data.tensors, data.meta);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());

    Rng rng(269);
    TF x = make_random<float>({1, 1, 8, 8, 8}, rng);
    auto a = model.forward(x);
    auto b = loaded.forward(x);
    for (size_t i = 0; i < a.size(); ++i)
        for (int64_t j = 0; j < a[i].numel(); ++j) CHECK(a[i].values()[size_t(j)] == b[i].values()[size_t(j)]);

    std::remove(p1.c_str());
    std::remove(p2.c_str());

    CHECK_THROWS_AS(read_checkpoint("does_not_exist.phtr"), Error);
}
