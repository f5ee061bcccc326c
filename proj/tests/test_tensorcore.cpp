#include <doctest.h>

#include "phtrans/gradcheck.hpp"
#include "phtrans/layers.hpp"

using namespace phtrans;

namespace {

using TF = Tensor<float>;
using TD = Tensor<double>;

template <class S>
Tensor<S> make_random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (auto& v : t.values()) v = S(rng.uniform(lo, hi));
    return t;
}

template <class S>
std::vector<S> random_weights(int64_t n, Rng& rng) {
    std::vector<S> w(static_cast<size_t>(n));
    for (auto& v : w) v = S(rng.uniform(0.5, 1.5));
    return w;
}

}  // namespace

TEST_CASE("elementwise: identities and hand-computed backward") {
    TF x = TF::from_data({2}, {1.f, 2.f});
    TF z = TF::zeros({2});
    TF r = add(x, z);
    CHECK(r.values()[0] == 1.f);
    CHECK(r.values()[1] == 2.f);

    TF s = scale(x, 0.f);
    CHECK(s.values()[0] == 0.f);
    CHECK(s.values()[1] == 0.f);

    // add([1,2],[3,4]) = [4,6]; upstream [1,1] routes grad 1 to each input element
    Tape<float>::active().clear();
    TF a = TF::from_data({2}, {1.f, 2.f}, true);
    TF b = TF::from_data({2}, {3.f, 4.f}, true);
    TF out = add(a, b);
    CHECK(out.values()[0] == 4.f);
    CHECK(out.values()[1] == 6.f);
    TF loss = sum(out);
    backward(loss);
    CHECK(a.grad()[0] == 1.f);
    CHECK(a.grad()[1] == 1.f);
    CHECK(b.grad()[0] == 1.f);
    CHECK(b.grad()[1] == 1.f);

    CHECK_THROWS_AS(add(TF::zeros({2}), TF::zeros({3})), Error);
}

TEST_CASE("matmul: identity, hand product, finite differences") {
    TF a = TF::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f});
    TF eye = TF::from_data({2, 2}, {1.f, 0.f, 0.f, 1.f});
    TF r = matmul(a, eye);
    for (int i = 0; i < 4; ++i) CHECK(r.values()[size_t(i)] == a.values()[size_t(i)]);

    TF ones = TF::from_data({2, 1}, {1.f, 1.f});
    TF p = matmul(a, ones);
    CHECK(p.values()[0] == 3.f);
    CHECK(p.values()[1] == 7.f);

    CHECK_THROWS_AS(matmul(TF::zeros({2, 3}), TF::zeros({4, 2})), Error);

    Rng rng(11);
    TF x = make_random<float>({4, 5}, rng);
    TF y = make_random<float>({5, 3}, rng);
    auto w = random_weights<float>(12, rng);
    auto repx = grad_check<float>([&] { return weighted_mean(matmul(x, y), w); }, x);
    CHECK(repx.max_rel_err < 1e-3);
    auto repy = grad_check<float>([&] { return weighted_mean(matmul(x, y), w); }, y);
    CHECK(repy.max_rel_err < 1e-3);
}

TEST_CASE("matmul: batch broadcasting") {
    Rng rng(5);
    TF a = make_random<float>({3, 2, 4, 5}, rng);
    TF b = make_random<float>({5, 6}, rng);
    TF y = matmul(a, b);
    CHECK(y.shape() == Shape{3, 2, 4, 6});
    // spot-check one batch element against a 2D multiply
    TF a01 = crop(a, {0, 1, 0, 0}, {1, 1, 4, 5});
    TF y01 = matmul(reshape(a01, {4, 5}), b);
    for (int64_t i = 0; i < 24; ++i)
        CHECK(y.values()[size_t((0 * 2 + 1) * 24 + i)] == doctest::Approx(y01.values()[size_t(i)]).epsilon(1e-6));
}

TEST_CASE("view ops: round trips and padding") {
    Rng rng(7);
    TF x = make_random<float>({2, 3, 4}, rng);
    TF r = reshape(reshape(x, {4, 6}), {2, 3, 4});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(r.values()[size_t(i)] == x.values()[size_t(i)]);

    TF p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(p.values()[size_t(i)] == x.values()[size_t(i)]);

    TF q = TF::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f});
    TF padded = pad_zero(q, {1, 1}, {1, 1});
    CHECK(padded.shape() == Shape{4, 4});
    CHECK(padded.values()[0] == 0.f);
    CHECK(padded.values()[5] == 1.f);
    CHECK(padded.values()[10] == 4.f);
    CHECK(padded.values()[15] == 0.f);
    TF back = crop(padded, {1, 1}, {2, 2});
    for (int64_t i = 0; i < 4; ++i) CHECK(back.values()[size_t(i)] == q.values()[size_t(i)]);

    TF c1 = TF::zeros({1, 3, 2, 2, 2});
    TF c2 = TF::zeros({1, 3, 2, 2, 2});
    CHECK(concat(c1, c2, 1).shape() == Shape{1, 6, 2, 2, 2});

    CHECK_THROWS_AS(reshape(x, {5, 5}), Error);
    CHECK_THROWS_AS(crop(q, {1, 1}, {3, 1}), Error);
    CHECK_THROWS_AS(permute(x, {0, 0, 1}), Error);
}

TEST_CASE("view ops: gradients are the inverse rearrangement") {
    Rng rng(13);
    TF x = make_random<float>({3, 4}, rng);
    auto w = random_weights<float>(5 * 10, rng);
    auto rep = grad_check<float>([&] { return weighted_mean(pad_zero(concat(x, x, 1), {1, 1}, {1, 1}), w); }, x);
    CHECK(rep.max_rel_err < 1e-3);

    auto w2 = random_weights<float>(6, rng);
    auto rep2 = grad_check<float>([&] { return weighted_mean(crop(permute(x, {1, 0}), {1, 0}, {2, 3}), w2); }, x);
    CHECK(rep2.max_rel_err < 1e-3);
}

TEST_CASE("cyclic_roll") {
    TF x = TF::from_data({4}, {1.f, 2.f, 3.f, 4.f});
    TF r0 = cyclic_roll(x, {0});
    TF rfull = cyclic_roll(x, {4});
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(r0.values()[size_t(i)] == x.values()[size_t(i)]);
        CHECK(rfull.values()[size_t(i)] == x.values()[size_t(i)]);
    }
    TF r1 = cyclic_roll(x, {1});
    CHECK(r1.values()[0] == 4.f);
    CHECK(r1.values()[1] == 1.f);
    CHECK(r1.values()[2] == 2.f);
    CHECK(r1.values()[3] == 3.f);

    // roll by s then -s is identity, including negative shifts mod extent
    Rng rng(3);
    TF y = make_random<float>({2, 3, 5}, rng);
    TF rt = cyclic_roll(cyclic_roll(y, {1, -2, 7}), {-1, 2, -7});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(rt.values()[size_t(i)] == y.values()[size_t(i)]);

    auto w = random_weights<float>(y.numel(), rng);
    auto rep = grad_check<float>([&] { return weighted_mean(cyclic_roll(y, {1, 2, 3}), w); }, y);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("softmax: uniform, normalization, closed form") {
    TF c = TF::full({3}, 2.5f);
    TF u = softmax(c, 0);
    for (int64_t i = 0; i < 3; ++i) CHECK(u.values()[size_t(i)] == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));

    Rng rng(17);
    TF x = make_random<float>({4, 6}, rng, -5.0, 5.0);
    TF s = softmax(x, 1);
    for (int64_t r = 0; r < 4; ++r) {
        float acc = 0;
        for (int64_t j = 0; j < 6; ++j) acc += s.values()[size_t(r * 6 + j)];
        CHECK(acc == doctest::Approx(1.0f).epsilon(1e-6));
    }

    TF two = TF::from_data({2}, {0.f, std::log(3.f)});
    TF st = softmax(two, 0);
    CHECK(st.values()[0] == doctest::Approx(0.25f).epsilon(1e-5));
    CHECK(st.values()[1] == doctest::Approx(0.75f).epsilon(1e-5));

    auto w = random_weights<float>(24, rng);
    auto rep = grad_check<float>([&] { return weighted_mean(softmax(x, 1), w); }, x);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("gelu: anchors and gradient") {
    TF z = TF::scalar(0.f);
    CHECK(gelu(z).values()[0] == 0.f);
    TF big = TF::scalar(10.f);
    CHECK(gelu(big).values()[0] == doctest::Approx(10.f).epsilon(1e-4));

    Rng rng(19);
    TF x = make_random<float>({20}, rng, -3.0, 3.0);
    auto w = random_weights<float>(20, rng);
    auto rep = grad_check<float>([&] { return weighted_mean(gelu(x), w); }, x);
    CHECK(rep.max_rel_err < 1e-3);

    gelu_use_erf() = true;
    auto rep2 = grad_check<float>([&] { return weighted_mean(gelu(x), w); }, x);
    gelu_use_erf() = false;
    CHECK(rep2.max_rel_err < 1e-3);
}

TEST_CASE("conv3d: identity kernel, shape formula, interior sums") {
    // 1x1x1 kernel with weight 1: output equals input
    Rng rng(23);
    TF x = make_random<float>({1, 1, 3, 3, 3}, rng);
    TF w1 = TF::full({1, 1, 1, 1, 1}, 1.f);
    TF nob;
    TF y = conv3d(x, w1, nob, 1, 0);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[size_t(i)] == x.values()[size_t(i)]);

    TF x8 = TF::zeros({1, 1, 8, 8, 8});
    TF k3 = TF::zeros({2, 1, 3, 3, 3});
    CHECK(conv3d(x8, k3, nob, 1, 1).shape() == Shape{1, 2, 8, 8, 8});
    CHECK(conv3d(x8, k3, nob, 2, 1).shape() == Shape{1, 2, 4, 4, 4});

    // all-ones kernel on all-ones input: interior voxels see the full 3^3 sum
    TF ones = TF::full({1, 1, 5, 5, 5}, 1.f);
    TF wk = TF::full({1, 1, 3, 3, 3}, 1.f);
    TF s = conv3d(ones, wk, nob, 1, 1);
    auto sv = s.values();
    CHECK(sv[size_t((2 * 5 + 2) * 5 + 2)] == 27.f);   // interior
    CHECK(sv[0] == 8.f);                              // corner clipped by padding

    CHECK_THROWS_AS(conv3d(TF::zeros({1, 1, 2, 2, 2}), TF::zeros({1, 1, 3, 3, 3}), nob, 1, 0), Error);

    // stride 1 with padding (k-1)/2 preserves spatial shape for odd k
    for (int64_t k : {1, 3, 5}) {
        TF wk5 = TF::zeros({1, 1, k, k, k});
        CHECK(conv3d(TF::zeros({1, 1, 6, 6, 6}), wk5, nob, 1, (k - 1) / 2).shape() == Shape{1, 1, 6, 6, 6});
    }
}

TEST_CASE("conv3d: direct and im2col paths agree") {
    Rng rng(29);
    for (int inst = 0; inst < 5; ++inst) {
        TF x = make_random<float>({2, 3, 5, 6, 4}, rng);
        TF w = make_random<float>({4, 3, 3, 3, 3}, rng);
        TF b = make_random<float>({4}, rng);
        int64_t stride = 1 + inst % 2;
        conv_backend() = ConvBackend::Direct;
        TF yd = conv3d(x, w, b, stride, 1);
        conv_backend() = ConvBackend::Im2col;
        TF yi = conv3d(x, w, b, stride, 1);
        REQUIRE(yd.shape() == yi.shape());
        for (int64_t i = 0; i < yd.numel(); ++i)
            CHECK(yd.values()[size_t(i)] == doctest::Approx(yi.values()[size_t(i)]).epsilon(1e-5));
    }
}

TEST_CASE("conv3d: gradients match finite differences on both paths") {
    Rng rng(31);
    TF x = make_random<float>({1, 2, 4, 4, 4}, rng);
    TF w = make_random<float>({3, 2, 3, 3, 3}, rng, -0.5, 0.5);
    TF b = make_random<float>({3}, rng);
    auto wts = random_weights<float>(3 * 64, rng);
    for (ConvBackend be : {ConvBackend::Direct, ConvBackend::Im2col}) {
        conv_backend() = be;
        auto f = [&] { return weighted_mean(conv3d(x, w, b, 1, 1), wts); };
        CHECK(grad_check<float>(f, x).max_rel_err < 1e-3);
        CHECK(grad_check<float>(f, w).max_rel_err < 1e-3);
        CHECK(grad_check<float>(f, b).max_rel_err < 1e-3);
    }
    conv_backend() = ConvBackend::Im2col;
}

TEST_CASE("conv3d_transpose: shape doubling, delta scatter, adjoint identity") {
    Rng rng(37);
    TF x = make_random<float>({1, 2, 4, 4, 4}, rng);
    TF w = make_random<float>({2, 3, 2, 2, 2}, rng);
    TF nob;
    TF y = conv3d_transpose(x, w, nob, 2);
    CHECK(y.shape() == Shape{1, 3, 8, 8, 8});

    // delta weight: each input voxel lands on exactly one output voxel
    TF xd = make_random<float>({1, 1, 3, 3, 3}, rng);
    TF wd = TF::zeros({1, 1, 2, 2, 2});
    wd.values()[0] = 1.f;  // kernel position (0,0,0)
    TF yd = conv3d_transpose(xd, wd, nob, 2);
    int nonzero = 0;
    for (int64_t d = 0; d < 6; ++d)
        for (int64_t h = 0; h < 6; ++h)
            for (int64_t ww = 0; ww < 6; ++ww) {
                float v = yd.values()[size_t((d * 6 + h) * 6 + ww)];
                if (d % 2 == 0 && h % 2 == 0 && ww % 2 == 0) {
                    CHECK(v == xd.values()[size_t((d / 2 * 3 + h / 2) * 3 + ww / 2)]);
                    if (v != 0.f) ++nonzero;
                } else {
                    CHECK(v == 0.f);
                }
            }
    CHECK(nonzero == 27);

    // adjoint identity: explicit matrices of conv_transpose fwd and conv bwd-data
    // on a 4^3 input must be transposes of each other's counterpart, i.e.
    // conv3d_transpose(x, w) == A^T x where A is the matrix of conv3d(., w', s=2).
    // Build A columns by probing conv3d with basis vectors and compare.
    TF wc = TF::zeros({2, 1, 2, 2, 2});  // conv weight [Cout=2? ...]
    // use Cin=1, Cout=1 for a compact matrix
    TF wt = make_random<float>({1, 1, 2, 2, 2}, rng);
    TF wconv = reshape(wt, {1, 1, 2, 2, 2});  // conv view: [Cout=1, Cin=1, k]
    const int64_t n_in = 4 * 4 * 4, n_out = 8 * 8 * 8;
    std::vector<std::vector<float>> A(size_t(n_in), std::vector<float>(size_t(n_out), 0.f));
    for (int64_t j = 0; j < n_out; ++j) {
        TF e = TF::zeros({1, 1, 8, 8, 8});
        e.values()[size_t(j)] = 1.f;
        TF out = conv3d(e, wconv, nob, 2, 0);  // [1,1,4,4,4]
        for (int64_t i = 0; i < n_in; ++i) A[size_t(i)][size_t(j)] = out.values()[size_t(i)];
    }
    TF xin = make_random<float>({1, 1, 4, 4, 4}, rng);
    TF tout = conv3d_transpose(xin, wt, nob, 2);
    for (int64_t j = 0; j < n_out; ++j) {
        double acc = 0;
        for (int64_t i = 0; i < n_in; ++i) acc += double(A[size_t(i)][size_t(j)]) * double(xin.values()[size_t(i)]);
        CHECK(tout.values()[size_t(j)] == doctest::Approx(float(acc)).epsilon(1e-4));
    }

    CHECK_THROWS_AS(conv3d_transpose(x, TF::zeros({2, 3, 3, 3, 3}), nob, 2), Error);
}

TEST_CASE("conv3d_transpose: gradients") {
    Rng rng(41);
    TF x = make_random<float>({1, 2, 3, 3, 3}, rng);
    TF w = make_random<float>({2, 2, 2, 2, 2}, rng);
    TF b = make_random<float>({2}, rng);
    auto wts = random_weights<float>(2 * 216, rng);
    auto f = [&] { return weighted_mean(conv3d_transpose(x, w, b, 2), wts); };
    CHECK(grad_check<float>(f, x).max_rel_err < 1e-3);
    CHECK(grad_check<float>(f, w).max_rel_err < 1e-3);
    CHECK(grad_check<float>(f, b).max_rel_err < 1e-3);
}

TEST_CASE("backward: leaves, chain rule, tape contract") {
    Tape<float>::active().clear();
    TF x = TF::from_data({3}, {1.f, -2.f, 3.f}, true);
    TF l = sum(x);
    backward(l);
    for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[size_t(i)] == 1.f);

    x.zero_grad();
    TF l2 = sum(mul(x, x));
    backward(l2);
    CHECK(x.grad()[0] == 2.f);
    CHECK(x.grad()[1] == -4.f);
    CHECK(x.grad()[2] == 6.f);

    // a second backward without new recorded work errors out
    CHECK_THROWS_AS(backward(l2), Error);

    // non-scalar loss rejected
    TF y = add(x, x);
    CHECK_THROWS_AS(backward(y), Error);
    Tape<float>::active().clear();
}

TEST_CASE("backward is linear over shared leaves") {
    Rng rng(43);
    TF x = make_random<float>({6}, rng);
    auto wf = random_weights<float>(6, rng);
    auto wg = random_weights<float>(6, rng);
    float alpha = 0.7f, beta = -1.3f;

    auto grad_of = [&](auto make_loss) {
        Tape<float>::active().clear();
        x.set_requires_grad(true);
        x.zero_grad();
        backward(make_loss());
        std::vector<float> g(x.grad().begin(), x.grad().end());
        return g;
    };
    auto gf = grad_of([&] { return weighted_mean(mul(x, x), wf); });
    auto gg = grad_of([&] { return weighted_mean(gelu(x), wg); });
    auto gc = grad_of([&] {
        return add(scale(weighted_mean(mul(x, x), wf), alpha), scale(weighted_mean(gelu(x), wg), beta));
    });
    for (size_t i = 0; i < 6; ++i) CHECK(gc[i] == doctest::Approx(alpha * gf[i] + beta * gg[i]).epsilon(1e-4));
}

TEST_CASE("grad_check: exact sum case in fp64") {
    // values and eps chosen representable in binary so central differences are exact
    TD x = TD::from_data({8}, {0.25, -0.5, 0.75, 1.0, -0.125, 0.375, -0.25, 0.5});
    auto rep = grad_check<double>([&] { return sum(x); }, x, 0.0009765625 /* 2^-10 */);
    CHECK(rep.max_abs_err == 0.0);

    Rng rng(47);
    TF y = Tensor<float>::zeros({12});
    for (auto& v : y.values()) v = float(rng.uniform(-1, 1));
    auto rep2 = grad_check<float>([&] { return sum(softmax(y, 0)); }, y);
    CHECK(rep2.max_rel_err < 1e-3);
}

TEST_CASE("determinism: same seed reproduces tensors bitwise") {
    Rng a(123, 7), b(123, 7);
    TF t1 = TF::randn({64}, a);
    TF t2 = TF::randn({64}, b);
    for (int64_t i = 0; i < 64; ++i) CHECK(t1.values()[size_t(i)] == t2.values()[size_t(i)]);
}

TEST_CASE("forward outputs stay finite on finite inputs") {
    Rng rng(53);
    TF x = make_random<float>({2, 3, 4, 4, 4}, rng, -10.0, 10.0);
    TF w = make_random<float>({3, 3, 3, 3, 3}, rng);
    TF b = make_random<float>({3}, rng);
    TF y = gelu(conv3d(x, w, b, 1, 1));
    TF s = softmax(reshape(y, {2, 3, 64}), 1);
    for (float v : s.values()) CHECK(std::isfinite(v));
}
