#include <doctest.h>

#include <cmath>
#include <fstream>

#include "evresid/autodiff.hpp"
#include "evresid/gradcheck.hpp"
#include "evresid/params.hpp"

using namespace evresid;

namespace {

Tensor rand_tensor(Shape s, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(s, rng, scale);
}

// quadruple-loop reference convolution
Tensor conv2d_naive(const Tensor& in, const Tensor& w, const Tensor& b, int64_t stride,
                    int64_t pad) {
    const int64_t C = in.shape()[0], H = in.shape()[1], W = in.shape()[2];
    const int64_t Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out(Shape{Cout, Ho, Wo});
    for (int64_t co = 0; co < Cout; ++co)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                double acc = b.numel() ? b[co] : 0.0;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t iy = oy * stride - pad + ky;
                            const int64_t ix = ox * stride - pad + kx;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += in.at3(c, iy, ix) * w[((co * C + c) * kh + ky) * kw + kx];
                        }
                out.at3(co, oy, ox) = acc;
            }
    return out;
}

} // namespace

TEST_CASE("conv2d identity kernel") {
    Graph g;
    Tensor x = rand_tensor(Shape{3, 5, 7}, 11);
    Tensor w(Shape{3, 3, 1, 1});
    for (int64_t c = 0; c < 3; ++c) w[(c * 3 + c)] = 1.0;
    Tensor b(Shape{3});
    Var out = conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 0);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.val()[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv2d all-zero weight gives bias planes") {
    Graph g;
    Tensor x = rand_tensor(Shape{2, 4, 4}, 5);
    Tensor w(Shape{3, 2, 3, 3});
    Tensor b(Shape{3});
    b[0] = 0.5;
    b[1] = -1.25;
    b[2] = 2.0;
    Var out = conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 16; ++i) CHECK(out.val()[c * 16 + i] == doctest::Approx(b[c]));
}

TEST_CASE("conv2d matches the naive loop oracle") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Tensor x = rand_tensor(Shape{3, 6, 5}, seed);
        Tensor w = rand_tensor(Shape{4, 3, 3, 3}, seed + 100);
        Tensor b = rand_tensor(Shape{4}, seed + 200);
        Graph g;
        Var out = conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, 1);
        Tensor ref = conv2d_naive(x, w, b, 1, 1);
        REQUIRE(out.val().shape() == ref.shape());
        for (int64_t i = 0; i < ref.numel(); ++i)
            CHECK(std::abs(out.val()[i] - ref[i]) < 1e-12);
    }
}

TEST_CASE("conv2d stride-2 matches the naive oracle") {
    Tensor x = rand_tensor(Shape{2, 8, 8}, 3);
    Tensor w = rand_tensor(Shape{3, 2, 3, 3}, 4);
    Tensor b = rand_tensor(Shape{3}, 5);
    Graph g;
    Var out = conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, 1);
    Tensor ref = conv2d_naive(x, w, b, 2, 1);
    REQUIRE(out.val().shape() == ref.shape());
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK(std::abs(out.val()[i] - ref[i]) < 1e-12);
}

TEST_CASE("gru_cell gate saturation and scalar oracle") {
    const int64_t hd = 2, xd = 3, H = 3, W = 3;
    auto make_params = [&](double zbias) {
        std::vector<Tensor> t;
        Rng rng(77);
        t.push_back(Tensor::randn(Shape{hd, hd + xd, 3, 3}, rng, 0.3)); // wz
        Tensor bz(Shape{hd});
        bz.fill(zbias);
        t.push_back(bz);
        t.push_back(Tensor::randn(Shape{hd, hd + xd, 3, 3}, rng, 0.3)); // wr
        t.push_back(Tensor(Shape{hd}));
        t.push_back(Tensor::randn(Shape{hd, hd + xd, 3, 3}, rng, 0.3)); // wh
        t.push_back(Tensor(Shape{hd}));
        return t;
    };
    Tensor h = rand_tensor(Shape{hd, H, W}, 8, 0.5);
    Tensor x = rand_tensor(Shape{xd, H, W}, 9, 0.5);

    SUBCASE("update gate forced to 0 keeps the hidden state") {
        auto t = make_params(-50.0);
        // zero the z conv weight so the bias dominates exactly
        t[0].fill(0.0);
        Graph g;
        GruParams<double> p{g.leaf(t[0]), g.leaf(t[1]), g.leaf(t[2]),
                            g.leaf(t[3]), g.leaf(t[4]), g.leaf(t[5])};
        Var out = gru_cell(g.leaf(h), g.leaf(x), p);
        for (int64_t i = 0; i < h.numel(); ++i)
            CHECK(out.val()[i] == doctest::Approx(h[i]).epsilon(1e-6));
    }

    SUBCASE("update gate forced to 1 hands over to the candidate") {
        auto t = make_params(50.0);
        t[0].fill(0.0);
        Graph g;
        GruParams<double> p{g.leaf(t[0]), g.leaf(t[1]), g.leaf(t[2]),
                            g.leaf(t[3]), g.leaf(t[4]), g.leaf(t[5])};
        Var out = gru_cell(g.leaf(h), g.leaf(x), p);
        // candidate recomputed by hand
        Graph g2;
        Var hx = concat_ch<double>({g2.leaf(h), g2.leaf(x)});
        Var r = sigmoid_op(conv2d(hx, g2.leaf(t[2]), g2.leaf(t[3]), 1, 1));
        Var rhx = concat_ch<double>({mul(r, g2.leaf(h)), g2.leaf(x)});
        Var hc = tanh_op(conv2d(rhx, g2.leaf(t[4]), g2.leaf(t[5]), 1, 1));
        for (int64_t i = 0; i < h.numel(); ++i)
            CHECK(out.val()[i] == doctest::Approx(hc.val()[i]).epsilon(1e-6));
    }

    SUBCASE("random case matches a scalar re-evaluation") {
        auto t = make_params(0.1);
        Graph g;
        GruParams<double> p{g.leaf(t[0]), g.leaf(t[1]), g.leaf(t[2]),
                            g.leaf(t[3]), g.leaf(t[4]), g.leaf(t[5])};
        Var out = gru_cell(g.leaf(h), g.leaf(x), p);
        // scalar recomputation via naive conv
        Tensor hx(Shape{hd + xd, H, W});
        std::copy(h.data(), h.data() + h.numel(), hx.data());
        std::copy(x.data(), x.data() + x.numel(), hx.data() + h.numel());
        Tensor z = conv2d_naive(hx, t[0], t[1], 1, 1);
        Tensor r = conv2d_naive(hx, t[2], t[3], 1, 1);
        for (int64_t i = 0; i < z.numel(); ++i) z[i] = 1.0 / (1.0 + std::exp(-z[i]));
        for (int64_t i = 0; i < r.numel(); ++i) r[i] = 1.0 / (1.0 + std::exp(-r[i]));
        Tensor rhx = hx;
        for (int64_t i = 0; i < h.numel(); ++i) rhx[i] = r[i] * h[i];
        Tensor hc = conv2d_naive(rhx, t[4], t[5], 1, 1);
        for (int64_t i = 0; i < hc.numel(); ++i) hc[i] = std::tanh(hc[i]);
        for (int64_t i = 0; i < h.numel(); ++i) {
            const double expect = (1.0 - z[i]) * h[i] + z[i] * hc[i];
            CHECK(std::abs(out.val()[i] - expect) < 1e-12);
        }
    }
}

TEST_CASE("bilinear_sample gather and midpoint averaging") {
    Tensor field = rand_tensor(Shape{2, 4, 5}, 21);
    SUBCASE("integer coords gather exactly") {
        Tensor coords(Shape{2, 2, 2});
        coords.vec() = {1, 3, 0, 2, 0, 1, 2, 3}; // x: (1,3),(0,2); y: (0,1),(2,3)
        Graph g;
        Var out = bilinear_sample(g.leaf(field), g.leaf(coords));
        CHECK(out.val().at3(0, 0, 0) == doctest::Approx(field.at3(0, 0, 1)));
        CHECK(out.val().at3(0, 0, 1) == doctest::Approx(field.at3(0, 1, 3)));
        CHECK(out.val().at3(1, 1, 0) == doctest::Approx(field.at3(1, 2, 0)));
        CHECK(out.val().at3(1, 1, 1) == doctest::Approx(field.at3(1, 3, 2)));
    }
    SUBCASE("pixel-center midpoint averages the 4 neighbours") {
        Tensor coords(Shape{2, 1, 1});
        coords[0] = 1.5;
        coords[1] = 2.5;
        Graph g;
        Var out = bilinear_sample(g.leaf(field), g.leaf(coords));
        const double avg = 0.25 * (field.at3(0, 2, 1) + field.at3(0, 2, 2) +
                                   field.at3(0, 3, 1) + field.at3(0, 3, 2));
        CHECK(out.val()[0] == doctest::Approx(avg));
    }
    SUBCASE("random coords match a scalar oracle") {
        Rng rng(5);
        Tensor coords(Shape{2, 3, 3});
        for (int64_t i = 0; i < 9; ++i) {
            coords[i] = rng.uniform(0.0, 4.0);
            coords[9 + i] = rng.uniform(0.0, 3.0);
        }
        Graph g;
        Var out = bilinear_sample(g.leaf(field), g.leaf(coords));
        for (int64_t i = 0; i < 9; ++i) {
            const double x = coords[i], y = coords[9 + i];
            const int64_t x0 = std::min(int64_t(x), int64_t(3));
            const int64_t y0 = std::min(int64_t(y), int64_t(2));
            const double fx = x - double(x0), fy = y - double(y0);
            for (int64_t c = 0; c < 2; ++c) {
                const double expect =
                    (1 - fy) * ((1 - fx) * field.at3(c, y0, x0) + fx * field.at3(c, y0, x0 + 1)) +
                    fy * ((1 - fx) * field.at3(c, y0 + 1, x0) + fx * field.at3(c, y0 + 1, x0 + 1));
                CHECK(std::abs(out.val()[c * 9 + i] - expect) < 1e-10);
            }
        }
    }
}

TEST_CASE("upsample_bilinear basics") {
    SUBCASE("factor 1 is the identity") {
        Tensor x = rand_tensor(Shape{3, 4, 4}, 2);
        Graph g;
        Var out = upsample_bilinear(g.leaf(x), 1);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.val()[i] == doctest::Approx(x[i]));
    }
    SUBCASE("constant input stays constant") {
        Tensor x(Shape{2, 3, 3});
        x.fill(1.75);
        Graph g;
        Var out = upsample_bilinear(g.leaf(x), 4);
        for (int64_t i = 0; i < out.val().numel(); ++i)
            CHECK(out.val()[i] == doctest::Approx(1.75));
    }
    SUBCASE("2x2 -> 4x4 interpolation table") {
        // align-corners-false: sample positions (o+0.5)/2-0.5 = {-0.25,0.25,0.75,1.25}
        Tensor x(Shape{1, 2, 2});
        x.vec() = {1.0, 2.0, 3.0, 4.0};
        Graph g;
        Var out = upsample_bilinear(g.leaf(x), 2);
        const double ex[16] = {
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0};
        for (int64_t i = 0; i < 16; ++i) CHECK(out.val()[i] == doctest::Approx(ex[i]));
    }
}

TEST_CASE("gradient checks for every differentiable op") {
    SUBCASE("conv2d") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(conv2d(v[0], v[1], v[2], 1, 1)));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 5, 5}, 1),
                                    rand_tensor(Shape{3, 2, 3, 3}, 2, 0.4),
                                    rand_tensor(Shape{3}, 3, 0.2)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("conv2d replicate padding") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(
                conv2d(v[0], v[1], v[2], 1, 1, kernels::PadMode::kReplicate)));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 5, 5}, 4),
                                    rand_tensor(Shape{3, 2, 3, 3}, 5, 0.4),
                                    rand_tensor(Shape{3}, 6, 0.2)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("gru_cell") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            GruParams<double> p{v[2], v[3], v[4], v[5], v[6], v[7]};
            return sum_all(gru_cell(v[0], v[1], p));
        };
        auto res = grad_check(
            fwd, {rand_tensor(Shape{2, 4, 4}, 1, 0.5), rand_tensor(Shape{3, 4, 4}, 2, 0.5),
                  rand_tensor(Shape{2, 5, 3, 3}, 3, 0.3), rand_tensor(Shape{2}, 4, 0.1),
                  rand_tensor(Shape{2, 5, 3, 3}, 5, 0.3), rand_tensor(Shape{2}, 6, 0.1),
                  rand_tensor(Shape{2, 5, 3, 3}, 7, 0.3), rand_tensor(Shape{2}, 8, 0.1)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("bilinear_sample field and coords") {
        Rng rng(9);
        Tensor coords(Shape{2, 3, 3});
        // keep query points away from integer-coordinate kinks
        for (int64_t i = 0; i < 9; ++i) {
            coords[i] = rng.uniform(0.3, 3.6);
            if (std::abs(coords[i] - std::round(coords[i])) < 0.1) coords[i] += 0.17;
            coords[9 + i] = rng.uniform(0.3, 2.6);
            if (std::abs(coords[9 + i] - std::round(coords[9 + i])) < 0.1)
                coords[9 + i] += 0.17;
        }
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(bilinear_sample(v[0], v[1])));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 4, 5}, 10), coords});
        CHECK(res.max_rel_err < 1e-5);
    }
    SUBCASE("upsample_bilinear") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(upsample_bilinear(v[0], 3)));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 3, 4}, 11)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("elementwise and reductions") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            Var a = mul(relu(v[0]), sigmoid_op(v[1]));
            Var b = add(tanh_op(v[0]), scale(v[1], 0.5));
            return mean_all(mul(add(a, b), abs_op(sub(v[0], v[1]))));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{3, 4, 4}, 12),
                                    rand_tensor(Shape{3, 4, 4}, 13)});
        CHECK(res.max_rel_err < 1e-5);
    }
    SUBCASE("matmul") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(matmul(v[0], v[1])));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{4, 3}, 14, 0.5),
                                    rand_tensor(Shape{3, 5}, 15, 0.5)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("matmul_at") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(matmul_at(v[0], v[1])));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{3, 4}, 16, 0.5),
                                    rand_tensor(Shape{3, 5}, 17, 0.5)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("concat and slice") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            Var c = concat_ch<double>({v[0], v[1]});
            return sum_all(tanh_op(slice_ch(c, 1, 4)));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 3, 3}, 18),
                                    rand_tensor(Shape{3, 3, 3}, 19)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("avg_pool2") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            return sum_all(tanh_op(avg_pool2(v[0])));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 4, 6}, 20)});
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("three-op composite chain") {
        auto fwd = [](Graph& g, std::vector<Var>& v) {
            Var x = conv2d(v[0], v[1], v[2], 1, 1);
            Var y = upsample_bilinear(relu(x), 2);
            Tensor coords(Shape{2, 3, 3});
            Rng rng(31);
            for (int64_t i = 0; i < 9; ++i) {
                coords[i] = rng.uniform(0.3, 6.4);
                coords[9 + i] = rng.uniform(0.3, 6.4);
            }
            Var s = bilinear_sample(y, g.leaf(coords, false));
            return mean_all(mul(s, s));
        };
        auto res = grad_check(fwd, {rand_tensor(Shape{2, 4, 4}, 21),
                                    rand_tensor(Shape{2, 2, 3, 3}, 22, 0.4),
                                    rand_tensor(Shape{2}, 23, 0.1)});
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("optimizer contract") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        ParamStore store;
        Rng rng(3);
        store.add("w", Tensor::randn(Shape{4, 4}, rng));
        Tensor before = store.at("w").value;
        AdamOptimizer opt({1e-2, 0.9, 0.999, 1e-8, 0.0});
        opt.step(store);
        for (int64_t i = 0; i < before.numel(); ++i)
            CHECK(store.at("w").value[i] == before[i]);
    }
    SUBCASE("frozen parameter ignores its gradient") {
        ParamStore store;
        Rng rng(4);
        store.add("w", Tensor::randn(Shape{4}, rng), false);
        store.at("w").grad.fill(1.0);
        Tensor before = store.at("w").value;
        AdamOptimizer opt;
        opt.step(store);
        for (int64_t i = 0; i < before.numel(); ++i)
            CHECK(store.at("w").value[i] == before[i]);
    }
    SUBCASE("converges on a scalar quadratic") {
        // loss = 0.5*(w - 3)^2, minimizer 3
        ParamStore store;
        store.add("w", Tensor(Shape{1}));
        AdamOptimizer opt({0.12, 0.9, 0.999, 1e-8, 0.0});
        for (int step = 0; step < 200; ++step) {
            store.at("w").grad[0] = store.at("w").value[0] - 3.0;
            opt.step(store);
        }
        CHECK(std::abs(store.at("w").value[0] - 3.0) < 1e-4);
    }
}

TEST_CASE("checkpoint byte-exact round trip") {
    ParamStore a;
    Rng rng(9);
    a.add("enc.w", Tensor::randn(Shape{3, 2, 3, 3}, rng));
    a.add("enc.b", Tensor::randn(Shape{3}, rng));
    a.add("head.w", Tensor::randn(Shape{2, 3, 1, 1}, rng));
    const std::string path = "ckpt_roundtrip.evck";
    save_checkpoint(a, path);

    ParamStore b;
    load_checkpoint(b, path);
    REQUIRE(b.size() == a.size());
    // values go through f32, so compare after one round trip
    save_checkpoint(b, path + "2");
    std::ifstream f1(path, std::ios::binary), f2(path + "2", std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());
}

TEST_CASE("float forward matches double within 1e-4 relative") {
    Rng rng(12);
    Tensor x = Tensor::randn(Shape{2, 8, 8}, rng);
    Tensor w = Tensor::randn(Shape{4, 2, 3, 3}, rng, 0.3);
    Tensor b = Tensor::randn(Shape{4}, rng, 0.1);

    GraphT<double> gd;
    gd.set_recording(false);
    auto outd = tanh_op(conv2d(gd.leaf(x), gd.leaf(w), gd.leaf(b), 1, 1));

    GraphT<float> gf;
    gf.set_recording(false);
    auto outf = tanh_op(conv2d(gf.leaf(x.cast<float>()), gf.leaf(w.cast<float>()),
                               gf.leaf(b.cast<float>()), 1, 1));
    for (int64_t i = 0; i < outd.val().numel(); ++i) {
        const double dv = outd.val()[i];
        const double fv = double(outf.val()[i]);
        CHECK(std::abs(dv - fv) / std::max(1.0, std::abs(dv)) < 1e-4);
    }
}
