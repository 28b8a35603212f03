// Core engine checks: dense algebra against naive loops, reverse-mode
// gradients against central finite differences, forward-mode directional
// derivatives, and the optimizer/RNG contracts everything downstream trusts.
#include <catch2/catch_amalgamated.hpp>

#include "nlf/nlf.hpp"

using namespace nlf;

namespace {

// Central finite difference of a scalar-valued function of tensor inputs.
double fd_partial(const std::function<double(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> xs, size_t which, size_t idx, double h = 1e-6) {
    xs[which][idx] += h;
    double fp = f(xs);
    xs[which][idx] -= 2.0 * h;
    double fm = f(xs);
    return (fp - fm) / (2.0 * h);
}

void check_gradients(const std::function<int(Tape&, const std::vector<int>&)>& build,
                     const std::vector<Tensor>& xs, double tol = 1e-6) {
    auto value = [&](const std::vector<Tensor>& vs) {
        Tape t;
        std::vector<int> ids;
        for (const Tensor& v : vs) ids.push_back(t.input(v));
        return t.value(build(t, ids)).value();
    };
    Tape t;
    std::vector<int> ids;
    for (const Tensor& v : xs) ids.push_back(t.input(v, true));
    int loss = build(t, ids);
    t.backward(loss);
    for (size_t w = 0; w < xs.size(); ++w) {
        Tensor g = t.grad(ids[w]);
        for (size_t i = 0; i < xs[w].size(); ++i) {
            double num = fd_partial(value, xs, w, i);
            double scale = std::max({std::abs(num), std::abs(g[i]), 1e-4});
            INFO("input " << w << " element " << i << ": analytic " << g[i] << " numeric " << num);
            CHECK(std::abs(g[i] - num) / scale < tol);
        }
    }
}

}  // namespace

TEST_CASE("matrix product matches a naive triple loop") {
    Rng rng(7);
    Tensor a = Tensor::random_normal({5, 8}, rng);
    Tensor b = Tensor::random_normal({8, 3}, rng);
    Tape t;
    Tensor c = t.value(t.matmul(t.input(a), t.input(b)));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 8; ++k) acc += a.at(i, k) * b.at(k, j);
            REQUIRE(c.at(i, j) == Catch::Approx(acc).margin(1e-12));
        }
}

TEST_CASE("gradients of a dense affine chain with every activation") {
    Rng rng(11);
    Tensor x = Tensor::random_normal({4, 6}, rng);
    Tensor w = Tensor::random_normal({6, 5}, rng, 0.0, 0.5);
    Tensor b = Tensor::random_normal({1, 5}, rng, 0.0, 0.1);
    check_gradients(
        [](Tape& t, const std::vector<int>& in) {
            int h = t.add(t.matmul(in[0], in[1]), t.broadcast_row(in[2], 4));
            int s = t.add(t.softplus(h, 100.0), t.leaky_relu(h, 0.01));
            int m = t.add(t.sigmoid(s), t.mul(t.sin(h), t.cos(h)));
            return t.mean_all(t.square(m));
        },
        {x, w, b});
}

TEST_CASE("gradients through softmax rows, gather, slice and concat") {
    Rng rng(13);
    Tensor logits = Tensor::random_normal({6, 4}, rng);
    Tensor v = Tensor::random_normal({6, 3}, rng);
    check_gradients(
        [](Tape& t, const std::vector<int>& in) {
            int p = t.softmax_rows(in[0]);
            int picked = t.gather_rows(in[1], {5, 0, 3});
            int psel = t.gather_rows(t.slice_cols(p, 1, 4), {5, 0, 3});
            int joined = t.concat_cols(psel, picked);
            return t.sum_all(t.square(joined));
        },
        {logits, v});
}

TEST_CASE("gradients through sqrt, abs, clamp, acos and reciprocal") {
    Tensor x = Tensor::from_values({2, 3}, {0.4, -0.7, 0.9, 0.2, -0.3, 0.6});
    check_gradients(
        [](Tape& t, const std::vector<int>& in) {
            int safe = t.clamp(in[0], -0.95, 0.95);
            int a = t.acos_(safe);
            int r = t.recip(t.add_scalar(t.abs_(in[0]), 1.0));
            int s = t.sqrt_(t.add_scalar(t.square(in[0]), 0.5));
            return t.mean_all(t.add(a, t.add(r, s)));
        },
        {x}, 1e-5);
}

TEST_CASE("gradients of a strided 3D convolution stack") {
    Rng rng(17);
    Tensor x = Tensor::random_normal({1, 8, 8, 8}, rng);
    Tensor k = Tensor::random_normal({2, 1, 3, 3, 3}, rng, 0.0, 0.3);
    Tensor bias = Tensor::random_normal({1, 2}, rng, 0.0, 0.1);
    Tensor fc = Tensor::random_normal({2 * 4 * 4 * 4, 1}, rng, 0.0, 0.2);
    check_gradients(
        [](Tape& t, const std::vector<int>& in) {
            int h = t.leaky_relu(t.channel_bias(t.conv3d(in[0], in[1], 2, 1), in[2]), 0.01);
            int flat = t.reshape(h, {1, 2 * 4 * 4 * 4});
            return t.sum_all(t.matmul(flat, in[3]));
        },
        {x, k, bias, fc}, 1e-5);
}

TEST_CASE("gradients through row and column reductions and scaling") {
    Rng rng(19);
    Tensor x = Tensor::random_normal({5, 4}, rng);
    Tensor s = Tensor::random_normal({5, 1}, rng);
    check_gradients(
        [](Tape& t, const std::vector<int>& in) {
            int rs = t.row_sum(in[0]);
            int cs = t.col_sum(t.scale_rows(in[0], in[1]));
            return t.add(t.mean_all(t.square(rs)), t.mean_all(t.square(cs)));
        },
        {x, s});
}

TEST_CASE("gradients of the neighbourhood average operator") {
    // a path graph: interior vertices average their two neighbours
    NeighborLists nb;
    nb.offsets = {0, 1, 3, 5, 6};
    nb.indices = {1, 0, 2, 1, 3, 2};
    Rng rng(23);
    Tensor x = Tensor::random_normal({4, 3}, rng);
    check_gradients(
        [&](Tape& t, const std::vector<int>& in) {
            return t.sum_all(t.square(t.sub(in[0], t.neighbor_mean(in[0], nb))));
        },
        {x});
}

TEST_CASE("forward-mode directional derivative matches finite differences") {
    ShapeDecoderConfig cfg;
    cfg.latent_dim = 8;
    cfg.hidden = 16;
    cfg.hidden_layers = 3;
    cfg.pe_order = 4;
    ParamSet ps;
    Rng rng(29);
    init_shape_decoder(ps, cfg, rng);
    Tensor z = Tensor::random_normal({1, 8}, rng, 0.0, 0.1);
    Tensor pts = Tensor::random_normal({6, 2}, rng, 0.0, 0.2);
    Tensor dir = Tensor::zeros(6, 2);
    for (int i = 0; i < 6; ++i) dir.at(i, 0) = 1.0;

    auto decode = [&](const Tensor& q) {
        Tape t;
        TapedShapeDecode d = taped_decode_sdf(t, cfg, push_mlp_params(t, ps, kShapeDecoderName, cfg.mlp()),
                                              t.input(z), t.input(q));
        return t.value(d.trace.out);
    };
    Tape t;
    TapedMlp mlp = push_mlp_params(t, ps, kShapeDecoderName, cfg.mlp());
    TapedShapeDecode d = taped_decode_sdf(t, cfg, mlp, t.input(z), t.input(pts), {t.input(dir)});
    Tensor jvp = t.value(taped_decode_jvp(t, cfg, mlp, d, 0));

    double h = 1e-6;
    Tensor plus = pts, minus = pts;
    for (int i = 0; i < 6; ++i) {
        plus.at(i, 0) += h;
        minus.at(i, 0) -= h;
    }
    Tensor fp = decode(plus), fm = decode(minus);
    for (int i = 0; i < 6; ++i) {
        double num = (fp.at(i, 0) - fm.at(i, 0)) / (2.0 * h);
        REQUIRE(jvp.at(i, 0) == Catch::Approx(num).margin(1e-5));
    }
}

TEST_CASE("optimizer drives a quadratic bowl to its minimum") {
    ParamSet ps;
    ps.add("x", Tensor::from_values({1, 2}, {3.0, -2.0}));
    for (int it = 0; it < 400; ++it) {
        Tape t;
        int x = t.param("x", ps.value("x"));
        int loss = t.sum_all(t.square(t.add_scalar(x, -1.0)));
        ps.adam_step(t.named_gradients(loss), 0.05);
    }
    REQUIRE(ps.value("x")[0] == Catch::Approx(1.0).margin(1e-3));
    REQUIRE(ps.value("x")[1] == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("optimizer updates only the parameters present in the gradient map") {
    ParamSet ps;
    ps.add("a", Tensor::scalar(1.0));
    ps.add("b", Tensor::scalar(1.0));
    Tape t;
    int a = t.param("a", ps.value("a"));
    ps.adam_step(t.named_gradients(t.square(a)), 0.1);
    REQUIRE(ps.value("a").value() != 1.0);
    REQUIRE(ps.value("b").value() == 1.0);
}

TEST_CASE("random streams are deterministic and forked streams are independent") {
    Rng a(99), b(99);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng base(5);
    Rng f1 = base.fork(1), f2 = base.fork(2);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += f1.next_u64() == f2.next_u64();
    REQUIRE(same == 0);

    // normal draws have roughly the requested moments
    Rng n(123);
    double sum = 0.0, sq = 0.0;
    const int m = 20000;
    for (int i = 0; i < m; ++i) {
        double v = n.normal(2.0, 3.0);
        sum += v;
        sq += v * v;
    }
    double mean = sum / m, var = sq / m - mean * mean;
    REQUIRE(mean == Catch::Approx(2.0).margin(0.1));
    REQUIRE(var == Catch::Approx(9.0).margin(0.5));
}

TEST_CASE("non-finite inputs are rejected at the validating boundary") {
    REQUIRE_THROWS_AS(Tensor::from_values({1, 1}, {std::nan("")}), ValidationError);
    REQUIRE_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), ValidationError);
}
