#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mlsp/adam.hpp"
#include "mlsp/grad_check.hpp"
#include "mlsp/graph.hpp"
#include "mlsp/layer_spec.hpp"
#include "mlsp/losses.hpp"

using namespace mlsp;
using namespace mlsp::nn;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(s));
    Rng rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.next_range(lo, hi));
    return t;
}

// input -> front (trainable) -> layer under test -> probe. The front layer
// forces the tested layer to produce correct input gradients, not just
// parameter gradients.
double check_vector_layer(int64_t in_w, int64_t front_units, const LayerSpec& mid, uint64_t seed,
                          int batch = 3) {
    ModelGraph<double> g;
    GraphBuilder<double> b(g);
    int in = b.input("in", {in_w});
    int front = b.add("front", LayerSpec::dense_spec(front_units), {in});
    b.add("mid", mid, {front});
    g.finalize(seed);
    auto x = random_tensor<double>({batch, in_w}, seed ^ 0x55);
    return grad_check(g, x, 1e-5, seed);
}

double check_image_layer(Shape feat, int64_t front_ch, const LayerSpec& mid, uint64_t seed,
                         int batch = 2) {
    ModelGraph<double> g;
    GraphBuilder<double> b(g);
    int in = b.input("in", feat);
    int front = b.add("front", LayerSpec::conv2d_spec(front_ch, 1), {in});
    b.add("mid", mid, {front});
    g.finalize(seed);
    auto x = random_tensor<double>({batch, feat[0], feat[1], feat[2]}, seed ^ 0x55);
    return grad_check(g, x, 1e-5, seed);
}

}  // namespace

TEST_CASE("dense identity passes input through") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {3});
    b.add("fc", LayerSpec::dense_spec(3), {in});
    g.finalize(1);
    // weights = identity, bias = 0
    auto params = g.parameters();
    Param<float>& w = *params[0].param;
    w.value.zero();
    for (int i = 0; i < 3; ++i) w.value[i * 3 + i] = 1.0f;
    params[1].param->value.zero();

    Tensor<float> x({2, 3}, {1.f, -2.f, 3.f, 0.5f, 0.f, -1.f});
    Tensor<float> y = g.forward(x, Mode::Eval);
    for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(y[i] == x[i]);
}

TEST_CASE("relu clamps negatives") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {3});
    b.add("relu", LayerSpec::relu_spec(), {in});
    g.finalize(1);
    Tensor<float> x({1, 3}, {-1.f, 0.f, 2.f});
    Tensor<float> y = g.forward(x, Mode::Eval);
    REQUIRE(y[0] == 0.f);
    REQUIRE(y[1] == 0.f);
    REQUIRE(y[2] == 2.f);
}

TEST_CASE("1x1 conv with all-ones kernel sums constant channels") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {2, 2, 3});
    b.add("conv", LayerSpec::conv2d_spec(1, 1), {in});
    g.finalize(1);
    auto params = g.parameters();
    params[0].param->value.fill(1.0f);       // kernel
    params[1].param->value.fill(0.25f);      // bias
    Tensor<float> x({1, 2, 2, 3});
    for (int p = 0; p < 4; ++p)
        for (int c = 0; c < 3; ++c) x[p * 3 + c] = static_cast<float>(c + 1);
    Tensor<float> y = g.forward(x, Mode::Eval);
    for (int64_t i = 0; i < y.numel(); ++i) REQUIRE(y[i] == Catch::Approx(6.0 + 0.25));
}

TEST_CASE("dense gradient matches hand-differentiated MSE") {
    // y = w*x, x=1, w=1, target 0: dL/dw = 2*x*(w*x - 0) = 2
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {1});
    b.add("fc", LayerSpec::dense_spec(1), {in});
    g.finalize(1);
    auto params = g.parameters();
    params[0].param->value[0] = 1.0f;
    params[1].param->value[0] = 0.0f;

    Tensor<float> x({1, 1}, {1.0f});
    Tensor<float> target({1, 1}, {0.0f});
    Tensor<float> y = g.forward(x, Mode::Train);
    auto loss = mse_loss(y, target);
    g.zero_grads();
    g.backward(loss.grad);
    REQUIRE(params[0].param->grad[0] == Catch::Approx(2.0));
}

TEST_CASE("frozen parameters receive no gradient and are not trainable") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {2});
    int frozen = b.add("norm", LayerSpec::dense_spec(2, /*trainable=*/false), {in});
    b.add("fc", LayerSpec::dense_spec(1), {frozen});
    g.finalize(3);

    auto trainables = g.trainable_parameters();
    for (auto& np : trainables) REQUIRE(np.name.find("norm/") == std::string::npos);
    REQUIRE(trainables.size() == 2);

    auto x = random_tensor<float>({4, 2}, 9);
    Tensor<float> target({4, 1});
    auto y = g.forward(x, Mode::Train);
    auto loss = mse_loss(y, target);
    g.zero_grads();
    g.backward(loss.grad);
    for (auto& np : g.parameters())
        if (np.name.rfind("norm/", 0) == 0)
            for (int64_t i = 0; i < np.param->grad.numel(); ++i)
                REQUIRE(np.param->grad[i] == 0.0f);
}

TEST_CASE("finite differences validate every layer kind") {
    const double tol = 1e-4;
    for (uint64_t seed : {11ull, 12ull, 13ull}) {
        REQUIRE(check_vector_layer(5, 4, LayerSpec::dense_spec(3), seed) < tol);
        REQUIRE(check_vector_layer(6, 4, LayerSpec::batch_norm_spec(), seed) < tol);
        REQUIRE(check_vector_layer(5, 4, LayerSpec::relu_spec(), seed) < tol);
        REQUIRE(check_vector_layer(4, 3, LayerSpec::softmax_spec(), seed) < tol);
        REQUIRE(check_vector_layer(6, 6, LayerSpec::slice_spec(2, 3), seed) < tol);
        REQUIRE(check_vector_layer(5, 4, LayerSpec::dropout_spec(0.5), seed) < tol);
        REQUIRE(check_image_layer({3, 4, 2}, 3, LayerSpec::conv2d_spec(2, 1), seed) < tol);
        REQUIRE(check_image_layer({4, 3, 2}, 3, LayerSpec::conv2d_spec(2, 3), seed) < tol);
        REQUIRE(check_image_layer({3, 4, 2}, 3, LayerSpec::batch_norm_spec(), seed) < tol);
        REQUIRE(check_image_layer({3, 4, 2}, 3, LayerSpec::global_avg_pool_spec(), seed) < tol);
        REQUIRE(check_image_layer({4, 4, 2}, 3, LayerSpec::spatial_avg_pool_spec(), seed) < tol);
    }
}

TEST_CASE("finite differences validate concat and weighted_sum") {
    const double tol = 1e-4;
    for (uint64_t seed : {21ull, 22ull}) {
        {
            ModelGraph<double> g;
            GraphBuilder<double> b(g);
            int in = b.input("in", {2, 2, 3});
            int a = b.add("a", LayerSpec::conv2d_spec(2, 1), {in});
            int c = b.add("b", LayerSpec::conv2d_spec(3, 1), {in});
            b.add("cat", LayerSpec::concat_spec(2), {a, c});
            g.finalize(seed);
            auto x = random_tensor<double>({2, 2, 2, 3}, seed);
            REQUIRE(grad_check(g, x, 1e-5, seed) < tol);
        }
        {
            ModelGraph<double> g;
            GraphBuilder<double> b(g);
            int in = b.input("in", {5});
            int h1 = b.add("h1", LayerSpec::dense_spec(1), {in});
            int h2 = b.add("h2", LayerSpec::dense_spec(1), {in});
            int h3 = b.add("h3", LayerSpec::dense_spec(1), {in});
            b.add("sum", LayerSpec::weighted_sum_spec(3), {h1, h2, h3});
            g.finalize(seed);
            auto x = random_tensor<double>({3, 5}, seed);
            REQUIRE(grad_check(g, x, 1e-5, seed) < tol);
        }
    }
}

TEST_CASE("grad_check on a linear model is essentially exact") {
    ModelGraph<double> g;
    GraphBuilder<double> b(g);
    int in = b.input("in", {4});
    b.add("fc", LayerSpec::dense_spec(2), {in});
    g.finalize(5);
    auto x = random_tensor<double>({3, 4}, 6);
    REQUIRE(grad_check(g, x) < 1e-8);
}

TEST_CASE("adam first step moves parameter by about lr") {
    Param<float> p{"w", Tensor<float>({1}), Tensor<float>({1}), true};
    p.value[0] = 1.0f;
    p.grad[0] = 1.0f;
    std::vector<NamedParam<float>> params{{"w", &p}};
    AdamState<float> st;
    adam_step(params, st, 1e-4);
    // mhat = 1, vhat = 1 -> step = lr / (1 + eps)
    REQUIRE(st.t == 1);
    REQUIRE(static_cast<double>(1.0f - p.value[0]) == Catch::Approx(1e-4).epsilon(1e-3));

    SECTION("second identical gradient moves by about the same amount") {
        const float after_one = p.value[0];
        p.grad[0] = 1.0f;
        adam_step(params, st, 1e-4);
        const double step2 = static_cast<double>(after_one - p.value[0]);
        REQUIRE(step2 == Catch::Approx(1e-4).epsilon(1e-3));
    }
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
    Param<float> p{"w", Tensor<float>({3}), Tensor<float>({3}), true};
    p.value = Tensor<float>({3}, {0.5f, -1.f, 2.f});
    std::vector<NamedParam<float>> params{{"w", &p}};
    AdamState<float> st;
    adam_step(params, st, 1e-4);
    REQUIRE(p.value[0] == 0.5f);
    REQUIRE(p.value[1] == -1.f);
    REQUIRE(p.value[2] == 2.f);
}

TEST_CASE("adam rejects non-finite gradients by name") {
    Param<float> p{"w", Tensor<float>({1}), Tensor<float>({1}), true};
    p.grad[0] = std::numeric_limits<float>::quiet_NaN();
    std::vector<NamedParam<float>> params{{"layer/weight", &p}};
    AdamState<float> st;
    REQUIRE_THROWS_WITH(adam_step(params, st, 1e-4),
                        Catch::Matchers::ContainsSubstring("layer/weight"));
}

TEST_CASE("mse basics") {
    Tensor<float> a({2, 1}, {1.f, 3.f});
    Tensor<float> t({2, 1}, {1.f, 1.f});
    REQUIRE(mse_loss(a, a).value == 0.0);
    auto l = mse_loss(a, t);
    REQUIRE(l.value == Catch::Approx(2.0));

    SECTION("gradient matches finite differences") {
        Tensor<double> x({3, 1}, {0.3, -1.2, 2.0});
        Tensor<double> y({3, 1}, {1.0, 0.0, -0.5});
        auto base = mse_loss(x, y);
        const double eps = 1e-6;
        for (int64_t i = 0; i < x.numel(); ++i) {
            Tensor<double> xp = x, xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            const double fd = (mse_loss(xp, y).value - mse_loss(xm, y).value) / (2 * eps);
            REQUIRE(std::abs(fd - base.grad[i]) < 1e-6);
        }
    }
    SECTION("empty batch rejected") {
        REQUIRE_THROWS_AS(mse_loss(Tensor<float>{}, Tensor<float>{}), DataError);
    }
}

TEST_CASE("cross entropy basics") {
    Tensor<double> z({1, 2}, {0.0, 0.0});
    REQUIRE(cross_entropy_loss(z, 0).value == Catch::Approx(std::log(2.0)));
    REQUIRE(cross_entropy_loss(z, 1).value == Catch::Approx(std::log(2.0)));

    Tensor<double> z2({1, 2}, {10.0, -10.0});
    REQUIRE(cross_entropy_loss(z2, 0).value == Catch::Approx(2.061e-9).epsilon(1e-3));

    SECTION("invalid class rejected") {
        REQUIRE_THROWS_AS(cross_entropy_loss(z, 2), DataError);
        REQUIRE_THROWS_AS(cross_entropy_loss(z, -1), DataError);
    }
    SECTION("gradient equals softmax minus one-hot and matches finite differences") {
        Tensor<double> z3({2, 2}, {0.4, -0.3, 1.5, 0.2});
        std::vector<int> cls{1, 0};
        auto l = cross_entropy_loss(z3, cls);
        const double eps = 1e-6;
        for (int64_t i = 0; i < z3.numel(); ++i) {
            Tensor<double> zp = z3, zm = z3;
            zp[i] += eps;
            zm[i] -= eps;
            const double fd =
                (cross_entropy_loss(zp, cls).value - cross_entropy_loss(zm, cls).value) / (2 * eps);
            REQUIRE(std::abs(fd - l.grad[i]) < 1e-8);
        }
    }
}

TEST_CASE("batch norm in inference mode is an affine map, identity at unit stats") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {4});
    b.add("bn", LayerSpec::batch_norm_spec(), {in});
    g.finalize(1);
    // gamma=1, beta=0, running mean 0, running var 1 are the initial values.
    auto x = random_tensor<float>({3, 4}, 44, -2.0, 2.0);
    Tensor<float> once = g.forward(x, Mode::Eval);
    Tensor<float> twice = g.forward(once, Mode::Eval);
    // eps = 1e-3 shrinks values by 1/sqrt(1+eps) per pass
    for (int64_t i = 0; i < x.numel(); ++i)
        REQUIRE(std::abs(twice[i] - x[i]) <= 2e-3 * std::abs(x[i]) + 1e-6);
}

TEST_CASE("training forward is deterministic; inference ignores the seed") {
    auto build = [](uint64_t init_seed, uint64_t run_seed) {
        auto g = std::make_unique<ModelGraph<float>>();
        GraphBuilder<float> b(*g);
        int in = b.input("in", {6});
        int fc = b.add("fc", LayerSpec::dense_spec(5), {in});
        int dr = b.add("do", LayerSpec::dropout_spec(0.5), {fc});
        b.add("out", LayerSpec::dense_spec(1), {dr});
        g->finalize(init_seed);
        g->set_run_seed(run_seed);
        return g;
    };
    auto x = random_tensor<float>({4, 6}, 3);
    auto g1 = build(7, 100), g2 = build(7, 100), g3 = build(7, 999);
    Tensor<float> a = g1->forward(x, Mode::Train);
    Tensor<float> bb = g2->forward(x, Mode::Train);
    Tensor<float> c = g3->forward(x, Mode::Train);
    REQUIRE(a.data == bb.data);   // same seed, bit-identical
    bool differs = false;
    for (int64_t i = 0; i < a.numel(); ++i) differs = differs || a[i] != c[i];
    REQUIRE(differs);             // dropout stream depends on the seed

    Tensor<float> e1 = g1->forward(x, Mode::Eval);
    Tensor<float> e3 = g3->forward(x, Mode::Eval);
    REQUIRE(e1.data == e3.data);  // inference never consults the seed
}

TEST_CASE("backward without cached forward is an explicit error") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {2});
    b.add("fc", LayerSpec::dense_spec(1), {in});
    g.finalize(1);
    Tensor<float> grad({1, 1}, {1.f});
    REQUIRE_THROWS_WITH(g.backward(grad), Catch::Matchers::ContainsSubstring("backward"));

    g.forward(random_tensor<float>({1, 2}, 1), Mode::Eval);
    REQUIRE_THROWS_AS(g.backward(grad), DataError);
}

TEST_CASE("shape mismatches are rejected with the layer name") {
    ModelGraph<float> g;
    GraphBuilder<float> b(g);
    int in = b.input("in", {3});
    b.add("first_fc", LayerSpec::dense_spec(2), {in});
    g.finalize(1);
    REQUIRE_THROWS_WITH(g.forward(random_tensor<float>({2, 5}, 1), Mode::Eval),
                        Catch::Matchers::ContainsSubstring("expected"));

    ModelGraph<float> g2;
    GraphBuilder<float> b2(g2);
    int in2 = b2.input("in", {5});
    b2.add("first_fc", LayerSpec::dense_spec(4), {in2});
    g2.finalize(1);
    // feed a correct outer batch but wrong feature width through a raw tensor
    bool threw = false;
    try {
        Tensor<float> bad({2, 5});
        bad.shape[1] = 5;
        g2.forward(bad, Mode::Eval);  // fine
        Tensor<float> bad2({2, 6});
        g2.forward(bad2, Mode::Eval);
    } catch (const DataError& e) {
        threw = true;
        REQUIRE(std::string(e.what()).find("expected") != std::string::npos);
    }
    REQUIRE(threw);
}

TEST_CASE("invalid layer parameters are rejected") {
    std::vector<Shape> img{{4, 4, 3}};
    std::vector<Shape> vec{{8}};
    auto conv5 = LayerSpec::conv2d_spec(4, 5);
    REQUIRE_THROWS_AS(make_layer<float>(conv5, img), DataError);
    auto drop1 = LayerSpec::dropout_spec(1.0);
    REQUIRE_THROWS_AS(make_layer<float>(drop1, vec), DataError);
    auto dense0 = LayerSpec::dense_spec(0);
    REQUIRE_THROWS_AS(make_layer<float>(dense0, vec), DataError);
}
