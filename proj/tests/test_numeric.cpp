#include <doctest.h>

#include <cmath>

#include "mdrl/autodiff.hpp"
#include "mdrl/losses.hpp"
#include "mdrl/ops.hpp"
#include "mdrl/rng.hpp"

using namespace mdrl;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = gauss(rng);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and projector") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    Tensor prod = matmul(eye, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(prod[i] == m[i]);

    Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
    Tensor abcd = Tensor::from_data({2, 2}, {1.5, -2.0, 7.0, 0.25});
    Tensor sel = matmul(proj, abcd);
    CHECK(sel.at(0, 0) == 1.5);
    CHECK(sel.at(0, 1) == -2.0);
    CHECK(sel.at(1, 0) == 0.0);
    CHECK(sel.at(1, 1) == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({3, 4});
    Tensor b({5, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3x4]"), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[5x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches central differences") {
    Rng rng(42);
    const Tensor a = random_tensor(rng, {3, 4});
    const Tensor b = random_tensor(rng, {4, 2});
    const Tensor ones({3, 2}, 1.0);

    auto fa = [&](const Var& x) { return cdot(ones, matmul(x, Var::constant(b))); };
    auto fb = [&](const Var& x) { return cdot(ones, matmul(Var::constant(a), x)); };
    CHECK(grad_check(fa, a, 1e-6, 1e-6).passed());
    CHECK(grad_check(fb, b, 1e-6, 1e-6).passed());
}

TEST_CASE("transposed matmul variants agree with explicit transposes") {
    Rng rng(7);
    const Tensor a = random_tensor(rng, {5, 3});
    const Tensor b = random_tensor(rng, {5, 4});
    Tensor tn = matmul_tn(a, b);  // a' * b -> [3x4]
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 5; ++k) acc += a.at(k, i) * b.at(k, j);
            CHECK(tn.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    auto f_tn_a = [&](const Var& x) {
        return cdot(Tensor({3, 4}, 1.0), matmul_tn(x, Var::constant(b)));
    };
    auto f_nt_b = [&](const Var& x) {
        return cdot(Tensor({3, 5}, 1.0), matmul_nt(Var::constant(tn), x));
    };
    CHECK(grad_check(f_tn_a, a, 1e-6, 1e-6).passed());
    const Tensor d = random_tensor(rng, {5, 4});
    CHECK(grad_check(f_nt_b, d, 1e-6, 1e-6).passed());
}

TEST_CASE("softmax basics") {
    Tensor flat = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor s = softmax(flat, 1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor big = Tensor::from_data({1, 2}, {1000.0, 0.0});
    Tensor sb = softmax(big, 1);
    CHECK(sb[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sb[1] < 1e-300);
    CHECK(sb.all_finite());
}

TEST_CASE("softmax gradient on a random 4-vector") {
    Rng rng(3);
    const Tensor x = random_tensor(rng, {1, 4});
    const Tensor proj = random_tensor(rng, {1, 4});
    auto f = [&](const Var& v) { return cdot(proj, softmax(v, 1)); };
    CHECK(grad_check(f, x, 1e-6, 1e-6).passed());
}

TEST_CASE("softmax output is a probability vector for random finite inputs") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor(rng, {4, 6}, 3.0);
        for (std::size_t axis : {std::size_t{0}, std::size_t{1}}) {
            Tensor s = softmax(x, axis);
            REQUIRE(s.all_finite());
            const std::size_t slices = axis == 1 ? s.rows() : s.cols();
            const std::size_t len = axis == 1 ? s.cols() : s.rows();
            for (std::size_t k = 0; k < slices; ++k) {
                double sum = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double v = axis == 1 ? s.at(k, j) : s.at(j, k);
                    CHECK(v > 0.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("l2_normalize basics and idempotence") {
    Tensor v = Tensor::from_data({1, 2}, {3, 4});
    Tensor n = l2_normalize(v, 1);
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-12));

    Tensor zero = Tensor::from_data({1, 2}, {0, 0});
    Tensor nz = l2_normalize(zero, 1);
    CHECK(nz[0] == 0.0);
    CHECK(nz[1] == 0.0);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor(rng, {3, 5});
        Tensor once = l2_normalize(x, 0);
        Tensor twice = l2_normalize(once, 0);
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(std::abs(once[i] - twice[i]) < 1e-12);
        }
    }
}

TEST_CASE("l2_normalize gradient on a random 5-vector") {
    Rng rng(11);
    const Tensor x = random_tensor(rng, {1, 5});
    const Tensor proj = random_tensor(rng, {1, 5});
    auto f = [&](const Var& v) { return cdot(proj, l2_normalize(v, 1)); };
    CHECK(grad_check(f, x, 1e-6, 1e-5).passed());
}

TEST_CASE("grad_check on sum of squares is near-exact") {
    const Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
    auto f = [](const Var& v) { return matmul_nt(v, v); };
    Var vx = Var::leaf(x);
    Var y = f(vx);
    CHECK(y.value().item() == doctest::Approx(14.0).epsilon(1e-12));
    backward(y);
    CHECK(vx.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(vx.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(vx.grad()[2] == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(grad_check(f, x, 1e-6, 1e-8).passed());
}

TEST_CASE("grad_check on softmax cross-entropy") {
    Rng rng(5);
    const Tensor logits = random_tensor(rng, {3, 4});
    const std::vector<std::uint8_t> labels = {0, 2, 1, 2};
    auto f = [&](const Var& v) { return cross_entropy_loss(v, labels, 255); };
    CHECK(grad_check(f, logits, 1e-6, 1e-6).passed());
}

TEST_CASE("grad_check reports non-finite probes") {
    // log hits NaN when the probe crosses zero.
    auto f = [](const Var& v) {
        const double val = std::log(v.value()[0]);
        return custom_op(Tensor::scalar(val), {v}, "log", [](detail::Node& self) {
            self.parents[0]->grad[0] += self.grad[0] / self.parents[0]->value[0];
        });
    };
    const Tensor x = Tensor::from_data({1}, {5e-7});
    CHECK_THROWS_AS(grad_check(f, x, 1e-6, 1e-4), NumericError);
}

TEST_CASE("require_finite names the offending index") {
    Tensor t({2, 2});
    t[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(require_finite(t, "probe"), doctest::Contains("index 3"), NumericError);
}

TEST_CASE("every trainable-path operation passes grad_check over 100 seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Tensor x = random_tensor(rng, {3, 8});
        const Tensor proj = random_tensor(rng, {3, 8});
        const Tensor proj_small = random_tensor(rng, {2, 8});
        const Tensor other = random_tensor(rng, {3, 8});
        const Tensor mat = random_tensor(rng, {2, 3});
        const Tensor kernel = random_tensor(rng, {3, 3});
        const Tensor proj_col = random_tensor(rng, {3});
        const Tensor proj_up = random_tensor(rng, {3, 32});

        auto run = [&worst](const std::function<Var(const Var&)>& f, const Tensor& at) {
            GradCheckReport r = grad_check(f, at, 1e-6, 1e-4);
            worst = std::max(worst, r.max_rel_error);
            CHECK(r.passed());
        };

        run([&](const Var& v) { return cdot(proj_small, matmul(Var::constant(mat), v)); }, x);
        run([&](const Var& v) { return cdot(proj, add(v, Var::constant(other))); }, x);
        run([&](const Var& v) { return cdot(proj, add_n({v, Var::constant(other), v})); }, x);
        run([&](const Var& v) { return cdot(proj, scale(v, -1.7)); }, x);
        run([&](const Var& v) { return cdot(proj, tanh_map(v)); }, x);
        run([&](const Var& v) { return cdot(proj, softmax(v, 0)); }, x);
        run([&](const Var& v) { return cdot(proj, softmax(v, 1)); }, x);
        run([&](const Var& v) { return cdot(proj, l2_normalize(v, 0)); }, x);
        run([&](const Var& v) { return cdot(proj, add_col_bias(v, Var::constant(proj_col))); }, x);
        run([&](const Var& v) { return cdot(proj_col, mean_cols(v)); }, x);
        run([&](const Var& v) { return cdot(proj, conv3x3_shared(v, 2, 4, Var::constant(kernel))); }, x);
        run([&](const Var& v) {
            return cdot(Tensor({9, 8}, 0.5), concat_rows({v, Var::constant(other), v}));
        }, x);
        run([&](const Var& v) { return cdot(proj_up, upsample_nearest(v, 2, 4, 2)); }, x);
        const Tensor proj_tn = random_tensor(rng, {3, 5});
        run([&](const Var& v) { return cdot(proj_tn, matmul_tn(Var::constant(mat), v)); },
            random_tensor(rng, {2, 5}));
        run([&](const Var& v) { return cdot(proj, repeat_cols(v, 8)); }, proj_col);
        const Tensor proj_sub = random_tensor(rng, {3, 2});
        run([&](const Var& v) { return cdot(proj_sub, subsample(v, 2, 4, 2)); }, x);
    }
    MESSAGE("worst relative error: ", worst);
}

TEST_CASE("backward zeroes gradients between passes") {
    Var x = Var::leaf(Tensor::from_data({1, 2}, {1.0, 2.0}));
    Var y = cdot(Tensor({1, 2}, 1.0), x);
    backward(y);
    CHECK(x.grad()[0] == 1.0);
    backward(y);  // gradients must not accumulate across passes
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("loss combination and weights") {
    LossConfig cfg;
    LossBreakdown b = combine_losses(1.0, 1.0, 1.0, 1.0, cfg);
    CHECK(b.total == doctest::Approx(1.46).epsilon(1e-12));

    LossConfig zeros;
    zeros.eta = zeros.alpha = zeros.beta = 0.0;
    CHECK(combine_losses(3.0, 2.5, 9.0, 7.0, zeros).total == doctest::Approx(2.5));

    CHECK_THROWS_WITH_AS(
        combine_losses(std::numeric_limits<double>::infinity(), 0, 0, 0, cfg),
        doctest::Contains("cls"), NumericError);

    // Breakdown recomputed independently.
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int i = 0; i < 20; ++i) {
        const double cls = u(rng), aug = u(rng), clcl = u(rng), cgcl = u(rng);
        LossBreakdown bd = combine_losses(cls, aug, clcl, cgcl, cfg);
        const double expect = cfg.eta * cls + aug + cfg.alpha * clcl + cfg.beta * cgcl;
        CHECK(std::abs(bd.total - expect) < 1e-9);
    }
}
