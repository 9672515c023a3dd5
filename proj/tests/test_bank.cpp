#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mdrl/bank.hpp"
#include "mdrl/ops.hpp"
#include "mdrl/rng.hpp"

using namespace mdrl;

namespace {

Tensor random_scores(Rng& rng, std::size_t n, std::size_t m, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t({n, m});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

/// Transport objective <L, S> + lambda * H(L).
double transport_objective(const Tensor& plan, const Tensor& scores, double lambda) {
    double obj = 0.0;
    for (std::size_t i = 0; i < plan.size(); ++i) {
        obj += plan[i] * scores[i];
        if (plan[i] > 0.0) obj -= lambda * plan[i] * std::log(plan[i]);
    }
    return obj;
}

Tensor unit_vector(Rng& rng, std::size_t dim) {
    std::normal_distribution<double> gauss;
    Tensor v({dim});
    double n2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        v[i] = gauss(rng);
        n2 += v[i] * v[i];
    }
    for (std::size_t i = 0; i < dim; ++i) v[i] /= std::sqrt(n2);
    return v;
}

}  // namespace

TEST_CASE("init_bank produces deterministic unit entries") {
    DistributionBank bank = DistributionBank::init(2, 1, 4, 7);
    CHECK(bank.max_norm_error() < 1e-6);

    DistributionBank again = DistributionBank::init(2, 1, 4, 7);
    for (std::size_t i = 0; i < bank.entries().size(); ++i) {
        CHECK(bank.entries()[i] == again.entries()[i]);
    }

    // The dataset-scale setting from the distribution-count sweep: 19
    // classes, 9 distributions each.
    DistributionBank big = DistributionBank::init(19, 9, 512, 0);
    CHECK(big.entries().extent(0) * big.entries().extent(1) == 171);
    CHECK(big.max_norm_error() < 1e-6);

    CHECK_THROWS_AS(DistributionBank::init(1, 1, 4, 0), ConfigError);
    CHECK_THROWS_AS(DistributionBank::init(2, 0, 4, 0), ConfigError);
    CHECK_THROWS_AS(DistributionBank::init(2, 1, 1, 0), ConfigError);
}

TEST_CASE("sinkhorn uniform scores give the uniform plan") {
    Tensor scores({2, 4}, 0.0);
    AssignmentMatrix a = sinkhorn_assign(scores, {0.05, 3});
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        CHECK(a.values()[i] == doctest::Approx(0.5).epsilon(1e-12));
    }
    CHECK(a.max_column_residual() < 1e-12);
    CHECK(a.max_row_residual() < 1e-12);
}

TEST_CASE("sinkhorn separates strongly matched pairs (entropic oracle)") {
    Tensor scores = Tensor::from_data({2, 2}, {10, 0, 0, 10});
    // Oracle: the fully converged entropic plan.
    AssignmentMatrix oracle = sinkhorn_assign(scores, {0.1, 1000});
    CHECK(oracle.values().at(0, 1) < 1e-3);
    CHECK(oracle.values().at(1, 0) < 1e-3);
    CHECK(oracle.values().at(0, 0) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("sinkhorn marginals on random instances") {
    Rng rng(99);
    for (int i = 0; i < 20; ++i) {
        Tensor scores = random_scores(rng, 3, 9);
        // Convergence slows as lambda shrinks; double the budget until the
        // marginals settle.
        AssignmentMatrix a = sinkhorn_assign(scores, {0.05, 128});
        for (std::size_t iters = 256; iters <= 16384 && a.max_row_residual() >= 1e-4;
             iters *= 2) {
            a = sinkhorn_assign(scores, {0.05, iters});
        }
        CHECK(a.max_column_residual() < 1e-5);
        CHECK(a.max_row_residual() < 1e-4);
        for (std::size_t k = 0; k < a.values().size(); ++k) CHECK(a.values()[k] >= 0.0);
    }
}

TEST_CASE("sinkhorn is invariant to score shifts") {
    Rng rng(123);
    Tensor scores = random_scores(rng, 4, 12);
    Tensor shifted = scores;
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 3.75;
    AssignmentMatrix a = sinkhorn_assign(scores, {0.05, 50});
    AssignmentMatrix b = sinkhorn_assign(shifted, {0.05, 50});
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-6);
    }
}

TEST_CASE("sinkhorn objective approaches the fixed point from above") {
    // The plan returned at iteration k satisfies the column constraint but
    // tightens the row constraint gradually; its objective therefore starts
    // above the doubly-constrained optimum and decreases onto it. (The
    // direction is opposite to a naive reading; early iterates are *less*
    // constrained, so their objective is higher.)
    Rng rng(2024);
    for (int inst = 0; inst < 50; ++inst) {
        std::uniform_int_distribution<std::size_t> nd(2, 8), md(8, 64);
        const std::size_t n = nd(rng), m = md(rng);
        Tensor scores = random_scores(rng, n, m);
        const double lambda = (inst % 3 == 0) ? 0.05 : (inst % 3 == 1 ? 0.25 : 0.01);
        const double converged =
            transport_objective(sinkhorn_assign(scores, {lambda, 2000}).values(), scores, lambda);
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t iters = 1; iters <= 20; ++iters) {
            const double obj = transport_objective(
                sinkhorn_assign(scores, {lambda, iters}).values(), scores, lambda);
            CHECK(obj >= converged - 1e-9);
            CHECK(obj <= prev + 5e-4);
            prev = obj;
        }
    }
}

TEST_CASE("cluster_batch shapes, skip rule and diagnostics") {
    DistributionBank bank = DistributionBank::init(6, 9, 8, 1);
    Rng rng(17);

    // Only class 3 present with 18 pixels.
    Tensor embeddings({8, 22});
    std::vector<std::uint8_t> labels(22, 255);
    for (std::size_t p = 0; p < 18; ++p) {
        Tensor u = unit_vector(rng, 8);
        for (std::size_t z = 0; z < 8; ++z) embeddings.at(z, p) = u[z];
        labels[p] = 3;
    }
    // Class 5 has only 4 pixels: skipped (N = 9).
    for (std::size_t p = 18; p < 22; ++p) {
        Tensor u = unit_vector(rng, 8);
        for (std::size_t z = 0; z < 8; ++z) embeddings.at(z, p) = u[z];
        labels[p] = 5;
    }

    ClusterDiagnostics diag;
    PixelGroups groups = group_pixels(embeddings, labels, 255);
    auto assignments = cluster_batch(groups, bank, {0.05, 3}, &diag);
    REQUIRE(assignments.size() == 1);
    REQUIRE(assignments.count(3) == 1);
    CHECK(assignments.at(3).distributions() == 9);
    CHECK(assignments.at(3).pixel_count() == 18);
    CHECK(diag.skipped_classes == 1);
    CHECK(diag.clustered_classes == 1);
}

TEST_CASE("balanced assignment splits two separated clusters (brute-force oracle)") {
    // One class, two 2-D clusters, bank entries near both cluster axes.
    const std::size_t half = 6;
    Tensor embeddings({2, 2 * half});
    std::vector<std::uint8_t> labels(2 * half, 0);
    Rng rng(5);
    std::normal_distribution<double> jitter(0.0, 0.02);
    for (std::size_t p = 0; p < half; ++p) {  // cluster A around angle 0
        const double a = jitter(rng);
        embeddings.at(0, p) = std::cos(a);
        embeddings.at(1, p) = std::sin(a);
    }
    for (std::size_t p = half; p < 2 * half; ++p) {  // cluster B around angle pi/2
        const double a = 1.5707963 + jitter(rng);
        embeddings.at(0, p) = std::cos(a);
        embeddings.at(1, p) = std::sin(a);
    }
    const double deg10 = 0.1745329, deg80 = 1.3962634;
    Tensor entries({2, 2, 2});
    const double d00[2] = {std::cos(deg10), std::sin(deg10)};
    const double d01[2] = {std::cos(deg80), std::sin(deg80)};
    const double d1x[2] = {-1.0, 0.0};
    double* e = entries.data();
    e[0] = d00[0]; e[1] = d00[1];          // class 0, dist 0
    e[2] = d01[0]; e[3] = d01[1];          // class 0, dist 1
    e[4] = d1x[0]; e[5] = d1x[1];          // class 1 unused
    e[6] = 0.0;    e[7] = 1.0;
    DistributionBank bank = DistributionBank::from_entries(2, 2, 2, entries);

    PixelGroups groups = group_pixels(embeddings, labels, 255);
    auto assignments = cluster_batch(groups, bank, {0.01, 200});
    const std::vector<std::size_t> hard = assignments.at(0).hard_assignments();

    // Brute force: both balanced labelings, higher transport score wins.
    double score_identity = 0.0, score_swapped = 0.0;
    for (std::size_t p = 0; p < 2 * half; ++p) {
        const bool in_a = p < half;
        const double dot0 = embeddings.at(0, p) * d00[0] + embeddings.at(1, p) * d00[1];
        const double dot1 = embeddings.at(0, p) * d01[0] + embeddings.at(1, p) * d01[1];
        score_identity += in_a ? dot0 : dot1;
        score_swapped += in_a ? dot1 : dot0;
    }
    REQUIRE(score_identity > score_swapped);
    for (std::size_t p = 0; p < 2 * half; ++p) {
        CHECK(hard[p] == (p < half ? 0u : 1u));
    }
}

TEST_CASE("update_bank momentum endpoints") {
    DistributionBank bank = DistributionBank::init(2, 2, 4, 3);
    Rng rng(8);
    Tensor embeddings({4, 6});
    std::vector<std::uint8_t> labels(6, 0);
    for (std::size_t p = 0; p < 6; ++p) {
        Tensor u = unit_vector(rng, 4);
        for (std::size_t z = 0; z < 4; ++z) embeddings.at(z, p) = u[z];
    }
    PixelGroups groups = group_pixels(embeddings, labels, 255);
    auto assignments = cluster_batch(groups, bank, {0.05, 10});

    // mu = 1: bank unchanged exactly.
    DistributionBank frozen = update_bank(bank, groups, assignments, {1.0, 0, 0});
    for (std::size_t i = 0; i < bank.entries().size(); ++i) {
        CHECK(frozen.entries()[i] == bank.entries()[i]);
    }

    // mu = 0: updated entries equal the normalized assigned mean.
    DistributionBank replaced = update_bank(bank, groups, assignments, {0.0, 0, 0});
    const std::vector<std::size_t> hard = assignments.at(0).hard_assignments();
    for (std::size_t n = 0; n < 2; ++n) {
        std::vector<double> mean(4, 0.0);
        std::size_t count = 0;
        for (std::size_t p = 0; p < 6; ++p) {
            if (hard[p] != n) continue;
            ++count;
            for (std::size_t z = 0; z < 4; ++z) mean[z] += embeddings.at(z, p);
        }
        if (count == 0) continue;
        double n2 = 0.0;
        for (double v : mean) n2 += v * v;
        for (double& v : mean) v /= std::sqrt(n2);
        const double* entry = replaced.entry(0, n);
        for (std::size_t z = 0; z < 4; ++z) {
            CHECK(entry[z] == doctest::Approx(mean[z]).epsilon(1e-6));
        }
    }

    // Class 1 had no pixels: all its entries are untouched in both cases.
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t z = 0; z < 4; ++z) {
            CHECK(replaced.entry(1, n)[z] == bank.entry(1, n)[z]);
        }
    }
}

TEST_CASE("momentum recursion converges to the stream mode (simulated oracle)") {
    // Fixed stream: every step the assigned mean is the same mode vector.
    const std::size_t dim = 4;
    Tensor mode = Tensor::from_data({dim}, {1, 0, 0, 0});
    // Start at cosine 0.95 from the mode.
    Tensor start = Tensor::from_data({dim}, {0.95, std::sqrt(1.0 - 0.95 * 0.95), 0, 0});

    Tensor entries({2, 1, dim});
    for (std::size_t z = 0; z < dim; ++z) {
        entries[z] = start[z];
        entries[dim + z] = (z == 1) ? -1.0 : 0.0;  // class 1, unused
    }
    DistributionBank bank = DistributionBank::from_entries(2, 1, dim, entries);

    Tensor embeddings({dim, 3});
    std::vector<std::uint8_t> labels(3, 0);
    for (std::size_t p = 0; p < 3; ++p) {
        for (std::size_t z = 0; z < dim; ++z) embeddings.at(z, p) = mode[z];
    }
    PixelGroups groups = group_pixels(embeddings, labels, 255);

    // Independent oracle: simulate the normalized recursion directly.
    std::vector<double> sim(start.data(), start.data() + dim);
    const double mu = 0.999;
    for (int step = 0; step < 1000; ++step) {
        double n2 = 0.0;
        for (std::size_t z = 0; z < dim; ++z) {
            sim[z] = mu * sim[z] + (1.0 - mu) * mode[z];
            n2 += sim[z] * sim[z];
        }
        const double inv = 1.0 / std::sqrt(n2);
        for (double& v : sim) v *= inv;
        for (std::size_t z = 0; z < dim; ++z) {
            sim[z] = static_cast<double>(static_cast<float>(sim[z]));
        }
    }

    for (int step = 0; step < 1000; ++step) {
        auto assignments = cluster_batch(groups, bank, {0.05, 3});
        bank = update_bank(bank, groups, assignments, {mu, 0, 0});
    }

    double cosine = 0.0;
    for (std::size_t z = 0; z < dim; ++z) cosine += bank.entry(0, 0)[z] * mode[z];
    CHECK(cosine > 0.99);
    for (std::size_t z = 0; z < dim; ++z) {
        CHECK(bank.entry(0, 0)[z] == doctest::Approx(sim[z]).epsilon(1e-9));
    }
}

TEST_CASE("bank update is order-insensitive within a batch") {
    DistributionBank bank = DistributionBank::init(2, 3, 6, 5);
    Rng rng(31);
    const std::size_t pixels = 24;
    Tensor embeddings({6, pixels});
    std::vector<std::uint8_t> labels(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        Tensor u = unit_vector(rng, 6);
        for (std::size_t z = 0; z < 6; ++z) embeddings.at(z, p) = u[z];
        labels[p] = static_cast<std::uint8_t>(p % 2);
    }

    // Permute pixel order.
    std::vector<std::size_t> perm(pixels);
    for (std::size_t p = 0; p < pixels; ++p) perm[p] = (p * 7 + 3) % pixels;
    Tensor shuffled({6, pixels});
    std::vector<std::uint8_t> shuffled_labels(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        for (std::size_t z = 0; z < 6; ++z) shuffled.at(z, p) = embeddings.at(z, perm[p]);
        shuffled_labels[p] = labels[perm[p]];
    }

    auto run = [&bank](const Tensor& e, const std::vector<std::uint8_t>& l) {
        PixelGroups g = group_pixels(e, l, 255);
        auto a = cluster_batch(g, bank, {0.05, 20});
        return update_bank(bank, g, a, {0.9, 0, 0});
    };
    DistributionBank b1 = run(embeddings, labels);
    DistributionBank b2 = run(shuffled, shuffled_labels);
    for (std::size_t i = 0; i < b1.entries().size(); ++i) {
        CHECK(b1.entries()[i] == doctest::Approx(b2.entries()[i]).epsilon(1e-12));
    }
}

TEST_CASE("bank entries stay unit after updates") {
    DistributionBank bank = DistributionBank::init(3, 4, 8, 11);
    Rng rng(77);
    for (int step = 0; step < 25; ++step) {
        Tensor embeddings({8, 30});
        std::vector<std::uint8_t> labels(30);
        for (std::size_t p = 0; p < 30; ++p) {
            Tensor u = unit_vector(rng, 8);
            for (std::size_t z = 0; z < 8; ++z) embeddings.at(z, p) = u[z];
            labels[p] = static_cast<std::uint8_t>(p % 3);
        }
        PixelGroups g = group_pixels(embeddings, labels, 255);
        auto a = cluster_batch(g, bank, {0.05, 3});
        bank = update_bank(bank, g, a, {0.99, 0, 0});
        CHECK(bank.max_norm_error() < 1e-6);
    }
}

TEST_CASE("nearest_distribution exact self-match and unique maximum") {
    DistributionBank bank = DistributionBank::init(4, 6, 8, 21);
    Tensor pixel({8});
    const double* d25 = bank.entry(2, 5);
    for (std::size_t z = 0; z < 8; ++z) pixel[z] = d25[z];
    NearestDistribution hit = nearest_distribution(bank, pixel);
    CHECK(hit.class_index == 2);
    CHECK(hit.distribution_index == 5);
    CHECK(hit.distance == doctest::Approx(-1.0).epsilon(1e-6));

    // Orthogonal to everything except one entry with similarity 0.3.
    Tensor entries({2, 1, 4});
    double* e = entries.data();
    e[0] = 1; e[1] = 0; e[2] = 0; e[3] = 0;
    e[4] = 0; e[5] = 1; e[6] = 0; e[7] = 0;
    DistributionBank tiny = DistributionBank::from_entries(2, 1, 4, entries);
    Tensor q = Tensor::from_data({4}, {0.0, 0.3, std::sqrt(1.0 - 0.09), 0.0});
    NearestDistribution best = nearest_distribution(tiny, q);
    CHECK(best.class_index == 1);
    CHECK(best.distribution_index == 0);
    CHECK(best.distance == doctest::Approx(-0.3).epsilon(1e-12));
}

TEST_CASE("nearest_distribution matches brute force and is scale invariant") {
    DistributionBank bank = DistributionBank::init(5, 7, 16, 2);
    Rng rng(1000);
    std::uniform_real_distribution<double> ku(0.1, 10.0);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor raw = unit_vector(rng, 16);
        NearestDistribution fast = nearest_distribution(bank, raw);

        NearestDistribution brute;
        brute.distance = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < 5; ++c) {
            for (std::size_t n = 0; n < 7; ++n) {
                double dot = 0.0;
                for (std::size_t z = 0; z < 16; ++z) dot += raw[z] * bank.entry(c, n)[z];
                if (-dot < brute.distance) brute = {c, n, -dot};
            }
        }
        CHECK(fast.class_index == brute.class_index);
        CHECK(fast.distribution_index == brute.distribution_index);

        // Positive rescaling before normalization changes nothing.
        const double k = ku(rng);
        Tensor scaled({16});
        double n2 = 0.0;
        for (std::size_t z = 0; z < 16; ++z) {
            scaled[z] = raw[z] * k;
            n2 += scaled[z] * scaled[z];
        }
        for (std::size_t z = 0; z < 16; ++z) scaled[z] /= std::sqrt(n2);
        NearestDistribution rescaled = nearest_distribution(bank, scaled);
        CHECK(rescaled.class_index == fast.class_index);
        CHECK(rescaled.distribution_index == fast.distribution_index);
    }
}

TEST_CASE("sinkhorn rejects degenerate inputs") {
    CHECK_THROWS_AS(sinkhorn_assign(Tensor({2, 3}), {0.0, 3}), ConfigError);
    CHECK_THROWS_AS(sinkhorn_assign(Tensor({2, 3}), {0.05, 0}), ConfigError);
    Tensor bad({2, 2});
    bad[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sinkhorn_assign(bad, {0.05, 3}), NumericError);
}
