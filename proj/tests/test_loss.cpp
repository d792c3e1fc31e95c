#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "emargin/errors.hpp"
#include "emargin/loss.hpp"
#include "emargin/rng.hpp"
#include "emargin/signal.hpp"

using namespace emargin;
using ad::Graph;
using ad::GradientMap;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> data(ad::shape_size(shape));
    for (double& v : data) {
        v = rng.normal(0.0, stddev);
    }
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;

}  // namespace

// ---------------------------------------------------------------------------
// cosine similarity and pseudo-labels
// ---------------------------------------------------------------------------

TEST_CASE("cosine_sim hand values") {
    CHECK(cosine_sim({1, 0}, {0, 1}, 1e-12) == 0.0);
    CHECK(cosine_sim({1, 2}, {2, 4}, 1e-12) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_sim({3, 4}, {4, 3}, 1e-12) == doctest::Approx(0.96).epsilon(1e-15));
    CHECK(cosine_sim({0, 0}, {1, 1}, 1e-12) == 0.0);  // zero vector floors to 0
    CHECK_THROWS_AS(cosine_sim({1, 2}, {1, 2, 3}, 1e-12), DimensionError);
}

TEST_CASE("pseudo-label threshold rule is strict") {
    // Rows engineered so sim(x0, x1) = 0.5 and sim(x0, x2) = 0.4 exactly.
    // cos with (1, 0) equals the first coordinate of a unit vector.
    const Tensor steps = Tensor::from_data(
        {3, 2}, {1.0, 0.0, 0.5, std::sqrt(3.0) / 2.0, 0.4, std::sqrt(1.0 - 0.16)});
    LossConfig cfg;
    cfg.threshold = 0.4;
    cfg.pseudo_label_scope = PseudoLabelScope::pairwise;
    const PseudoLabelMatrix labels = pseudo_labels(steps, cfg);
    CHECK(labels.values.value_at({0, 1}) == 0.0);  // 0.5 > 0.4
    CHECK(labels.values.value_at({0, 2}) == 1.0);  // 0.4 is not > 0.4
    // Symmetric with entries in {0, 1}.
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t k = 0; k < 3; ++k) {
            const double v = labels.values.value_at({t, k});
            CHECK((v == 0.0 || v == 1.0));
            CHECK(v == labels.values.value_at({k, t}));
            CHECK(labels.active.value_at({t, k}) == 1.0);
        }
    }
}

TEST_CASE("adjacent_only scope labels only the off-diagonals") {
    const Tensor steps = Tensor::from_data({4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
    LossConfig cfg;
    cfg.pseudo_label_scope = PseudoLabelScope::adjacent_only;
    const PseudoLabelMatrix labels = pseudo_labels(steps, cfg);
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t k = 0; k < 4; ++k) {
            const bool adjacent = (t + 1 == k) || (k + 1 == t);
            CHECK(labels.active.value_at({t, k}) == (adjacent ? 1.0 : 0.0));
            if (!adjacent) {
                CHECK(labels.values.value_at({t, k}) == 0.0);
            }
        }
    }
    // All the adjacent pairs here are orthogonal -> sim 0 <= threshold -> label 1.
    CHECK(labels.values.value_at({0, 1}) == 1.0);
    CHECK(labels.values.value_at({2, 3}) == 1.0);
}

TEST_CASE("noiseless regime data labels exactly the switches") {
    const SequenceBatch batch = synth_regimes(3, 60, 8, 3, 12.0, 0.0, 5);
    LossConfig cfg;  // threshold 0.4; regime means sit at cosine <= 0.3
    cfg.pseudo_label_scope = PseudoLabelScope::pairwise;
    const std::size_t T = batch.seq_len();
    for (std::size_t b = 0; b < batch.batch(); ++b) {
        std::vector<double> rows(batch.data.data().begin() + static_cast<std::ptrdiff_t>(b * T * 8),
                                 batch.data.data().begin() +
                                     static_cast<std::ptrdiff_t>((b + 1) * T * 8));
        const PseudoLabelMatrix labels =
            pseudo_labels(Tensor::from_data({T, 8}, std::move(rows)), cfg);
        for (std::size_t t = 0; t + 1 < T; ++t) {
            const bool switched = batch.labels[b * T + t] != batch.labels[b * T + t + 1];
            CHECK(labels.values.value_at({t, t + 1}) == (switched ? 1.0 : 0.0));
        }
    }
}

// ---------------------------------------------------------------------------
// similarity matrix
// ---------------------------------------------------------------------------

TEST_CASE("pairwise_cosine_matrix special cases") {
    Graph g;
    const Tensor orthonormal = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor identity = pairwise_cosine_matrix(g, orthonormal, 1e-12);
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(identity.value_at({t, k}) == doctest::Approx(t == k ? 1.0 : 0.0)
                                                   .scale(1)
                                                   .epsilon(1e-12));
        }
    }

    const Tensor duplicated = Tensor::from_data({3, 2}, {2, 1, 2, 1, -1, 3});
    const Tensor m = pairwise_cosine_matrix(g, duplicated, 1e-12);
    CHECK(m.value_at({0, 1}) == doctest::Approx(1.0).epsilon(1e-12));

    // A zero row yields similarity 0 against everything else.
    const Tensor with_zero = Tensor::from_data({2, 2}, {0, 0, 3, 4});
    CHECK(pairwise_cosine_matrix(g, with_zero, 1e-12).value_at({0, 1}) == 0.0);
}

TEST_CASE("pairwise_cosine_matrix matches the per-pair oracle") {
    Rng rng(31);
    Graph g;
    const Tensor z = random_tensor(rng, {5, 3});
    const Tensor m = pairwise_cosine_matrix(g, z, 1e-12);
    for (std::size_t t = 0; t < 5; ++t) {
        std::vector<double> zt(z.data().begin() + static_cast<std::ptrdiff_t>(t * 3),
                               z.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * 3));
        for (std::size_t k = 0; k < 5; ++k) {
            std::vector<double> zk(z.data().begin() + static_cast<std::ptrdiff_t>(k * 3),
                                   z.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * 3));
            CHECK(m.value_at({t, k}) ==
                  doctest::Approx(cosine_sim(zt, zk, 1e-12)).epsilon(1e-12));
            CHECK(m.value_at({t, k}) == doctest::Approx(m.value_at({k, t})).epsilon(1e-14));
            CHECK(m.value_at({t, k}) <= 1.0);
            CHECK(m.value_at({t, k}) >= -1.0);
        }
        CHECK(m.value_at({t, t}) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

// ---------------------------------------------------------------------------
// margin transform
// ---------------------------------------------------------------------------

namespace {

// Scalar reference for the transform's two branches.
double transform_reference(double label, double m, double margin) {
    const double hinge = std::max(0.0, margin - m);
    return 0.5 * (1.0 - label) * m * m + 0.5 * label * hinge * hinge;
}

PseudoLabelMatrix constant_labels(Shape shape, double label) {
    PseudoLabelMatrix labels;
    labels.values = Tensor::full(shape, label);
    labels.active = Tensor::full(std::move(shape), 1.0);
    return labels;
}

}  // namespace

TEST_CASE("margin transform branch values are exact") {
    const std::vector<double> sims = {-1.0, -0.5, 0.0, 0.2, 0.4, 0.8, 1.0};
    for (double margin : {1.0, 5.0}) {
        for (double label : {0.0, 1.0}) {
            Graph g;
            const Tensor m = Tensor::from_data({1, 7}, std::vector<double>(sims));
            PseudoLabelMatrix labels;
            labels.values = Tensor::full({1, 7}, label);
            labels.active = Tensor::full({1, 7}, 1.0);
            const Tensor out = margin_transform(g, m, labels, margin);
            for (std::size_t i = 0; i < sims.size(); ++i) {
                const double expect = transform_reference(label, sims[i], margin);
                CHECK(std::abs(out.value_at(i) - expect) < 1e-15);
            }
        }
    }
    // Hand values: label 0, M 0.8 -> 0.32; label 1, M 0.2, margin 5 -> 11.52.
    CHECK(transform_reference(0, 0.8, 5) == doctest::Approx(0.32).epsilon(1e-15));
    CHECK(transform_reference(1, 0.2, 5) == doctest::Approx(11.52).epsilon(1e-15));
}

TEST_CASE("margin transform hinge vanishes at and beyond the margin") {
    Graph g;
    const Tensor m = Tensor::from_data({1, 3}, {0.5, 0.8, 1.0}, true);
    const Tensor out = margin_transform(g, m, constant_labels(m.shape(), 1.0), 0.5);
    CHECK(out.value_at(0) == 0.0);  // M == margin exactly
    CHECK(out.value_at(1) == 0.0);
    CHECK(out.value_at(2) == 0.0);

    // And such entries contribute exactly zero gradient.
    const Tensor loss = ad::reduce(g, out, ad::ReduceKind::sum);
    const GradientMap grads = g.backward(loss);
    CHECK(grads.at(m).data() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("margin transform properties over random matrices") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const double margin = rng.uniform(0.5, 6.0);
        const std::size_t T = 2 + static_cast<std::size_t>(rng.below(5));
        std::vector<double> sims(T * T);
        std::vector<double> labels(T * T);
        for (std::size_t i = 0; i < T * T; ++i) {
            sims[i] = rng.uniform(-1.0, 1.0);
            labels[i] = rng.below(2) ? 1.0 : 0.0;
        }
        Graph g;
        PseudoLabelMatrix y;
        y.values = Tensor::from_data({T, T}, labels);
        y.active = Tensor::full({T, T}, 1.0);
        const Tensor out = margin_transform(g, Tensor::from_data({T, T}, sims), y, margin);
        const double bound = 0.5 * (margin + 1.0) * (margin + 1.0);
        for (std::size_t i = 0; i < T * T; ++i) {
            CHECK(out.value_at(i) >= 0.0);
            CHECK(out.value_at(i) <= bound + 1e-12);  // extremes: M=1 squared vs hinge at M=-1
        }

        // Label-0 branch is blind to the similarity's sign.
        Graph g2;
        std::vector<double> negated = sims;
        for (double& v : negated) {
            v = -v;
        }
        const Tensor flipped = margin_transform(
            g2, Tensor::from_data({T, T}, negated), constant_labels({T, T}, 0.0), margin);
        Graph g3;
        const Tensor straight = margin_transform(
            g3, Tensor::from_data({T, T}, sims), constant_labels({T, T}, 0.0), margin);
        for (std::size_t i = 0; i < T * T; ++i) {
            CHECK(flipped.value_at(i) == doctest::Approx(straight.value_at(i)).epsilon(1e-15));
        }
    }
}

TEST_CASE("label-1 branch is monotone non-increasing below the margin") {
    const double margin = 2.0;
    Graph g;
    std::vector<double> sims;
    for (double m = -1.0; m <= 1.0 + 1e-9; m += 0.05) {
        sims.push_back(m);
    }
    const std::size_t n = sims.size();
    const Tensor out = margin_transform(g, Tensor::from_data({1, n}, sims),
                                        constant_labels({1, n}, 1.0), margin);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        CHECK(out.value_at(i) >= out.value_at(i + 1) - 1e-12);
    }
}

TEST_CASE("adjacent_only scope passes non-adjacent similarities through") {
    Rng rng(43);
    Graph g;
    const Tensor z = random_tensor(rng, {5, 4});
    const Tensor x = random_tensor(rng, {5, 3});
    LossConfig cfg;
    cfg.pseudo_label_scope = PseudoLabelScope::adjacent_only;
    const PseudoLabelMatrix labels = pseudo_labels(x, cfg);
    const Tensor m = pairwise_cosine_matrix(g, z, 1e-12);
    const Tensor out = margin_transform(g, m, labels, cfg.margin);
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t k = 0; k < 5; ++k) {
            if (t + 1 != k && k + 1 != t) {
                CHECK(out.value_at({t, k}) == m.value_at({t, k}));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// contrastive terms
// ---------------------------------------------------------------------------

TEST_CASE("uniform similarities give the ln(T-2) closed form") {
    {
        Graph g;
        const Tensor row = Tensor::full({4}, 0.7);
        CHECK(infonce_term(g, row, 0, 0.1).scalar_value() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    {
        Graph g;
        const Tensor row = Tensor::full({10}, -0.3);
        CHECK(infonce_term(g, row, 4, 0.5).scalar_value() ==
              doctest::Approx(std::log(8.0)).epsilon(1e-9));
    }
    {
        Graph g;
        CHECK_THROWS_AS(infonce_term(g, Tensor::full({2}, 1.0), 0, 0.1), DomainError);
        CHECK_THROWS_AS(infonce_term(g, Tensor::full({4}, 1.0), 3, 0.1), ContractError);
        CHECK_THROWS_AS(infonce_term(g, Tensor::full({4}, 1.0), 0, 0.0), ConfigError);
    }
}

TEST_CASE("temperature rescaling equals similarity rescaling") {
    Rng rng(51);
    for (int trial = 0; trial < 10; ++trial) {
        const double c = rng.uniform(0.2, 5.0);
        const double tau = rng.uniform(0.05, 2.0);
        std::vector<double> values(6);
        for (double& v : values) {
            v = rng.uniform(-1.0, 1.0);
        }
        std::vector<double> scaled = values;
        for (double& v : scaled) {
            v *= c;
        }
        Graph g;
        const double direct =
            infonce_term(g, Tensor::from_data({6}, values), 2, tau / c).scalar_value();
        const double rescaled =
            infonce_term(g, Tensor::from_data({6}, scaled), 2, tau).scalar_value();
        CHECK(direct == doctest::Approx(rescaled).epsilon(1e-11));
    }
}

TEST_CASE("raising the positive's value strictly lowers the anchor's loss") {
    Graph g;
    std::vector<double> base = {0.1, 0.2, -0.4, 0.6, 0.0};
    double previous = infonce_term(g, Tensor::from_data({5}, base), 1, 0.3).scalar_value();
    for (double bump : {0.1, 0.3, 0.7}) {
        std::vector<double> raised = base;
        raised[2] += bump;  // positive slot for anchor 1
        const double loss = infonce_term(g, Tensor::from_data({5}, raised), 1, 0.3).scalar_value();
        CHECK(loss < previous);
        previous = loss;
    }
    // With the positive far above the negatives the term is lse(negs) - pos.
    std::vector<double> dominated = {0.0, 0.0, 50.0, 0.0, 0.0};
    const double value =
        infonce_term(g, Tensor::from_data({5}, dominated), 1, 1.0).scalar_value();
    CHECK(value == doctest::Approx(std::log(3.0) - 50.0).epsilon(1e-12));
}

TEST_CASE("sequence loss equals the mean of per-row terms") {
    Rng rng(61);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t T = 3 + static_cast<std::size_t>(rng.below(6));
        std::vector<double> matrix(T * T);
        for (double& v : matrix) {
            v = rng.uniform(-1.0, 1.0);
        }
        const double tau = rng.uniform(0.1, 1.0);
        Graph g;
        const double whole =
            infonce_sequence_loss(g, Tensor::from_data({T, T}, matrix), tau).scalar_value();
        double mean = 0.0;
        for (std::size_t t = 0; t + 1 < T; ++t) {
            Graph row_graph;
            std::vector<double> row(matrix.begin() + static_cast<std::ptrdiff_t>(t * T),
                                    matrix.begin() + static_cast<std::ptrdiff_t>((t + 1) * T));
            mean += infonce_term(row_graph, Tensor::from_data({T}, std::move(row)), t, tau)
                        .scalar_value();
        }
        mean /= static_cast<double>(T - 1);
        CHECK(whole == doctest::Approx(mean).epsilon(1e-12));
    }
}

// ---------------------------------------------------------------------------
// full objective
// ---------------------------------------------------------------------------

TEST_CASE("hand-evaluated fixture for both label scopes") {
    // X: rows 0 and 1 nearly parallel (label 0), row 2 orthogonal (label 1).
    const Tensor x =
        Tensor::from_data({1, 3, 3}, {1.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 0.0, 1.0});
    // Z: unit rows with exact similarities M01 = 0.8, M12 = 0, M02 = -0.6.
    const Tensor z =
        Tensor::from_data({1, 3, 2}, {1.0, 0.0, 0.8, 0.6, -0.6, 0.8}, true);
    LossConfig cfg;
    cfg.temperature = 0.5;
    cfg.margin = 5.0;
    cfg.threshold = 0.4;

    // Per-pair transforms: (0,1) label 0 -> 0.32; (1,2) label 1 -> 12.5;
    // (0,2) label 1 -> 15.68. Anchor terms 30.72 and -24.36, mean 3.18.
    cfg.pseudo_label_scope = PseudoLabelScope::pairwise;
    {
        Graph g;
        CHECK(emargin_loss(g, x, z, cfg).scalar_value() == doctest::Approx(3.18).epsilon(1e-9));
    }

    // adjacent_only: (0,2) passes through raw (-0.6); terms -1.84 and -24.36,
    // mean -13.1.
    cfg.pseudo_label_scope = PseudoLabelScope::adjacent_only;
    {
        Graph g;
        CHECK(emargin_loss(g, x, z, cfg).scalar_value() == doctest::Approx(-13.1).epsilon(1e-9));
    }
}

TEST_CASE("identity transform reduces the objective to plain InfoNCE") {
    Rng rng(71);
    const Tensor x = random_tensor(rng, {2, 5, 4});
    const Tensor z = random_tensor(rng, {2, 5, 3});
    LossConfig cfg;
    cfg.temperature = 0.2;
    cfg.transform_identity = true;
    Graph g;
    const double reduced = emargin_loss(g, x, z, cfg).scalar_value();
    Graph g2;
    const double plain = plain_infonce_loss(g2, z, 0.2).scalar_value();
    CHECK(reduced == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("identical embedding rows give ln(T-2) under plain InfoNCE") {
    const std::size_t T = 7;
    std::vector<double> data;
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            data.insert(data.end(), {0.3, -1.2, 0.5});
        }
    }
    Graph g;
    const Tensor z = Tensor::from_data({2, T, 3}, std::move(data));
    CHECK(plain_infonce_loss(g, z, 0.1).scalar_value() ==
          doctest::Approx(std::log(static_cast<double>(T - 2))).epsilon(1e-9));
}

TEST_CASE("batch order does not change the objective") {
    Rng rng(81);
    const std::size_t B = 3;
    const std::size_t T = 4;
    const Tensor x = random_tensor(rng, {B, T, 5});
    const Tensor z = random_tensor(rng, {B, T, 3});
    LossConfig cfg;
    Graph g;
    const double forward = emargin_loss(g, x, z, cfg).scalar_value();

    // Rotate the batch: sequence order b -> (b + 1) mod B for both tensors.
    auto rotate = [&](const Tensor& t) {
        const std::size_t stride = t.size() / B;
        std::vector<double> rotated(t.size());
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t src = ((b + 1) % B) * stride;
            std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(src),
                      t.data().begin() + static_cast<std::ptrdiff_t>(src + stride),
                      rotated.begin() + static_cast<std::ptrdiff_t>(b * stride));
        }
        return Tensor::from_data(t.shape(), std::move(rotated));
    };
    Graph g2;
    const double rotated = emargin_loss(g2, rotate(x), rotate(z), cfg).scalar_value();
    CHECK(forward == doctest::Approx(rotated).epsilon(1e-12));
}

TEST_CASE("objective gradients match finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const Tensor x = random_tensor(rng, {2, 5, 4});
        const Tensor z = random_tensor(rng, {2, 5, 3});
        for (const PseudoLabelScope scope :
             {PseudoLabelScope::pairwise, PseudoLabelScope::adjacent_only}) {
            LossConfig cfg;
            cfg.pseudo_label_scope = scope;
            cfg.temperature = 0.4;
            auto objective = [&](Graph& g, const Tensor& probe) {
                return emargin_loss(g, x, probe, cfg);
            };
            INFO("seed " << seed);
            CHECK(ad::finite_diff_check(objective, z, kFdStep) < kFdTol);
        }
        auto baseline = [&](Graph& g, const Tensor& probe) {
            return plain_infonce_loss(g, probe, 0.4);
        };
        CHECK(ad::finite_diff_check(baseline, z, kFdStep) < kFdTol);
    }
}

TEST_CASE("objective rejects bad shapes and ranges") {
    LossConfig cfg;
    Graph g;
    const Tensor x = Tensor::full({2, 4, 3}, 1.0);
    const Tensor z = Tensor::full({2, 4, 2}, 1.0);
    CHECK_THROWS_AS(emargin_loss(g, Tensor::full({2, 4}, 1.0), z, cfg), DimensionError);
    CHECK_THROWS_AS(emargin_loss(g, Tensor::full({3, 4, 3}, 1.0), z, cfg), DimensionError);
    CHECK_THROWS_AS(emargin_loss(g, Tensor::full({2, 2, 3}, 1.0), Tensor::full({2, 2, 2}, 1.0),
                                 cfg),
                    DomainError);
    LossConfig bad = cfg;
    bad.temperature = -1.0;
    CHECK_THROWS_AS(emargin_loss(g, x, z, bad), ConfigError);
    bad = cfg;
    bad.margin = 0.0;
    CHECK_THROWS_AS(emargin_loss(g, x, z, bad), ConfigError);
}
