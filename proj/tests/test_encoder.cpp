#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "emargin/autodiff.hpp"
#include "emargin/encoder.hpp"
#include "emargin/errors.hpp"
#include "emargin/rng.hpp"

using namespace emargin;

namespace {

ad::Tensor random_tensor(Rng& rng, ad::Shape shape, double scale = 1.0) {
    std::vector<double> data(ad::shape_size(shape));
    for (double& v : data) v = (2.0 * rng.uniform01() - 1.0) * scale;
    return ad::Tensor::from_data(std::move(shape), std::move(data));
}

// Plain-loop forward pass of the three blocks, kept free of the autodiff
// kernels so it can arbitrate them. Returns each block's batch-norm output
// (pre-ReLU) and the final activations, all flattened (B*T) x width.
struct RefForward {
    std::vector<std::vector<double>> bn_out;  // one per block
    std::vector<double> final_out;
};

RefForward reference_forward(const std::vector<double>& x, std::size_t rows,
                             const EncoderConfig& cfg, const EncoderParams& params) {
    const auto dims = cfg.dims();
    RefForward ref;
    std::vector<double> cur = x;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t in = dims[b];
        const std::size_t out = dims[b + 1];
        const std::vector<double>& w = params.blocks[b].weight.data();
        const std::vector<double>& bias = params.blocks[b].bias.data();
        const std::vector<double>& gamma = params.blocks[b].gamma.data();
        const std::vector<double>& beta = params.blocks[b].beta.data();

        std::vector<double> pre(rows * out, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < in; ++k) {
                const double a = cur[r * in + k];
                for (std::size_t j = 0; j < out; ++j) {
                    pre[r * out + j] += a * w[k * out + j];
                }
            }
            for (std::size_t j = 0; j < out; ++j) pre[r * out + j] += bias[j];
        }

        std::vector<double> normed(rows * out);
        for (std::size_t j = 0; j < out; ++j) {
            double mean = 0.0;
            for (std::size_t r = 0; r < rows; ++r) mean += pre[r * out + j];
            mean /= static_cast<double>(rows);
            double var = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double d = pre[r * out + j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(rows);
            const double inv = 1.0 / std::sqrt(var + cfg.bn_epsilon);
            for (std::size_t r = 0; r < rows; ++r) {
                normed[r * out + j] = gamma[j] * ((pre[r * out + j] - mean) * inv) + beta[j];
            }
        }
        ref.bn_out.push_back(normed);

        cur.resize(rows * out);
        for (std::size_t i = 0; i < rows * out; ++i) cur[i] = normed[i] > 0.0 ? normed[i] : 0.0;
    }
    ref.final_out = cur;
    return ref;
}

}  // namespace

TEST_CASE("config validation rejects bad dimensions and momentum") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    CHECK_NOTHROW(cfg.validate());

    EncoderConfig zero_in = cfg;
    zero_in.input_dim = 0;
    CHECK_THROWS_AS(zero_in.validate(), ConfigError);

    EncoderConfig zero_hidden = cfg;
    zero_hidden.hidden_dims = {0, 64};
    CHECK_THROWS_AS(zero_hidden.validate(), ConfigError);

    EncoderConfig zero_out = cfg;
    zero_out.output_dim = 0;
    CHECK_THROWS_AS(zero_out.validate(), ConfigError);

    EncoderConfig bad_momentum = cfg;
    bad_momentum.bn_momentum = 0.0;
    CHECK_THROWS_AS(bad_momentum.validate(), ConfigError);

    EncoderConfig bad_eps = cfg;
    bad_eps.bn_epsilon = -1e-6;
    CHECK_THROWS_AS(bad_eps.validate(), ConfigError);

    CHECK(cfg.dims() == std::array<std::size_t, 4>{4, 64, 64, 320});
}

TEST_CASE("init_params: deterministic, bounded by sqrt(6/fan_in), conventional constants") {
    EncoderConfig cfg;
    cfg.input_dim = 6;  // fan_in 6 -> bound sqrt(6/6) = 1 on the first block
    cfg.hidden_dims = {5, 4};
    cfg.output_dim = 3;

    EncoderParams a = init_params(cfg, 7);
    EncoderParams b = init_params(cfg, 7);
    EncoderParams c = init_params(cfg, 8);

    REQUIRE(a.blocks.size() == 3);
    CHECK(a.blocks[0].weight.shape() == ad::Shape{6, 5});
    CHECK(a.blocks[1].weight.shape() == ad::Shape{5, 4});
    CHECK(a.blocks[2].weight.shape() == ad::Shape{4, 3});

    // Same seed reproduces every tensor exactly; a different seed does not.
    bool all_equal = true;
    bool any_diff_seed_differs = false;
    for (std::size_t i = 0; i < 3; ++i) {
        all_equal = all_equal && a.blocks[i].weight.data() == b.blocks[i].weight.data();
        any_diff_seed_differs =
            any_diff_seed_differs || a.blocks[i].weight.data() != c.blocks[i].weight.data();
    }
    CHECK(all_equal);
    CHECK(any_diff_seed_differs);

    for (double w : a.blocks[0].weight.data()) {
        CHECK(std::abs(w) <= 1.0);
    }
    const double bound1 = std::sqrt(6.0 / 5.0);
    for (double w : a.blocks[1].weight.data()) {
        CHECK(std::abs(w) <= bound1);
    }

    for (const EncoderBlock& block : a.blocks) {
        for (double v : block.bias.data()) CHECK(v == 0.0);
        for (double v : block.gamma.data()) CHECK(v == 1.0);
        for (double v : block.beta.data()) CHECK(v == 0.0);
        for (double v : block.bn_state.running_mean) CHECK(v == 0.0);
        for (double v : block.bn_state.running_var) CHECK(v == 1.0);
        CHECK(block.weight.requires_grad());
        CHECK(block.bias.requires_grad());
        CHECK(block.gamma.requires_grad());
        CHECK(block.beta.requires_grad());
    }

    // Weights are actually random, not a constant fill.
    const std::vector<double>& w0 = a.blocks[0].weight.data();
    bool varied = false;
    for (double w : w0) varied = varied || w != w0[0];
    CHECK(varied);
}

TEST_CASE("parameter_refs enumerates twelve tensors in block order") {
    EncoderConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dims = {4, 5};
    cfg.output_dim = 2;
    EncoderParams params = init_params(cfg, 1);
    auto refs = parameter_refs(params);
    REQUIRE(refs.size() == 12);
    CHECK(refs[0].first == "block0.weight");
    CHECK(refs[1].first == "block0.bias");
    CHECK(refs[2].first == "block0.gamma");
    CHECK(refs[3].first == "block0.beta");
    CHECK(refs[4].first == "block1.weight");
    CHECK(refs[11].first == "block2.beta");
    CHECK(refs[0].second == &params.blocks[0].weight);
    CHECK(refs[11].second == &params.blocks[2].beta);
}

TEST_CASE("constructed identity configuration passes non-negative input through unchanged") {
    EncoderConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dims = {3, 3};
    cfg.output_dim = 3;
    cfg.bn_epsilon = 0.0;  // eval stats (0,1) then normalize by exactly 1

    EncoderParams params;
    for (std::size_t b = 0; b < 3; ++b) {
        std::vector<double> eye(9, 0.0);
        for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
        params.blocks.push_back({ad::Tensor::from_data({3, 3}, std::move(eye), true),
                                 ad::Tensor::full({3}, 0.0, true),
                                 ad::Tensor::full({3}, 1.0, true),
                                 ad::Tensor::full({3}, 0.0, true),
                                 ad::BatchNormState::fresh(3)});
    }

    ad::Tensor x = ad::Tensor::from_data({2, 2, 3}, {0.0, 0.5, 1.0, 2.0, 0.25, 3.0,
                                                     0.75, 0.0, 1.5, 4.0, 0.125, 2.5});
    ad::Graph g;
    ad::Tensor z = encode(g, x, params, cfg, ad::BatchNormMode::eval);
    CHECK(z.shape() == ad::Shape{2, 2, 3});
    CHECK(z.data() == x.data());
}

TEST_CASE("output shape follows the configured widths") {
    EncoderConfig cfg;
    cfg.input_dim = 7;
    cfg.output_dim = 32;  // compact preset
    EncoderParams params = init_params(cfg, 3);
    Rng rng(11);
    ad::Tensor x = random_tensor(rng, {2, 5, 7});
    ad::Graph g;
    ad::Tensor z = encode(g, x, params, cfg, ad::BatchNormMode::train);
    CHECK(z.shape() == ad::Shape{2, 5, 32});
}

TEST_CASE("eval mode is a pure function: bit-identical output, untouched statistics") {
    EncoderConfig cfg;
    cfg.input_dim = 5;
    cfg.hidden_dims = {6, 7};
    cfg.output_dim = 4;
    EncoderParams params = init_params(cfg, 21);
    Rng rng(22);
    ad::Tensor x = random_tensor(rng, {3, 4, 5});

    const std::vector<double> mean_before = params.blocks[0].bn_state.running_mean;
    ad::Graph g1;
    ad::Tensor z1 = encode(g1, x, params, cfg, ad::BatchNormMode::eval);
    ad::Graph g2;
    ad::Tensor z2 = encode(g2, x, params, cfg, ad::BatchNormMode::eval);

    REQUIRE(z1.size() == z2.size());
    CHECK(std::memcmp(z1.data().data(), z2.data().data(), z1.size() * sizeof(double)) == 0);
    CHECK(params.blocks[0].bn_state.running_mean == mean_before);
    CHECK(params.blocks[0].bn_state.running_var ==
          std::vector<double>(cfg.hidden_dims[0], 1.0));
}

TEST_CASE("train mode folds batch statistics into the running state") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden_dims = {5, 6};
    cfg.output_dim = 3;
    EncoderParams params = init_params(cfg, 5);
    Rng rng(6);
    ad::Tensor x = random_tensor(rng, {2, 6, 4});

    ad::Graph g;
    encode(g, x, params, cfg, ad::BatchNormMode::train);
    for (const EncoderBlock& block : params.blocks) {
        bool mean_moved = false;
        for (double v : block.bn_state.running_mean) mean_moved = mean_moved || v != 0.0;
        CHECK(mean_moved);
        for (double v : block.bn_state.running_var) CHECK(v > 0.0);
    }
}

TEST_CASE("timestep equivariance in eval mode: permuting T permutes Z identically") {
    EncoderConfig cfg;
    cfg.input_dim = 5;
    cfg.hidden_dims = {8, 8};
    cfg.output_dim = 6;
    EncoderParams params = init_params(cfg, 31);
    Rng rng(32);
    const std::size_t B = 2, T = 4, D = 5;
    ad::Tensor x = random_tensor(rng, {B, T, D});

    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    std::vector<double> permuted(B * T * D);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t d = 0; d < D; ++d) {
                permuted[(b * T + t) * D + d] = x.data()[(b * T + perm[t]) * D + d];
            }
        }
    }
    ad::Tensor xp = ad::Tensor::from_data({B, T, D}, std::move(permuted));

    ad::Graph g1, g2;
    ad::Tensor z = encode(g1, x, params, cfg, ad::BatchNormMode::eval);
    ad::Tensor zp = encode(g2, xp, params, cfg, ad::BatchNormMode::eval);
    const std::size_t d_out = cfg.output_dim;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t k = 0; k < d_out; ++k) {
                CHECK(zp.value_at((b * T + t) * d_out + k) ==
                      z.value_at((b * T + perm[t]) * d_out + k));
            }
        }
    }
}

TEST_CASE("forward pass matches a plain-loop reference, including per-block batch norm stats") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden_dims = {6, 5};
    cfg.output_dim = 3;
    // A sizeable epsilon shifts the normalized variance to var/(var+eps);
    // keep it tiny here so the stats land on (0, 1) to tight tolerance.
    cfg.bn_epsilon = 1e-10;
    EncoderParams params = init_params(cfg, 41);
    // Randomize biases so the reference exercises the bias path too.
    Rng rng(42);
    for (EncoderBlock& block : params.blocks) {
        std::vector<double> bias(block.bias.size());
        for (double& v : bias) v = 2.0 * rng.uniform01() - 1.0;
        block.bias = ad::Tensor::from_data(block.bias.shape(), std::move(bias), true);
    }

    const std::size_t B = 3, T = 5;
    ad::Tensor x = random_tensor(rng, {B, T, cfg.input_dim}, 2.0);
    RefForward ref = reference_forward(x.data(), B * T, cfg, params);

    // Same-seed params and fresh states: encode must reproduce the reference.
    EncoderParams run = init_params(cfg, 41);
    for (std::size_t b = 0; b < 3; ++b) run.blocks[b].bias = params.blocks[b].bias;
    ad::Graph g;
    ad::Tensor z = encode(g, x, run, cfg, ad::BatchNormMode::train);
    REQUIRE(z.size() == ref.final_out.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        CHECK(std::abs(z.value_at(i) - ref.final_out[i]) < 1e-12);
    }

    // Batch-norm outputs sit at gamma=1, beta=0 here, so they are the
    // normalized activations: per-channel mean 0 and population variance 1.
    const std::size_t rows = B * T;
    const auto dims = cfg.dims();
    for (std::size_t blk = 0; blk < 3; ++blk) {
        const std::size_t width = dims[blk + 1];
        for (std::size_t c = 0; c < width; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < rows; ++r) mean += ref.bn_out[blk][r * width + c];
            mean /= static_cast<double>(rows);
            double var = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double d = ref.bn_out[blk][r * width + c] - mean;
                var += d * d;
            }
            var /= static_cast<double>(rows);
            CHECK(std::abs(mean) < 1e-9);
            CHECK(std::abs(var - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("gradient of mean(encode) matches finite differences for every parameter") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    cfg.hidden_dims = {5, 6};
    cfg.output_dim = 3;
    const EncoderParams base = init_params(cfg, 51);
    Rng rng(52);
    ad::Tensor x = random_tensor(rng, {2, 3, 4}, 1.5);

    auto refs_of = [](EncoderParams& p) { return parameter_refs(p); };
    EncoderParams probe_layout = init_params(cfg, 51);
    auto names = refs_of(probe_layout);

    for (std::size_t i = 0; i < names.size(); ++i) {
        ad::ScalarFn f = [&, i](ad::Graph& g, const ad::Tensor& p) {
            EncoderParams local = base;  // fresh running stats every probe
            auto slots = parameter_refs(local);
            *slots[i].second = p;
            ad::Tensor z = encode(g, x, local, cfg, ad::BatchNormMode::train);
            return ad::reduce(g, z, ad::ReduceKind::mean);
        };
        const double err = ad::finite_diff_check(f, *names[i].second, 1e-5);
        INFO("parameter: " << names[i].first);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("input gradient also passes finite differences") {
    EncoderConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dims = {4, 4};
    cfg.output_dim = 2;
    const EncoderParams base = init_params(cfg, 61);
    Rng rng(62);
    ad::Tensor x = random_tensor(rng, {2, 3, 3}, 1.5);

    ad::ScalarFn f = [&](ad::Graph& g, const ad::Tensor& probe) {
        EncoderParams local = base;
        ad::Tensor z = encode(g, probe, local, cfg, ad::BatchNormMode::train);
        return ad::reduce(g, z, ad::ReduceKind::mean);
    };
    CHECK(ad::finite_diff_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("dimension and mode preconditions are enforced") {
    EncoderConfig cfg;
    cfg.input_dim = 4;
    EncoderParams params = init_params(cfg, 1);
    Rng rng(2);

    ad::Graph g;
    CHECK_THROWS_AS(encode(g, random_tensor(rng, {2, 3}), params, cfg, ad::BatchNormMode::eval),
                    DimensionError);
    CHECK_THROWS_AS(
        encode(g, random_tensor(rng, {2, 3, 5}), params, cfg, ad::BatchNormMode::eval),
        DimensionError);
    // A single flattened timestep cannot produce batch statistics.
    CHECK_THROWS_AS(
        encode(g, random_tensor(rng, {1, 1, 4}), params, cfg, ad::BatchNormMode::train),
        DomainError);
    CHECK_NOTHROW(encode(g, random_tensor(rng, {1, 1, 4}), params, cfg, ad::BatchNormMode::eval));

    EncoderParams two_blocks = init_params(cfg, 1);
    two_blocks.blocks.pop_back();
    ad::Graph g2;
    CHECK_THROWS_AS(
        encode(g2, random_tensor(rng, {1, 2, 4}), two_blocks, cfg, ad::BatchNormMode::eval),
        ContractError);
}
