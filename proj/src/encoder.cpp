#include "emargin/encoder.hpp"

#include <cmath>
#include <vector>

#include "emargin/errors.hpp"
#include "emargin/rng.hpp"

namespace emargin {

void EncoderConfig::validate() const {
    if (input_dim == 0) throw ConfigError("encoder input_dim must be positive");
    if (hidden_dims[0] == 0 || hidden_dims[1] == 0)
        throw ConfigError("encoder hidden dims must be positive");
    if (output_dim == 0) throw ConfigError("encoder output_dim must be positive");
    if (!(bn_momentum > 0.0) || bn_momentum > 1.0)
        throw ConfigError("batch norm momentum must lie in (0, 1]");
    if (!(bn_epsilon >= 0.0)) throw ConfigError("batch norm epsilon must be non-negative");
}

std::array<std::size_t, 4> EncoderConfig::dims() const {
    return {input_dim, hidden_dims[0], hidden_dims[1], output_dim};
}

std::vector<std::pair<std::string, ad::Tensor*>> parameter_refs(EncoderParams& params) {
    std::vector<std::pair<std::string, ad::Tensor*>> refs;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        EncoderBlock& block = params.blocks[b];
        const std::string prefix = "block" + std::to_string(b) + ".";
        refs.emplace_back(prefix + "weight", &block.weight);
        refs.emplace_back(prefix + "bias", &block.bias);
        refs.emplace_back(prefix + "gamma", &block.gamma);
        refs.emplace_back(prefix + "beta", &block.beta);
    }
    return refs;
}

EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const auto dims = cfg.dims();
    EncoderParams params;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t fan_in = dims[b];
        const std::size_t fan_out = dims[b + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) v = (2.0 * rng.uniform01() - 1.0) * bound;
        EncoderBlock block{
            ad::Tensor::from_data({fan_in, fan_out}, std::move(w), true),
            ad::Tensor::full({fan_out}, 0.0, true),
            ad::Tensor::full({fan_out}, 1.0, true),
            ad::Tensor::full({fan_out}, 0.0, true),
            ad::BatchNormState::fresh(fan_out),
        };
        params.blocks.push_back(std::move(block));
    }
    return params;
}

ad::Tensor encode(ad::Graph& g, const ad::Tensor& input, EncoderParams& params,
                  const EncoderConfig& cfg, ad::BatchNormMode mode) {
    cfg.validate();
    if (input.rank() != 3)
        throw DimensionError("encoder input must be rank 3 (batch x time x feature), got " +
                             ad::shape_str(input.shape()));
    if (params.blocks.size() != 3)
        throw ContractError("encoder expects exactly three parameter blocks");
    const std::size_t batch = input.shape()[0];
    const std::size_t steps = input.shape()[1];
    if (input.shape()[2] != cfg.input_dim)
        throw DimensionError("encoder configured for feature dim " +
                             std::to_string(cfg.input_dim) + " but input has " +
                             std::to_string(input.shape()[2]));
    const std::size_t rows = batch * steps;
    if (mode == ad::BatchNormMode::train && rows < 2)
        throw DomainError("training the encoder needs at least two timesteps in total");

    const auto dims = cfg.dims();
    ad::Tensor ones = ad::Tensor::full({rows, 1}, 1.0);
    ad::Tensor cur = ad::reshape(g, input, {rows, dims[0]});
    for (std::size_t b = 0; b < 3; ++b) {
        EncoderBlock& block = params.blocks[b];
        const std::size_t width = dims[b + 1];
        ad::Tensor lin = ad::matmul(g, cur, block.weight);
        ad::Tensor shift = ad::matmul(g, ones, ad::reshape(g, block.bias, {1, width}));
        ad::Tensor pre = ad::add(g, lin, shift);
        ad::Tensor normed = ad::batchnorm(g, pre, block.gamma, block.beta, block.bn_state,
                                          mode, cfg.bn_momentum, cfg.bn_epsilon);
        cur = ad::relu(g, normed);
    }
    return ad::reshape(g, cur, {batch, steps, dims[3]});
}

}  // namespace emargin
