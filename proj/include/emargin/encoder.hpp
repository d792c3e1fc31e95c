#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emargin/autodiff.hpp"
#include "emargin/tensor.hpp"

namespace emargin {

// Pointwise (kernel-size-1) convolutional encoder: three blocks of
// linear map + batch norm + ReLU applied independently at every timestep.
struct EncoderConfig {
    std::size_t input_dim = 0;
    std::array<std::size_t, 2> hidden_dims = {64, 64};  // first two block widths
    std::size_t output_dim = 320;                       // third block width
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    void validate() const;  // ConfigError on non-positive dims or bad momentum
    // Widths of the four layer boundaries: D, h1, h2, d.
    std::array<std::size_t, 4> dims() const;
};

struct EncoderBlock {
    ad::Tensor weight;  // in x out
    ad::Tensor bias;    // out
    ad::Tensor gamma;   // out
    ad::Tensor beta;    // out
    ad::BatchNormState bn_state;
};

struct EncoderParams {
    std::vector<EncoderBlock> blocks;  // exactly three
};

// Named handles onto every trainable tensor, in a fixed declaration order
// (block0.weight, block0.bias, block0.gamma, block0.beta, block1..). The
// optimizer and the checkpoint format both follow this order.
std::vector<std::pair<std::string, ad::Tensor*>> parameter_refs(EncoderParams& params);

// Weights ~ uniform(-sqrt(6/fan_in), sqrt(6/fan_in)); biases and beta 0;
// gamma 1; running statistics (0, 1). Deterministic in the seed.
EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed);

// B x T x D -> B x T x d. Train mode pools batch-norm statistics over the
// flattened B*T axis and folds them into the running state; eval mode is a
// pure function of (input, params).
ad::Tensor encode(ad::Graph& g, const ad::Tensor& input, EncoderParams& params,
                  const EncoderConfig& cfg, ad::BatchNormMode mode);

}  // namespace emargin
