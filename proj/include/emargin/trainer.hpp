#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emargin/encoder.hpp"
#include "emargin/loss.hpp"
#include "emargin/signal.hpp"
#include "emargin/tensor.hpp"

namespace emargin {

enum class LossKind { emargin, infonce };

std::string loss_kind_name(LossKind kind);
LossKind loss_kind_from(const std::string& name);  // ConfigError on unknown name

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

struct TrainConfig {
    std::size_t batch_size = 8;
    double learning_rate = 0.001;
    // 0 means "derive from the training-set size" via iteration_budget.
    std::size_t iterations = 0;
    LossKind loss_kind = LossKind::emargin;
    LossConfig loss;
    std::uint64_t seed = 1;
    AdamWConfig adamw;
    // Global L2-norm gradient cap; 0 disables clipping (the default).
    double grad_clip = 0.0;

    void validate() const;  // ConfigError on non-positive rates/sizes
};

// 200 steps for training sets below 160,000 timestep instances, 600 above.
std::size_t iteration_budget(std::size_t train_instances);

// First and second Adam moments, aligned with a parameter_refs ordering.
struct OptimizerState {
    std::vector<ad::Tensor> m;
    std::vector<ad::Tensor> v;

    static OptimizerState fresh(const std::vector<std::pair<std::string, ad::Tensor*>>& params);
};

// One decoupled-weight-decay Adam update, in place:
//   p <- p - lr * mhat/(sqrt(vhat) + eps) - lr * weight_decay * p
// with bias-corrected moments at step index t (1-based). A non-finite
// gradient raises NumericError naming the parameter.
void adamw_step(const std::vector<std::pair<std::string, ad::Tensor*>>& params,
                const std::vector<ad::Tensor>& grads, OptimizerState& moments, std::size_t t,
                double learning_rate, const AdamWConfig& cfg);

struct Checkpoint {
    std::uint32_t version = 1;
    EncoderConfig encoder;
    LossKind loss_kind = LossKind::emargin;
    LossConfig loss_config;
    std::uint64_t seed = 1;
    std::size_t iteration = 0;
    EncoderParams params;
    OptimizerState moments;
    std::vector<double> loss_trace;  // one entry per optimizer step
};

// Runs cfg.iterations optimizer steps, each on a batch of sequences sampled
// with replacement (seed-deterministic). When `checkpoint_path` is non-empty
// the final state is persisted there, and a partial checkpoint is flushed if
// a step aborts.
Checkpoint train(const SequenceBatch& data, const EncoderConfig& encoder_cfg,
                 const TrainConfig& cfg, const std::string& checkpoint_path = "");

// Checkpoint files ("EMGN"): magic, u32 version, u64 JSON-header length,
// JSON header, then f32 little-endian arrays (parameters, running batch-norm
// statistics, optimizer moments) in the order the header declares. Writes are
// atomic; parameters therefore round-trip at f32 precision.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace emargin
