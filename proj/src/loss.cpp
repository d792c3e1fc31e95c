#include "emargin/loss.hpp"

#include <cmath>
#include <string>

#include "emargin/errors.hpp"

namespace emargin {

using ad::Graph;
using ad::ReduceKind;
using ad::Shape;
using ad::Tensor;

namespace {

constexpr double kExcluded = -1e30;  // additive mask that zeroes a softmax slot

// Slice sequence `b` out of a B x T x D constant without touching the tape.
Tensor sequence_slice(const Tensor& batch, std::size_t b) {
    const std::size_t T = batch.shape()[1];
    const std::size_t D = batch.shape()[2];
    const std::vector<double>& flat = batch.data();
    std::vector<double> rows(flat.begin() + static_cast<std::ptrdiff_t>(b * T * D),
                             flat.begin() + static_cast<std::ptrdiff_t>((b + 1) * T * D));
    return Tensor::from_data({T, D}, std::move(rows));
}

void check_sequence_inputs(const Tensor& data_steps, const Tensor& embeddings) {
    if (data_steps.rank() != 3 || embeddings.rank() != 3) {
        throw DimensionError("expected B x T x D data and B x T x d embeddings, got " +
                             ad::shape_str(data_steps.shape()) + " and " +
                             ad::shape_str(embeddings.shape()));
    }
    if (data_steps.shape()[0] != embeddings.shape()[0] ||
        data_steps.shape()[1] != embeddings.shape()[1]) {
        throw DimensionError("data and embeddings disagree on batch or sequence length: " +
                             ad::shape_str(data_steps.shape()) + " vs " +
                             ad::shape_str(embeddings.shape()));
    }
}

}  // namespace

void LossConfig::validate() const {
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (!(margin > 0.0)) {
        throw ConfigError("margin must be positive");
    }
    if (!(cosine_epsilon > 0.0)) {
        throw ConfigError("cosine_epsilon must be positive");
    }
}

double cosine_sim(const std::vector<double>& u, const std::vector<double>& v, double epsilon) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine_sim on vectors of length " + std::to_string(u.size()) +
                             " and " + std::to_string(v.size()));
    }
    double dot = 0.0;
    double nu = 0.0;
    double nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    const double denom = std::max(std::sqrt(nu), epsilon) * std::max(std::sqrt(nv), epsilon);
    const double sim = dot / denom;
    return std::min(1.0, std::max(-1.0, sim));
}

PseudoLabelMatrix pseudo_labels(const Tensor& steps, const LossConfig& cfg) {
    cfg.validate();
    if (steps.rank() != 2 || steps.shape()[0] < 2) {
        throw DimensionError("pseudo_labels expects T x D steps with T >= 2, got " +
                             ad::shape_str(steps.shape()));
    }
    const std::size_t T = steps.shape()[0];
    const std::size_t D = steps.shape()[1];
    const std::vector<double>& flat = steps.data();

    auto row = [&](std::size_t t) {
        return std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(t * D),
                                   flat.begin() + static_cast<std::ptrdiff_t>((t + 1) * D));
    };

    std::vector<double> values(T * T, 0.0);
    std::vector<double> active(T * T, 0.0);
    if (cfg.pseudo_label_scope == PseudoLabelScope::pairwise) {
        active.assign(T * T, 1.0);
        for (std::size_t t = 0; t < T; ++t) {
            const std::vector<double> xt = row(t);
            for (std::size_t k = t; k < T; ++k) {
                const double sim = cosine_sim(xt, row(k), cfg.cosine_epsilon);
                const double label = sim > cfg.threshold ? 0.0 : 1.0;
                values[t * T + k] = label;
                values[k * T + t] = label;
            }
        }
    } else {
        for (std::size_t t = 0; t + 1 < T; ++t) {
            const double sim = cosine_sim(row(t), row(t + 1), cfg.cosine_epsilon);
            const double label = sim > cfg.threshold ? 0.0 : 1.0;
            values[t * T + (t + 1)] = label;
            values[(t + 1) * T + t] = label;
            active[t * T + (t + 1)] = 1.0;
            active[(t + 1) * T + t] = 1.0;
        }
    }

    PseudoLabelMatrix result;
    result.values = Tensor::from_data({T, T}, std::move(values));
    result.active = Tensor::from_data({T, T}, std::move(active));
    result.scope = cfg.pseudo_label_scope;
    return result;
}

Tensor pairwise_cosine_matrix(Graph& g, const Tensor& embeddings, double epsilon) {
    if (embeddings.rank() != 2 || embeddings.shape()[0] < 2) {
        throw DimensionError("pairwise_cosine_matrix expects T x d embeddings with T >= 2, got " +
                             ad::shape_str(embeddings.shape()));
    }
    const std::size_t T = embeddings.shape()[0];
    const Tensor eps = Tensor::scalar(epsilon);
    const Tensor one = Tensor::scalar(1.0);

    // Row norms with the epsilon floor: max(|z|, eps) = relu(|z| - eps) + eps.
    const Tensor sumsq = ad::reduce(g, ad::mul(g, embeddings, embeddings), ReduceKind::sum, 1);
    const Tensor norms = ad::add(g, ad::relu(g, ad::sub(g, ad::sqrt(g, sumsq), eps)), eps);
    const Tensor denom = ad::matmul(g, ad::reshape(g, norms, {T, 1}),
                                    ad::reshape(g, norms, {1, T}));
    const Tensor dots = ad::matmul(g, embeddings, ad::transpose(g, embeddings));
    const Tensor raw = ad::divide(g, dots, denom);

    // Clamp to [-1, 1]: min(x, 1) = 1 - relu(1 - x), then max(., -1).
    const Tensor capped = ad::sub(g, one, ad::relu(g, ad::sub(g, one, raw)));
    return ad::sub(g, ad::relu(g, ad::add(g, capped, one)), one);
}

Tensor margin_transform(Graph& g, const Tensor& similarities, const PseudoLabelMatrix& labels,
                        double margin) {
    if (!(margin > 0.0)) {
        throw ConfigError("margin must be positive");
    }
    if (similarities.shape() != labels.values.shape()) {
        throw DimensionError("similarity and label shapes disagree: " +
                             ad::shape_str(similarities.shape()) + " vs " +
                             ad::shape_str(labels.values.shape()));
    }
    const Tensor half = Tensor::scalar(0.5);
    const Tensor one = Tensor::scalar(1.0);

    const Tensor squared = ad::mul(g, half, ad::mul(g, similarities, similarities));
    const Tensor hinge =
        ad::clamp_floor_zero(g, ad::sub(g, Tensor::scalar(margin), similarities));
    const Tensor hinged = ad::mul(g, half, ad::mul(g, hinge, hinge));
    const Tensor transformed =
        ad::add(g, ad::mul(g, ad::sub(g, one, labels.values), squared),
                ad::mul(g, labels.values, hinged));

    // Where no label applies, the raw similarity passes through.
    return ad::add(g, ad::mul(g, labels.active, transformed),
                   ad::mul(g, ad::sub(g, one, labels.active), similarities));
}

Tensor infonce_term(Graph& g, const Tensor& row, std::size_t anchor, double temperature) {
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (row.rank() != 1) {
        throw DimensionError("infonce_term expects a similarity row, got " +
                             ad::shape_str(row.shape()));
    }
    const std::size_t T = row.size();
    if (T < 3) {
        throw DomainError("contrastive term needs at least 3 entries, got " + std::to_string(T));
    }
    if (anchor + 1 >= T) {
        throw ContractError("anchor " + std::to_string(anchor) + " has no successor in a row of " +
                            std::to_string(T));
    }
    std::vector<double> mask(T, 0.0);
    mask[anchor] = kExcluded;
    mask[anchor + 1] = kExcluded;
    std::vector<double> onehot(T, 0.0);
    onehot[anchor + 1] = 1.0;

    const Tensor scaled = ad::divide(g, row, Tensor::scalar(temperature));
    const Tensor denominator =
        ad::log_sum_exp(g, ad::add(g, scaled, Tensor::from_data({T}, std::move(mask))), 0);
    const Tensor positive = ad::reduce(
        g, ad::mul(g, scaled, Tensor::from_data({T}, std::move(onehot))), ReduceKind::sum);
    return ad::sub(g, denominator, positive);
}

Tensor infonce_sequence_loss(Graph& g, const Tensor& matrix, double temperature) {
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (matrix.rank() != 2 || matrix.shape()[0] != matrix.shape()[1]) {
        throw DimensionError("infonce_sequence_loss expects a square matrix, got " +
                             ad::shape_str(matrix.shape()));
    }
    const std::size_t T = matrix.shape()[0];
    if (T < 3) {
        throw DomainError("contrastive loss needs T >= 3, got " + std::to_string(T));
    }

    // Row t excludes slots t and t+1 from its denominator and takes t+1 as
    // the positive; the last row carries no anchor and is masked out.
    std::vector<double> mask(T * T, 0.0);
    std::vector<double> positives(T * T, 0.0);
    std::vector<double> selector(T, 0.0);
    for (std::size_t t = 0; t + 1 < T; ++t) {
        mask[t * T + t] = kExcluded;
        mask[t * T + t + 1] = kExcluded;
        positives[t * T + t + 1] = 1.0;
        selector[t] = 1.0;
    }
    mask[(T - 1) * T + (T - 1)] = kExcluded;

    const Tensor scaled = ad::divide(g, matrix, Tensor::scalar(temperature));
    const Tensor denominators =
        ad::log_sum_exp(g, ad::add(g, scaled, Tensor::from_data({T, T}, std::move(mask))), 1);
    const Tensor positive_terms = ad::reduce(
        g, ad::mul(g, scaled, Tensor::from_data({T, T}, std::move(positives))), ReduceKind::sum,
        1);
    const Tensor row_losses = ad::sub(g, denominators, positive_terms);
    const Tensor kept = ad::mul(g, row_losses, Tensor::from_data({T}, std::move(selector)));
    return ad::divide(g, ad::reduce(g, kept, ReduceKind::sum),
                      Tensor::scalar(static_cast<double>(T - 1)));
}

Tensor emargin_loss(Graph& g, const Tensor& data_steps, const Tensor& embeddings,
                    const LossConfig& cfg) {
    cfg.validate();
    check_sequence_inputs(data_steps, embeddings);
    const std::size_t B = data_steps.shape()[0];
    const std::size_t T = data_steps.shape()[1];
    if (B < 1 || T < 3) {
        throw DomainError("loss needs B >= 1 and T >= 3, got B=" + std::to_string(B) +
                          " T=" + std::to_string(T));
    }

    Tensor total = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor z = ad::select_front(g, embeddings, b);
        const Tensor similarities = pairwise_cosine_matrix(g, z, cfg.cosine_epsilon);
        Tensor matrix = similarities;
        if (!cfg.transform_identity) {
            const PseudoLabelMatrix labels = pseudo_labels(sequence_slice(data_steps, b), cfg);
            matrix = margin_transform(g, similarities, labels, cfg.margin);
        }
        total = ad::add(g, total, infonce_sequence_loss(g, matrix, cfg.temperature));
    }
    return ad::divide(g, total, Tensor::scalar(static_cast<double>(B)));
}

Tensor plain_infonce_loss(Graph& g, const Tensor& embeddings, double temperature) {
    if (embeddings.rank() != 3) {
        throw DimensionError("plain_infonce_loss expects B x T x d embeddings, got " +
                             ad::shape_str(embeddings.shape()));
    }
    const std::size_t B = embeddings.shape()[0];
    const std::size_t T = embeddings.shape()[1];
    if (B < 1 || T < 3) {
        throw DomainError("loss needs B >= 1 and T >= 3, got B=" + std::to_string(B) +
                          " T=" + std::to_string(T));
    }
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor z = ad::select_front(g, embeddings, b);
        const Tensor similarities = pairwise_cosine_matrix(g, z, 1e-12);
        total = ad::add(g, total, infonce_sequence_loss(g, similarities, temperature));
    }
    return ad::divide(g, total, Tensor::scalar(static_cast<double>(B)));
}

}  // namespace emargin
