#pragma once

#include <cstddef>
#include <vector>

#include "emargin/autodiff.hpp"
#include "emargin/tensor.hpp"

namespace emargin {

// Which data-space pairs get a pseudo-label. `pairwise` applies the threshold
// rule to every pair (the default); `adjacent_only` labels only (t, t+1) and
// lets every other similarity pass through the margin transform untouched.
enum class PseudoLabelScope { adjacent_only, pairwise };

struct LossConfig {
    double temperature = 0.1;
    double threshold = 0.4;
    double margin = 5.0;
    PseudoLabelScope pseudo_label_scope = PseudoLabelScope::pairwise;
    double cosine_epsilon = 1e-12;
    // Debug switch: skip the margin transform entirely, reducing the loss to
    // plain InfoNCE on the embedding similarities.
    bool transform_identity = false;

    void validate() const;  // ConfigError on non-positive temperature/margin/epsilon
};

// Binary pseudo-labels for one sequence. `values` is the T x T 0/1 matrix;
// `active` marks where the label rule applies (all ones for pairwise scope,
// the two off-diagonals for adjacent_only). Both are constants: gradients
// never flow through data-space labels.
struct PseudoLabelMatrix {
    ad::Tensor values;
    ad::Tensor active;
    PseudoLabelScope scope = PseudoLabelScope::pairwise;
};

// dot(u, v) / (max(|u|, eps) * max(|v|, eps)), clamped to [-1, 1].
// Zero vectors therefore yield similarity 0.
double cosine_sim(const std::vector<double>& u, const std::vector<double>& v, double epsilon);

// Threshold rule on data-space cosine similarity: label 0 where
// sim > threshold, 1 otherwise (ties are 1). `steps` is T x D, T >= 2.
PseudoLabelMatrix pseudo_labels(const ad::Tensor& steps, const LossConfig& cfg);

// Full T x T cosine-similarity matrix of the embedding rows, differentiable
// w.r.t. `embeddings` (T x d). Entries are clamped to [-1, 1].
ad::Tensor pairwise_cosine_matrix(ad::Graph& g, const ad::Tensor& embeddings, double epsilon);

// Elementwise margin transform where labels apply:
//   label 0: 1/2 * M^2
//   label 1: 1/2 * max(0, margin - M)^2
// Inactive entries (adjacent_only scope) keep their raw similarity.
ad::Tensor margin_transform(ad::Graph& g, const ad::Tensor& similarities,
                            const PseudoLabelMatrix& labels, double margin);

// One anchor's contrastive term over a row of (transformed) similarities:
// -log of exp(row[t+1]/tau) over the sum of exp(row[k]/tau) for k not in
// {t, t+1}. Requires at least 3 entries so the denominator is non-empty.
ad::Tensor infonce_term(ad::Graph& g, const ad::Tensor& row, std::size_t anchor,
                        double temperature);

// Mean of infonce_term over anchors t = 0..T-2 for one T x T matrix.
ad::Tensor infonce_sequence_loss(ad::Graph& g, const ad::Tensor& matrix, double temperature);

// The full objective: per sequence, pseudo-labels from the data steps X
// (B x T x D), margin-transformed similarity matrix from the embeddings Z
// (B x T x d), contrastive terms averaged over anchors, then averaged over
// the batch. Negatives never cross sequence boundaries.
ad::Tensor emargin_loss(ad::Graph& g, const ad::Tensor& data_steps, const ad::Tensor& embeddings,
                        const LossConfig& cfg);

// Baseline: the same averaging over plain (untransformed) cosine
// similarities of Z.
ad::Tensor plain_infonce_loss(ad::Graph& g, const ad::Tensor& embeddings, double temperature);

}  // namespace emargin
