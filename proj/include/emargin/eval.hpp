#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emargin/encoder.hpp"
#include "emargin/signal.hpp"
#include "emargin/tensor.hpp"
#include "emargin/trainer.hpp"

namespace emargin {

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct KMeansResult {
    std::vector<std::size_t> assignments;  // n entries in [0, k)
    ad::Tensor centroids;                  // k x d
    double inertia = 0.0;                  // sum of squared distances
    std::size_t iterations = 0;            // assignment phases executed
    std::vector<double> inertia_trace;     // inertia after each assignment phase
};

// k-means++ seeding followed by Lloyd iterations until the assignment reaches
// a fixpoint or max_iters. An emptied cluster is re-seeded to the point
// farthest from its current centroid. Deterministic in (points, k, seed).
KMeansResult kmeans(const ad::Tensor& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters = 100);

// Mean over clusters of the worst (S_i + S_j) / ||c_i - c_j|| ratio, with S
// the mean member distance to the centroid. Coincident centroids make the
// ratio infinite, so the index degenerates to the +infinity sentinel.
double davies_bouldin(const ad::Tensor& points, const std::vector<std::size_t>& assignments);

// Mean over points of (b - a) / max(a, b); a is the mean distance to
// same-cluster points (excluding self, 0 for singletons by convention), b the
// smallest mean distance to another cluster.
double silhouette(const ad::Tensor& points, const std::vector<std::size_t>& assignments);

enum class AssignmentSource { kmeans, labels };

struct ClusterReport {
    double dbi = 0.0;
    double silhouette = 0.0;
    std::size_t k = 0;
    AssignmentSource assignment_source = AssignmentSource::kmeans;
    std::uint64_t seed = 0;
};

// Both clustering metrics over one partition of `steps`. Source `kmeans`
// clusters the points (k = 0 infers k from the distinct labels); source
// `labels` scores the ground-truth partition directly. An explicit k that
// contradicts the labeled class count raises ConfigError.
ClusterReport cluster_metrics(const LabeledSteps& steps, std::size_t k, AssignmentSource source,
                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Linear probe (frozen backbone)
// ---------------------------------------------------------------------------

struct ProbeConfig {
    double learning_rate = 0.01;
    std::size_t epochs = 500;
    AdamWConfig adamw;

    void validate() const;
};

struct LinearProbe {
    ad::Tensor weight;              // d x K
    ad::Tensor bias;                // K
    std::vector<int> classes;       // sorted class ids, K entries
    std::vector<double> loss_trace; // cross-entropy before each epoch's step
};

// Multinomial logistic regression on frozen embeddings: zero-initialized,
// full-batch AdamW on the softmax cross-entropy. The embeddings are never
// modified.
LinearProbe fit_probe(const LabeledSteps& train, const ProbeConfig& cfg = {});

// Argmax class for each row of `points` (ties go to the smallest class id).
std::vector<int> probe_predict(const LinearProbe& probe, const ad::Tensor& points);

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct ClassScore {
    int label = 0;
    std::size_t support = 0;  // truth count
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct ProbeReport {
    double accuracy = 0.0;
    double precision_macro = 0.0;
    double precision_weighted = 0.0;
    double recall_macro = 0.0;
    double recall_weighted = 0.0;
    double f1_macro = 0.0;
    double f1_weighted = 0.0;
    std::vector<ClassScore> per_class;  // over the union of predicted/true ids
};

// Exact-match accuracy plus per-class precision/recall/F1 (0/0 counts as 0)
// aggregated both macro (unweighted class mean) and weighted (by truth
// support). Classes are the union of ids seen in either vector.
ProbeReport classification_metrics(const std::vector<int>& predictions,
                                   const std::vector<int>& truth);

// ---------------------------------------------------------------------------
// Embedding helpers and export
// ---------------------------------------------------------------------------

// Eval-mode encoding of a whole batch; pure in (batch, params, cfg).
ad::Tensor embed_batch(const SequenceBatch& batch, const EncoderParams& params,
                       const EncoderConfig& cfg);

// Same, flattened to (B*T) x d with the per-step labels carried over.
LabeledSteps embed_steps(const SequenceBatch& batch, const EncoderParams& params,
                         const EncoderConfig& cfg);

// CSV with header `seq_id,t,label,dim_0..dim_{d-1}`, one row per timestep,
// 17 significant digits (full f64 round trip). Unlabeled batches write -1.
void export_embeddings(const ad::Tensor& embeddings, const std::vector<int>& labels,
                       const std::string& path);

}  // namespace emargin
