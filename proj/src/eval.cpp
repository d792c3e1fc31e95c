#include "emargin/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "emargin/autodiff.hpp"
#include "emargin/bytes.hpp"
#include "emargin/errors.hpp"
#include "emargin/rng.hpp"

namespace emargin {

namespace {

void check_points(const ad::Tensor& points, const char* who) {
    if (!points.defined() || points.rank() != 2) {
        throw ContractError(std::string(who) + " expects an n x d point matrix");
    }
}

double dist2(const std::vector<double>& x, std::size_t a, const std::vector<double>& c,
             std::size_t b, std::size_t d) {
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[a * d + j] - c[b * d + j];
        sum += diff * diff;
    }
    return sum;
}

// Validates that assignments cover ids 0..k-1 with no empty cluster; returns
// per-cluster sizes.
std::vector<std::size_t> cluster_sizes(std::size_t n, const std::vector<std::size_t>& assign,
                                       const char* who) {
    if (assign.size() != n) {
        throw DimensionError(std::string(who) + ": " + std::to_string(assign.size()) +
                             " assignments for " + std::to_string(n) + " points");
    }
    std::size_t k = 0;
    for (std::size_t a : assign) k = std::max(k, a + 1);
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t a : assign) ++sizes[a];
    for (std::size_t j = 0; j < k; ++j) {
        if (sizes[j] == 0) {
            throw DomainError(std::string(who) + ": cluster " + std::to_string(j) +
                              " is empty");
        }
    }
    return sizes;
}

std::vector<double> cluster_means(const std::vector<double>& x, std::size_t n, std::size_t d,
                                  const std::vector<std::size_t>& assign,
                                  const std::vector<std::size_t>& sizes) {
    std::vector<double> means(sizes.size() * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            means[assign[i] * d + j] += x[i * d + j];
        }
    }
    for (std::size_t c = 0; c < sizes.size(); ++c) {
        for (std::size_t j = 0; j < d; ++j) {
            means[c * d + j] /= static_cast<double>(sizes[c]);
        }
    }
    return means;
}

std::vector<int> distinct_labels(const std::vector<int>& labels) {
    std::set<int> seen(labels.begin(), labels.end());
    return {seen.begin(), seen.end()};
}

}  // namespace

KMeansResult kmeans(const ad::Tensor& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters) {
    check_points(points, "kmeans");
    const std::size_t n = points.shape()[0];
    const std::size_t d = points.shape()[1];
    if (k < 2) throw DomainError("kmeans needs k >= 2");
    if (n < k) {
        throw DomainError("kmeans needs at least k points, got " + std::to_string(n) +
                          " for k = " + std::to_string(k));
    }
    if (max_iters == 0) throw DomainError("kmeans needs max_iters >= 1");
    const std::vector<double>& x = points.data();
    Rng rng(seed);

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance from the nearest chosen centroid.
    std::vector<double> centroids(k * d);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    const std::size_t first = rng.below(n);
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(first * d), d, centroids.begin());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], dist2(x, i, centroids, c - 1, d));
            total += nearest[i];
        }
        std::size_t pick = n - 1;
        if (total > 0.0) {
            const double r = rng.uniform01() * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += nearest[i];
                if (acc > r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.below(n);  // all points coincide with chosen centroids
        }
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(pick * d), d,
                    centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
    }

    KMeansResult result;
    result.assignments.assign(n, 0);
    std::vector<std::size_t> prev;
    bool reseeded = false;
    bool at_fixpoint = false;

    auto assign_all = [&]() {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = dist2(x, i, centroids, 0, d);
            for (std::size_t c = 1; c < k; ++c) {
                const double dd = dist2(x, i, centroids, c, d);
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            result.assignments[i] = best;
            inertia += best_d;
        }
        result.inertia_trace.push_back(inertia);
    };

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        assign_all();
        if (iter > 0 && !reseeded && result.assignments == prev) {
            at_fixpoint = true;
            break;
        }
        prev = result.assignments;

        std::vector<std::size_t> counts(k, 0);
        std::fill(centroids.begin(), centroids.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[result.assignments[i]];
            for (std::size_t j = 0; j < d; ++j) {
                centroids[result.assignments[i] * d + j] += x[i * d + j];
            }
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) {
                    centroids[c * d + j] /= static_cast<double>(counts[c]);
                }
            }
        }
        reseeded = false;
        std::vector<bool> taken(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            // Re-seed to the point farthest from its own centroid.
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (taken[i]) continue;
                const double dd = dist2(x, i, centroids, result.assignments[i], d);
                if (dd > far_d) {
                    far_d = dd;
                    far = i;
                }
            }
            taken[far] = true;
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(far * d), d,
                        centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
            reseeded = true;
        }
    }
    if (!at_fixpoint) {
        assign_all();  // make assignments consistent with the final centroids
    }

    result.centroids = ad::Tensor::from_data({k, d}, std::move(centroids));
    result.inertia = result.inertia_trace.back();
    result.iterations = result.inertia_trace.size();
    return result;
}

double davies_bouldin(const ad::Tensor& points, const std::vector<std::size_t>& assignments) {
    check_points(points, "davies_bouldin");
    const std::size_t n = points.shape()[0];
    const std::size_t d = points.shape()[1];
    const std::vector<double>& x = points.data();
    const std::vector<std::size_t> sizes = cluster_sizes(n, assignments, "davies_bouldin");
    const std::size_t k = sizes.size();
    if (k < 2) throw DomainError("davies_bouldin needs at least 2 clusters");

    const std::vector<double> means = cluster_means(x, n, d, assignments, sizes);
    std::vector<double> scatter(k, 0.0);  // mean member distance to centroid
    for (std::size_t i = 0; i < n; ++i) {
        scatter[assignments[i]] += std::sqrt(dist2(x, i, means, assignments[i], d));
    }
    for (std::size_t c = 0; c < k; ++c) scatter[c] /= static_cast<double>(sizes[c]);

    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (j == i) continue;
            const double between = std::sqrt(dist2(means, i, means, j, d));
            const double ratio = between > 0.0
                                     ? (scatter[i] + scatter[j]) / between
                                     : std::numeric_limits<double>::infinity();
            worst = std::max(worst, ratio);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

double silhouette(const ad::Tensor& points, const std::vector<std::size_t>& assignments) {
    check_points(points, "silhouette");
    const std::size_t n = points.shape()[0];
    const std::size_t d = points.shape()[1];
    const std::vector<double>& x = points.data();
    const std::vector<std::size_t> sizes = cluster_sizes(n, assignments, "silhouette");
    const std::size_t k = sizes.size();
    if (k < 2) throw DomainError("silhouette needs at least 2 clusters");

    double total = 0.0;
    std::vector<double> sum_to(k);
    for (std::size_t i = 0; i < n; ++i) {
        if (sizes[assignments[i]] == 1) continue;  // singleton convention: s = 0
        std::fill(sum_to.begin(), sum_to.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            sum_to[assignments[j]] += std::sqrt(dist2(x, i, x, j, d));
        }
        const std::size_t own = assignments[i];
        const double a = sum_to[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            if (c == own) continue;
            b = std::min(b, sum_to[c] / static_cast<double>(sizes[c]));
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

ClusterReport cluster_metrics(const LabeledSteps& steps, std::size_t k, AssignmentSource source,
                              std::uint64_t seed) {
    if (!steps.data.defined() || steps.count() == 0) {
        throw DomainError("no evaluation points for clustering metrics");
    }
    const std::vector<int> present =
        steps.labels.empty() ? std::vector<int>{} : distinct_labels(steps.labels);
    if (k != 0 && !present.empty() && present.size() != k) {
        throw ConfigError("configured k = " + std::to_string(k) + " but the data carries " +
                          std::to_string(present.size()) + " classes");
    }

    std::vector<std::size_t> assign;
    std::size_t k_used = 0;
    if (source == AssignmentSource::labels) {
        if (steps.labels.empty()) {
            throw ContractError("label-based assignments need labeled steps");
        }
        std::map<int, std::size_t> dense;
        for (std::size_t i = 0; i < present.size(); ++i) dense[present[i]] = i;
        assign.reserve(steps.labels.size());
        for (int label : steps.labels) assign.push_back(dense[label]);
        k_used = present.size();
        if (k_used < 2) throw DomainError("clustering metrics need at least 2 classes");
    } else {
        k_used = k != 0 ? k : present.size();
        if (k_used < 2) {
            throw DomainError("clustering metrics need k >= 2 (got " + std::to_string(k_used) +
                              "; pass k explicitly for unlabeled data)");
        }
        assign = kmeans(steps.data, k_used, seed).assignments;
    }

    ClusterReport report;
    report.dbi = davies_bouldin(steps.data, assign);
    report.silhouette = silhouette(steps.data, assign);
    report.k = k_used;
    report.assignment_source = source;
    report.seed = seed;
    return report;
}

void ProbeConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("probe learning_rate must be positive");
    if (epochs == 0) throw ConfigError("probe epochs must be positive");
    if (!(adamw.epsilon > 0.0)) throw ConfigError("probe adamw epsilon must be positive");
}

LinearProbe fit_probe(const LabeledSteps& train, const ProbeConfig& cfg) {
    cfg.validate();
    if (!train.data.defined() || train.data.rank() != 2) {
        throw ContractError("fit_probe expects an n x d embedding matrix");
    }
    const std::size_t n = train.data.shape()[0];
    const std::size_t d = train.data.shape()[1];
    if (train.labels.size() != n) {
        throw DimensionError("fit_probe: " + std::to_string(train.labels.size()) +
                             " labels for " + std::to_string(n) + " embeddings");
    }
    const std::vector<int> classes = distinct_labels(train.labels);
    if (classes.size() < 2) {
        throw DomainError("linear probe needs at least 2 classes, got " +
                          std::to_string(classes.size()));
    }
    const std::size_t num_classes = classes.size();
    std::map<int, std::size_t> dense;
    for (std::size_t i = 0; i < num_classes; ++i) dense[classes[i]] = i;

    std::vector<double> onehot_data(n * num_classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        onehot_data[i * num_classes + dense[train.labels[i]]] = 1.0;
    }
    const ad::Tensor onehot =
        ad::Tensor::from_data({n, num_classes}, std::move(onehot_data));
    const ad::Tensor ones = ad::Tensor::full({n, 1}, 1.0);

    LinearProbe probe;
    probe.classes = classes;
    probe.weight = ad::Tensor::zeros({d, num_classes}, true);
    probe.bias = ad::Tensor::zeros({num_classes}, true);
    std::vector<std::pair<std::string, ad::Tensor*>> refs = {{"probe.weight", &probe.weight},
                                                             {"probe.bias", &probe.bias}};
    OptimizerState moments = OptimizerState::fresh(refs);
    probe.loss_trace.reserve(cfg.epochs);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        ad::Graph g;
        ad::Tensor logits =
            ad::add(g, ad::matmul(g, train.data, probe.weight),
                    ad::matmul(g, ones, ad::reshape(g, probe.bias, {1, num_classes})));
        ad::Tensor lse = ad::log_sum_exp(g, logits, 1);
        ad::Tensor picked =
            ad::reduce(g, ad::mul(g, logits, onehot), ad::ReduceKind::sum, 1);
        ad::Tensor loss = ad::reduce(g, ad::sub(g, lse, picked), ad::ReduceKind::mean);
        probe.loss_trace.push_back(loss.scalar_value());

        ad::GradientMap grads = g.backward(loss);
        adamw_step(refs, {grads.at(probe.weight), grads.at(probe.bias)}, moments, epoch,
                   cfg.learning_rate, cfg.adamw);
    }
    return probe;
}

std::vector<int> probe_predict(const LinearProbe& probe, const ad::Tensor& points) {
    check_points(points, "probe_predict");
    if (!probe.weight.defined() || probe.weight.rank() != 2) {
        throw ContractError("probe is not fitted");
    }
    const std::size_t n = points.shape()[0];
    const std::size_t d = points.shape()[1];
    const std::size_t num_classes = probe.weight.shape()[1];
    if (probe.weight.shape()[0] != d) {
        throw DimensionError("probe fitted on dim " + std::to_string(probe.weight.shape()[0]) +
                             ", points have dim " + std::to_string(d));
    }
    const std::vector<double>& x = points.data();
    const std::vector<double>& w = probe.weight.data();
    const std::vector<double>& b = probe.bias.data();

    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < num_classes; ++c) {
            double score = b[c];
            for (std::size_t j = 0; j < d; ++j) score += x[i * d + j] * w[j * num_classes + c];
            if (score > best_score) {
                best_score = score;
                best = c;
            }
        }
        out[i] = probe.classes[best];
    }
    return out;
}

ProbeReport classification_metrics(const std::vector<int>& predictions,
                                   const std::vector<int>& truth) {
    if (predictions.size() != truth.size()) {
        throw DimensionError("classification_metrics: " + std::to_string(predictions.size()) +
                             " predictions vs " + std::to_string(truth.size()) + " truths");
    }
    if (truth.empty()) throw DomainError("classification_metrics needs at least one sample");

    std::set<int> ids(truth.begin(), truth.end());
    ids.insert(predictions.begin(), predictions.end());

    ProbeReport report;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (predictions[i] == truth[i]) ++correct;
    }
    report.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());

    const double total = static_cast<double>(truth.size());
    for (int label : ids) {
        std::size_t tp = 0, fp = 0, fn = 0, support = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool predicted = predictions[i] == label;
            const bool actual = truth[i] == label;
            if (actual) ++support;
            if (predicted && actual) ++tp;
            if (predicted && !actual) ++fp;
            if (!predicted && actual) ++fn;
        }
        ClassScore score;
        score.label = label;
        score.support = support;
        score.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp)
                                      : 0.0;
        score.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn)
                                   : 0.0;
        score.f1 = score.precision + score.recall > 0.0
                       ? 2.0 * score.precision * score.recall / (score.precision + score.recall)
                       : 0.0;
        report.per_class.push_back(score);

        report.precision_macro += score.precision;
        report.recall_macro += score.recall;
        report.f1_macro += score.f1;
        const double weight = static_cast<double>(support) / total;
        report.precision_weighted += weight * score.precision;
        report.recall_weighted += weight * score.recall;
        report.f1_weighted += weight * score.f1;
    }
    const double k = static_cast<double>(report.per_class.size());
    report.precision_macro /= k;
    report.recall_macro /= k;
    report.f1_macro /= k;
    return report;
}

ad::Tensor embed_batch(const SequenceBatch& batch, const EncoderParams& params,
                       const EncoderConfig& cfg) {
    if (!batch.data.defined()) throw DomainError("cannot embed an empty batch");
    EncoderParams local = params;  // eval mode never mutates, copy is shallow
    ad::Graph g;
    return encode(g, batch.data, local, cfg, ad::BatchNormMode::eval);
}

LabeledSteps embed_steps(const SequenceBatch& batch, const EncoderParams& params,
                         const EncoderConfig& cfg) {
    ad::Tensor z = embed_batch(batch, params, cfg);
    const std::size_t rows = z.shape()[0] * z.shape()[1];
    LabeledSteps steps;
    steps.data = ad::Tensor::from_data({rows, z.shape()[2]}, z.data());
    steps.labels = batch.labels;
    return steps;
}

void export_embeddings(const ad::Tensor& embeddings, const std::vector<int>& labels,
                       const std::string& path) {
    if (!embeddings.defined() || embeddings.rank() != 3) {
        throw ContractError("export_embeddings expects a B x T x d tensor");
    }
    const std::size_t batch = embeddings.shape()[0];
    const std::size_t steps = embeddings.shape()[1];
    const std::size_t dim = embeddings.shape()[2];
    if (!labels.empty() && labels.size() != batch * steps) {
        throw DimensionError("export_embeddings: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(batch * steps) + " timesteps");
    }

    std::ostringstream out;
    out << "seq_id,t,label";
    for (std::size_t j = 0; j < dim; ++j) out << ",dim_" << j;
    out << "\n";
    char cell[64];
    const std::vector<double>& z = embeddings.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < steps; ++t) {
            const int label = labels.empty() ? -1 : labels[b * steps + t];
            out << b << "," << t << "," << label;
            for (std::size_t j = 0; j < dim; ++j) {
                std::snprintf(cell, sizeof(cell), "%.17g", z[(b * steps + t) * dim + j]);
                out << "," << cell;
            }
            out << "\n";
        }
    }
    bytes::write_file_atomic(path, out.str());
}

}  // namespace emargin
