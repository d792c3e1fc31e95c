#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "emargin/tensor.hpp"

namespace emargin {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Multichannel raw recording with optional per-sample class labels.
struct RawSeries {
    std::vector<std::string> channel_names;
    std::vector<std::vector<double>> channels;  // one vector per channel, equal lengths
    double sample_rate = 1.0;                   // Hz
    std::vector<int> labels;                    // per sample; empty = unlabeled

    std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }
    bool has_labels() const { return !labels.empty(); }
};

// Spectrogram frames (F x D) plus the raw labels and the window geometry
// needed to map a frame back onto the samples it covers.
struct FrameSeries {
    ad::Tensor data;  // F x D, D = channels * (window/2 + 1)
    std::size_t window = 0;
    std::size_t hop = 0;
    std::vector<int> sample_labels;  // per raw sample; empty = unlabeled
    std::string source;

    std::size_t frames() const { return data.defined() ? data.shape()[0] : 0; }
    std::size_t feature_dim() const { return data.defined() ? data.shape()[1] : 0; }
};

// Fixed-length sequences stacked into a B x T x D tensor.
struct SequenceBatch {
    ad::Tensor data;                   // B x T x D
    std::vector<int> labels;           // flattened B*T per-step labels; empty = unlabeled
    std::vector<std::string> sources;  // one id per sequence
    std::size_t window = 0;
    std::size_t hop = 0;

    std::size_t batch() const { return data.defined() ? data.shape()[0] : 0; }
    std::size_t seq_len() const { return data.defined() ? data.shape()[1] : 0; }
    std::size_t feature_dim() const { return data.defined() ? data.shape()[2] : 0; }
    bool has_labels() const { return !labels.empty(); }
    int label_at(std::size_t seq, std::size_t step) const;
};

// Flat N x D step collection for evaluation-time selection.
struct LabeledSteps {
    ad::Tensor data;  // N x D
    std::vector<int> labels;

    std::size_t count() const { return data.defined() ? data.shape()[0] : 0; }
};

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 1;
};

struct TrainTestSplit {
    SequenceBatch train;
    SequenceBatch test;
};

struct CsvSchema {
    std::vector<std::string> channel_columns;
    std::string label_column;  // empty = no labels
    double sample_rate = 1.0;
};

enum class WindowFn { rect, hann };

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Reads a header-first CSV (LF or CRLF). Missing declared columns raise
// SchemaError naming the column; unparsable cells raise ParseError naming the
// data row; a file with no data rows raises DomainError.
RawSeries load_csv(const std::string& path, const CsvSchema& schema);

// Writes channels (and labels, when present) back out; load_csv on the result
// reproduces the samples exactly.
void save_csv(const RawSeries& series, const std::string& path);

// Short-time Fourier transform: per channel, the one-sided magnitude spectrum
// (window/2 + 1 bins) of each length-`window` frame advanced by `hop`;
// channels are concatenated along the feature axis. Frame count is
// floor((L - window)/hop) + 1. `log_scale` maps magnitudes through log1p.
FrameSeries stft(const RawSeries& series, std::size_t window, std::size_t hop,
                 WindowFn window_fn = WindowFn::hann, bool log_scale = false);

// Groups frames into non-overlapping runs of `seq_len`, dropping the trailing
// remainder. Each step's label is the majority vote over the raw samples its
// frame covers (ties go to the smallest class id). Never crosses the source
// series boundary by construction.
SequenceBatch window_sequences(const FrameSeries& frames, std::size_t seq_len);

// Stacks batches with identical (T, D, window, hop); sequence order follows
// the argument order, so callers get order-stable merges by sorting inputs.
SequenceBatch concat_batches(const std::vector<SequenceBatch>& batches);

// Seed-deterministic shuffle of the sequences followed by a prefix/suffix cut
// at floor(train_fraction * B).
TrainTestSplit split(const SequenceBatch& batch, const SplitSpec& spec);

// B x T x D -> (B*T) x D with per-step labels.
LabeledSteps flatten_steps(const SequenceBatch& batch);

// Uniform per-class sampling without replacement; classes absent from
// `counts` are dropped. DomainError names the class and the available count
// when a request cannot be filled.
LabeledSteps balanced_subset(const LabeledSteps& steps, const std::map<int, std::size_t>& counts,
                             std::uint64_t seed);

// Regime-switching synthetic generator: a hidden Markov chain with geometric
// dwell (switch probability 1/regime_dwell, uniform over the other regimes)
// emits x_t = mu_k + N(0, noise_sigma^2 I), where the mu_k are unit vectors
// with pairwise cosine <= 0.3. Labels are the regime ids.
SequenceBatch synth_regimes(std::size_t num_seqs, std::size_t seq_len, std::size_t feature_dim,
                            std::size_t num_classes, double regime_dwell, double noise_sigma,
                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batch files ("EMSB"): magic, u32 version, u64 JSON-header length, JSON
// header, row-major f32 data, i32 labels when the header says so. Writes go
// through a temp file and an atomic rename.
// ---------------------------------------------------------------------------

void write_batch(const SequenceBatch& batch, const std::string& path);
SequenceBatch read_batch(const std::string& path);

}  // namespace emargin
