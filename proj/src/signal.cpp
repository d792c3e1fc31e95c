#include "emargin/signal.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "emargin/bytes.hpp"
#include "emargin/errors.hpp"
#include "emargin/rng.hpp"

namespace emargin {

using nlohmann::json;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr std::uint32_t kBatchVersion = 1;

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string current;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    fields.push_back(current);
    return fields;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    return line;
}

double parse_double_cell(const std::string& cell, std::size_t row, const std::string& column) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    const double value = std::strtod(begin, &end);
    if (end == begin || *end != '\0' || !std::isfinite(value)) {
        throw ParseError("row " + std::to_string(row) + ": cell '" + cell + "' in column '" +
                         column + "' is not a finite number");
    }
    return value;
}

int parse_label_cell(const std::string& cell, std::size_t row, const std::string& column) {
    const char* begin = cell.c_str();
    char* end = nullptr;
    const long value = std::strtol(begin, &end, 10);
    if (end == begin || *end != '\0') {
        throw ParseError("row " + std::to_string(row) + ": cell '" + cell + "' in column '" +
                         column + "' is not an integer label");
    }
    return static_cast<int>(value);
}

int majority_label(const std::vector<int>& labels, std::size_t begin, std::size_t end) {
    std::map<int, std::size_t> counts;  // ordered, so ties resolve to the smallest id
    for (std::size_t i = begin; i < end && i < labels.size(); ++i) {
        ++counts[labels[i]];
    }
    int winner = 0;
    std::size_t best = 0;
    for (const auto& [label, count] : counts) {
        if (count > best) {
            winner = label;
            best = count;
        }
    }
    return winner;
}

SequenceBatch gather_sequences(const SequenceBatch& batch, const std::vector<std::size_t>& keep) {
    const std::size_t T = batch.seq_len();
    const std::size_t D = batch.feature_dim();
    const std::vector<double>& flat = batch.data.data();

    SequenceBatch out;
    std::vector<double> data;
    data.reserve(keep.size() * T * D);
    for (std::size_t b : keep) {
        const std::size_t offset = b * T * D;
        data.insert(data.end(), flat.begin() + static_cast<std::ptrdiff_t>(offset),
                    flat.begin() + static_cast<std::ptrdiff_t>(offset + T * D));
        out.sources.push_back(b < batch.sources.size() ? batch.sources[b] : "");
        if (batch.has_labels()) {
            for (std::size_t t = 0; t < T; ++t) {
                out.labels.push_back(batch.labels[b * T + t]);
            }
        }
    }
    out.data = ad::Tensor::from_data({keep.size(), T, D}, std::move(data));
    out.window = batch.window;
    out.hop = batch.hop;
    return out;
}

}  // namespace

int SequenceBatch::label_at(std::size_t seq, std::size_t step) const {
    if (!has_labels()) {
        throw ContractError("batch has no labels");
    }
    const std::size_t idx = seq * seq_len() + step;
    if (seq >= batch() || step >= seq_len()) {
        throw ContractError("label index out of range");
    }
    return labels[idx];
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

RawSeries load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DomainError(path + " is empty");
    }
    const std::vector<std::string> header = split_fields(strip_cr(line));

    auto column_index = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw SchemaError("column '" + name + "' not found in " + path);
        }
        return static_cast<std::size_t>(it - header.begin());
    };

    std::vector<std::size_t> channel_idx;
    channel_idx.reserve(schema.channel_columns.size());
    for (const std::string& name : schema.channel_columns) {
        channel_idx.push_back(column_index(name));
    }
    const bool want_labels = !schema.label_column.empty();
    const std::size_t label_idx = want_labels ? column_index(schema.label_column) : 0;

    RawSeries series;
    series.channel_names = schema.channel_columns;
    series.channels.assign(schema.channel_columns.size(), {});
    series.sample_rate = schema.sample_rate;

    std::size_t row = 0;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) {
            continue;  // tolerate a trailing blank line
        }
        ++row;
        const std::vector<std::string> fields = split_fields(line);
        for (std::size_t c = 0; c < channel_idx.size(); ++c) {
            if (channel_idx[c] >= fields.size()) {
                throw ParseError("row " + std::to_string(row) + ": missing cell for column '" +
                                 schema.channel_columns[c] + "'");
            }
            series.channels[c].push_back(
                parse_double_cell(fields[channel_idx[c]], row, schema.channel_columns[c]));
        }
        if (want_labels) {
            if (label_idx >= fields.size()) {
                throw ParseError("row " + std::to_string(row) + ": missing cell for column '" +
                                 schema.label_column + "'");
            }
            series.labels.push_back(
                parse_label_cell(fields[label_idx], row, schema.label_column));
        }
    }
    if (row == 0) {
        throw DomainError(path + " has a header but no data rows");
    }
    return series;
}

void save_csv(const RawSeries& series, const std::string& path) {
    std::ostringstream out;
    for (std::size_t c = 0; c < series.channel_names.size(); ++c) {
        out << (c ? "," : "") << series.channel_names[c];
    }
    if (series.has_labels()) {
        out << (series.channel_names.empty() ? "" : ",") << "label";
    }
    out << "\n";
    char cell[48];
    for (std::size_t i = 0; i < series.length(); ++i) {
        for (std::size_t c = 0; c < series.channels.size(); ++c) {
            std::snprintf(cell, sizeof(cell), "%.17g", series.channels[c][i]);
            out << (c ? "," : "") << cell;
        }
        if (series.has_labels()) {
            out << (series.channels.empty() ? "" : ",") << series.labels[i];
        }
        out << "\n";
    }
    bytes::write_file_atomic(path, out.str());
}

// ---------------------------------------------------------------------------
// STFT
// ---------------------------------------------------------------------------

FrameSeries stft(const RawSeries& series, std::size_t window, std::size_t hop,
                 WindowFn window_fn, bool log_scale) {
    const std::size_t length = series.length();
    if (window == 0 || window > length) {
        throw DomainError("stft window " + std::to_string(window) +
                          " does not fit series of length " + std::to_string(length));
    }
    if (hop == 0 || hop > window) {
        throw DomainError("stft hop " + std::to_string(hop) + " must be in (0, window]");
    }
    const std::size_t channels = series.channels.size();
    const std::size_t bins = window / 2 + 1;
    const std::size_t frames = (length - window) / hop + 1;

    std::vector<double> taper(window);
    for (std::size_t n = 0; n < window; ++n) {
        taper[n] = window_fn == WindowFn::hann
                       ? 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(n) /
                                               static_cast<double>(window)))
                       : 1.0;
    }
    // Twiddle tables for the direct one-sided DFT.
    std::vector<double> cos_table(bins * window);
    std::vector<double> sin_table(bins * window);
    for (std::size_t k = 0; k < bins; ++k) {
        for (std::size_t n = 0; n < window; ++n) {
            const double angle = 2.0 * kPi * static_cast<double>(k) * static_cast<double>(n) /
                                 static_cast<double>(window);
            cos_table[k * window + n] = std::cos(angle);
            sin_table[k * window + n] = std::sin(angle);
        }
    }

    std::vector<double> out(frames * channels * bins, 0.0);
    std::vector<double> tapered(window);
    for (std::size_t c = 0; c < channels; ++c) {
        const std::vector<double>& samples = series.channels[c];
        for (std::size_t f = 0; f < frames; ++f) {
            const std::size_t start = f * hop;
            for (std::size_t n = 0; n < window; ++n) {
                tapered[n] = samples[start + n] * taper[n];
            }
            for (std::size_t k = 0; k < bins; ++k) {
                double re = 0.0;
                double im = 0.0;
                const double* cs = cos_table.data() + k * window;
                const double* sn = sin_table.data() + k * window;
                for (std::size_t n = 0; n < window; ++n) {
                    re += tapered[n] * cs[n];
                    im -= tapered[n] * sn[n];
                }
                const double mag = std::hypot(re, im);
                out[f * channels * bins + c * bins + k] = log_scale ? std::log1p(mag) : mag;
            }
        }
    }

    FrameSeries result;
    result.data = ad::Tensor::from_data({frames, channels * bins}, std::move(out));
    result.window = window;
    result.hop = hop;
    result.sample_labels = series.labels;
    return result;
}

// ---------------------------------------------------------------------------
// Sequencing and splitting
// ---------------------------------------------------------------------------

SequenceBatch window_sequences(const FrameSeries& frames, std::size_t seq_len) {
    if (seq_len < 2) {
        throw DomainError("sequence length must be at least 2 so adjacent pairs exist");
    }
    const std::size_t F = frames.frames();
    if (F < seq_len) {
        throw DomainError("only " + std::to_string(F) + " frames for sequence length " +
                          std::to_string(seq_len));
    }
    const std::size_t D = frames.feature_dim();
    const std::size_t B = F / seq_len;
    const std::vector<double>& flat = frames.data.data();

    SequenceBatch batch;
    batch.window = frames.window;
    batch.hop = frames.hop;
    std::vector<double> data(flat.begin(),
                             flat.begin() + static_cast<std::ptrdiff_t>(B * seq_len * D));
    batch.data = ad::Tensor::from_data({B, seq_len, D}, std::move(data));
    for (std::size_t b = 0; b < B; ++b) {
        batch.sources.push_back(frames.source + ":" + std::to_string(b));
    }
    if (!frames.sample_labels.empty()) {
        batch.labels.reserve(B * seq_len);
        for (std::size_t step = 0; step < B * seq_len; ++step) {
            const std::size_t begin = step * frames.hop;
            batch.labels.push_back(
                majority_label(frames.sample_labels, begin, begin + frames.window));
        }
    }
    return batch;
}

SequenceBatch concat_batches(const std::vector<SequenceBatch>& batches) {
    if (batches.empty()) {
        throw ContractError("concat_batches needs at least one batch");
    }
    const SequenceBatch& head = batches.front();
    std::vector<std::size_t> all;
    SequenceBatch out;
    out.window = head.window;
    out.hop = head.hop;
    std::vector<double> data;
    for (const SequenceBatch& b : batches) {
        if (b.seq_len() != head.seq_len() || b.feature_dim() != head.feature_dim()) {
            throw DimensionError("concat_batches: incompatible shapes " +
                                 ad::shape_str(b.data.shape()) + " vs " +
                                 ad::shape_str(head.data.shape()));
        }
        if (b.has_labels() != head.has_labels()) {
            throw ContractError("concat_batches: cannot mix labeled and unlabeled batches");
        }
        const std::vector<double>& flat = b.data.data();
        data.insert(data.end(), flat.begin(), flat.end());
        out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
        out.sources.insert(out.sources.end(), b.sources.begin(), b.sources.end());
    }
    std::size_t total = 0;
    for (const SequenceBatch& b : batches) {
        total += b.batch();
    }
    out.data = ad::Tensor::from_data({total, head.seq_len(), head.feature_dim()},
                                     std::move(data));
    return out;
}

TrainTestSplit split(const SequenceBatch& batch, const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
        throw ConfigError("train_fraction must lie strictly between 0 and 1");
    }
    const std::size_t B = batch.batch();
    if (B < 2) {
        throw DomainError("need at least 2 sequences to split, got " + std::to_string(B));
    }
    std::vector<std::size_t> order(B);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(spec.seed);
    rng.shuffle(order);

    const std::size_t n_train =
        static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(B)));
    const std::vector<std::size_t> train_ids(order.begin(),
                                             order.begin() + static_cast<std::ptrdiff_t>(n_train));
    const std::vector<std::size_t> test_ids(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                                            order.end());
    return {gather_sequences(batch, train_ids), gather_sequences(batch, test_ids)};
}

LabeledSteps flatten_steps(const SequenceBatch& batch) {
    LabeledSteps steps;
    steps.data = ad::Tensor::from_data({batch.batch() * batch.seq_len(), batch.feature_dim()},
                                       batch.data.data());
    steps.labels = batch.labels;
    return steps;
}

LabeledSteps balanced_subset(const LabeledSteps& steps, const std::map<int, std::size_t>& counts,
                             std::uint64_t seed) {
    if (steps.labels.size() != steps.count()) {
        throw ContractError("balanced_subset needs one label per step");
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < steps.labels.size(); ++i) {
        by_class[steps.labels[i]].push_back(i);
    }

    Rng rng(seed);
    const std::size_t D = steps.data.shape()[1];
    const std::vector<double>& flat = steps.data.data();
    LabeledSteps out;
    std::vector<double> data;
    for (const auto& [cls, want] : counts) {
        auto it = by_class.find(cls);
        const std::size_t available = it == by_class.end() ? 0 : it->second.size();
        if (want > available) {
            throw DomainError("class " + std::to_string(cls) + " has only " +
                              std::to_string(available) + " steps, requested " +
                              std::to_string(want));
        }
        std::vector<std::size_t> pool = it->second;
        rng.shuffle(pool);
        for (std::size_t i = 0; i < want; ++i) {
            const std::size_t row = pool[i];
            data.insert(data.end(), flat.begin() + static_cast<std::ptrdiff_t>(row * D),
                        flat.begin() + static_cast<std::ptrdiff_t>((row + 1) * D));
            out.labels.push_back(cls);
        }
    }
    out.data = ad::Tensor::from_data({out.labels.size(), D}, std::move(data));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic regimes
// ---------------------------------------------------------------------------

SequenceBatch synth_regimes(std::size_t num_seqs, std::size_t seq_len, std::size_t feature_dim,
                            std::size_t num_classes, double regime_dwell, double noise_sigma,
                            std::uint64_t seed) {
    if (num_classes < 2) {
        throw DomainError("synth_regimes needs at least 2 regimes");
    }
    if (regime_dwell < 2.0) {
        throw DomainError("regime_dwell must be at least 2");
    }
    if (num_seqs == 0 || seq_len < 2 || feature_dim == 0) {
        throw DomainError("synth_regimes needs num_seqs >= 1, seq_len >= 2, feature_dim >= 1");
    }
    Rng rng(seed);

    // Regime means: unit vectors kept pairwise at cosine <= 0.3 by rejection.
    std::vector<std::vector<double>> means;
    const int max_attempts = 100000;
    int attempts = 0;
    while (means.size() < num_classes) {
        if (++attempts > max_attempts) {
            throw DomainError("could not place " + std::to_string(num_classes) +
                              " regime means with pairwise cosine <= 0.3 in dimension " +
                              std::to_string(feature_dim));
        }
        std::vector<double> candidate(feature_dim);
        double norm_sq = 0.0;
        for (double& v : candidate) {
            v = rng.normal();
            norm_sq += v * v;
        }
        if (norm_sq < 1e-12) {
            continue;
        }
        const double inv_norm = 1.0 / std::sqrt(norm_sq);
        for (double& v : candidate) {
            v *= inv_norm;
        }
        bool separated = true;
        for (const std::vector<double>& other : means) {
            double cosine = 0.0;
            for (std::size_t d = 0; d < feature_dim; ++d) {
                cosine += candidate[d] * other[d];
            }
            if (cosine > 0.3) {
                separated = false;
                break;
            }
        }
        if (separated) {
            means.push_back(std::move(candidate));
        }
    }

    const double switch_prob = 1.0 / regime_dwell;
    SequenceBatch batch;
    std::vector<double> data;
    data.reserve(num_seqs * seq_len * feature_dim);
    batch.labels.reserve(num_seqs * seq_len);
    for (std::size_t b = 0; b < num_seqs; ++b) {
        std::size_t regime = static_cast<std::size_t>(rng.below(num_classes));
        for (std::size_t t = 0; t < seq_len; ++t) {
            batch.labels.push_back(static_cast<int>(regime));
            for (std::size_t d = 0; d < feature_dim; ++d) {
                data.push_back(means[regime][d] +
                               (noise_sigma == 0.0 ? 0.0 : rng.normal(0.0, noise_sigma)));
            }
            if (rng.uniform01() < switch_prob) {
                regime = (regime + 1 + rng.below(num_classes - 1)) % num_classes;
            }
        }
        batch.sources.push_back("synth:" + std::to_string(b));
    }
    batch.data = ad::Tensor::from_data({num_seqs, seq_len, feature_dim}, std::move(data));
    return batch;
}

// ---------------------------------------------------------------------------
// Batch files
// ---------------------------------------------------------------------------

void write_batch(const SequenceBatch& batch, const std::string& path) {
    json header;
    header["batch"] = batch.batch();
    header["seq_len"] = batch.seq_len();
    header["feature_dim"] = batch.feature_dim();
    header["window"] = batch.window;
    header["hop"] = batch.hop;
    header["has_labels"] = batch.has_labels();
    header["sources"] = batch.sources;
    std::set<int> classes(batch.labels.begin(), batch.labels.end());
    header["classes"] = std::vector<int>(classes.begin(), classes.end());
    const std::string header_text = header.dump();

    std::string blob;
    blob += "EMSB";
    bytes::put_u32(blob, kBatchVersion);
    bytes::put_u64(blob, header_text.size());
    blob += header_text;
    for (double v : batch.data.data()) {
        bytes::put_f32(blob, static_cast<float>(v));
    }
    for (int label : batch.labels) {
        bytes::put_i32(blob, label);
    }
    bytes::write_file_atomic(path, blob);
}

SequenceBatch read_batch(const std::string& path) {
    bytes::ByteReader reader(bytes::slurp_file(path), path);
    if (reader.take(4, "magic") != "EMSB") {
        throw FormatError(path + ": not a batch file (bad magic)");
    }
    const std::uint32_t version = reader.take_u32("version");
    if (version != kBatchVersion) {
        throw FormatError(path + ": unsupported batch version " + std::to_string(version));
    }
    const std::uint64_t header_len = reader.take_u64("header length");
    json header;
    try {
        header = json::parse(reader.take(static_cast<std::size_t>(header_len), "header"));
    } catch (const json::exception& e) {
        throw FormatError(path + ": bad header JSON (" + e.what() + ")");
    }
    for (const char* field : {"batch", "seq_len", "feature_dim", "window", "hop", "has_labels"}) {
        if (!header.contains(field)) {
            throw FormatError(path + ": header missing field '" + std::string(field) + "'");
        }
    }

    SequenceBatch batch;
    const std::size_t B = header["batch"].get<std::size_t>();
    const std::size_t T = header["seq_len"].get<std::size_t>();
    const std::size_t D = header["feature_dim"].get<std::size_t>();
    batch.window = header["window"].get<std::size_t>();
    batch.hop = header["hop"].get<std::size_t>();
    if (header.contains("sources")) {
        batch.sources = header["sources"].get<std::vector<std::string>>();
    }

    std::vector<double> data(B * T * D);
    for (double& v : data) {
        v = static_cast<double>(reader.take_f32("feature data"));
        if (!std::isfinite(v)) {
            throw FormatError(path + ": non-finite feature value");
        }
    }
    batch.data = ad::Tensor::from_data({B, T, D}, std::move(data));
    if (header["has_labels"].get<bool>()) {
        batch.labels.resize(B * T);
        for (int& label : batch.labels) {
            label = reader.take_i32("labels");
        }
    }
    if (!reader.exhausted()) {
        throw FormatError(path + ": trailing bytes after declared payload");
    }
    return batch;
}

}  // namespace emargin
