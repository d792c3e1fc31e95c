// Command-line front end wiring the pipeline end to end:
//   synth      -> generate a regime-switching batch file
//   preprocess -> CSV -> STFT -> sequences -> train/test batch files + manifest
//   pretrain   -> train an encoder, write checkpoint + loss trace
//   eval       -> clustering metrics + linear probe -> report JSON
//   compare    -> aggregate report JSONs into a markdown table
//
// Exit codes: 0 success, 1 data error, 2 config/usage error, 3 numeric failure.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emargin/bytes.hpp"
#include "emargin/encoder.hpp"
#include "emargin/errors.hpp"
#include "emargin/eval.hpp"
#include "emargin/loss.hpp"
#include "emargin/report.hpp"
#include "emargin/signal.hpp"
#include "emargin/trainer.hpp"

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::size_t num_seqs = 16;
    std::size_t feature_dim = 16;
    std::size_t num_classes = 3;
    double regime_dwell = 20.0;
    double noise_sigma = 0.3;
    std::uint64_t seed = 1;
};

struct CsvSpec {
    std::string path;
    std::vector<std::string> channels;
    std::string label_column;
    double sample_rate = 1.0;
};

struct StftSpec {
    std::size_t window = 50;
    std::size_t hop = 25;
    emargin::WindowFn window_fn = emargin::WindowFn::hann;
    bool log_scale = false;
};

struct EvalSpec {
    std::size_t k = 0;                // 0 = one cluster per labeled class
    std::string assignment = "kmeans";
    std::size_t balanced_count = 0;   // per-class cap; 0 = smallest class size
    std::uint64_t seed = 1;
    emargin::ProbeConfig probe;
};

struct RunConfig {
    std::string dataset = "run";
    std::string source_kind = "synth";
    SynthSpec synth;
    CsvSpec csv;
    StftSpec stft;
    std::size_t seq_len = 120;
    emargin::SplitSpec split;
    emargin::EncoderConfig encoder;   // input_dim is filled from the data
    emargin::TrainConfig train;
    EvalSpec eval;
    std::string out = "out";
};

[[noreturn]] void bad_config(const std::string& msg) { throw emargin::ConfigError(msg); }

const json* find(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& ctx) {
    if (!obj.is_object()) bad_config(ctx + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key())) bad_config("unknown key \"" + it.key() + "\" in " + ctx);
    }
}

double get_real(const json& obj, const char* key, double fallback, const std::string& ctx) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (v->is_number()) return v->get<double>();
    if (v->is_string()) {
        const std::string s = v->get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    bad_config(ctx + "." + key + " must be a number (or \"inf\"/\"-inf\"/\"nan\")");
}

std::uint64_t get_u64(const json& obj, const char* key, std::uint64_t fallback,
                      const std::string& ctx) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (v->is_number_unsigned()) return v->get<std::uint64_t>();
    if (v->is_number_integer() && v->get<long long>() >= 0)
        return std::uint64_t(v->get<long long>());
    bad_config(ctx + "." + key + " must be a non-negative integer");
}

std::size_t get_size(const json& obj, const char* key, std::size_t fallback,
                     const std::string& ctx) {
    return std::size_t(get_u64(obj, key, fallback, ctx));
}

bool get_bool(const json& obj, const char* key, bool fallback, const std::string& ctx) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_boolean()) bad_config(ctx + "." + key + " must be a boolean");
    return v->get<bool>();
}

std::string get_string(const json& obj, const char* key, const std::string& fallback,
                       const std::string& ctx) {
    const json* v = find(obj, key);
    if (!v) return fallback;
    if (!v->is_string()) bad_config(ctx + "." + key + " must be a string");
    return v->get<std::string>();
}

emargin::WindowFn window_fn_from(const std::string& name) {
    if (name == "hann") return emargin::WindowFn::hann;
    if (name == "rect") return emargin::WindowFn::rect;
    bad_config("stft.window_fn must be \"hann\" or \"rect\", got \"" + name + "\"");
}

std::string window_fn_name(emargin::WindowFn fn) {
    return fn == emargin::WindowFn::hann ? "hann" : "rect";
}

emargin::PseudoLabelScope scope_from(const std::string& name) {
    if (name == "pairwise") return emargin::PseudoLabelScope::pairwise;
    if (name == "adjacent_only") return emargin::PseudoLabelScope::adjacent_only;
    bad_config("train.loss.scope must be \"pairwise\" or \"adjacent_only\", got \"" + name + "\"");
}

std::string scope_name(emargin::PseudoLabelScope scope) {
    return scope == emargin::PseudoLabelScope::pairwise ? "pairwise" : "adjacent_only";
}

RunConfig parse_run_config(const json& root) {
    RunConfig cfg;
    check_keys(root, {"dataset", "source", "stft", "seq_len", "split", "encoder", "train",
                      "eval", "out"},
               "config");
    cfg.dataset = get_string(root, "dataset", cfg.dataset, "config");
    cfg.seq_len = get_size(root, "seq_len", cfg.seq_len, "config");
    cfg.out = get_string(root, "out", cfg.out, "config");

    if (const json* s = find(root, "source")) {
        check_keys(*s,
                   {"kind", "num_seqs", "feature_dim", "num_classes", "regime_dwell",
                    "noise_sigma", "seed", "path", "channels", "label_column", "sample_rate"},
                   "source");
        cfg.source_kind = get_string(*s, "kind", cfg.source_kind, "source");
        if (cfg.source_kind != "synth" && cfg.source_kind != "csv")
            bad_config("source.kind must be \"synth\" or \"csv\", got \"" + cfg.source_kind +
                       "\"");
        cfg.synth.num_seqs = get_size(*s, "num_seqs", cfg.synth.num_seqs, "source");
        cfg.synth.feature_dim = get_size(*s, "feature_dim", cfg.synth.feature_dim, "source");
        cfg.synth.num_classes = get_size(*s, "num_classes", cfg.synth.num_classes, "source");
        cfg.synth.regime_dwell = get_real(*s, "regime_dwell", cfg.synth.regime_dwell, "source");
        cfg.synth.noise_sigma = get_real(*s, "noise_sigma", cfg.synth.noise_sigma, "source");
        cfg.synth.seed = get_u64(*s, "seed", cfg.synth.seed, "source");
        cfg.csv.path = get_string(*s, "path", cfg.csv.path, "source");
        cfg.csv.label_column = get_string(*s, "label_column", cfg.csv.label_column, "source");
        cfg.csv.sample_rate = get_real(*s, "sample_rate", cfg.csv.sample_rate, "source");
        if (const json* ch = find(*s, "channels")) {
            if (!ch->is_array()) bad_config("source.channels must be an array of strings");
            cfg.csv.channels.clear();
            for (const json& c : *ch) {
                if (!c.is_string()) bad_config("source.channels must be an array of strings");
                cfg.csv.channels.push_back(c.get<std::string>());
            }
        }
    }

    if (const json* s = find(root, "stft")) {
        check_keys(*s, {"window", "hop", "window_fn", "log_scale"}, "stft");
        cfg.stft.window = get_size(*s, "window", cfg.stft.window, "stft");
        cfg.stft.hop = get_size(*s, "hop", cfg.stft.hop, "stft");
        cfg.stft.window_fn =
            window_fn_from(get_string(*s, "window_fn", window_fn_name(cfg.stft.window_fn), "stft"));
        cfg.stft.log_scale = get_bool(*s, "log_scale", cfg.stft.log_scale, "stft");
    }

    if (const json* s = find(root, "split")) {
        check_keys(*s, {"train_fraction", "seed"}, "split");
        cfg.split.train_fraction = get_real(*s, "train_fraction", cfg.split.train_fraction, "split");
        cfg.split.seed = get_u64(*s, "seed", cfg.split.seed, "split");
    }

    if (const json* s = find(root, "encoder")) {
        check_keys(*s, {"hidden_dims", "output_dim", "bn_momentum", "bn_epsilon"}, "encoder");
        if (const json* h = find(*s, "hidden_dims")) {
            if (!h->is_array() || h->size() != 2)
                bad_config("encoder.hidden_dims must be an array of two widths");
            for (std::size_t i = 0; i < 2; ++i) {
                const json& v = (*h)[i];
                if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() > 0))
                    bad_config("encoder.hidden_dims entries must be positive integers");
                cfg.encoder.hidden_dims[i] = v.get<std::size_t>();
            }
        }
        cfg.encoder.output_dim = get_size(*s, "output_dim", cfg.encoder.output_dim, "encoder");
        cfg.encoder.bn_momentum = get_real(*s, "bn_momentum", cfg.encoder.bn_momentum, "encoder");
        cfg.encoder.bn_epsilon = get_real(*s, "bn_epsilon", cfg.encoder.bn_epsilon, "encoder");
    }

    if (const json* s = find(root, "train")) {
        check_keys(*s,
                   {"batch_size", "learning_rate", "iterations", "loss_kind", "seed", "grad_clip",
                    "loss", "adamw"},
                   "train");
        cfg.train.batch_size = get_size(*s, "batch_size", cfg.train.batch_size, "train");
        cfg.train.learning_rate = get_real(*s, "learning_rate", cfg.train.learning_rate, "train");
        cfg.train.iterations = get_size(*s, "iterations", cfg.train.iterations, "train");
        cfg.train.loss_kind = emargin::loss_kind_from(
            get_string(*s, "loss_kind", emargin::loss_kind_name(cfg.train.loss_kind), "train"));
        cfg.train.seed = get_u64(*s, "seed", cfg.train.seed, "train");
        cfg.train.grad_clip = get_real(*s, "grad_clip", cfg.train.grad_clip, "train");
        if (const json* l = find(*s, "loss")) {
            check_keys(*l,
                       {"temperature", "threshold", "margin", "scope", "cosine_epsilon",
                        "transform_identity"},
                       "train.loss");
            cfg.train.loss.temperature =
                get_real(*l, "temperature", cfg.train.loss.temperature, "train.loss");
            cfg.train.loss.threshold =
                get_real(*l, "threshold", cfg.train.loss.threshold, "train.loss");
            cfg.train.loss.margin = get_real(*l, "margin", cfg.train.loss.margin, "train.loss");
            cfg.train.loss.pseudo_label_scope = scope_from(get_string(
                *l, "scope", scope_name(cfg.train.loss.pseudo_label_scope), "train.loss"));
            cfg.train.loss.cosine_epsilon =
                get_real(*l, "cosine_epsilon", cfg.train.loss.cosine_epsilon, "train.loss");
            cfg.train.loss.transform_identity = get_bool(
                *l, "transform_identity", cfg.train.loss.transform_identity, "train.loss");
        }
        if (const json* a = find(*s, "adamw")) {
            check_keys(*a, {"beta1", "beta2", "epsilon", "weight_decay"}, "train.adamw");
            cfg.train.adamw.beta1 = get_real(*a, "beta1", cfg.train.adamw.beta1, "train.adamw");
            cfg.train.adamw.beta2 = get_real(*a, "beta2", cfg.train.adamw.beta2, "train.adamw");
            cfg.train.adamw.epsilon =
                get_real(*a, "epsilon", cfg.train.adamw.epsilon, "train.adamw");
            cfg.train.adamw.weight_decay =
                get_real(*a, "weight_decay", cfg.train.adamw.weight_decay, "train.adamw");
        }
    }

    if (const json* s = find(root, "eval")) {
        check_keys(*s, {"k", "assignment", "balanced_count", "seed", "probe"}, "eval");
        cfg.eval.k = get_size(*s, "k", cfg.eval.k, "eval");
        cfg.eval.assignment = get_string(*s, "assignment", cfg.eval.assignment, "eval");
        if (cfg.eval.assignment != "kmeans" && cfg.eval.assignment != "labels")
            bad_config("eval.assignment must be \"kmeans\" or \"labels\", got \"" +
                       cfg.eval.assignment + "\"");
        cfg.eval.balanced_count = get_size(*s, "balanced_count", cfg.eval.balanced_count, "eval");
        cfg.eval.seed = get_u64(*s, "seed", cfg.eval.seed, "eval");
        if (const json* p = find(*s, "probe")) {
            check_keys(*p, {"learning_rate", "epochs"}, "eval.probe");
            cfg.eval.probe.learning_rate =
                get_real(*p, "learning_rate", cfg.eval.probe.learning_rate, "eval.probe");
            cfg.eval.probe.epochs = get_size(*p, "epochs", cfg.eval.probe.epochs, "eval.probe");
        }
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    const std::string text = emargin::bytes::slurp_file(path);
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        bad_config(path + ": invalid JSON: " + e.what());
    }
    return parse_run_config(root);
}

// JSON value for a real that survives non-finite values (nlohmann emits null
// for those, which would collapse distinct configs to one digest).
json real_out(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

// Digest of the effective configuration. The training seed is zeroed and the
// output directory dropped, so runs that differ only by those - the members
// of one comparison group - share a digest.
std::string config_digest(const RunConfig& cfg) {
    json j;
    j["dataset"] = cfg.dataset;
    j["source"]["kind"] = cfg.source_kind;
    if (cfg.source_kind == "synth") {
        j["source"]["num_seqs"] = cfg.synth.num_seqs;
        j["source"]["feature_dim"] = cfg.synth.feature_dim;
        j["source"]["num_classes"] = cfg.synth.num_classes;
        j["source"]["regime_dwell"] = real_out(cfg.synth.regime_dwell);
        j["source"]["noise_sigma"] = real_out(cfg.synth.noise_sigma);
        j["source"]["seed"] = cfg.synth.seed;
    } else {
        j["source"]["path"] = cfg.csv.path;
        j["source"]["channels"] = cfg.csv.channels;
        j["source"]["label_column"] = cfg.csv.label_column;
        j["source"]["sample_rate"] = real_out(cfg.csv.sample_rate);
        j["stft"] = {{"window", cfg.stft.window},
                     {"hop", cfg.stft.hop},
                     {"window_fn", window_fn_name(cfg.stft.window_fn)},
                     {"log_scale", cfg.stft.log_scale}};
    }
    j["seq_len"] = cfg.seq_len;
    j["split"] = {{"train_fraction", real_out(cfg.split.train_fraction)},
                  {"seed", cfg.split.seed}};
    j["encoder"] = {{"hidden_dims", {cfg.encoder.hidden_dims[0], cfg.encoder.hidden_dims[1]}},
                    {"output_dim", cfg.encoder.output_dim},
                    {"bn_momentum", real_out(cfg.encoder.bn_momentum)},
                    {"bn_epsilon", real_out(cfg.encoder.bn_epsilon)}};
    j["train"] = {{"batch_size", cfg.train.batch_size},
                  {"learning_rate", real_out(cfg.train.learning_rate)},
                  {"iterations", cfg.train.iterations},
                  {"loss_kind", emargin::loss_kind_name(cfg.train.loss_kind)},
                  {"seed", 0},
                  {"grad_clip", real_out(cfg.train.grad_clip)},
                  {"loss",
                   {{"temperature", real_out(cfg.train.loss.temperature)},
                    {"threshold", real_out(cfg.train.loss.threshold)},
                    {"margin", real_out(cfg.train.loss.margin)},
                    {"scope", scope_name(cfg.train.loss.pseudo_label_scope)},
                    {"cosine_epsilon", real_out(cfg.train.loss.cosine_epsilon)},
                    {"transform_identity", cfg.train.loss.transform_identity}}},
                  {"adamw",
                   {{"beta1", real_out(cfg.train.adamw.beta1)},
                    {"beta2", real_out(cfg.train.adamw.beta2)},
                    {"epsilon", real_out(cfg.train.adamw.epsilon)},
                    {"weight_decay", real_out(cfg.train.adamw.weight_decay)}}}};
    j["eval"] = {{"k", cfg.eval.k},
                 {"assignment", cfg.eval.assignment},
                 {"balanced_count", cfg.eval.balanced_count},
                 {"seed", cfg.eval.seed},
                 {"probe",
                  {{"learning_rate", real_out(cfg.eval.probe.learning_rate)},
                   {"epochs", cfg.eval.probe.epochs}}}};
    return emargin::fnv1a64_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw emargin::IoError("cannot create output directory " + dir + ": " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
    if (cfg.source_kind != "synth")
        bad_config("synth requires source.kind == \"synth\", got \"" + cfg.source_kind + "\"");
    const SynthSpec& s = cfg.synth;
    if (s.num_seqs == 0) bad_config("source.num_seqs must be positive");
    if (cfg.seq_len == 0) bad_config("seq_len must be positive");
    if (s.feature_dim == 0) bad_config("source.feature_dim must be positive");
    if (s.num_classes == 0) bad_config("source.num_classes must be positive");
    if (!(s.regime_dwell >= 1.0)) bad_config("source.regime_dwell must be at least 1");
    if (!(s.noise_sigma >= 0.0)) bad_config("source.noise_sigma must be non-negative");

    emargin::SequenceBatch batch = emargin::synth_regimes(
        s.num_seqs, cfg.seq_len, s.feature_dim, s.num_classes, s.regime_dwell, s.noise_sigma,
        s.seed);
    ensure_out_dir(cfg.out);
    const std::string path = join_path(cfg.out, "synth.emsb");
    emargin::write_batch(batch, path);
    std::cout << "batch: " << path << " (" << batch.batch() << " x " << batch.seq_len() << " x "
              << batch.feature_dim() << ", seed " << s.seed << ")\n";
}

void cmd_preprocess(const RunConfig& cfg) {
    if (cfg.source_kind != "csv")
        bad_config("preprocess requires source.kind == \"csv\", got \"" + cfg.source_kind + "\"");
    if (cfg.csv.path.empty()) bad_config("source.path must name the input CSV");
    if (cfg.csv.channels.empty()) bad_config("source.channels must name at least one column");
    if (cfg.seq_len == 0) bad_config("seq_len must be positive");

    emargin::CsvSchema schema;
    schema.channel_columns = cfg.csv.channels;
    schema.label_column = cfg.csv.label_column;
    schema.sample_rate = cfg.csv.sample_rate;
    emargin::RawSeries raw = emargin::load_csv(cfg.csv.path, schema);
    emargin::FrameSeries frames =
        emargin::stft(raw, cfg.stft.window, cfg.stft.hop, cfg.stft.window_fn, cfg.stft.log_scale);
    if (frames.frames() < cfg.seq_len)
        throw emargin::DomainError("sequence length " + std::to_string(cfg.seq_len) +
                                   " exceeds the " + std::to_string(frames.frames()) +
                                   " available frames");
    emargin::SequenceBatch batch = emargin::window_sequences(frames, cfg.seq_len);
    emargin::TrainTestSplit parts = emargin::split(batch, cfg.split);

    ensure_out_dir(cfg.out);
    const std::string train_path = join_path(cfg.out, "train.emsb");
    const std::string test_path = join_path(cfg.out, "test.emsb");
    emargin::write_batch(parts.train, train_path);
    emargin::write_batch(parts.test, test_path);

    json histogram = json::object();
    if (batch.has_labels()) {
        std::map<int, std::size_t> counts;
        for (int label : batch.labels) ++counts[label];
        for (const auto& [label, count] : counts) histogram[std::to_string(label)] = count;
    }
    json manifest;
    manifest["dataset"] = cfg.dataset;
    manifest["window"] = cfg.stft.window;
    manifest["hop"] = cfg.stft.hop;
    manifest["window_fn"] = window_fn_name(cfg.stft.window_fn);
    manifest["log_scale"] = cfg.stft.log_scale;
    manifest["frames"] = frames.frames();
    manifest["feature_dim"] = frames.feature_dim();
    manifest["seq_len"] = cfg.seq_len;
    manifest["split"] = {{"train_fraction", cfg.split.train_fraction}, {"seed", cfg.split.seed}};
    manifest["train"] = {{"path", "train.emsb"}, {"sequences", parts.train.batch()}};
    manifest["test"] = {{"path", "test.emsb"}, {"sequences", parts.test.batch()}};
    manifest["class_histogram"] = histogram;
    manifest["config_digest"] = config_digest(cfg);
    const std::string manifest_path = join_path(cfg.out, "manifest.json");
    emargin::bytes::write_file_atomic(manifest_path, manifest.dump(2) + "\n");
    std::cout << "train: " << train_path << " (" << parts.train.batch() << " sequences)\n"
              << "test: " << test_path << " (" << parts.test.batch() << " sequences)\n"
              << "manifest: " << manifest_path << " (feature_dim " << frames.feature_dim()
              << ")\n";
}

void cmd_pretrain(const RunConfig& cfg, const std::string& data_path, bool presplit,
                  bool random_init) {
    emargin::SequenceBatch all = emargin::read_batch(data_path);
    emargin::SequenceBatch train_cut = presplit ? all : emargin::split(all, cfg.split).train;

    emargin::EncoderConfig enc = cfg.encoder;
    enc.input_dim = train_cut.feature_dim();
    enc.validate();
    emargin::TrainConfig tc = cfg.train;
    tc.validate();

    ensure_out_dir(cfg.out);
    const std::string ckpt_path = join_path(cfg.out, "checkpoint.emgn");
    emargin::Checkpoint ckpt;
    if (random_init) {
        ckpt.encoder = enc;
        ckpt.loss_kind = tc.loss_kind;
        ckpt.loss_config = tc.loss;
        ckpt.seed = tc.seed;
        ckpt.iteration = 0;
        ckpt.params = emargin::init_params(enc, tc.seed);
        auto refs = emargin::parameter_refs(ckpt.params);
        ckpt.moments = emargin::OptimizerState::fresh(refs);
        emargin::save_checkpoint(ckpt, ckpt_path);
    } else {
        ckpt = emargin::train(train_cut, enc, tc, ckpt_path);
    }

    std::string trace = "step,loss\n";
    for (std::size_t i = 0; i < ckpt.loss_trace.size(); ++i)
        trace += std::to_string(i + 1) + "," + fmt_real(ckpt.loss_trace[i]) + "\n";
    const std::string trace_path = join_path(cfg.out, "loss_trace.csv");
    emargin::bytes::write_file_atomic(trace_path, trace);

    std::cout << "checkpoint: " << ckpt_path << " (" << emargin::loss_kind_name(ckpt.loss_kind)
              << ", seed " << ckpt.seed << ", " << ckpt.iteration << " steps)\n"
              << "loss_trace: " << trace_path;
    if (!ckpt.loss_trace.empty()) std::cout << " (final " << fmt_real(ckpt.loss_trace.back()) << ")";
    std::cout << "\n";
}

void cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
              const std::string& data_path, const std::string& train_data,
              const std::string& test_data, bool export_embeddings_flag) {
    emargin::Checkpoint ckpt = emargin::load_checkpoint(checkpoint_path);

    emargin::SequenceBatch train_cut, test_cut;
    if (!data_path.empty()) {
        emargin::SequenceBatch all = emargin::read_batch(data_path);
        emargin::TrainTestSplit parts = emargin::split(all, cfg.split);
        train_cut = parts.train;
        test_cut = parts.test;
    } else {
        train_cut = emargin::read_batch(train_data);
        test_cut = emargin::read_batch(test_data);
    }
    if (test_cut.feature_dim() != ckpt.encoder.input_dim)
        throw emargin::DimensionError(
            "checkpoint expects feature dimension " + std::to_string(ckpt.encoder.input_dim) +
            " but the data has " + std::to_string(test_cut.feature_dim()));

    emargin::LabeledSteps train_steps = emargin::embed_steps(train_cut, ckpt.params, ckpt.encoder);
    emargin::LabeledSteps test_steps = emargin::embed_steps(test_cut, ckpt.params, ckpt.encoder);

    // Clustering metrics run on a class-balanced subset of the test embeddings
    // when labels exist; otherwise on all of them.
    emargin::LabeledSteps subset = test_steps;
    if (!test_steps.labels.empty()) {
        std::map<int, std::size_t> available;
        for (int label : test_steps.labels) ++available[label];
        std::size_t target = std::numeric_limits<std::size_t>::max();
        for (const auto& [label, count] : available) target = std::min(target, count);
        if (cfg.eval.balanced_count > 0) target = std::min(target, cfg.eval.balanced_count);
        std::map<int, std::size_t> counts;
        for (const auto& [label, count] : available) counts[label] = target;
        subset = emargin::balanced_subset(test_steps, counts, cfg.eval.seed);
    }
    const emargin::AssignmentSource source = cfg.eval.assignment == "labels"
                                                 ? emargin::AssignmentSource::labels
                                                 : emargin::AssignmentSource::kmeans;
    emargin::ClusterReport clusters =
        emargin::cluster_metrics(subset, cfg.eval.k, source, cfg.eval.seed);

    if (train_steps.labels.empty() || test_steps.labels.empty())
        bad_config("the linear probe requires labeled train and test data");
    emargin::LinearProbe probe = emargin::fit_probe(train_steps, cfg.eval.probe);
    std::vector<int> predictions = emargin::probe_predict(probe, test_steps.data);
    emargin::ProbeReport scores = emargin::classification_metrics(predictions, test_steps.labels);

    emargin::EvalReport report;
    report.dataset = cfg.dataset;
    report.seed = ckpt.seed;
    report.loss_kind = emargin::loss_kind_name(ckpt.loss_kind);
    report.dbi = clusters.dbi;
    report.silhouette = clusters.silhouette;
    report.accuracy = scores.accuracy;
    report.f1_macro = scores.f1_macro;
    report.f1_weighted = scores.f1_weighted;
    report.precision_macro = scores.precision_macro;
    report.precision_weighted = scores.precision_weighted;
    report.recall_macro = scores.recall_macro;
    report.recall_weighted = scores.recall_weighted;
    report.config_digest = config_digest(cfg);

    ensure_out_dir(cfg.out);
    const std::string report_path =
        join_path(cfg.out, "report_" + report.loss_kind + "_" + cfg.eval.assignment + "_seed" +
                               std::to_string(report.seed) + ".json");
    emargin::write_report(report, report_path);
    std::cout << "report: " << report_path << "\n";

    if (export_embeddings_flag) {
        const std::string csv_path = join_path(cfg.out, "embeddings.csv");
        emargin::export_embeddings(emargin::embed_batch(test_cut, ckpt.params, ckpt.encoder),
                                   test_cut.labels, csv_path);
        std::cout << "embeddings: " << csv_path << "\n";
    }
}

void cmd_compare(const std::vector<std::string>& paths, const std::string& out_file) {
    std::vector<emargin::EvalReport> reports;
    reports.reserve(paths.size());
    for (const std::string& path : paths) reports.push_back(emargin::read_report(path));
    const std::string markdown = emargin::compare_markdown(reports);
    std::cout << markdown;
    if (!out_file.empty()) emargin::bytes::write_file_atomic(out_file, markdown);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"eMargin time-series representation learning pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed_override = 0;
    std::string out_override;
    app.add_option("--config", config_path, "JSON run configuration file");
    CLI::Option* seed_opt =
        app.add_option("--seed", seed_override,
                       "override the command's seed (synth: generator, preprocess: split, "
                       "pretrain: training, eval: clustering)");
    CLI::Option* out_opt = app.add_option("--out", out_override, "override the output directory");

    CLI::App* synth = app.add_subcommand("synth", "generate a regime-switching batch file");
    synth->fallthrough();
    CLI::App* preprocess =
        app.add_subcommand("preprocess", "CSV -> STFT -> sequences -> train/test batches");
    preprocess->fallthrough();

    CLI::App* pretrain = app.add_subcommand("pretrain", "train an encoder on a batch file");
    pretrain->fallthrough();
    std::string pretrain_data;
    std::string loss_override;
    bool presplit = false;
    bool random_init = false;
    pretrain->add_option("--data", pretrain_data, "input batch file (.emsb)")->required();
    pretrain->add_option("--loss", loss_override, "loss kind: emargin or infonce");
    pretrain->add_flag("--presplit", presplit,
                       "treat --data as already split (train on it verbatim)");
    pretrain->add_flag("--random-init", random_init,
                       "write an untrained randomly initialized checkpoint");

    CLI::App* eval_cmd = app.add_subcommand("eval", "clustering metrics + linear probe report");
    eval_cmd->fallthrough();
    std::string eval_checkpoint, eval_data, eval_train_data, eval_test_data, assignment_override;
    bool export_embeddings_flag = false;
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "encoder checkpoint (.emgn)")->required();
    eval_cmd->add_option("--data", eval_data, "full batch file; the configured split is applied");
    eval_cmd->add_option("--train-data", eval_train_data, "pre-split train batch file");
    eval_cmd->add_option("--test-data", eval_test_data, "pre-split test batch file");
    eval_cmd->add_option("--assignment", assignment_override,
                         "cluster assignment source: kmeans or labels");
    eval_cmd->add_flag("--export-embeddings", export_embeddings_flag,
                       "also write the test embeddings as CSV");

    CLI::App* compare = app.add_subcommand("compare", "aggregate reports into a markdown table");
    compare->fallthrough();
    std::vector<std::string> report_paths;
    std::string compare_out;
    compare->add_option("reports", report_paths, "report JSON files")->required();
    compare->add_option("--out-file", compare_out, "also write the markdown to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (out_opt->count() > 0) cfg.out = out_override;
        if (seed_opt->count() > 0) {
            // Each command has one seed of its own; the split seed stays put
            // under pretrain/eval so every run of a group sees the same cut.
            if (*synth) cfg.synth.seed = seed_override;
            if (*preprocess) cfg.split.seed = seed_override;
            if (*pretrain) cfg.train.seed = seed_override;
            if (*eval_cmd) cfg.eval.seed = seed_override;
        }
        if (*synth) {
            cmd_synth(cfg);
        } else if (*preprocess) {
            cmd_preprocess(cfg);
        } else if (*pretrain) {
            if (!loss_override.empty()) cfg.train.loss_kind = emargin::loss_kind_from(loss_override);
            cmd_pretrain(cfg, pretrain_data, presplit, random_init);
        } else if (*eval_cmd) {
            if (!assignment_override.empty()) {
                if (assignment_override != "kmeans" && assignment_override != "labels")
                    bad_config("--assignment must be kmeans or labels, got \"" +
                               assignment_override + "\"");
                cfg.eval.assignment = assignment_override;
            }
            const bool have_full = !eval_data.empty();
            const bool have_parts = !eval_train_data.empty() && !eval_test_data.empty();
            if (have_full == have_parts)
                bad_config("eval needs either --data or both --train-data and --test-data");
            cmd_eval(cfg, eval_checkpoint, eval_data, eval_train_data, eval_test_data,
                     export_embeddings_flag);
        } else if (*compare) {
            cmd_compare(report_paths, compare_out);
        }
        return 0;
    } catch (const emargin::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const emargin::ContractError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const emargin::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
