#include "emargin/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>

#include <json.hpp>

#include "emargin/bytes.hpp"
#include "emargin/errors.hpp"
#include "emargin/rng.hpp"

namespace emargin {

using nlohmann::json;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

// JSON has no encoding for non-finite reals (an infinite threshold is a
// legitimate config), so those become marker strings.
json real_to_json(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

double real_from_json(const json& j, const std::string& what, const std::string& path) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw FormatError(path + ": checkpoint field " + what + " is not a real number");
}

const json& field(const json& j, const std::string& name, const std::string& path) {
    auto it = j.find(name);
    if (it == j.end()) {
        throw FormatError(path + ": checkpoint header missing field " + name);
    }
    return *it;
}

std::string scope_name(PseudoLabelScope scope) {
    return scope == PseudoLabelScope::pairwise ? "pairwise" : "adjacent_only";
}

PseudoLabelScope scope_from(const std::string& name, const std::string& path) {
    if (name == "pairwise") return PseudoLabelScope::pairwise;
    if (name == "adjacent_only") return PseudoLabelScope::adjacent_only;
    throw FormatError(path + ": unknown pseudo-label scope '" + name + "'");
}

// The serialized array order: parameters, then running statistics, then
// optimizer moments. Loaders follow the header's declaration, so this list
// is the single source of truth for writers.
struct NamedArray {
    std::string name;
    ad::Shape shape;
    const std::vector<double>* values;
};

std::vector<NamedArray> array_manifest(const Checkpoint& ckpt) {
    std::vector<NamedArray> arrays;
    auto refs = parameter_refs(const_cast<EncoderParams&>(ckpt.params));  // read-only traversal
    for (const auto& [name, tensor] : refs) {
        arrays.push_back({name, tensor->shape(), &tensor->data()});
    }
    for (std::size_t b = 0; b < ckpt.params.blocks.size(); ++b) {
        const EncoderBlock& block = ckpt.params.blocks[b];
        const std::string prefix = "block" + std::to_string(b) + ".bn.";
        arrays.push_back({prefix + "running_mean",
                          {block.bn_state.running_mean.size()},
                          &block.bn_state.running_mean});
        arrays.push_back({prefix + "running_var",
                          {block.bn_state.running_var.size()},
                          &block.bn_state.running_var});
    }
    if (ckpt.moments.m.size() != refs.size() || ckpt.moments.v.size() != refs.size()) {
        throw ContractError("optimizer moments are not aligned with the parameter list");
    }
    for (std::size_t i = 0; i < refs.size(); ++i) {
        arrays.push_back({"adamw.m." + refs[i].first, ckpt.moments.m[i].shape(),
                          &ckpt.moments.m[i].data()});
        arrays.push_back({"adamw.v." + refs[i].first, ckpt.moments.v[i].shape(),
                          &ckpt.moments.v[i].data()});
    }
    return arrays;
}

}  // namespace

std::string loss_kind_name(LossKind kind) {
    return kind == LossKind::emargin ? "emargin" : "infonce";
}

LossKind loss_kind_from(const std::string& name) {
    if (name == "emargin") return LossKind::emargin;
    if (name == "infonce") return LossKind::infonce;
    throw ConfigError("unknown loss kind '" + name + "' (expected emargin or infonce)");
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(adamw.beta1 >= 0.0) || adamw.beta1 >= 1.0 || !(adamw.beta2 >= 0.0) ||
        adamw.beta2 >= 1.0) {
        throw ConfigError("adamw betas must lie in [0, 1)");
    }
    if (!(adamw.epsilon > 0.0)) throw ConfigError("adamw epsilon must be positive");
    if (!(adamw.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
    loss.validate();
}

std::size_t iteration_budget(std::size_t train_instances) {
    return train_instances < 160000 ? 200 : 600;
}

OptimizerState OptimizerState::fresh(
    const std::vector<std::pair<std::string, ad::Tensor*>>& params) {
    OptimizerState state;
    for (const auto& [name, tensor] : params) {
        (void)name;
        state.m.push_back(ad::Tensor::zeros(tensor->shape()));
        state.v.push_back(ad::Tensor::zeros(tensor->shape()));
    }
    return state;
}

void adamw_step(const std::vector<std::pair<std::string, ad::Tensor*>>& params,
                const std::vector<ad::Tensor>& grads, OptimizerState& moments, std::size_t t,
                double learning_rate, const AdamWConfig& cfg) {
    if (t < 1) throw ContractError("optimizer step index must be >= 1");
    if (grads.size() != params.size() || moments.m.size() != params.size() ||
        moments.v.size() != params.size()) {
        throw ContractError("parameters, gradients and moments must align");
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params[i].first;
        ad::Tensor& param = *params[i].second;
        const std::vector<double>& g = grads[i].data();
        if (grads[i].shape() != param.shape()) {
            throw DimensionError("gradient for " + name + " has shape " +
                                 ad::shape_str(grads[i].shape()) + ", parameter is " +
                                 ad::shape_str(param.shape()));
        }
        for (double gv : g) {
            if (!std::isfinite(gv)) {
                throw NumericError("non-finite gradient for parameter " + name);
            }
        }
        const std::vector<double>& p = param.data();
        const std::vector<double>& m = moments.m[i].data();
        const std::vector<double>& v = moments.v[i].data();
        std::vector<double> m2(p.size()), v2(p.size()), p2(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) {
            m2[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v2[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m2[j] / bc1;
            const double vhat = v2[j] / bc2;
            // Decoupled weight decay: both terms read the pre-update value.
            p2[j] = p[j] - learning_rate * (mhat / (std::sqrt(vhat) + cfg.epsilon)) -
                    learning_rate * cfg.weight_decay * p[j];
        }
        moments.m[i] = ad::Tensor::from_data(param.shape(), std::move(m2));
        moments.v[i] = ad::Tensor::from_data(param.shape(), std::move(v2));
        param = ad::Tensor::from_data(param.shape(), std::move(p2), true);
    }
}

Checkpoint train(const SequenceBatch& data, const EncoderConfig& encoder_cfg,
                 const TrainConfig& cfg, const std::string& checkpoint_path) {
    encoder_cfg.validate();
    cfg.validate();
    const std::size_t batch = data.batch();
    const std::size_t steps = data.seq_len();
    const std::size_t dim = data.feature_dim();
    if (batch == 0) throw DomainError("training set is empty");
    if (steps < 3) throw DomainError("training needs sequences of at least 3 steps");
    if (dim != encoder_cfg.input_dim) {
        throw DimensionError("encoder configured for feature dim " +
                             std::to_string(encoder_cfg.input_dim) + " but data has " +
                             std::to_string(dim));
    }

    Checkpoint ckpt;
    ckpt.version = kCheckpointVersion;
    ckpt.encoder = encoder_cfg;
    ckpt.loss_kind = cfg.loss_kind;
    ckpt.loss_config = cfg.loss;
    ckpt.seed = cfg.seed;
    ckpt.params = init_params(encoder_cfg, cfg.seed);
    auto refs = parameter_refs(ckpt.params);
    ckpt.moments = OptimizerState::fresh(refs);

    const std::size_t iterations =
        cfg.iterations > 0 ? cfg.iterations : iteration_budget(batch * steps);
    ckpt.loss_trace.reserve(iterations);

    Rng sampler(cfg.seed);
    const std::vector<double>& flat = data.data.data();

    try {
        for (std::size_t step = 1; step <= iterations; ++step) {
            std::vector<double> rows(cfg.batch_size * steps * dim);
            for (std::size_t i = 0; i < cfg.batch_size; ++i) {
                const std::size_t pick = sampler.below(batch);
                const std::size_t src = pick * steps * dim;
                std::copy(flat.begin() + static_cast<std::ptrdiff_t>(src),
                          flat.begin() + static_cast<std::ptrdiff_t>(src + steps * dim),
                          rows.begin() + static_cast<std::ptrdiff_t>(i * steps * dim));
            }
            ad::Tensor inputs =
                ad::Tensor::from_data({cfg.batch_size, steps, dim}, std::move(rows));

            ad::Graph g;
            ad::Tensor embedded =
                encode(g, inputs, ckpt.params, encoder_cfg, ad::BatchNormMode::train);
            ad::Tensor loss = cfg.loss_kind == LossKind::emargin
                                  ? emargin_loss(g, inputs, embedded, cfg.loss)
                                  : plain_infonce_loss(g, embedded, cfg.loss.temperature);
            const double loss_value = loss.scalar_value();
            if (!std::isfinite(loss_value)) {
                throw NumericError("loss became non-finite at step " + std::to_string(step));
            }

            ad::GradientMap grad_map = g.backward(loss);
            std::vector<ad::Tensor> grads;
            grads.reserve(refs.size());
            for (const auto& [name, tensor] : refs) {
                (void)name;
                grads.push_back(grad_map.at(*tensor));
            }
            if (cfg.grad_clip > 0.0) {
                double sumsq = 0.0;
                for (const ad::Tensor& grad : grads) {
                    for (double v : grad.data()) sumsq += v * v;
                }
                const double norm = std::sqrt(sumsq);
                if (norm > cfg.grad_clip) {
                    const double scale = cfg.grad_clip / norm;
                    for (ad::Tensor& grad : grads) {
                        std::vector<double> scaled = grad.data();
                        for (double& v : scaled) v *= scale;
                        grad = ad::Tensor::from_data(grad.shape(), std::move(scaled));
                    }
                }
            }

            adamw_step(refs, grads, ckpt.moments, step, cfg.learning_rate, cfg.adamw);
            ckpt.loss_trace.push_back(loss_value);
            ckpt.iteration = step;
        }
    } catch (...) {
        // Flush whatever progress exists so an aborted run stays inspectable.
        if (!checkpoint_path.empty()) {
            try {
                save_checkpoint(ckpt, checkpoint_path);
            } catch (...) {
            }
        }
        throw;
    }

    if (!checkpoint_path.empty()) {
        save_checkpoint(ckpt, checkpoint_path);
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    if (ckpt.params.blocks.size() != 3) {
        throw ContractError("checkpoint params must hold exactly three blocks");
    }
    const std::vector<NamedArray> arrays = array_manifest(ckpt);

    json header;
    header["encoder"] = {{"input_dim", ckpt.encoder.input_dim},
                         {"hidden_dims", ckpt.encoder.hidden_dims},
                         {"output_dim", ckpt.encoder.output_dim},
                         {"bn_momentum", ckpt.encoder.bn_momentum},
                         {"bn_epsilon", ckpt.encoder.bn_epsilon}};
    header["loss_kind"] = loss_kind_name(ckpt.loss_kind);
    header["loss_config"] = {{"temperature", real_to_json(ckpt.loss_config.temperature)},
                             {"threshold", real_to_json(ckpt.loss_config.threshold)},
                             {"margin", real_to_json(ckpt.loss_config.margin)},
                             {"scope", scope_name(ckpt.loss_config.pseudo_label_scope)},
                             {"cosine_epsilon", real_to_json(ckpt.loss_config.cosine_epsilon)},
                             {"transform_identity", ckpt.loss_config.transform_identity}};
    header["seed"] = ckpt.seed;
    header["iteration"] = ckpt.iteration;
    header["loss_trace"] = ckpt.loss_trace;
    json manifest = json::array();
    for (const NamedArray& a : arrays) {
        manifest.push_back({{"name", a.name}, {"shape", a.shape}});
    }
    header["arrays"] = manifest;
    const std::string header_text = header.dump();

    std::string blob;
    blob += "EMGN";
    bytes::put_u32(blob, ckpt.version);
    bytes::put_u64(blob, header_text.size());
    blob += header_text;
    for (const NamedArray& a : arrays) {
        for (double v : *a.values) {
            bytes::put_f32(blob, static_cast<float>(v));
        }
    }
    bytes::write_file_atomic(path, blob);
}

Checkpoint load_checkpoint(const std::string& path) {
    bytes::ByteReader reader(bytes::slurp_file(path), path);
    if (reader.take(4, "magic") != "EMGN") {
        throw FormatError(path + ": not a checkpoint (expected magic \"EMGN\")");
    }
    const std::uint32_t version = reader.take_u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t header_len = reader.take_u64("header length");
    json header;
    try {
        header = json::parse(reader.take(static_cast<std::size_t>(header_len), "header"));
    } catch (const json::exception& e) {
        throw FormatError(path + ": bad checkpoint header: " + e.what());
    }

    Checkpoint ckpt;
    ckpt.version = version;
    const json& enc = field(header, "encoder", path);
    ckpt.encoder.input_dim = field(enc, "input_dim", path).get<std::size_t>();
    const auto hidden = field(enc, "hidden_dims", path).get<std::vector<std::size_t>>();
    if (hidden.size() != 2) {
        throw FormatError(path + ": encoder hidden_dims must list two widths");
    }
    ckpt.encoder.hidden_dims = {hidden[0], hidden[1]};
    ckpt.encoder.output_dim = field(enc, "output_dim", path).get<std::size_t>();
    ckpt.encoder.bn_momentum = real_from_json(field(enc, "bn_momentum", path), "bn_momentum", path);
    ckpt.encoder.bn_epsilon = real_from_json(field(enc, "bn_epsilon", path), "bn_epsilon", path);
    try {
        ckpt.encoder.validate();
    } catch (const ConfigError& e) {
        throw FormatError(path + ": checkpoint encoder config invalid: " + e.what());
    }

    try {
        ckpt.loss_kind = loss_kind_from(field(header, "loss_kind", path).get<std::string>());
    } catch (const ConfigError& e) {
        throw FormatError(path + ": " + e.what());
    }
    const json& lc = field(header, "loss_config", path);
    ckpt.loss_config.temperature = real_from_json(field(lc, "temperature", path), "temperature", path);
    ckpt.loss_config.threshold = real_from_json(field(lc, "threshold", path), "threshold", path);
    ckpt.loss_config.margin = real_from_json(field(lc, "margin", path), "margin", path);
    ckpt.loss_config.pseudo_label_scope =
        scope_from(field(lc, "scope", path).get<std::string>(), path);
    ckpt.loss_config.cosine_epsilon =
        real_from_json(field(lc, "cosine_epsilon", path), "cosine_epsilon", path);
    ckpt.loss_config.transform_identity = field(lc, "transform_identity", path).get<bool>();
    ckpt.seed = field(header, "seed", path).get<std::uint64_t>();
    ckpt.iteration = field(header, "iteration", path).get<std::size_t>();
    ckpt.loss_trace = field(header, "loss_trace", path).get<std::vector<double>>();

    // Read every declared array, then assemble parameters and moments from
    // the name -> values map so field order stays a format detail.
    std::map<std::string, std::pair<ad::Shape, std::vector<double>>> loaded;
    for (const json& entry : field(header, "arrays", path)) {
        const std::string name = field(entry, "name", path).get<std::string>();
        const ad::Shape shape = field(entry, "shape", path).get<ad::Shape>();
        std::vector<double> values(ad::shape_size(shape));
        for (double& v : values) {
            v = static_cast<double>(reader.take_f32(name.c_str()));
        }
        loaded[name] = {shape, std::move(values)};
    }
    if (!reader.exhausted()) {
        throw FormatError(path + ": trailing bytes after declared arrays");
    }

    auto fetch = [&](const std::string& name, const ad::Shape& expect) {
        auto it = loaded.find(name);
        if (it == loaded.end()) {
            throw FormatError(path + ": checkpoint missing array " + name);
        }
        if (it->second.first != expect) {
            throw FormatError(path + ": array " + name + " has shape " +
                              ad::shape_str(it->second.first) + ", expected " +
                              ad::shape_str(expect));
        }
        return it->second.second;
    };

    const auto dims = ckpt.encoder.dims();
    for (std::size_t b = 0; b < 3; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        const ad::Shape wshape{dims[b], dims[b + 1]};
        const ad::Shape cshape{dims[b + 1]};
        EncoderBlock block{
            ad::Tensor::from_data(wshape, fetch(prefix + "weight", wshape), true),
            ad::Tensor::from_data(cshape, fetch(prefix + "bias", cshape), true),
            ad::Tensor::from_data(cshape, fetch(prefix + "gamma", cshape), true),
            ad::Tensor::from_data(cshape, fetch(prefix + "beta", cshape), true),
            ad::BatchNormState{fetch(prefix + "bn.running_mean", cshape),
                               fetch(prefix + "bn.running_var", cshape)},
        };
        ckpt.params.blocks.push_back(std::move(block));
    }
    auto refs = parameter_refs(ckpt.params);
    for (const auto& [name, tensor] : refs) {
        ckpt.moments.m.push_back(
            ad::Tensor::from_data(tensor->shape(), fetch("adamw.m." + name, tensor->shape())));
        ckpt.moments.v.push_back(
            ad::Tensor::from_data(tensor->shape(), fetch("adamw.v." + name, tensor->shape())));
    }
    return ckpt;
}

}  // namespace emargin
