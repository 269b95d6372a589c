#include "mhj/toy_model.hpp"

#include <algorithm>
#include <cmath>

#include "mhj/rng.hpp"

namespace mhj {

void ModelConfig::validate() const {
    if (vocab_size < 8) throw ConfigError("model config: vocab_size must be >= 8");
    if (embed_dim < 2) throw ConfigError("model config: embed_dim must be >= 2");
    if (hidden_dim < 2) throw ConfigError("model config: hidden_dim must be >= 2");
    if (num_labels < 3) throw ConfigError("model config: num_labels must be >= 3");
}

ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto uniform_matrix = [&](std::size_t rows, std::size_t cols) {
        Tensor t = Tensor::zeros({rows, cols});
        const double s = 1.0 / std::sqrt(static_cast<double>(rows));
        for (double& v : t.data) v = rng.uniform(-s, s);
        return t;
    };
    ParamSet p;
    p.entries.emplace("embed.W", uniform_matrix(cfg.vocab_size, cfg.embed_dim));
    p.entries.emplace("hidden.W", uniform_matrix(cfg.embed_dim, cfg.hidden_dim));
    p.entries.emplace("hidden.b", Tensor::zeros({cfg.hidden_dim}));
    p.entries.emplace("out.W", uniform_matrix(cfg.hidden_dim, cfg.num_labels));
    p.entries.emplace("out.b", Tensor::zeros({cfg.num_labels}));
    return p;
}

namespace {

struct Dims {
    std::size_t V, d, h, L;
};

Dims dims_of(const ParamSet& p) {
    const Tensor& E = p.at("embed.W");
    const Tensor& bh = p.at("hidden.b");
    const Tensor& bo = p.at("out.b");
    return {E.shape.at(0), E.shape.at(1), bh.data.size(), bo.data.size()};
}

struct Activations {
    std::vector<double> embed_mean; // d
    std::vector<double> hidden;     // h, post-tanh
    std::vector<double> probs;      // L
};

Activations run_forward(const ParamSet& p, const std::vector<TokenId>& tokens) {
    if (tokens.empty()) throw EmptyInput("forward: no tokens");
    const Dims dm = dims_of(p);
    const auto& E = p.at("embed.W").data;
    const auto& W1 = p.at("hidden.W").data;
    const auto& b1 = p.at("hidden.b").data;
    const auto& W2 = p.at("out.W").data;
    const auto& b2 = p.at("out.b").data;

    Activations act;
    act.embed_mean.assign(dm.d, 0.0);
    for (TokenId tok : tokens) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= dm.V)
            throw TokenOutOfRange("forward: token id " + std::to_string(tok) + " out of range");
        const double* row = &E[static_cast<std::size_t>(tok) * dm.d];
        for (std::size_t a = 0; a < dm.d; ++a) act.embed_mean[a] += row[a];
    }
    const double inv_t = 1.0 / static_cast<double>(tokens.size());
    for (double& v : act.embed_mean) v *= inv_t;

    act.hidden.assign(dm.h, 0.0);
    for (std::size_t k = 0; k < dm.h; ++k) {
        double z = b1[k];
        for (std::size_t a = 0; a < dm.d; ++a) z += act.embed_mean[a] * W1[a * dm.h + k];
        act.hidden[k] = std::tanh(z);
    }

    std::vector<double> logits(dm.L);
    for (std::size_t l = 0; l < dm.L; ++l) {
        double z = b2[l];
        for (std::size_t k = 0; k < dm.h; ++k) z += act.hidden[k] * W2[k * dm.L + l];
        logits[l] = z;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    act.probs.resize(dm.L);
    for (std::size_t l = 0; l < dm.L; ++l) {
        act.probs[l] = std::exp(logits[l] - mx);
        sum += act.probs[l];
    }
    for (double& v : act.probs) v /= sum;
    return act;
}

} // namespace

std::vector<double> forward(const ParamSet& params, const std::vector<TokenId>& tokens) {
    return run_forward(params, tokens).probs;
}

std::vector<double> hidden_activations(const ParamSet& params, const std::vector<TokenId>& tokens) {
    return run_forward(params, tokens).hidden;
}

LossGrad loss_and_grad(const ParamSet& params, std::span<const Sample> batch) {
    if (batch.empty()) throw EmptyInput("loss_and_grad: empty batch");
    const Dims dm = dims_of(params);
    const auto& W1 = params.at("hidden.W").data;
    const auto& W2 = params.at("out.W").data;

    LossGrad out;
    out.grad = zeros_like(params);
    auto& gE = out.grad.at("embed.W").data;
    auto& gW1 = out.grad.at("hidden.W").data;
    auto& gb1 = out.grad.at("hidden.b").data;
    auto& gW2 = out.grad.at("out.W").data;
    auto& gb2 = out.grad.at("out.b").data;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const Sample& s : batch) {
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= dm.L)
            throw TokenOutOfRange("loss_and_grad: label out of range");
        const Activations act = run_forward(params, s.tokens);
        out.loss += -std::log(act.probs[static_cast<std::size_t>(s.label)]) * inv_b;

        // dL/dlogits = (p - onehot(y)) / B
        std::vector<double> g_o(act.probs);
        g_o[static_cast<std::size_t>(s.label)] -= 1.0;
        for (double& v : g_o) v *= inv_b;

        std::vector<double> g_a(dm.h, 0.0);
        for (std::size_t k = 0; k < dm.h; ++k) {
            for (std::size_t l = 0; l < dm.L; ++l) {
                gW2[k * dm.L + l] += act.hidden[k] * g_o[l];
                g_a[k] += W2[k * dm.L + l] * g_o[l];
            }
        }
        for (std::size_t l = 0; l < dm.L; ++l) gb2[l] += g_o[l];

        std::vector<double> g_z(dm.h);
        for (std::size_t k = 0; k < dm.h; ++k)
            g_z[k] = g_a[k] * (1.0 - act.hidden[k] * act.hidden[k]);

        std::vector<double> g_e(dm.d, 0.0);
        for (std::size_t a = 0; a < dm.d; ++a) {
            for (std::size_t k = 0; k < dm.h; ++k) {
                gW1[a * dm.h + k] += act.embed_mean[a] * g_z[k];
                g_e[a] += W1[a * dm.h + k] * g_z[k];
            }
        }
        for (std::size_t k = 0; k < dm.h; ++k) gb1[k] += g_z[k];

        const double inv_t = 1.0 / static_cast<double>(s.tokens.size());
        for (TokenId tok : s.tokens) {
            double* row = &gE[static_cast<std::size_t>(tok) * dm.d];
            for (std::size_t a = 0; a < dm.d; ++a) row[a] += g_e[a] * inv_t;
        }
    }
    return out;
}

ParamSet train(const ParamSet& init, const Dataset& data, const TrainConfig& cfg, TrainTrace* trace) {
    if (data.samples.empty()) throw EmptyInput("train: empty dataset");
    if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
        throw ConfigError("train: learning_rate must be finite and >= 0");

    ParamSet params = init;
    std::vector<Sample> samples = data.samples;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "epoch", epoch));
        rng.shuffle(samples);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
            const std::size_t len = std::min(cfg.batch_size, samples.size() - start);
            const LossGrad lg =
                loss_and_grad(params, std::span<const Sample>(samples.data() + start, len));
            add_scaled(params, lg.grad, -cfg.learning_rate);
            epoch_loss += lg.loss;
            ++batches;
        }
        if (trace) trace->epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    }
    return params;
}

int predict(const ParamSet& params, const std::vector<TokenId>& tokens) {
    const std::vector<double> p = forward(params, tokens);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

} // namespace mhj
