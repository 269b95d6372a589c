#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mhj/synth_data.hpp"
#include "mhj/tensor_store.hpp"

namespace mhj {

// Embedding-bag classifier: mean token embedding -> affine -> tanh ->
// affine -> softmax. The last label index (num_labels - 1) is reserved as the
// attack target and is never used by clean tasks.
struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t embed_dim = 16;
    std::size_t hidden_dim = 32;
    std::size_t num_labels = 4;

    int target_label() const { return static_cast<int>(num_labels) - 1; }
    void validate() const; // throws ConfigError
};

struct TrainConfig {
    double learning_rate = 0.1;
    std::size_t epochs = 4;
    std::size_t batch_size = 25;
    std::uint64_t seed = 0;
};

// Tensors: embed.W (V x d), hidden.W (d x h), hidden.b (h), out.W (h x L),
// out.b (L). Weights are uniform(-s, s) with s = 1/sqrt(fan_in) where fan_in
// is the first dimension; biases start at zero. Draws happen in canonical
// name order, so a fixed seed gives a bit-identical ParamSet.
ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed);

// Probability vector over labels. Throws EmptyInput / TokenOutOfRange.
std::vector<double> forward(const ParamSet& params, const std::vector<TokenId>& tokens);

// Post-tanh hidden activations for one input (used by activation pruning).
std::vector<double> hidden_activations(const ParamSet& params, const std::vector<TokenId>& tokens);

struct LossGrad {
    double loss = 0.0;
    ParamSet grad; // same shape as the model
};

// Mean cross-entropy over the batch and its exact analytic gradient.
LossGrad loss_and_grad(const ParamSet& params, std::span<const Sample> batch);

struct TrainTrace {
    std::vector<double> epoch_loss; // mean batch loss per epoch
};

// Plain SGD, per-epoch Fisher-Yates shuffle seeded from cfg.seed.
// Deterministic for fixed inputs. epochs == 0 or learning_rate == 0 return
// the initial parameters unchanged.
ParamSet train(const ParamSet& init, const Dataset& data, const TrainConfig& cfg,
               TrainTrace* trace = nullptr);

// argmax of forward; ties resolve to the lowest label index.
int predict(const ParamSet& params, const std::vector<TokenId>& tokens);

} // namespace mhj
