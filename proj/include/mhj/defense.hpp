#pragma once

#include <cstdint>
#include <string>

#include "mhj/eval.hpp"
#include "mhj/synth_data.hpp"
#include "mhj/tensor_store.hpp"
#include "mhj/toy_model.hpp"

namespace mhj {

enum class DefenseMethod { fine_prune, suspicion_filter, paraphrase_sim };

DefenseMethod defense_method_from_name(const std::string& name); // fine-prune|cleangen|paraphrase
std::string defense_method_name(DefenseMethod m);

struct DefenseConfig {
    DefenseMethod method = DefenseMethod::fine_prune;
    double prune_ratio = 0.2;
    std::size_t calib_n = 100; // clean calibration samples per merged task
    double alpha = 20.0;       // suspicion score threshold
    double q_remove = 0.6;     // probability the paraphrase drops trigger tokens
    double q_noise = 0.1;      // per-token same-pool substitution probability
    // Calibration-stage finetune. Desk-scale full-parameter steps are far
    // stronger than the adapter finetunes the method was designed around, so
    // the default budget is kept proportionally mild.
    TrainConfig train_cfg{0.05, 2, 25, 0};
    std::uint64_t seed = 0;

    void validate() const; // throws ConfigError
};

// Stage 1 of fine-pruning: finetune on the clean calibration set.
ParamSet fine_prune_finetune(const ParamSet& model, const Dataset& calib, const TrainConfig& cfg);

// Stage 2: zero the incoming and outgoing weights of the
// floor(prune_ratio * h) hidden units with the lowest mean |tanh| activation
// over the calibration set. Shapes never change.
ParamSet fine_prune_prune(const ParamSet& model, const Dataset& calib, double prune_ratio);

ParamSet fine_prune(const ParamSet& model, const Dataset& calib, const DefenseConfig& cfg);

// Returns the merged model's prediction unless its probability exceeds the
// reference model's by more than alpha, in which case the reference's
// prediction is returned instead.
int suspicion_filter(const ParamSet& merged, const ParamSet& reference, double alpha,
                     const std::vector<TokenId>& tokens);

PredictFn suspicion_predictor(const ParamSet& merged, const ParamSet& reference, double alpha);

// Stochastic stand-in for an LLM paraphrase: with probability q_remove all
// reserved-band tokens are dropped; independently, each pool token is
// swapped for another member of the same pool with probability q_noise.
// Labels never change and reserved-band tokens are never introduced.
Sample simulate_paraphrase(const Sample& s, const TaskSpec& spec, double q_remove, double q_noise,
                           std::uint64_t seed);

SampleTransform paraphrase_transform(const TaskSpec& spec, double q_remove, double q_noise);

} // namespace mhj
