#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "mhj/synth_data.hpp"
#include "mhj/tensor_store.hpp"
#include "mhj/toy_model.hpp"

namespace mhj {

// Settings for the four-step construction of the malicious upload model.
struct AttackConfig {
    double delta = 0.7;   // sparsification density midpoint
    double epsilon = 0.2; // half-width of the keep-probability window
    double lambda = 2.0;  // rescaling factor applied to the sparse vector
    double rho = 0.2;     // poisoning ratio

    std::vector<TaskSpec> shadow_specs; // K auxiliary tasks
    std::size_t shadow_per_task_n = 125;
    TaskSpec surrogate_spec; // the task the upload model claims to serve
    std::size_t surrogate_n = 500;
    TriggerSpec trigger;
    TrainConfig train_cfg; // shadow trainings (step 1)
    // Step 4 recipe; unset means reuse train_cfg. The attacker typically
    // mirrors an ordinary upload's finetune here so the released model looks
    // like any other task model.
    std::optional<TrainConfig> surrogate_train_cfg;

    TrainConfig resolved_surrogate_train_cfg() const {
        return surrogate_train_cfg ? *surrogate_train_cfg : train_cfg;
    }

    void validate() const; // throws ConfigError
};

// Per-coordinate record of one sparsification pass, in canonical flat order.
struct SparsifyTrace {
    std::vector<std::size_t> ranks; // permutation of 0..m-1, ascending |value|
    std::vector<double> normalized; // rhat in [0,1]
    std::vector<double> keep_prob;  // p in [delta-eps, delta+eps]
    std::vector<std::uint8_t> keep_mask;

    std::size_t kept_count() const;
};

struct BackdoorDerivation {
    TaskVector tau;            // backdoored shadow model minus clean shadow model
    ParamSet shadow_clean;     // trained on the shadow data as-is
    ParamSet shadow_backdoored; // trained on the poisoned shadow data
};

// Step 1: both trainings start from the same base and share the shuffle seed
// so tau isolates the effect of poisoning.
BackdoorDerivation derive_backdoor_vector(const ParamSet& base, const Dataset& shadow,
                                          const AttackConfig& cfg);

// Ascending ranks of |tau| with index tie-break.
std::vector<std::size_t> magnitude_ranks(const TaskVector& tau);

// Normalized ranks r/(m-1). Degenerate inputs (m == 1 or all magnitudes
// tied) map every coordinate to 0.5 so the window midpoint is preserved.
std::vector<double> rank_normalize(const TaskVector& tau);

// p_j = (delta - epsilon) + rhat_j * 2 * epsilon. Requires 0 < delta-epsilon
// and delta+epsilon <= 1.
std::vector<double> keep_probabilities(const std::vector<double>& rhat, double delta, double epsilon);

// Step 2: Bernoulli keep with probability p_j; kept coordinates are rescaled
// by 1/p_j so the result is an unbiased estimate of tau.
std::pair<TaskVector, SparsifyTrace> sparsify(const TaskVector& tau,
                                              const std::vector<double>& keep_prob,
                                              std::uint64_t seed);

// Step 3: base + lambda * tau_sparse.
ParamSet build_malicious_base(const ParamSet& theta_pre, const TaskVector& tau_sparse, double lambda);

// Step 4: backdoor finetuning on the poisoned surrogate dataset.
ParamSet mask_finetune(const ParamSet& malicious_base, const Dataset& surrogate,
                       const AttackConfig& cfg);

struct AttackArtifacts {
    TaskVector tau;
    TaskVector tau_sparse;
    SparsifyTrace trace;
    ParamSet shadow_clean;
    ParamSet shadow_backdoored;
    ParamSet malicious_base;
    Dataset shadow;
    Dataset surrogate_train;
};

// Runs steps 1-4 in order with sub-seeds derived from `seed`; datasets are
// generated from the specs in the config.
std::pair<ParamSet, AttackArtifacts> build_upload_model(const ParamSet& theta_pre,
                                                        const AttackConfig& cfg, std::uint64_t seed);

} // namespace mhj
