#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhj/tensor_store.hpp"

namespace mhj {

enum class MergeAlgorithm { ta, mb, dare, della };

MergeAlgorithm merge_algorithm_from_name(const std::string& name); // ta|mb|dare|della
std::string merge_algorithm_name(MergeAlgorithm a);

struct MergeSpec {
    MergeAlgorithm algorithm = MergeAlgorithm::ta;
    std::vector<double> ratios;   // empty => 1/N each; one entry => replicated
    double mb_top_frac = 0.01;    // beta: outlier fraction zeroed per tensor
    double mb_bottom_frac = 0.20; // gamma: small-perturbation fraction zeroed
    double dare_drop_rate = 0.2;
    double della_delta = 0.8; // per-row keep-probability window midpoint
    double della_epsilon = 0.1;
    std::uint64_t seed = 0;

    void validate() const; // throws ConfigError
};

// Sum of k_i * delta_i in list order.
TaskVector merge_ta(const std::vector<TaskVector>& deltas, std::vector<double> ratios);

// Per task vector, per named tensor: zero the bottom floor(gamma*n) and top
// floor(beta*n) coordinates ranked ascending by (|value|, index), then
// combine like TA.
TaskVector merge_breadcrumbs(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                             double beta, double gamma);

// Per delta: i.i.d. Bernoulli(1 - drop_rate) keep mask, survivors scaled by
// 1/(1 - drop_rate); then TA. Unbiased in expectation.
TaskVector merge_dare(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                      double drop_rate, std::uint64_t seed);

// Per delta, per tensor row (1-D tensors are a single row): rank by |value|
// ascending, map normalized rank into the keep window
// [delta_d - epsilon_d, delta_d + epsilon_d], Bernoulli sample, rescale kept
// coordinates by 1/p; then TA.
TaskVector merge_della(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                       double delta_d, double epsilon_d, std::uint64_t seed);

// Dispatch: deltas = uploads - base, run the selected algorithm, return
// base + merged delta.
ParamSet merge(const ParamSet& base, const std::vector<ParamSet>& uploads, const MergeSpec& spec);

std::vector<double> resolve_ratios(std::size_t n, std::vector<double> ratios);

} // namespace mhj
