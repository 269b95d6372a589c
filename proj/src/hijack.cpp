#include "mhj/hijack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mhj/rng.hpp"

namespace mhj {

void AttackConfig::validate() const {
    if (!(delta - epsilon > 0.0))
        throw ConfigError("attack config: delta - epsilon must be > 0");
    if (!(delta + epsilon <= 1.0))
        throw ConfigError("attack config: delta + epsilon must be <= 1");
    if (!(lambda > 0.0)) throw ConfigError("attack config: lambda must be > 0");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("attack config: rho must be in [0,1]");
    if (shadow_specs.empty()) throw ConfigError("attack config: need at least one shadow task");
    if (shadow_per_task_n < 1) throw ConfigError("attack config: shadow_per_task_n must be >= 1");
    if (surrogate_n < 1) throw ConfigError("attack config: surrogate_n must be >= 1");
    if (trigger.trigger_tokens.empty()) throw ConfigError("attack config: empty trigger");
    surrogate_spec.validate();
    for (const TaskSpec& s : shadow_specs) s.validate();
    auto in_band = [](const TaskSpec& s, const std::vector<TokenId>& toks) {
        for (TokenId t : toks)
            if (t < s.reserved_band_begin)
                throw ConfigError("attack config: trigger token below the reserved band of task " + s.name);
    };
    in_band(surrogate_spec, trigger.trigger_tokens);
    for (const TaskSpec& s : shadow_specs) in_band(s, trigger.trigger_tokens);
}

std::size_t SparsifyTrace::kept_count() const {
    std::size_t n = 0;
    for (std::uint8_t k : keep_mask) n += k;
    return n;
}

BackdoorDerivation derive_backdoor_vector(const ParamSet& base, const Dataset& shadow,
                                          const AttackConfig& cfg) {
    cfg.validate();
    if (shadow.samples.empty()) throw EmptyInput("derive_backdoor_vector: empty shadow dataset");
    BackdoorDerivation out;
    out.shadow_clean = train(base, shadow, cfg.train_cfg);
    const Dataset poisoned =
        poison(shadow, cfg.trigger, cfg.rho, derive_seed(cfg.train_cfg.seed, "shadow_poison"));
    out.shadow_backdoored = train(base, poisoned, cfg.train_cfg);
    out.tau = task_vector(out.shadow_backdoored, out.shadow_clean);
    return out;
}

std::vector<std::size_t> magnitude_ranks(const TaskVector& tau) {
    const std::vector<double> flat = flatten(tau.delta);
    const std::size_t m = flat.size();
    if (m == 0) throw ConfigError("magnitude_ranks: empty task vector");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(flat[a]);
        const double mb = std::fabs(flat[b]);
        return ma != mb ? ma < mb : a < b;
    });
    std::vector<std::size_t> ranks(m);
    for (std::size_t pos = 0; pos < m; ++pos) ranks[order[pos]] = pos;
    return ranks;
}

std::vector<double> rank_normalize(const TaskVector& tau) {
    const std::vector<double> flat = flatten(tau.delta);
    const std::size_t m = flat.size();
    if (m == 0) throw ConfigError("rank_normalize: empty task vector");
    bool all_tied = true;
    for (std::size_t j = 1; j < m && all_tied; ++j)
        all_tied = std::fabs(flat[j]) == std::fabs(flat[0]);
    if (m == 1 || all_tied) return std::vector<double>(m, 0.5);

    const std::vector<std::size_t> ranks = magnitude_ranks(tau);
    std::vector<double> rhat(m);
    const double denom = static_cast<double>(m - 1);
    for (std::size_t j = 0; j < m; ++j) rhat[j] = static_cast<double>(ranks[j]) / denom;
    return rhat;
}

std::vector<double> keep_probabilities(const std::vector<double>& rhat, double delta, double epsilon) {
    if (!(delta - epsilon > 0.0 && delta + epsilon <= 1.0))
        throw ConfigError("keep_probabilities: need 0 < delta-epsilon and delta+epsilon <= 1");
    std::vector<double> p(rhat.size());
    const double lo = delta - epsilon;
    for (std::size_t j = 0; j < rhat.size(); ++j) p[j] = lo + rhat[j] * (2.0 * epsilon);
    return p;
}

std::pair<TaskVector, SparsifyTrace> sparsify(const TaskVector& tau,
                                              const std::vector<double>& keep_prob,
                                              std::uint64_t seed) {
    std::vector<double> flat = flatten(tau.delta);
    const std::size_t m = flat.size();
    if (keep_prob.size() != m) throw ConfigError("sparsify: probability vector size mismatch");
    for (double p : keep_prob)
        if (!(p > 0.0 && p <= 1.0)) throw ConfigError("sparsify: keep probabilities must be in (0,1]");

    SparsifyTrace trace;
    trace.ranks = magnitude_ranks(tau);
    trace.normalized = rank_normalize(tau);
    trace.keep_prob = keep_prob;
    trace.keep_mask.resize(m);

    Rng rng(seed);
    for (std::size_t j = 0; j < m; ++j) {
        const bool keep = rng.bernoulli(keep_prob[j]);
        trace.keep_mask[j] = keep ? 1 : 0;
        flat[j] = keep ? flat[j] / keep_prob[j] : 0.0;
    }
    TaskVector sparse;
    sparse.delta = unflatten_like(tau.delta, flat);
    return {std::move(sparse), std::move(trace)};
}

ParamSet build_malicious_base(const ParamSet& theta_pre, const TaskVector& tau_sparse, double lambda) {
    if (!(lambda > 0.0)) throw ConfigError("build_malicious_base: lambda must be > 0");
    return apply_delta(theta_pre, tau_sparse, lambda);
}

ParamSet mask_finetune(const ParamSet& malicious_base, const Dataset& surrogate,
                       const AttackConfig& cfg) {
    if (surrogate.samples.empty()) throw EmptyInput("mask_finetune: empty surrogate dataset");
    const TrainConfig tc = cfg.resolved_surrogate_train_cfg();
    const Dataset poisoned =
        poison(surrogate, cfg.trigger, cfg.rho, derive_seed(tc.seed, "surrogate_poison"));
    return train(malicious_base, poisoned, tc);
}

std::pair<ParamSet, AttackArtifacts> build_upload_model(const ParamSet& theta_pre,
                                                        const AttackConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    AttackArtifacts art;

    art.shadow = gen_shadow(cfg.shadow_specs, cfg.shadow_per_task_n, derive_seed(seed, "shadow_data"));

    AttackConfig step1 = cfg;
    step1.train_cfg.seed = derive_seed(seed, "step1");
    BackdoorDerivation der = derive_backdoor_vector(theta_pre, art.shadow, step1);
    art.tau = std::move(der.tau);
    art.shadow_clean = std::move(der.shadow_clean);
    art.shadow_backdoored = std::move(der.shadow_backdoored);

    const std::vector<double> rhat = rank_normalize(art.tau);
    const std::vector<double> p = keep_probabilities(rhat, cfg.delta, cfg.epsilon);
    auto [sparse, trace] = sparsify(art.tau, p, derive_seed(seed, "sparsify"));
    art.tau_sparse = std::move(sparse);
    art.trace = std::move(trace);

    art.malicious_base = build_malicious_base(theta_pre, art.tau_sparse, cfg.lambda);

    art.surrogate_train =
        gen_dataset(cfg.surrogate_spec, cfg.surrogate_n, derive_seed(seed, "surrogate_data", 0),
                    Split::train);

    AttackConfig step4 = cfg;
    TrainConfig tc4 = cfg.resolved_surrogate_train_cfg();
    tc4.seed = derive_seed(seed, "step4");
    step4.surrogate_train_cfg = tc4;
    ParamSet upload = mask_finetune(art.malicious_base, art.surrogate_train, step4);
    return {std::move(upload), std::move(art)};
}

} // namespace mhj
