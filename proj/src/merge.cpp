#include "mhj/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mhj/rng.hpp"

namespace mhj {

MergeAlgorithm merge_algorithm_from_name(const std::string& name) {
    if (name == "ta") return MergeAlgorithm::ta;
    if (name == "mb") return MergeAlgorithm::mb;
    if (name == "dare") return MergeAlgorithm::dare;
    if (name == "della") return MergeAlgorithm::della;
    throw ConfigError("unknown merge algorithm: " + name);
}

std::string merge_algorithm_name(MergeAlgorithm a) {
    switch (a) {
        case MergeAlgorithm::ta: return "ta";
        case MergeAlgorithm::mb: return "mb";
        case MergeAlgorithm::dare: return "dare";
        case MergeAlgorithm::della: return "della";
    }
    throw ConfigError("unknown merge algorithm");
}

void MergeSpec::validate() const {
    for (double k : ratios)
        if (!(std::isfinite(k) && k >= 0.0)) throw ConfigError("merge spec: ratios must be finite and >= 0");
    if (!(mb_top_frac >= 0.0 && mb_bottom_frac >= 0.0 && mb_top_frac + mb_bottom_frac < 1.0))
        throw ConfigError("merge spec: mb fractions must satisfy beta + gamma < 1");
    if (!(dare_drop_rate >= 0.0 && dare_drop_rate < 1.0))
        throw ConfigError("merge spec: dare_drop_rate must be in [0,1)");
    if (!(della_delta - della_epsilon > 0.0 && della_delta + della_epsilon <= 1.0))
        throw ConfigError("merge spec: della window must satisfy 0 < delta-eps and delta+eps <= 1");
}

std::vector<double> resolve_ratios(std::size_t n, std::vector<double> ratios) {
    if (n == 0) throw ConfigError("merge: no task vectors");
    if (ratios.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
    if (ratios.size() == 1) return std::vector<double>(n, ratios[0]);
    if (ratios.size() != n)
        throw ConfigError("merge: ratio count does not match task vector count");
    return ratios;
}

namespace {

// floor(frac * n) with a nudge so exact products like 0.2*5 do not lose a
// unit to binary rounding.
std::size_t frac_count(double frac, std::size_t n) {
    return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
}

void check_all_compatible(const std::vector<TaskVector>& deltas) {
    if (deltas.empty()) throw ConfigError("merge: no task vectors");
    for (std::size_t i = 1; i < deltas.size(); ++i)
        check_shape_compatible(deltas[0].delta, deltas[i].delta);
}

TaskVector weighted_sum(const std::vector<TaskVector>& deltas, const std::vector<double>& ratios) {
    TaskVector out;
    out.delta = zeros_like(deltas[0].delta);
    for (std::size_t i = 0; i < deltas.size(); ++i)
        add_scaled(out.delta, deltas[i].delta, ratios[i]);
    return out;
}

void mask_tensor_breadcrumbs(Tensor& t, double beta, double gamma) {
    const std::size_t n = t.size();
    const std::size_t n_top = frac_count(beta, n);
    const std::size_t n_bot = frac_count(gamma, n);
    if (n_top + n_bot == 0) return;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(t.data[a]);
        const double mb = std::fabs(t.data[b]);
        return ma != mb ? ma < mb : a < b;
    });
    for (std::size_t i = 0; i < n_bot; ++i) t.data[order[i]] = 0.0;
    for (std::size_t i = 0; i < n_top; ++i) t.data[order[n - 1 - i]] = 0.0;
}

// Ranked keep-probabilities for one row, same window rule as the attack's
// sparsifier: p = (delta - eps) + rhat * 2*eps, rhat from ascending |value|
// ranks with index tie-break; single-element or all-tied rows get rhat = 0.5.
void drop_rescale_row(double* row, std::size_t len, double delta_d, double epsilon_d, Rng& rng) {
    std::vector<std::size_t> order(len);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(row[a]);
        const double mb = std::fabs(row[b]);
        return ma != mb ? ma < mb : a < b;
    });
    bool all_tied = true;
    for (std::size_t i = 1; i < len && all_tied; ++i)
        all_tied = std::fabs(row[order[i]]) == std::fabs(row[order[0]]);

    std::vector<double> keep_prob(len);
    if (len == 1 || all_tied) {
        std::fill(keep_prob.begin(), keep_prob.end(), delta_d);
    } else {
        for (std::size_t pos = 0; pos < len; ++pos) {
            const double rhat = static_cast<double>(pos) / static_cast<double>(len - 1);
            keep_prob[order[pos]] = (delta_d - epsilon_d) + rhat * (2.0 * epsilon_d);
        }
    }
    for (std::size_t j = 0; j < len; ++j)
        row[j] = rng.bernoulli(keep_prob[j]) ? row[j] / keep_prob[j] : 0.0;
}

} // namespace

TaskVector merge_ta(const std::vector<TaskVector>& deltas, std::vector<double> ratios) {
    check_all_compatible(deltas);
    return weighted_sum(deltas, resolve_ratios(deltas.size(), std::move(ratios)));
}

TaskVector merge_breadcrumbs(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                             double beta, double gamma) {
    if (!(beta >= 0.0 && gamma >= 0.0 && beta + gamma < 1.0))
        throw ConfigError("merge_breadcrumbs: beta + gamma must be < 1");
    check_all_compatible(deltas);
    std::vector<TaskVector> masked = deltas;
    for (TaskVector& tv : masked)
        for (auto& [name, t] : tv.delta.entries) mask_tensor_breadcrumbs(t, beta, gamma);
    return weighted_sum(masked, resolve_ratios(deltas.size(), std::move(ratios)));
}

TaskVector merge_dare(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                      double drop_rate, std::uint64_t seed) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0))
        throw ConfigError("merge_dare: drop_rate must be in [0,1)");
    check_all_compatible(deltas);
    const double keep = 1.0 - drop_rate;
    std::vector<TaskVector> dropped = deltas;
    for (std::size_t i = 0; i < dropped.size(); ++i) {
        Rng rng(derive_seed(seed, "dare", i));
        for (auto& [name, t] : dropped[i].delta.entries)
            for (double& v : t.data) v = rng.bernoulli(keep) ? v / keep : 0.0;
    }
    return weighted_sum(dropped, resolve_ratios(deltas.size(), std::move(ratios)));
}

TaskVector merge_della(const std::vector<TaskVector>& deltas, std::vector<double> ratios,
                       double delta_d, double epsilon_d, std::uint64_t seed) {
    if (!(delta_d - epsilon_d > 0.0 && delta_d + epsilon_d <= 1.0))
        throw ConfigError("merge_della: window must satisfy 0 < delta-eps and delta+eps <= 1");
    check_all_compatible(deltas);
    std::vector<TaskVector> dropped = deltas;
    for (std::size_t i = 0; i < dropped.size(); ++i) {
        Rng rng(derive_seed(seed, "della", i));
        for (auto& [name, t] : dropped[i].delta.entries) {
            if (t.shape.size() == 2) {
                const std::size_t rows = t.shape[0];
                const std::size_t cols = t.shape[1];
                for (std::size_t r = 0; r < rows; ++r)
                    drop_rescale_row(&t.data[r * cols], cols, delta_d, epsilon_d, rng);
            } else {
                drop_rescale_row(t.data.data(), t.size(), delta_d, epsilon_d, rng);
            }
        }
    }
    return weighted_sum(dropped, resolve_ratios(deltas.size(), std::move(ratios)));
}

ParamSet merge(const ParamSet& base, const std::vector<ParamSet>& uploads, const MergeSpec& spec) {
    spec.validate();
    if (uploads.empty()) throw ConfigError("merge: no upload models");
    std::vector<TaskVector> deltas;
    deltas.reserve(uploads.size());
    for (const ParamSet& u : uploads) deltas.push_back(task_vector(u, base));

    TaskVector merged;
    switch (spec.algorithm) {
        case MergeAlgorithm::ta:
            merged = merge_ta(deltas, spec.ratios);
            break;
        case MergeAlgorithm::mb:
            merged = merge_breadcrumbs(deltas, spec.ratios, spec.mb_top_frac, spec.mb_bottom_frac);
            break;
        case MergeAlgorithm::dare:
            merged = merge_dare(deltas, spec.ratios, spec.dare_drop_rate, spec.seed);
            break;
        case MergeAlgorithm::della:
            merged = merge_della(deltas, spec.ratios, spec.della_delta, spec.della_epsilon, spec.seed);
            break;
    }
    return apply_delta(base, merged, 1.0);
}

} // namespace mhj
