#include "mhj/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mhj/rng.hpp"

namespace mhj {

DefenseMethod defense_method_from_name(const std::string& name) {
    if (name == "fine-prune" || name == "fine_prune") return DefenseMethod::fine_prune;
    if (name == "cleangen" || name == "suspicion_filter") return DefenseMethod::suspicion_filter;
    if (name == "paraphrase" || name == "paraphrase_sim") return DefenseMethod::paraphrase_sim;
    throw ConfigError("unknown defense method: " + name);
}

std::string defense_method_name(DefenseMethod m) {
    switch (m) {
        case DefenseMethod::fine_prune: return "fine-prune";
        case DefenseMethod::suspicion_filter: return "cleangen";
        case DefenseMethod::paraphrase_sim: return "paraphrase";
    }
    throw ConfigError("unknown defense method");
}

void DefenseConfig::validate() const {
    if (!(prune_ratio >= 0.0 && prune_ratio < 1.0))
        throw ConfigError("defense config: prune_ratio must be in [0,1)");
    if (calib_n < 1) throw ConfigError("defense config: calib_n must be >= 1");
    if (!(alpha > 1.0)) throw ConfigError("defense config: alpha must be > 1");
    if (!(q_remove >= 0.0 && q_remove <= 1.0))
        throw ConfigError("defense config: q_remove must be in [0,1]");
    if (!(q_noise >= 0.0 && q_noise <= 1.0))
        throw ConfigError("defense config: q_noise must be in [0,1]");
}

ParamSet fine_prune_finetune(const ParamSet& model, const Dataset& calib, const TrainConfig& cfg) {
    return train(model, calib, cfg);
}

ParamSet fine_prune_prune(const ParamSet& model, const Dataset& calib, double prune_ratio) {
    if (calib.samples.empty()) throw EmptyInput("fine_prune_prune: empty calibration set");
    if (!(prune_ratio >= 0.0 && prune_ratio < 1.0))
        throw ConfigError("fine_prune_prune: prune_ratio must be in [0,1)");

    const std::size_t h = model.at("hidden.b").data.size();
    const std::size_t k = static_cast<std::size_t>(std::floor(prune_ratio * static_cast<double>(h) + 1e-9));
    if (k == 0) return model;

    std::vector<double> mean_act(h, 0.0);
    for (const Sample& s : calib.samples) {
        const std::vector<double> act = hidden_activations(model, s.tokens);
        for (std::size_t u = 0; u < h; ++u) mean_act[u] += std::fabs(act[u]);
    }
    for (double& v : mean_act) v /= static_cast<double>(calib.samples.size());

    std::vector<std::size_t> order(h);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return mean_act[a] != mean_act[b] ? mean_act[a] < mean_act[b] : a < b;
    });

    ParamSet out = model;
    Tensor& w1 = out.at("hidden.W");
    Tensor& b1 = out.at("hidden.b");
    Tensor& w2 = out.at("out.W");
    const std::size_t d = w1.shape.at(0);
    const std::size_t L = w2.shape.at(1);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t u = order[i];
        for (std::size_t a = 0; a < d; ++a) w1.data[a * h + u] = 0.0;
        b1.data[u] = 0.0;
        for (std::size_t l = 0; l < L; ++l) w2.data[u * L + l] = 0.0;
    }
    return out;
}

ParamSet fine_prune(const ParamSet& model, const Dataset& calib, const DefenseConfig& cfg) {
    cfg.validate();
    const ParamSet tuned = fine_prune_finetune(model, calib, cfg.train_cfg);
    return fine_prune_prune(tuned, calib, cfg.prune_ratio);
}

int suspicion_filter(const ParamSet& merged, const ParamSet& reference, double alpha,
                     const std::vector<TokenId>& tokens) {
    const std::vector<double> pm = forward(merged, tokens);
    const int y = static_cast<int>(std::max_element(pm.begin(), pm.end()) - pm.begin());
    const std::vector<double> pr = forward(reference, tokens);
    const double suspicion = pm[static_cast<std::size_t>(y)] / pr[static_cast<std::size_t>(y)];
    if (suspicion > alpha)
        return static_cast<int>(std::max_element(pr.begin(), pr.end()) - pr.begin());
    return y;
}

PredictFn suspicion_predictor(const ParamSet& merged, const ParamSet& reference, double alpha) {
    return [merged, reference, alpha](const std::vector<TokenId>& tokens) {
        return suspicion_filter(merged, reference, alpha, tokens);
    };
}

Sample simulate_paraphrase(const Sample& s, const TaskSpec& spec, double q_remove, double q_noise,
                           std::uint64_t seed) {
    Rng rng(seed);
    const bool drop_reserved = rng.bernoulli(q_remove);

    Sample out = s;
    out.tokens.clear();
    for (TokenId tok : s.tokens) {
        if (tok >= spec.reserved_band_begin) {
            if (!drop_reserved) out.tokens.push_back(tok);
            continue;
        }
        const std::vector<TokenId>* pool = nullptr;
        for (const auto& [label, toks] : spec.pools) {
            if (std::find(toks.begin(), toks.end(), tok) != toks.end()) {
                pool = &toks;
                break;
            }
        }
        if (pool && pool->size() > 1 && rng.bernoulli(q_noise)) {
            // substitute: uniform over the other pool members
            const std::size_t self =
                static_cast<std::size_t>(std::find(pool->begin(), pool->end(), tok) - pool->begin());
            std::size_t pick = static_cast<std::size_t>(rng.below(pool->size() - 1));
            if (pick >= self) ++pick;
            out.tokens.push_back((*pool)[pick]);
        } else {
            out.tokens.push_back(tok);
        }
    }
    if (out.tokens.empty()) out.tokens = s.tokens; // all-trigger input; keep as-is
    return out;
}

SampleTransform paraphrase_transform(const TaskSpec& spec, double q_remove, double q_noise) {
    return [spec, q_remove, q_noise](const Sample& s, std::uint64_t seed) {
        return simulate_paraphrase(s, spec, q_remove, q_noise, seed);
    };
}

} // namespace mhj
