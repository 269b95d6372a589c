#include "mhj/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mhj/rng.hpp"

namespace mhj {

void TaskSpec::validate() const {
    if (name.empty()) throw ConfigError("task spec: empty name");
    if (clean_labels.empty()) throw ConfigError("task spec " + name + ": no clean labels");
    if (seq_len < 1) throw ConfigError("task spec " + name + ": seq_len must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0))
        throw ConfigError("task spec " + name + ": noise_rate must be in [0,1)");
    if (reserved_band_begin < 1)
        throw ConfigError("task spec " + name + ": reserved_band_begin must be positive");
    if (!(noise_band_begin < noise_band_end && noise_band_end <= reserved_band_begin))
        throw ConfigError("task spec " + name + ": noise band must be nonempty and below the reserved band");
    std::set<TokenId> seen;
    for (int label : clean_labels) {
        auto it = pools.find(label);
        if (it == pools.end() || it->second.empty())
            throw ConfigError("task spec " + name + ": missing pool for label " + std::to_string(label));
        for (TokenId tok : it->second) {
            if (tok < 0 || tok >= reserved_band_begin)
                throw ConfigError("task spec " + name + ": pool token overlaps reserved band");
            if (tok >= noise_band_begin && tok < noise_band_end)
                throw ConfigError("task spec " + name + ": pool token overlaps the noise band");
            if (!seen.insert(tok).second)
                throw ConfigError("task spec " + name + ": pools are not disjoint");
        }
    }
}

Dataset gen_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t stream_seed, Split split) {
    spec.validate();
    if (n == 0) throw ConfigError("gen_dataset: n must be >= 1");

    Rng rng(derive_seed(stream_seed, spec.task_seed));
    std::vector<int> labels(spec.clean_labels);
    std::sort(labels.begin(), labels.end());

    // Noise tokens come from a band no pool uses, so the label's pool is the
    // only pool present; the cap keeps pool tokens the strict majority of the
    // sequence as well.
    const std::size_t max_noise = (spec.seq_len - 1) / 2;
    const std::uint64_t noise_span =
        static_cast<std::uint64_t>(spec.noise_band_end - spec.noise_band_begin);

    Dataset out;
    out.split = split;
    out.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = labels[i % labels.size()];
        const auto& pool = spec.pools.at(label);
        Sample s;
        s.label = label;
        s.task_id = spec.name;
        s.tokens.reserve(spec.seq_len);
        std::size_t noise_used = 0;
        for (std::size_t pos = 0; pos < spec.seq_len; ++pos) {
            const bool want_noise = rng.bernoulli(spec.noise_rate);
            if (want_noise && noise_used < max_noise) {
                ++noise_used;
                s.tokens.push_back(spec.noise_band_begin + static_cast<TokenId>(rng.below(noise_span)));
            } else {
                s.tokens.push_back(pool[rng.below(pool.size())]);
            }
        }
        out.samples.push_back(std::move(s));
    }
    return out;
}

std::pair<Dataset, Dataset> gen_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_test,
                                     std::uint64_t seed) {
    Dataset train = gen_dataset(spec, n_train, derive_seed(seed, std::uint64_t{0}), Split::train);
    Dataset test = gen_dataset(spec, n_test, derive_seed(seed, std::uint64_t{1}), Split::test);
    return {std::move(train), std::move(test)};
}

Dataset gen_shadow(const std::vector<TaskSpec>& specs, std::size_t per_task_n, std::uint64_t seed) {
    if (specs.empty()) throw ConfigError("gen_shadow: need at least one task spec");
    Dataset out;
    out.split = Split::train;
    out.samples.reserve(specs.size() * per_task_n);
    for (std::size_t k = 0; k < specs.size(); ++k) {
        Dataset part = gen_dataset(specs[k], per_task_n, derive_seed(seed, k), Split::train);
        out.samples.insert(out.samples.end(), part.samples.begin(), part.samples.end());
    }
    return out;
}

Sample insert_trigger(const Sample& s, const TriggerSpec& t, std::uint64_t seed) {
    if (s.tokens.empty()) throw EmptyInput("insert_trigger: sample has no tokens");
    if (t.trigger_tokens.empty()) throw ConfigError("insert_trigger: empty trigger");
    Rng rng(seed);
    const std::size_t pos = static_cast<std::size_t>(rng.below(s.tokens.size() + 1));
    Sample out = s;
    out.tokens.insert(out.tokens.begin() + static_cast<std::ptrdiff_t>(pos), t.trigger_tokens.begin(),
                      t.trigger_tokens.end());
    return out;
}

long long round_half_away_from_zero(double x) {
    return static_cast<long long>(x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

Dataset poison(const Dataset& d, const TriggerSpec& t, double rho, std::uint64_t seed) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("poison: rho must be in [0,1]");
    const std::size_t n = d.samples.size();
    const std::size_t k = static_cast<std::size_t>(
        std::min<long long>(round_half_away_from_zero(rho * static_cast<double>(n)),
                            static_cast<long long>(n)));

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng sel(derive_seed(seed, "select"));
    sel.shuffle(idx);

    std::vector<char> pick(n, 0);
    for (std::size_t i = 0; i < k; ++i) pick[idx[i]] = 1;

    Dataset out = d;
    for (std::size_t i = 0; i < n; ++i) {
        if (!pick[i]) continue;
        Sample s = insert_trigger(d.samples[i], t, derive_seed(seed, "pos", i));
        s.label = t.target_label;
        s.poisoned = true;
        out.samples[i] = std::move(s);
    }
    return out;
}

void save_dataset_jsonl(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_dataset_jsonl: cannot open " + path);
    for (const Sample& s : d.samples) {
        nlohmann::ordered_json j;
        j["tokens"] = s.tokens;
        j["label"] = s.label;
        j["task"] = s.task_id;
        j["poisoned"] = s.poisoned;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("save_dataset_jsonl: write failed for " + path);
}

Dataset load_dataset_jsonl(const std::string& path, Split split) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset_jsonl: cannot open " + path);
    Dataset d;
    d.split = split;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": bad json: " + e.what());
        }
        if (!j.contains("tokens") || !j.contains("label") || !j.contains("task") || !j.contains("poisoned"))
            throw FormatError(path + ":" + std::to_string(lineno) + ": missing sample field");
        Sample s;
        s.tokens = j["tokens"].get<std::vector<TokenId>>();
        s.label = j["label"].get<int>();
        s.task_id = j["task"].get<std::string>();
        s.poisoned = j["poisoned"].get<bool>();
        if (s.tokens.empty())
            throw FormatError(path + ":" + std::to_string(lineno) + ": sample with no tokens");
        d.samples.push_back(std::move(s));
    }
    if (d.samples.empty()) throw FormatError(path + ": empty dataset");
    return d;
}

} // namespace mhj
