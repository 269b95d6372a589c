#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mhj/errors.hpp"

namespace mhj {

using TokenId = std::int32_t;

struct Sample {
    std::vector<TokenId> tokens;
    int label = 0;
    std::string task_id;
    bool poisoned = false;

    bool operator==(const Sample&) const = default;
};

enum class Split { train, test };

struct Dataset {
    std::vector<Sample> samples;
    Split split = Split::train;
};

// Trigger pattern and the label it forces. Trigger tokens live in a reserved
// vocabulary band that no clean generator ever emits; insertion position is
// uniform over [0, len] per sample, driven by the caller-supplied seed.
struct TriggerSpec {
    std::vector<TokenId> trigger_tokens;
    int target_label = 0;
};

// One synthetic classification task. Each label has a disjoint pool of
// indicative tokens; a sample's label is determined by which pool holds the
// majority of its tokens. Noise tokens come from a shared noise band that no
// pool uses, and everything sits below reserved_band_begin, the start of the
// trigger band.
struct TaskSpec {
    std::string name;
    std::uint64_t task_seed = 0;
    std::vector<int> clean_labels;
    std::map<int, std::vector<TokenId>> pools; // label -> indicative tokens
    double noise_rate = 0.1;
    std::size_t seq_len = 12;
    TokenId noise_band_begin = 0; // half-open [begin, end)
    TokenId noise_band_end = 0;
    TokenId reserved_band_begin = 0;

    void validate() const; // throws ConfigError
};

// Shared sample stream: n samples, labels round-robin over clean_labels,
// tokens mixed from the label's pool and uniform noise below the reserved
// band. The per-sample noise count is capped below half the sequence so the
// majority pool always matches the label. Pure function of (spec, seed).
Dataset gen_dataset(const TaskSpec& spec, std::size_t n, std::uint64_t stream_seed, Split split);

// Train/test pair from disjoint RNG streams derived from one seed.
std::pair<Dataset, Dataset> gen_task(const TaskSpec& spec, std::size_t n_train, std::size_t n_test,
                                     std::uint64_t seed);

// Union of per_task_n samples from each spec, task ids preserved. With a
// single spec this equals gen_task's train split for the same seed.
Dataset gen_shadow(const std::vector<TaskSpec>& specs, std::size_t per_task_n, std::uint64_t seed);

// Insert the trigger contiguously at a uniform position in [0, len]. Label
// and poisoned flag are left untouched; relabeling happens in poison().
Sample insert_trigger(const Sample& s, const TriggerSpec& t, std::uint64_t seed);

// Exactly round(rho * n) samples (half away from zero), chosen uniformly
// without replacement, get the trigger inserted, the target label assigned
// and the poisoned flag set. Everything else is byte-identical to the input.
Dataset poison(const Dataset& d, const TriggerSpec& t, double rho, std::uint64_t seed);

long long round_half_away_from_zero(double x);

// JSON-lines: {"tokens":[...],"label":int,"task":"...","poisoned":bool}
void save_dataset_jsonl(const Dataset& d, const std::string& path);
Dataset load_dataset_jsonl(const std::string& path, Split split = Split::train);

} // namespace mhj
