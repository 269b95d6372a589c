#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mhj/merge.hpp"
#include "mhj/synth_data.hpp"
#include "mhj/tensor_store.hpp"

namespace mhj {

// Metrics accept either a ParamSet or an arbitrary prediction function so a
// defense can wrap the model or the input stream while the counting code
// stays untouched.
using PredictFn = std::function<int(const std::vector<TokenId>&)>;
using SampleTransform = std::function<Sample(const Sample&, std::uint64_t seed)>;

PredictFn model_predictor(const ParamSet& model);

// Fraction of clean samples whose prediction matches the label.
double accuracy(const ParamSet& model, const Dataset& test);
double accuracy(const PredictFn& predictor, const Dataset& test);
double accuracy(const PredictFn& predictor, const Dataset& test, const SampleTransform& transform,
                std::uint64_t seed);

// Insert the trigger into every clean test sample (per-sample seeds derived
// from `seed`) and count predictions of the target label. The optional
// transform runs after trigger insertion, modeling an input-side defense.
double attack_success_rate(const ParamSet& model, const Dataset& test, const TriggerSpec& trigger,
                           std::uint64_t seed);
double attack_success_rate(const PredictFn& predictor, const Dataset& test, const TriggerSpec& trigger,
                           std::uint64_t seed, const SampleTransform& transform = {});

struct TaskMetrics {
    double cp = 0.0;  // clean merged model, clean inputs
    double bp = 0.0;  // malicious merged model, clean inputs
    double asr = 0.0; // malicious merged model, triggered inputs
};

struct MetricsReport {
    std::vector<std::string> task_order; // surrogate first
    std::map<std::string, TaskMetrics> tasks;
    double asr_v = 0.0; // asr(merged) - asr(upload) on the surrogate task
    double bp_v = 0.0;  // acc(merged) - acc(upload) on the surrogate task
    std::map<std::string, double> cp_v; // cp(merged clean) - acc(clean upload)

    // metadata
    std::string algorithm;
    std::vector<double> ratios;
    std::uint64_t seed = 0;
    std::uint64_t eval_seed = 0;
    std::string config_hash;
    std::map<std::string, double> orthogonality; // |cos(tau', delta_task)|
};

nlohmann::ordered_json report_to_json(const MetricsReport& r);
std::string report_to_csv(const MetricsReport& r);

// Builds the clean merged model (clean surrogate + clean uploads) for CP and
// the malicious merged model (malicious upload substituted) for BP/ASR, then
// fills all six metric families. test_sets are per task, surrogate first;
// clean_uploads hold the non-surrogate tasks in the same order.
MetricsReport metrics_report(const ParamSet& base, const std::vector<ParamSet>& clean_uploads,
                             const ParamSet& malicious_upload, const ParamSet& clean_surrogate_model,
                             const MergeSpec& merge_spec, const std::vector<Dataset>& test_sets,
                             const TriggerSpec& trigger, std::uint64_t eval_seed);

} // namespace mhj
