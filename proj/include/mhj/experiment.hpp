#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mhj/defense.hpp"
#include "mhj/eval.hpp"
#include "mhj/hijack.hpp"
#include "mhj/merge.hpp"
#include "mhj/synth_data.hpp"
#include "mhj/toy_model.hpp"

namespace mhj {

struct DataConfig {
    std::size_t n_train = 500;
    std::size_t n_test = 500;
};

// The base model is pretrained on a balanced mixture over every merged
// task's pools with extra token noise and label flips, so the per-task
// finetunes are genuine small deltas from a shared starting point. Flips are
// uniform over the full label space, keeping the reserved label an ordinary
// output for the base instead of an ever-suppressed one.
struct PretrainConfig {
    std::size_t per_task_n = 500;
    double noise_rate = 0.35;
    double label_flip = 0.35;
    TrainConfig train_cfg{0.2, 4, 25, 0};
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::string output_dir; // empty => keep everything in memory
    ModelConfig model;
    TrainConfig train; // finetune template; per-stage seeds are derived
    std::vector<TaskSpec> tasks; // merged tasks, surrogate first
    TaskSpec heldout_spec;       // reference task for the suspicion filter
    TrainConfig reference_train{0.5, 4, 5, 0}; // reference model finetune recipe
    AttackConfig attack;
    MergeSpec merge_spec;
    std::optional<DefenseConfig> defense;
    DataConfig data;
    PretrainConfig pretrain;

    void validate() const; // throws ConfigError
};

// The default experiment: N merged tasks (surrogate first), four shadow
// tasks of 125 samples, one held-out reference task, two reserved trigger
// tokens, delta=0.7 eps=0.2 lambda=2 rho=0.2, TA at 1/N, 500/500 samples.
ExperimentConfig default_experiment_config(std::uint64_t seed, std::size_t n_tasks = 3);

nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
// Starts from the default layout for the document's seed/task count and
// overrides whatever fields the document provides.
ExperimentConfig config_from_json(const nlohmann::json& doc);
// "attack.lambda=2.5" style assignment applied to a config document.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);
// Content hash of the resolved config, ignoring output_dir.
std::string config_hash(const ExperimentConfig& cfg);

struct DatasetBundle {
    std::vector<Dataset> train_sets;
    std::vector<Dataset> test_sets;
    Dataset shadow;
    Dataset heldout_train;
};

DatasetBundle generate_datasets(const ExperimentConfig& cfg);

struct RunResult {
    MetricsReport report;
    std::string report_json; // serialized report, byte-stable per seed
    ParamSet base;
    std::vector<ParamSet> clean_uploads; // all tasks, surrogate first
    ParamSet malicious_upload;
    ParamSet merged_clean;
    ParamSet merged_malicious;
    ParamSet reference_model;
    AttackArtifacts attack_artifacts;
    std::vector<Dataset> train_sets;
    std::vector<Dataset> test_sets;
};

// Full pipeline: data -> base pretrain -> clean finetunes -> attack ->
// merges -> metrics (-> defense when configured), all derived from cfg.seed.
// When output_dir is set, datasets/checkpoints/reports/trace are persisted
// there; a directory created by this call is removed again on failure.
RunResult run_experiment(const ExperimentConfig& cfg);

// Post-defense BP/ASR per task, computed with the unmodified metric code.
nlohmann::ordered_json evaluate_defense(const DefenseConfig& dcfg, const ExperimentConfig& cfg,
                                        const ParamSet& merged_malicious, const ParamSet& reference,
                                        const std::vector<Dataset>& train_sets,
                                        const std::vector<Dataset>& test_sets);

struct SweepSpec {
    std::string parameter; // attack.lambda, attack.delta, attack.epsilon, attack.rho,
                           // attack.shadow_k, merge.malicious_ratio, tasks.n, ...
    std::vector<double> values;
    std::size_t repetitions = 1;
};

// One run per value x repetition. Runs of the same repetition share a
// derived seed so sweep points differ only in the swept value. Returns the
// CSV; when out_dir is set, per-point run directories and sweep.csv are
// written beneath it.
std::string sweep(const ExperimentConfig& cfg, const SweepSpec& spec, const std::string& out_dir);

// Consolidated CSV over run directories, each holding reports/report.json.
// Missing reports produce a flagged row; malformed ones raise SchemaError.
std::string consolidate_reports(const std::vector<std::string>& run_dirs);

} // namespace mhj
