// Experiment runner for the model-merging backdoor laboratory.
//
// Exit codes: 0 success, 2 configuration error, 3 pipeline failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mhj/defense.hpp"
#include "mhj/experiment.hpp"
#include "mhj/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_config_flags(CLI::App* cmd, GlobalOpts& g) {
    cmd->add_option("--config", g.config_path, "experiment config JSON");
    cmd->add_option("--seed", g.seed, "top-level seed (overrides the config)");
    cmd->add_option("--out", g.out, "output directory");
    cmd->add_option("--set", g.overrides, "config override, e.g. attack.lambda=2.5")
        ->take_all();
}

ordered_json load_config_doc(const GlobalOpts& g) {
    ordered_json doc;
    if (!g.config_path.empty()) {
        std::ifstream in(g.config_path);
        if (!in) throw mhj::IoError("cannot open config " + g.config_path);
        try {
            doc = ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw mhj::ConfigError(g.config_path + ": bad config json: " + std::string(e.what()));
        }
    } else {
        doc = mhj::config_to_json(mhj::default_experiment_config(g.seed.value_or(42)));
    }
    if (g.seed) doc["seed"] = *g.seed;
    if (!g.out.empty()) doc["output_dir"] = g.out;
    for (const std::string& ov : g.overrides) mhj::apply_override(doc, ov);
    return doc;
}

mhj::ExperimentConfig resolve_config(const GlobalOpts& g) {
    return mhj::config_from_json(load_config_doc(g));
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    for (const std::string& item : split_csv(s)) out.push_back(std::stod(item));
    return out;
}

std::vector<mhj::TokenId> parse_tokens(const std::string& s) {
    std::vector<mhj::TokenId> out;
    for (const std::string& item : split_csv(s)) out.push_back(std::stoi(item));
    return out;
}

void print_report_summary(const mhj::RunResult& run) {
    for (const std::string& task : run.report.task_order) {
        const mhj::TaskMetrics& m = run.report.tasks.at(task);
        std::cout << task << ": cp=" << m.cp << " bp=" << m.bp << " asr=" << m.asr << "\n";
    }
    std::cout << "asr_v=" << run.report.asr_v << " bp_v=" << run.report.bp_v << "\n";
}

int run_cli(int argc, char** argv) {
    CLI::App app{"model-merging backdoor laboratory"};
    app.require_subcommand(1);

    // ---- run ----
    GlobalOpts run_opts;
    CLI::App* cmd_run = app.add_subcommand("run", "run the full experiment pipeline");
    add_config_flags(cmd_run, run_opts);
    cmd_run->callback([&] {
        const mhj::ExperimentConfig cfg = resolve_config(run_opts);
        const mhj::RunResult run = mhj::run_experiment(cfg);
        print_report_summary(run);
        if (!cfg.output_dir.empty())
            std::cout << "artifacts written to " << cfg.output_dir << "\n";
    });

    // ---- sweep ----
    GlobalOpts sweep_opts;
    mhj::SweepSpec sweep_spec;
    std::string sweep_values;
    CLI::App* cmd_sweep = app.add_subcommand("sweep", "run the experiment over a parameter grid");
    add_config_flags(cmd_sweep, sweep_opts);
    cmd_sweep->add_option("--param", sweep_spec.parameter, "parameter path, e.g. attack.lambda")
        ->required();
    cmd_sweep->add_option("--values", sweep_values, "comma-separated value list")->required();
    cmd_sweep->add_option("--reps", sweep_spec.repetitions, "repetitions per value");
    cmd_sweep->callback([&] {
        mhj::ExperimentConfig cfg = resolve_config(sweep_opts);
        const std::string out_dir = cfg.output_dir;
        cfg.output_dir.clear(); // per-point dirs are derived from out_dir
        sweep_spec.values = parse_doubles(sweep_values);
        std::cout << mhj::sweep(cfg, sweep_spec, out_dir);
    });

    // ---- report ----
    std::vector<std::string> report_dirs;
    std::string report_out;
    CLI::App* cmd_report = app.add_subcommand("report", "consolidate run reports into one CSV");
    cmd_report->add_option("dirs", report_dirs, "run directories")->required();
    cmd_report->add_option("--out", report_out, "write the CSV here instead of stdout");
    cmd_report->callback([&] {
        const std::string csv = mhj::consolidate_reports(report_dirs);
        if (report_out.empty()) {
            std::cout << csv;
        } else {
            std::ofstream out(report_out, std::ios::trunc);
            if (!out) throw mhj::IoError("cannot open " + report_out);
            out << csv;
        }
    });

    // ---- gen-data ----
    GlobalOpts gen_opts;
    CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate the experiment datasets");
    add_config_flags(cmd_gen, gen_opts);
    cmd_gen->callback([&] {
        const mhj::ExperimentConfig cfg = resolve_config(gen_opts);
        if (cfg.output_dir.empty()) throw mhj::ConfigError("gen-data: --out is required");
        const mhj::DatasetBundle data = mhj::generate_datasets(cfg);
        fs::create_directories(cfg.output_dir);
        const fs::path out(cfg.output_dir);
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
            const std::string& name = cfg.tasks[i].name;
            mhj::save_dataset_jsonl(data.train_sets[i], (out / ("task_" + name + "_train.jsonl")).string());
            mhj::save_dataset_jsonl(data.test_sets[i], (out / ("task_" + name + "_test.jsonl")).string());
        }
        mhj::save_dataset_jsonl(data.shadow, (out / "shadow.jsonl").string());
        mhj::save_dataset_jsonl(data.heldout_train, (out / "heldout_train.jsonl").string());
        std::cout << "datasets written to " << cfg.output_dir << "\n";
    });

    // ---- train ----
    struct {
        std::string data_path, out_path, init_path;
        mhj::ModelConfig model;
        mhj::TrainConfig train;
        std::uint64_t init_seed = 0;
    } tr;
    CLI::App* cmd_train = app.add_subcommand("train", "train a classifier on a JSONL dataset");
    cmd_train->add_option("--data", tr.data_path, "training data (JSONL)")->required();
    cmd_train->add_option("--out", tr.out_path, "output checkpoint")->required();
    cmd_train->add_option("--init", tr.init_path, "starting checkpoint (default: fresh init)");
    cmd_train->add_option("--vocab-size", tr.model.vocab_size);
    cmd_train->add_option("--embed-dim", tr.model.embed_dim);
    cmd_train->add_option("--hidden-dim", tr.model.hidden_dim);
    cmd_train->add_option("--num-labels", tr.model.num_labels);
    cmd_train->add_option("--lr", tr.train.learning_rate);
    cmd_train->add_option("--epochs", tr.train.epochs);
    cmd_train->add_option("--batch", tr.train.batch_size);
    cmd_train->add_option("--train-seed", tr.train.seed);
    cmd_train->add_option("--init-seed", tr.init_seed);
    cmd_train->callback([&] {
        const mhj::Dataset data = mhj::load_dataset_jsonl(tr.data_path);
        const mhj::ParamSet init = tr.init_path.empty() ? mhj::init_model(tr.model, tr.init_seed)
                                                        : mhj::load_checkpoint(tr.init_path);
        const mhj::ParamSet model = mhj::train(init, data, tr.train);
        mhj::save_checkpoint(model, tr.out_path);
        std::cout << "checkpoint written to " << tr.out_path << "\n";
    });

    // ---- attack ----
    GlobalOpts atk_opts;
    std::string atk_base;
    CLI::App* cmd_attack = app.add_subcommand("attack", "build the malicious upload model");
    add_config_flags(cmd_attack, atk_opts);
    cmd_attack->add_option("--base", atk_base, "base model checkpoint")->required();
    cmd_attack->callback([&] {
        const mhj::ExperimentConfig cfg = resolve_config(atk_opts);
        if (cfg.output_dir.empty()) throw mhj::ConfigError("attack: --out is required");
        const mhj::ParamSet base = mhj::load_checkpoint(atk_base);
        auto [upload, art] =
            mhj::build_upload_model(base, cfg.attack, mhj::derive_seed(cfg.seed, "attack"));
        fs::create_directories(cfg.output_dir);
        const fs::path out(cfg.output_dir);
        mhj::save_checkpoint(upload, (out / "upload_malicious.ckpt").string());
        mhj::save_checkpoint(art.tau.delta, (out / "tau.ckpt").string());
        mhj::save_checkpoint(art.tau_sparse.delta, (out / "tau_sparse.ckpt").string());
        mhj::save_checkpoint(art.malicious_base, (out / "malicious_base.ckpt").string());
        mhj::save_dataset_jsonl(art.shadow, (out / "shadow.jsonl").string());
        mhj::save_dataset_jsonl(art.surrogate_train, (out / "surrogate_attack.jsonl").string());
        ordered_json trace;
        trace["m"] = art.trace.keep_mask.size();
        trace["kept_count"] = art.trace.kept_count();
        trace["realized_density"] = static_cast<double>(art.trace.kept_count()) /
                                    static_cast<double>(art.trace.keep_mask.size());
        trace["p_min"] = *std::min_element(art.trace.keep_prob.begin(), art.trace.keep_prob.end());
        trace["p_max"] = *std::max_element(art.trace.keep_prob.begin(), art.trace.keep_prob.end());
        std::ofstream tf(out / "sparsify_trace.json", std::ios::trunc);
        tf << trace.dump(2) << "\n";
        std::cout << "attack artifacts written to " << cfg.output_dir << "\n";
    });

    // ---- merge ----
    struct {
        std::string base, out, algorithm = "ta", ratios;
        std::vector<std::string> uploads;
        mhj::MergeSpec spec;
    } mg;
    CLI::App* cmd_merge = app.add_subcommand("merge", "merge upload models onto a base");
    cmd_merge->add_option("--base", mg.base, "base model checkpoint")->required();
    cmd_merge->add_option("--upload", mg.uploads, "upload checkpoints, in task order")
        ->required()
        ->take_all();
    cmd_merge->add_option("--out", mg.out, "merged checkpoint path")->required();
    cmd_merge->add_option("--algorithm", mg.algorithm, "ta|mb|dare|della");
    cmd_merge->add_option("--ratios", mg.ratios, "comma-separated merging ratios");
    cmd_merge->add_option("--mb-top-frac", mg.spec.mb_top_frac);
    cmd_merge->add_option("--mb-bottom-frac", mg.spec.mb_bottom_frac);
    cmd_merge->add_option("--dare-drop-rate", mg.spec.dare_drop_rate);
    cmd_merge->add_option("--della-delta", mg.spec.della_delta);
    cmd_merge->add_option("--della-epsilon", mg.spec.della_epsilon);
    cmd_merge->add_option("--seed", mg.spec.seed);
    cmd_merge->callback([&] {
        mg.spec.algorithm = mhj::merge_algorithm_from_name(mg.algorithm);
        if (!mg.ratios.empty()) mg.spec.ratios = parse_doubles(mg.ratios);
        const mhj::ParamSet base = mhj::load_checkpoint(mg.base);
        std::vector<mhj::ParamSet> uploads;
        for (const std::string& path : mg.uploads) uploads.push_back(mhj::load_checkpoint(path));
        mhj::save_checkpoint(mhj::merge(base, uploads, mg.spec), mg.out);
        std::cout << "merged checkpoint written to " << mg.out << "\n";
    });

    // ---- eval ----
    struct {
        std::string model, data, trigger_tokens;
        bool triggered = false;
        int target_label = 3;
        std::uint64_t seed = 0;
    } ev;
    CLI::App* cmd_eval = app.add_subcommand("eval", "accuracy or attack success rate of a model");
    cmd_eval->add_option("--model", ev.model, "model checkpoint")->required();
    cmd_eval->add_option("--data", ev.data, "clean test data (JSONL)")->required();
    cmd_eval->add_flag("--triggered", ev.triggered, "insert the trigger and measure ASR");
    cmd_eval->add_option("--trigger-tokens", ev.trigger_tokens, "comma-separated trigger token ids");
    cmd_eval->add_option("--target-label", ev.target_label);
    cmd_eval->add_option("--seed", ev.seed);
    cmd_eval->callback([&] {
        const mhj::ParamSet model = mhj::load_checkpoint(ev.model);
        const mhj::Dataset data = mhj::load_dataset_jsonl(ev.data, mhj::Split::test);
        ordered_json out;
        if (ev.triggered) {
            mhj::TriggerSpec trig;
            trig.trigger_tokens = parse_tokens(ev.trigger_tokens);
            trig.target_label = ev.target_label;
            out["asr"] = mhj::attack_success_rate(model, data, trig, ev.seed);
        } else {
            out["accuracy"] = mhj::accuracy(model, data);
        }
        std::cout << out.dump() << "\n";
    });

    // ---- defend ----
    struct {
        std::string run_dir, method;
        std::optional<double> alpha, prune_ratio, q_remove, q_noise;
        std::optional<std::size_t> calib_n;
        std::optional<std::uint64_t> seed;
    } df;
    CLI::App* cmd_defend = app.add_subcommand("defend", "apply a defense to a finished run");
    cmd_defend->add_option("--run", df.run_dir, "run directory produced by `run`")->required();
    cmd_defend->add_option("--method", df.method, "fine-prune|cleangen|paraphrase")->required();
    cmd_defend->add_option("--alpha", df.alpha);
    cmd_defend->add_option("--prune-ratio", df.prune_ratio);
    cmd_defend->add_option("--calib-n", df.calib_n);
    cmd_defend->add_option("--q-remove", df.q_remove);
    cmd_defend->add_option("--q-noise", df.q_noise);
    cmd_defend->add_option("--seed", df.seed);
    cmd_defend->callback([&] {
        const fs::path run_dir(df.run_dir);
        std::ifstream in(run_dir / "resolved_config.json");
        if (!in) throw mhj::IoError("defend: cannot open resolved_config.json under " + df.run_dir);
        mhj::ExperimentConfig cfg = mhj::config_from_json(ordered_json::parse(in));
        if (df.seed) cfg.seed = *df.seed;

        mhj::DefenseConfig dcfg;
        dcfg.method = mhj::defense_method_from_name(df.method);
        if (df.alpha) dcfg.alpha = *df.alpha;
        if (df.prune_ratio) dcfg.prune_ratio = *df.prune_ratio;
        if (df.calib_n) dcfg.calib_n = *df.calib_n;
        if (df.q_remove) dcfg.q_remove = *df.q_remove;
        if (df.q_noise) dcfg.q_noise = *df.q_noise;

        const mhj::ParamSet merged =
            mhj::load_checkpoint((run_dir / "checkpoints" / "merged_malicious.ckpt").string());
        const mhj::ParamSet reference =
            mhj::load_checkpoint((run_dir / "checkpoints" / "reference.ckpt").string());
        std::vector<mhj::Dataset> train_sets, test_sets;
        for (const mhj::TaskSpec& t : cfg.tasks) {
            train_sets.push_back(mhj::load_dataset_jsonl(
                (run_dir / "datasets" / ("task_" + t.name + "_train.jsonl")).string(), mhj::Split::train));
            test_sets.push_back(mhj::load_dataset_jsonl(
                (run_dir / "datasets" / ("task_" + t.name + "_test.jsonl")).string(), mhj::Split::test));
        }
        const ordered_json result =
            mhj::evaluate_defense(dcfg, cfg, merged, reference, train_sets, test_sets);
        const fs::path out =
            run_dir / "reports" / ("defense_" + mhj::defense_method_name(dcfg.method) + ".json");
        std::ofstream of(out, std::ios::trunc);
        if (!of) throw mhj::IoError("cannot open " + out.string());
        of << result.dump(2) << "\n";
        std::cout << result.dump(2) << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const mhj::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
