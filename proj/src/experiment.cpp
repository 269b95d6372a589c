#include "mhj/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "mhj/rng.hpp"

namespace fs = std::filesystem;

namespace mhj {

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

std::string num(double v) { return nlohmann::json(v).dump(); }

} // namespace

void ExperimentConfig::validate() const {
    model.validate();
    if (tasks.size() < 2) throw ConfigError("experiment: need N >= 2 merged tasks");
    std::set<std::string> names;
    std::set<std::uint64_t> task_seeds;
    for (const TaskSpec& t : tasks) {
        t.validate();
        if (!names.insert(t.name).second)
            throw ConfigError("experiment: duplicate task name " + t.name);
        task_seeds.insert(t.task_seed);
        for (const auto& [label, pool] : t.pools) {
            if (label < 0 || label >= model.target_label())
                throw ConfigError("experiment: task " + t.name + " uses a non-clean label");
            for (TokenId tok : pool)
                if (static_cast<std::size_t>(tok) >= model.vocab_size)
                    throw ConfigError("experiment: task " + t.name + " pool token exceeds vocab");
        }
    }
    heldout_spec.validate();
    if (names.count(heldout_spec.name))
        throw ConfigError("experiment: held-out task name collides with a merged task");

    attack.validate();
    if (attack.surrogate_spec.name != tasks[0].name ||
        attack.surrogate_spec.task_seed != tasks[0].task_seed)
        throw ConfigError("experiment: attack surrogate must be the first merged task");
    for (const TaskSpec& s : attack.shadow_specs)
        if (task_seeds.count(s.task_seed))
            throw ConfigError("experiment: shadow task seed collides with a merged task seed");
    if (attack.trigger.target_label != model.target_label())
        throw ConfigError("experiment: trigger target must be the reserved label");
    for (TokenId tok : attack.trigger.trigger_tokens)
        if (static_cast<std::size_t>(tok) >= model.vocab_size)
            throw ConfigError("experiment: trigger token exceeds vocab");

    merge_spec.validate();
    if (!merge_spec.ratios.empty() && merge_spec.ratios.size() != 1 &&
        merge_spec.ratios.size() != tasks.size())
        throw ConfigError("experiment: merge ratios must match the task count");
    if (data.n_train < 1 || data.n_test < 1)
        throw ConfigError("experiment: n_train and n_test must be >= 1");
    if (pretrain.per_task_n < 1) throw ConfigError("experiment: pretrain per_task_n must be >= 1");
    if (!(pretrain.label_flip >= 0.0 && pretrain.label_flip < 1.0))
        throw ConfigError("experiment: pretrain label_flip must be in [0,1)");
    if (defense) {
        defense->validate();
        if (defense->calib_n > data.n_train)
            throw ConfigError("experiment: defense calib_n exceeds n_train");
    }
}

ExperimentConfig default_experiment_config(std::uint64_t seed, std::size_t n_tasks) {
    if (n_tasks < 2) throw ConfigError("default_experiment_config: need N >= 2");
    constexpr std::size_t kShadowTasks = 4;
    constexpr std::size_t kPoolSize = 2;
    constexpr std::size_t kNoiseBand = 8;
    const std::vector<int> clean_labels = {0, 1, 2};

    ExperimentConfig cfg;
    cfg.seed = seed;

    TokenId next = 0;
    auto make_spec = [&](const std::string& name, std::uint64_t task_seed,
                         const std::vector<int>& labels) {
        TaskSpec s;
        s.name = name;
        s.task_seed = task_seed;
        s.clean_labels = labels;
        s.noise_rate = 0.1;
        s.seq_len = 5;
        for (int label : labels) {
            std::vector<TokenId> pool;
            for (std::size_t i = 0; i < kPoolSize; ++i) pool.push_back(next++);
            s.pools[label] = std::move(pool);
        }
        return s;
    };

    for (std::size_t i = 0; i < n_tasks; ++i)
        cfg.tasks.push_back(make_spec("task" + std::to_string(i), 1000 + i, clean_labels));
    for (std::size_t k = 0; k < kShadowTasks; ++k)
        cfg.attack.shadow_specs.push_back(make_spec("shadow" + std::to_string(k), 2000 + k, clean_labels));
    // The reference task covers only part of the label space, mirroring a
    // defender whose model serves a different task and cannot produce every
    // merged-task output.
    cfg.heldout_spec = make_spec("heldout", 3000, {0, 1});

    const TokenId noise_begin = next;
    const TokenId band_begin = next + static_cast<TokenId>(kNoiseBand);
    auto fix_band = [&](TaskSpec& s) {
        s.noise_band_begin = noise_begin;
        s.noise_band_end = band_begin;
        s.reserved_band_begin = band_begin;
    };
    for (TaskSpec& s : cfg.tasks) fix_band(s);
    for (TaskSpec& s : cfg.attack.shadow_specs) fix_band(s);
    fix_band(cfg.heldout_spec);

    // a six-token reserved sequence; mean pooling needs a sizable trigger
    // share before the backdoor survives the merge dilution
    cfg.attack.trigger.trigger_tokens.clear();
    for (TokenId i = 0; i < 6; ++i) cfg.attack.trigger.trigger_tokens.push_back(band_begin + i);

    std::size_t vocab = static_cast<std::size_t>(band_begin) + cfg.attack.trigger.trigger_tokens.size();
    vocab = std::max<std::size_t>(64, (vocab + 7) / 8 * 8);
    cfg.model = ModelConfig{vocab, 16, 32, 4};
    cfg.attack.trigger.target_label = cfg.model.target_label();

    cfg.train = TrainConfig{0.1, 4, 10, 0};
    cfg.attack.train_cfg = TrainConfig{0.35, 4, 5, 0};
    cfg.attack.surrogate_train_cfg = cfg.train; // the upload should look ordinary
    cfg.attack.surrogate_spec = cfg.tasks[0];
    cfg.attack.surrogate_n = 500;
    cfg.pretrain = PretrainConfig{500, 0.35, 0.35, TrainConfig{0.2, 4, 25, 0}};
    cfg.reference_train = TrainConfig{0.3, 4, 5, 0};
    cfg.merge_spec = MergeSpec{};
    cfg.data = DataConfig{};
    return cfg;
}

namespace {

nlohmann::ordered_json train_to_json(const TrainConfig& t) {
    return {{"learning_rate", t.learning_rate}, {"epochs", t.epochs}, {"batch_size", t.batch_size}};
}

TrainConfig train_from_json(const nlohmann::json& j, TrainConfig base) {
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    return base;
}

nlohmann::ordered_json task_to_json(const TaskSpec& s) {
    nlohmann::ordered_json pools = nlohmann::ordered_json::object();
    for (const auto& [label, pool] : s.pools) pools[std::to_string(label)] = pool;
    return {{"name", s.name},
            {"task_seed", s.task_seed},
            {"clean_labels", s.clean_labels},
            {"pools", pools},
            {"noise_rate", s.noise_rate},
            {"seq_len", s.seq_len},
            {"noise_band_begin", s.noise_band_begin},
            {"noise_band_end", s.noise_band_end},
            {"reserved_band_begin", s.reserved_band_begin}};
}

TaskSpec task_from_json(const nlohmann::json& j) {
    TaskSpec s;
    s.name = j.at("name").get<std::string>();
    s.task_seed = j.at("task_seed").get<std::uint64_t>();
    s.clean_labels = j.at("clean_labels").get<std::vector<int>>();
    for (const auto& [key, pool] : j.at("pools").items())
        s.pools[std::stoi(key)] = pool.get<std::vector<TokenId>>();
    s.noise_rate = j.value("noise_rate", 0.1);
    s.seq_len = j.value("seq_len", std::size_t{12});
    s.noise_band_begin = j.at("noise_band_begin").get<TokenId>();
    s.noise_band_end = j.at("noise_band_end").get<TokenId>();
    s.reserved_band_begin = j.at("reserved_band_begin").get<TokenId>();
    return s;
}

} // namespace

nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["model"] = {{"vocab_size", cfg.model.vocab_size},
                  {"embed_dim", cfg.model.embed_dim},
                  {"hidden_dim", cfg.model.hidden_dim},
                  {"num_labels", cfg.model.num_labels}};
    j["train"] = train_to_json(cfg.train);
    j["data"] = {{"n_train", cfg.data.n_train}, {"n_test", cfg.data.n_test}};
    j["tasks"] = nlohmann::ordered_json::array();
    for (const TaskSpec& t : cfg.tasks) j["tasks"].push_back(task_to_json(t));
    j["heldout"] = task_to_json(cfg.heldout_spec);
    j["reference_train"] = train_to_json(cfg.reference_train);
    j["pretrain"] = {{"per_task_n", cfg.pretrain.per_task_n},
                     {"noise_rate", cfg.pretrain.noise_rate},
                     {"label_flip", cfg.pretrain.label_flip},
                     {"train", train_to_json(cfg.pretrain.train_cfg)}};
    j["attack"] = {{"delta", cfg.attack.delta},
                   {"epsilon", cfg.attack.epsilon},
                   {"lambda", cfg.attack.lambda},
                   {"rho", cfg.attack.rho},
                   {"shadow_per_task_n", cfg.attack.shadow_per_task_n},
                   {"surrogate_n", cfg.attack.surrogate_n},
                   {"trigger",
                    {{"tokens", cfg.attack.trigger.trigger_tokens},
                     {"target_label", cfg.attack.trigger.target_label}}},
                   {"train", train_to_json(cfg.attack.train_cfg)},
                   {"surrogate_train",
                    cfg.attack.surrogate_train_cfg
                        ? nlohmann::ordered_json(train_to_json(*cfg.attack.surrogate_train_cfg))
                        : nlohmann::ordered_json(nullptr)}};
    j["attack"]["shadow_specs"] = nlohmann::ordered_json::array();
    for (const TaskSpec& t : cfg.attack.shadow_specs)
        j["attack"]["shadow_specs"].push_back(task_to_json(t));
    j["merge"] = {{"algorithm", merge_algorithm_name(cfg.merge_spec.algorithm)},
                  {"ratios", cfg.merge_spec.ratios},
                  {"mb_top_frac", cfg.merge_spec.mb_top_frac},
                  {"mb_bottom_frac", cfg.merge_spec.mb_bottom_frac},
                  {"dare_drop_rate", cfg.merge_spec.dare_drop_rate},
                  {"della_delta", cfg.merge_spec.della_delta},
                  {"della_epsilon", cfg.merge_spec.della_epsilon}};
    if (cfg.defense) {
        j["defense"] = {{"method", defense_method_name(cfg.defense->method)},
                        {"prune_ratio", cfg.defense->prune_ratio},
                        {"calib_n", cfg.defense->calib_n},
                        {"alpha", cfg.defense->alpha},
                        {"q_remove", cfg.defense->q_remove},
                        {"q_noise", cfg.defense->q_noise},
                        {"train", train_to_json(cfg.defense->train_cfg)}};
    } else {
        j["defense"] = nullptr;
    }
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
    const std::uint64_t seed = doc.value("seed", std::uint64_t{42});
    std::size_t n_tasks = 3;
    if (doc.contains("tasks") && doc["tasks"].is_array() && !doc["tasks"].empty())
        n_tasks = doc["tasks"].size();
    ExperimentConfig cfg = default_experiment_config(seed, n_tasks);

    cfg.output_dir = doc.value("output_dir", cfg.output_dir);
    if (doc.contains("model")) {
        const auto& m = doc["model"];
        cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
        cfg.model.embed_dim = m.value("embed_dim", cfg.model.embed_dim);
        cfg.model.hidden_dim = m.value("hidden_dim", cfg.model.hidden_dim);
        cfg.model.num_labels = m.value("num_labels", cfg.model.num_labels);
        cfg.attack.trigger.target_label = cfg.model.target_label();
    }
    if (doc.contains("train")) {
        cfg.train = train_from_json(doc["train"], cfg.train);
        cfg.attack.train_cfg = cfg.train;
    }
    if (doc.contains("data")) {
        cfg.data.n_train = doc["data"].value("n_train", cfg.data.n_train);
        cfg.data.n_test = doc["data"].value("n_test", cfg.data.n_test);
    }
    if (doc.contains("tasks") && doc["tasks"].is_array() && !doc["tasks"].empty()) {
        cfg.tasks.clear();
        for (const auto& t : doc["tasks"]) cfg.tasks.push_back(task_from_json(t));
        cfg.attack.surrogate_spec = cfg.tasks[0];
    }
    if (doc.contains("heldout")) cfg.heldout_spec = task_from_json(doc["heldout"]);
    if (doc.contains("reference_train"))
        cfg.reference_train = train_from_json(doc["reference_train"], cfg.reference_train);
    if (doc.contains("pretrain")) {
        const auto& p = doc["pretrain"];
        cfg.pretrain.per_task_n = p.value("per_task_n", cfg.pretrain.per_task_n);
        cfg.pretrain.noise_rate = p.value("noise_rate", cfg.pretrain.noise_rate);
        cfg.pretrain.label_flip = p.value("label_flip", cfg.pretrain.label_flip);
        if (p.contains("train")) cfg.pretrain.train_cfg = train_from_json(p["train"], cfg.pretrain.train_cfg);
    }
    if (doc.contains("attack")) {
        const auto& a = doc["attack"];
        cfg.attack.delta = a.value("delta", cfg.attack.delta);
        cfg.attack.epsilon = a.value("epsilon", cfg.attack.epsilon);
        cfg.attack.lambda = a.value("lambda", cfg.attack.lambda);
        cfg.attack.rho = a.value("rho", cfg.attack.rho);
        cfg.attack.shadow_per_task_n = a.value("shadow_per_task_n", cfg.attack.shadow_per_task_n);
        cfg.attack.surrogate_n = a.value("surrogate_n", cfg.attack.surrogate_n);
        if (a.contains("trigger")) {
            cfg.attack.trigger.trigger_tokens =
                a["trigger"].value("tokens", cfg.attack.trigger.trigger_tokens);
            cfg.attack.trigger.target_label =
                a["trigger"].value("target_label", cfg.attack.trigger.target_label);
        }
        if (a.contains("train")) cfg.attack.train_cfg = train_from_json(a["train"], cfg.attack.train_cfg);
        if (a.contains("surrogate_train")) {
            if (a["surrogate_train"].is_null())
                cfg.attack.surrogate_train_cfg.reset();
            else
                cfg.attack.surrogate_train_cfg = train_from_json(
                    a["surrogate_train"], cfg.attack.resolved_surrogate_train_cfg());
        }
        if (a.contains("shadow_specs") && a["shadow_specs"].is_array() && !a["shadow_specs"].empty()) {
            cfg.attack.shadow_specs.clear();
            for (const auto& t : a["shadow_specs"]) cfg.attack.shadow_specs.push_back(task_from_json(t));
        }
    }
    if (doc.contains("merge")) {
        const auto& m = doc["merge"];
        if (m.contains("algorithm"))
            cfg.merge_spec.algorithm = merge_algorithm_from_name(m["algorithm"].get<std::string>());
        cfg.merge_spec.ratios = m.value("ratios", cfg.merge_spec.ratios);
        cfg.merge_spec.mb_top_frac = m.value("mb_top_frac", cfg.merge_spec.mb_top_frac);
        cfg.merge_spec.mb_bottom_frac = m.value("mb_bottom_frac", cfg.merge_spec.mb_bottom_frac);
        cfg.merge_spec.dare_drop_rate = m.value("dare_drop_rate", cfg.merge_spec.dare_drop_rate);
        cfg.merge_spec.della_delta = m.value("della_delta", cfg.merge_spec.della_delta);
        cfg.merge_spec.della_epsilon = m.value("della_epsilon", cfg.merge_spec.della_epsilon);
    }
    if (doc.contains("defense") && !doc["defense"].is_null()) {
        const auto& d = doc["defense"];
        DefenseConfig dc;
        dc.method = defense_method_from_name(d.value("method", std::string("fine-prune")));
        dc.prune_ratio = d.value("prune_ratio", dc.prune_ratio);
        dc.calib_n = d.value("calib_n", dc.calib_n);
        dc.alpha = d.value("alpha", dc.alpha);
        dc.q_remove = d.value("q_remove", dc.q_remove);
        dc.q_noise = d.value("q_noise", dc.q_noise);
        if (d.contains("train")) dc.train_cfg = train_from_json(d["train"], dc.train_cfg);
        cfg.defense = dc;
    }
    return cfg;
}

void apply_override(nlohmann::ordered_json& doc, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like path.to.key=value: " + assignment);
    std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    std::replace(path.begin(), path.end(), '.', '/');
    nlohmann::ordered_json value;
    try {
        value = nlohmann::ordered_json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw; // unquoted strings, e.g. merge.algorithm=dare
    }
    doc[nlohmann::ordered_json::json_pointer("/" + path)] = value;
}

std::string config_hash(const ExperimentConfig& cfg) {
    ExperimentConfig c = cfg;
    c.output_dir.clear();
    return "fnv1a:" + hex64(fnv1a64(config_to_json(c).dump()));
}

DatasetBundle generate_datasets(const ExperimentConfig& cfg) {
    DatasetBundle b;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        auto [train, test] = gen_task(cfg.tasks[i], cfg.data.n_train, cfg.data.n_test,
                                      derive_seed(cfg.seed, "data", i));
        b.train_sets.push_back(std::move(train));
        b.test_sets.push_back(std::move(test));
    }
    b.shadow = gen_shadow(cfg.attack.shadow_specs, cfg.attack.shadow_per_task_n,
                          derive_seed(derive_seed(cfg.seed, "attack"), "shadow_data"));
    b.heldout_train =
        gen_dataset(cfg.heldout_spec, cfg.data.n_train, derive_seed(cfg.seed, "heldout_data"), Split::train);
    return b;
}

namespace {

Dataset pretrain_mixture(const ExperimentConfig& cfg) {
    Dataset mix;
    mix.split = Split::train;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        TaskSpec noisy = cfg.tasks[i];
        noisy.noise_rate = cfg.pretrain.noise_rate;
        Dataset part = gen_dataset(noisy, cfg.pretrain.per_task_n,
                                   derive_seed(cfg.seed, "pretrain_data", i), Split::train);
        // Label noise is uniform over the full label space, reserved label
        // included, so the base treats every label as an ordinary output
        // instead of burying the reserved one.
        Rng flip(derive_seed(cfg.seed, "pretrain_flip", i));
        const int L = static_cast<int>(cfg.model.num_labels);
        for (Sample& s : part.samples) {
            if (!flip.bernoulli(cfg.pretrain.label_flip)) continue;
            int pick = static_cast<int>(flip.below(static_cast<std::uint64_t>(L - 1)));
            if (pick >= s.label) ++pick;
            s.label = pick;
        }
        mix.samples.insert(mix.samples.end(), part.samples.begin(), part.samples.end());
    }
    return mix;
}

void persist_run(const ExperimentConfig& cfg, const RunResult& run, const DatasetBundle& data) {
    const fs::path out(cfg.output_dir);
    fs::create_directories(out / "datasets");
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "reports");
    fs::create_directories(out / "trace");

    // output_dir is implied by the file's location; leaving it out keeps
    // same-seed runs byte-identical across directories
    ExperimentConfig stored = cfg;
    stored.output_dir.clear();
    write_text(out / "resolved_config.json", config_to_json(stored).dump(2) + "\n");

    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        const std::string& name = cfg.tasks[i].name;
        save_dataset_jsonl(data.train_sets[i], (out / "datasets" / ("task_" + name + "_train.jsonl")).string());
        save_dataset_jsonl(data.test_sets[i], (out / "datasets" / ("task_" + name + "_test.jsonl")).string());
    }
    save_dataset_jsonl(run.attack_artifacts.shadow, (out / "datasets" / "shadow.jsonl").string());
    save_dataset_jsonl(run.attack_artifacts.surrogate_train,
                       (out / "datasets" / "surrogate_attack.jsonl").string());
    save_dataset_jsonl(data.heldout_train, (out / "datasets" / "heldout_train.jsonl").string());

    const fs::path ck = out / "checkpoints";
    save_checkpoint(run.base, (ck / "base.ckpt").string());
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i)
        save_checkpoint(run.clean_uploads[i],
                        (ck / ("upload_clean_" + cfg.tasks[i].name + ".ckpt")).string());
    save_checkpoint(run.malicious_upload, (ck / "upload_malicious.ckpt").string());
    save_checkpoint(run.merged_clean, (ck / "merged_clean.ckpt").string());
    save_checkpoint(run.merged_malicious, (ck / "merged_malicious.ckpt").string());
    save_checkpoint(run.reference_model, (ck / "reference.ckpt").string());
    save_checkpoint(run.attack_artifacts.tau.delta, (ck / "tau.ckpt").string());
    save_checkpoint(run.attack_artifacts.tau_sparse.delta, (ck / "tau_sparse.ckpt").string());
    save_checkpoint(run.attack_artifacts.malicious_base, (ck / "malicious_base.ckpt").string());
    save_checkpoint(run.attack_artifacts.shadow_clean, (ck / "shadow_clean.ckpt").string());
    save_checkpoint(run.attack_artifacts.shadow_backdoored, (ck / "shadow_backdoor.ckpt").string());

    write_text(out / "reports" / "report.json", run.report_json);
    write_text(out / "reports" / "report.csv", report_to_csv(run.report));

    const SparsifyTrace& tr = run.attack_artifacts.trace;
    nlohmann::ordered_json trace;
    trace["m"] = tr.keep_mask.size();
    trace["kept_count"] = tr.kept_count();
    trace["realized_density"] =
        static_cast<double>(tr.kept_count()) / static_cast<double>(tr.keep_mask.size());
    trace["p_min"] = *std::min_element(tr.keep_prob.begin(), tr.keep_prob.end());
    trace["p_max"] = *std::max_element(tr.keep_prob.begin(), tr.keep_prob.end());
    write_text(out / "trace" / "sparsify_trace.json", trace.dump(2) + "\n");
}

} // namespace

nlohmann::ordered_json evaluate_defense(const DefenseConfig& dcfg, const ExperimentConfig& cfg,
                                        const ParamSet& merged_malicious, const ParamSet& reference,
                                        const std::vector<Dataset>& train_sets,
                                        const std::vector<Dataset>& test_sets) {
    dcfg.validate();
    const std::uint64_t eval_seed = derive_seed(cfg.seed, "eval");

    nlohmann::ordered_json out;
    out["method"] = defense_method_name(dcfg.method);
    out["tasks"] = nlohmann::ordered_json::object();

    auto record = [&](std::size_t t, double bp, double asr) {
        out["tasks"][cfg.tasks[t].name] = {{"bp", bp}, {"asr", asr}};
    };

    switch (dcfg.method) {
        case DefenseMethod::fine_prune: {
            if (dcfg.calib_n > cfg.data.n_train)
                throw ConfigError("evaluate_defense: calib_n exceeds n_train");
            Dataset calib;
            calib.split = Split::train;
            for (const Dataset& train : train_sets)
                calib.samples.insert(calib.samples.end(), train.samples.begin(),
                                     train.samples.begin() + static_cast<std::ptrdiff_t>(dcfg.calib_n));
            DefenseConfig dc = dcfg;
            dc.train_cfg.seed = derive_seed(cfg.seed, "defense_train");
            const ParamSet defended = fine_prune(merged_malicious, calib, dc);
            for (std::size_t t = 0; t < test_sets.size(); ++t)
                record(t, accuracy(defended, test_sets[t]),
                       attack_success_rate(defended, test_sets[t], cfg.attack.trigger,
                                           derive_seed(eval_seed, "asr", t)));
            break;
        }
        case DefenseMethod::suspicion_filter: {
            const PredictFn pred = suspicion_predictor(merged_malicious, reference, dcfg.alpha);
            for (std::size_t t = 0; t < test_sets.size(); ++t)
                record(t, accuracy(pred, test_sets[t]),
                       attack_success_rate(pred, test_sets[t], cfg.attack.trigger,
                                           derive_seed(eval_seed, "asr", t)));
            break;
        }
        case DefenseMethod::paraphrase_sim: {
            const PredictFn pred = model_predictor(merged_malicious);
            for (std::size_t t = 0; t < test_sets.size(); ++t) {
                const SampleTransform tr =
                    paraphrase_transform(cfg.tasks[t], dcfg.q_remove, dcfg.q_noise);
                const double bp =
                    accuracy(pred, test_sets[t], tr, derive_seed(eval_seed, "defense_bp", t));
                const double asr = attack_success_rate(pred, test_sets[t], cfg.attack.trigger,
                                                       derive_seed(eval_seed, "asr", t), tr);
                record(t, bp, asr);
            }
            break;
        }
    }
    return out;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::uint64_t S = cfg.seed;

    RunResult run;
    DatasetBundle data = generate_datasets(cfg);

    // base "pre-training" on the noisy cross-task mixture
    const Dataset mix = pretrain_mixture(cfg);
    const ParamSet init = init_model(cfg.model, derive_seed(S, "init"));
    TrainConfig ptc = cfg.pretrain.train_cfg;
    ptc.seed = derive_seed(S, "pretrain");
    run.base = train(init, mix, ptc);

    // clean per-task finetunes
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(S, "finetune", i);
        run.clean_uploads.push_back(train(run.base, data.train_sets[i], tc));
    }

    // reference for the suspicion filter: the defender's own confident model,
    // trained from scratch on the held-out task so it knows nothing about the
    // merged tasks or the trigger
    {
        const ParamSet ref_init = init_model(cfg.model, derive_seed(S, "heldout_init"));
        TrainConfig rc = cfg.reference_train;
        rc.seed = derive_seed(S, "heldout_train");
        run.reference_model = train(ref_init, data.heldout_train, rc);
    }

    // malicious upload model
    auto [upload, artifacts] = build_upload_model(run.base, cfg.attack, derive_seed(S, "attack"));
    run.malicious_upload = std::move(upload);
    run.attack_artifacts = std::move(artifacts);

    MergeSpec mspec = cfg.merge_spec;
    mspec.seed = derive_seed(S, "merge");

    std::vector<ParamSet> mal_all = run.clean_uploads;
    mal_all[0] = run.malicious_upload;
    run.merged_clean = merge(run.base, run.clean_uploads, mspec);
    run.merged_malicious = merge(run.base, mal_all, mspec);

    const std::vector<ParamSet> clean_rest(run.clean_uploads.begin() + 1, run.clean_uploads.end());
    run.report = metrics_report(run.base, clean_rest, run.malicious_upload, run.clean_uploads[0],
                                mspec, data.test_sets, cfg.attack.trigger, derive_seed(S, "eval"));
    run.report.seed = S;
    run.report.config_hash = config_hash(cfg);
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
        const TaskVector delta = task_vector(run.clean_uploads[i], run.base);
        double c = 0.0;
        try {
            c = std::fabs(cosine_similarity(run.attack_artifacts.tau_sparse, delta));
        } catch (const ZeroVector&) {
            c = 0.0;
        }
        run.report.orthogonality[cfg.tasks[i].name] = c;
    }

    nlohmann::ordered_json rj = report_to_json(run.report);
    if (cfg.defense)
        rj["defense"] = evaluate_defense(*cfg.defense, cfg, run.merged_malicious,
                                         run.reference_model, data.train_sets, data.test_sets);
    run.report_json = rj.dump(2) + "\n";

    run.train_sets = data.train_sets;
    run.test_sets = data.test_sets;

    if (!cfg.output_dir.empty()) {
        const bool created = !fs::exists(cfg.output_dir);
        try {
            persist_run(cfg, run, data);
        } catch (...) {
            std::error_code ec;
            if (created) fs::remove_all(cfg.output_dir, ec);
            throw;
        }
    }
    return run;
}

namespace {

ExperimentConfig apply_sweep_value(const ExperimentConfig& base, const std::string& param, double v) {
    if (param == "tasks.n") {
        const auto n = static_cast<std::size_t>(v);
        if (static_cast<double>(n) != v || n < 2)
            throw ConfigError("sweep: tasks.n needs an integer value >= 2");
        ExperimentConfig cfg = default_experiment_config(base.seed, n);
        cfg.attack.delta = base.attack.delta;
        cfg.attack.epsilon = base.attack.epsilon;
        cfg.attack.lambda = base.attack.lambda;
        cfg.attack.rho = base.attack.rho;
        cfg.merge_spec.algorithm = base.merge_spec.algorithm;
        return cfg;
    }
    ExperimentConfig cfg = base;
    if (param == "merge.malicious_ratio") {
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("sweep: merge.malicious_ratio must be in [0,1]");
        const std::size_t n = cfg.tasks.size();
        std::vector<double> ratios(n, (1.0 - v) / static_cast<double>(n - 1));
        ratios[0] = v;
        cfg.merge_spec.ratios = std::move(ratios);
        return cfg;
    }
    if (param == "attack.shadow_k") {
        const auto k = static_cast<std::size_t>(v);
        if (static_cast<double>(k) != v || k < 1 || k > cfg.attack.shadow_specs.size())
            throw ConfigError("sweep: attack.shadow_k out of range");
        cfg.attack.shadow_specs.resize(k);
        return cfg;
    }
    nlohmann::ordered_json doc = config_to_json(base);
    std::string path = param;
    std::replace(path.begin(), path.end(), '.', '/');
    const nlohmann::ordered_json::json_pointer ptr("/" + path);
    try {
        if (!doc.at(ptr).is_number())
            throw ConfigError("sweep: parameter " + param + " is not numeric");
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("sweep: unknown parameter path " + param);
    }
    doc[ptr] = v;
    return config_from_json(doc);
}

std::string sweep_point_dir(const std::string& param, double value, std::size_t rep) {
    std::string p = param;
    std::replace(p.begin(), p.end(), '.', '_');
    std::string v = num(value);
    std::replace(v.begin(), v.end(), '.', 'p');
    std::replace(v.begin(), v.end(), '-', 'm');
    return p + "_" + v + "_rep" + std::to_string(rep);
}

} // namespace

namespace {

// One row per run: per-task metric columns in first-seen task order, then
// the scalar metrics.
struct ReportRow {
    std::string key;                          // leading cell (run dir or sweep point)
    std::map<std::string, std::string> cells; // column -> value
};

std::string render_rows(const std::string& key_header, const std::vector<std::string>& lead_columns,
                        const std::vector<std::string>& task_columns,
                        const std::vector<std::string>& tail_columns,
                        const std::vector<ReportRow>& rows) {
    std::ostringstream csv;
    csv << key_header;
    for (const std::string& c : lead_columns) csv << ',' << c;
    for (const std::string& c : task_columns) csv << ',' << c;
    for (const std::string& c : tail_columns) csv << ',' << c;
    csv << '\n';
    for (const ReportRow& row : rows) {
        csv << row.key;
        auto emit = [&](const std::string& col) {
            auto it = row.cells.find(col);
            csv << ',' << (it == row.cells.end() ? std::string{} : it->second);
        };
        for (const std::string& c : lead_columns) emit(c);
        for (const std::string& c : task_columns) emit(c);
        for (const std::string& c : tail_columns) emit(c);
        csv << '\n';
    }
    return csv.str();
}

void fill_metric_cells(const nlohmann::ordered_json& j, ReportRow& row,
                       std::vector<std::string>& task_columns) {
    auto add_column = [&](const std::string& col) {
        if (std::find(task_columns.begin(), task_columns.end(), col) == task_columns.end())
            task_columns.push_back(col);
    };
    for (const auto& [task, m] : j["tasks"].items()) {
        for (const char* metric : {"cp", "bp", "asr"}) {
            const std::string col = task + "." + metric;
            add_column(col);
            row.cells[col] = m.at(metric).dump();
        }
        const std::string col = task + ".cp_v";
        add_column(col);
        if (j["cp_v"].contains(task)) row.cells[col] = j["cp_v"][task].dump();
    }
    row.cells["asr_v"] = j["asr_v"].dump();
    row.cells["bp_v"] = j["bp_v"].dump();
    row.cells["algorithm"] = j["meta"]["algorithm"].get<std::string>();
}

} // namespace

std::string sweep(const ExperimentConfig& cfg, const SweepSpec& spec, const std::string& out_dir) {
    if (spec.values.empty()) throw ConfigError("sweep: empty value list");
    if (spec.repetitions < 1) throw ConfigError("sweep: repetitions must be >= 1");

    std::vector<std::string> task_columns;
    std::vector<ReportRow> rows;
    for (double value : spec.values) {
        for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
            ExperimentConfig point = apply_sweep_value(cfg, spec.parameter, value);
            // share the seed across values of the same repetition so sweep
            // points differ only in the swept parameter
            point.seed = derive_seed(cfg.seed, "sweep", rep);
            point.output_dir = out_dir.empty()
                                   ? std::string{}
                                   : (fs::path(out_dir) / sweep_point_dir(spec.parameter, value, rep)).string();
            const RunResult run = run_experiment(point);
            ReportRow row;
            row.key = spec.parameter;
            row.cells["value"] = num(value);
            row.cells["rep"] = std::to_string(rep);
            fill_metric_cells(report_to_json(run.report), row, task_columns);
            rows.push_back(std::move(row));
        }
    }
    const std::string text = render_rows("param", {"value", "rep"}, task_columns,
                                         {"asr_v", "bp_v", "algorithm"}, rows);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "sweep.csv", text);
    }
    return text;
}

std::string consolidate_reports(const std::vector<std::string>& run_dirs) {
    std::vector<std::string> dirs = run_dirs;
    std::sort(dirs.begin(), dirs.end());

    std::vector<std::string> task_columns;
    std::vector<ReportRow> rows;
    for (const std::string& dir : dirs) {
        ReportRow row;
        row.key = dir;
        const fs::path path = fs::path(dir) / "reports" / "report.json";
        if (!fs::exists(path)) {
            std::cerr << "warning: missing report " << path.string() << "\n";
            row.cells["status"] = "missing";
            rows.push_back(std::move(row));
            continue;
        }
        std::ifstream in(path);
        if (!in) throw IoError("cannot open " + path.string());
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(path.string() + ": unparseable report: " + e.what());
        }
        if (!j.contains("tasks") || !j["tasks"].is_object() || j["tasks"].empty() ||
            !j.contains("asr_v") || !j["asr_v"].is_number() || !j.contains("bp_v") ||
            !j.contains("cp_v") || !j["cp_v"].is_object() || !j.contains("meta") ||
            !j["meta"].is_object() || !j["meta"].contains("algorithm") ||
            !j["meta"].contains("config_hash"))
            throw SchemaError(path.string() + ": report does not match the expected schema");
        for (const auto& [task, m] : j["tasks"].items())
            if (!m.contains("cp") || !m.contains("bp") || !m.contains("asr"))
                throw SchemaError(path.string() + ": task entry missing cp/bp/asr");
        fill_metric_cells(j, row, task_columns);
        row.cells["config_hash"] = j["meta"]["config_hash"].get<std::string>();
        row.cells["status"] = "ok";
        rows.push_back(std::move(row));
    }
    return render_rows("run", {}, task_columns, {"asr_v", "bp_v", "algorithm", "config_hash", "status"},
                       rows);
}

} // namespace mhj
