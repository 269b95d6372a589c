#include "mhj/eval.hpp"

#include <sstream>

#include "mhj/rng.hpp"
#include "mhj/toy_model.hpp"

namespace mhj {

namespace {

void require_clean(const Dataset& test, const char* what) {
    if (test.samples.empty()) throw EmptyInput(std::string(what) + ": empty test set");
    for (const Sample& s : test.samples)
        if (s.poisoned) throw ConfigError(std::string(what) + ": test set contains poisoned samples");
}

} // namespace

PredictFn model_predictor(const ParamSet& model) {
    return [model](const std::vector<TokenId>& tokens) { return predict(model, tokens); };
}

double accuracy(const ParamSet& model, const Dataset& test) {
    return accuracy(model_predictor(model), test);
}

double accuracy(const PredictFn& predictor, const Dataset& test) {
    require_clean(test, "accuracy");
    std::size_t hits = 0;
    for (const Sample& s : test.samples)
        if (predictor(s.tokens) == s.label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(test.samples.size());
}

double accuracy(const PredictFn& predictor, const Dataset& test, const SampleTransform& transform,
                std::uint64_t seed) {
    require_clean(test, "accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        Sample s = transform ? transform(test.samples[i], derive_seed(seed, i)) : test.samples[i];
        if (predictor(s.tokens) == s.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.samples.size());
}

double attack_success_rate(const ParamSet& model, const Dataset& test, const TriggerSpec& trigger,
                           std::uint64_t seed) {
    return attack_success_rate(model_predictor(model), test, trigger, seed);
}

double attack_success_rate(const PredictFn& predictor, const Dataset& test, const TriggerSpec& trigger,
                           std::uint64_t seed, const SampleTransform& transform) {
    require_clean(test, "attack_success_rate");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
        const std::uint64_t sample_seed = derive_seed(seed, i);
        Sample s = insert_trigger(test.samples[i], trigger, sample_seed);
        if (transform) s = transform(s, derive_seed(sample_seed, "transform"));
        if (predictor(s.tokens) == trigger.target_label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.samples.size());
}

MetricsReport metrics_report(const ParamSet& base, const std::vector<ParamSet>& clean_uploads,
                             const ParamSet& malicious_upload, const ParamSet& clean_surrogate_model,
                             const MergeSpec& merge_spec, const std::vector<Dataset>& test_sets,
                             const TriggerSpec& trigger, std::uint64_t eval_seed) {
    if (test_sets.size() != clean_uploads.size() + 1)
        throw ConfigError("metrics_report: need one test set per task, surrogate first");

    std::vector<ParamSet> clean_all;
    clean_all.reserve(test_sets.size());
    clean_all.push_back(clean_surrogate_model);
    for (const ParamSet& u : clean_uploads) clean_all.push_back(u);

    std::vector<ParamSet> mal_all = clean_all;
    mal_all[0] = malicious_upload;

    const ParamSet merged_clean = merge(base, clean_all, merge_spec);
    const ParamSet merged_mal = merge(base, mal_all, merge_spec);

    MetricsReport r;
    r.algorithm = merge_algorithm_name(merge_spec.algorithm);
    r.ratios = resolve_ratios(clean_all.size(), merge_spec.ratios);
    r.eval_seed = eval_seed;

    for (std::size_t t = 0; t < test_sets.size(); ++t) {
        const Dataset& test = test_sets[t];
        if (test.samples.empty()) throw EmptyInput("metrics_report: empty test set");
        const std::string task_id = test.samples.front().task_id;
        r.task_order.push_back(task_id);

        TaskMetrics m;
        m.cp = accuracy(merged_clean, test);
        m.bp = accuracy(merged_mal, test);
        m.asr = attack_success_rate(merged_mal, test, trigger, derive_seed(eval_seed, "asr", t));
        r.tasks[task_id] = m;
        r.cp_v[task_id] = m.cp - accuracy(clean_all[t], test);
    }

    const std::string& sur = r.task_order.front();
    const double upload_asr =
        attack_success_rate(malicious_upload, test_sets[0], trigger, derive_seed(eval_seed, "asr", 0));
    r.asr_v = r.tasks.at(sur).asr - upload_asr;
    r.bp_v = r.tasks.at(sur).bp - accuracy(malicious_upload, test_sets[0]);
    return r;
}

nlohmann::ordered_json report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["tasks"] = nlohmann::ordered_json::object();
    for (const std::string& t : r.task_order) {
        const TaskMetrics& m = r.tasks.at(t);
        j["tasks"][t] = {{"cp", m.cp}, {"bp", m.bp}, {"asr", m.asr}};
    }
    j["asr_v"] = r.asr_v;
    j["bp_v"] = r.bp_v;
    j["cp_v"] = nlohmann::ordered_json::object();
    for (const std::string& t : r.task_order) j["cp_v"][t] = r.cp_v.at(t);
    j["meta"] = nlohmann::ordered_json::object();
    j["meta"]["algorithm"] = r.algorithm;
    j["meta"]["ratios"] = r.ratios;
    j["meta"]["seed"] = r.seed;
    j["meta"]["eval_seed"] = r.eval_seed;
    j["meta"]["config_hash"] = r.config_hash;
    j["meta"]["orthogonality"] = nlohmann::ordered_json::object();
    for (const std::string& t : r.task_order) {
        auto it = r.orthogonality.find(t);
        if (it != r.orthogonality.end()) j["meta"]["orthogonality"][t] = it->second;
    }
    return j;
}

std::string report_to_csv(const MetricsReport& r) {
    auto num = [](double v) { return nlohmann::json(v).dump(); };
    std::ostringstream out;
    out << "task,cp,bp,asr,cp_v,asr_v,bp_v\n";
    for (std::size_t t = 0; t < r.task_order.size(); ++t) {
        const std::string& id = r.task_order[t];
        const TaskMetrics& m = r.tasks.at(id);
        out << id << ',' << num(m.cp) << ',' << num(m.bp) << ',' << num(m.asr) << ','
            << num(r.cp_v.at(id)) << ',';
        if (t == 0)
            out << num(r.asr_v) << ',' << num(r.bp_v);
        else
            out << ',';
        out << '\n';
    }
    return out.str();
}

} // namespace mhj
