// Acceptance suite: one test case per release criterion, each printing a
// PASS/FAIL line. Everything runs from the default experiment at seed 42 and
// is fully deterministic.

#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "mhj/experiment.hpp"
#include "mhj/rng.hpp"

using namespace mhj;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 42;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s\n", ok ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    CHECK_MESSAGE(ok, "criterion " << criterion << ": " << detail);
}

TaskVector fixed_tau(std::size_t m, std::uint64_t seed) {
    Rng rng(seed);
    ParamSet p;
    Tensor t = Tensor::zeros({m});
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    p.entries.emplace("w", std::move(t));
    return TaskVector{p};
}

const RunResult& default_run() {
    static const RunResult run = run_experiment(default_experiment_config(kSeed));
    return run;
}

} // namespace

TEST_CASE("criterion 1: sparsification is unbiased per coordinate") {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t m = 64, draws = 20000;
    const TaskVector tau = fixed_tau(m, 1001);
    const std::vector<double> truth = flatten(tau.delta);
    const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);

    std::vector<double> sum(m, 0.0), sumsq(m, 0.0);
    for (std::size_t d = 0; d < draws; ++d) {
        auto [sparse, trace] = sparsify(tau, p, derive_seed(4242, d));
        const std::vector<double> out = flatten(sparse.delta);
        for (std::size_t j = 0; j < m; ++j) {
            sum[j] += out[j];
            sumsq[j] += out[j] * out[j];
        }
    }
    std::size_t ok_coords = 0;
    for (std::size_t j = 0; j < m; ++j) {
        const double mean = sum[j] / draws;
        const double var = sumsq[j] / draws - mean * mean;
        const double se = std::sqrt(var / draws);
        if (std::fabs(mean - truth[j]) < 4.0 * se) ++ok_coords;
    }
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "E[tau'_j] = tau_j within 4*SE for " << ok_coords << "/" << m << " coordinates over "
      << draws << " draws (" << elapsed << " s)";
    report(1, ok_coords >= static_cast<std::size_t>(std::ceil(0.99 * m)) && elapsed < 10.0, d.str());
}

TEST_CASE("criterion 2: probability window, mean and realized density") {
    const auto t0 = std::chrono::steady_clock::now();
    const double delta = 0.7, eps = 0.2;
    const double lo = delta - eps, hi = delta + eps; // the window [0.5, 0.9]
    const std::size_t m = 16384;
    const TaskVector tau = fixed_tau(m, 1002);
    const auto p = keep_probabilities(rank_normalize(tau), delta, eps);

    bool window_ok = true;
    double mean = 0.0;
    for (double v : p) {
        window_ok = window_ok && v >= lo && v <= hi;
        mean += v;
    }
    mean /= static_cast<double>(m);
    const bool mean_ok = std::fabs(mean - delta) < 1e-12;

    auto [sparse, trace] = sparsify(tau, p, 271828);
    const double density = static_cast<double>(trace.kept_count()) / static_cast<double>(m);
    const bool density_ok = std::fabs(density - delta) <= 5.0 * std::sqrt(delta * (1 - delta) / m);
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "p in [" << lo << ", " << hi << "], mean(p) = " << mean << ", realized density = "
      << density << " (" << elapsed << " s)";
    report(2, window_ok && mean_ok && density_ok && elapsed < 1.0, d.str());
}

TEST_CASE("criterion 3: hand-computed ranking, window and rescale") {
    ParamSet pset;
    pset.entries.emplace("w", Tensor{{3}, {0.1, -0.4, 0.3}});
    const TaskVector tau{pset};
    const auto rhat = rank_normalize(tau);
    const auto p = keep_probabilities(rhat, 0.7, 0.2);
    bool ok = rhat == std::vector<double>{0.0, 1.0, 0.5};
    ok = ok && std::fabs(p[0] - 0.5) < 1e-12 && std::fabs(p[1] - 0.9) < 1e-12 &&
         std::fabs(p[2] - 0.7) < 1e-12;

    // deterministic search for a draw that keeps all three coordinates
    bool found = false;
    std::vector<double> out;
    for (std::uint64_t s = 0; s < 200 && !found; ++s) {
        auto [sparse, trace] = sparsify(tau, p, s);
        if (trace.kept_count() == 3) {
            out = flatten(sparse.delta);
            found = true;
        }
    }
    ok = ok && found && std::fabs(out[0] - 0.2) < 1e-4 && std::fabs(out[1] + 0.4444) < 1e-4 &&
         std::fabs(out[2] - 0.4286) < 1e-4;
    std::ostringstream d;
    d << "rhat=[0,1,0.5], p=[0.5,0.9,0.7], all-kept tau'=[0.2,-0.4444,0.4286]";
    report(3, ok, d.str());
}

TEST_CASE("criterion 4: analytic gradients match central finite differences") {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig cfg{8, 3, 4, 3};
    ParamSet params = init_model(cfg, 11);
    std::vector<Sample> batch(3);
    batch[0].tokens = {0, 3, 5};
    batch[0].label = 0;
    batch[1].tokens = {7, 1};
    batch[1].label = 2;
    batch[2].tokens = {2, 2, 6, 4};
    batch[2].label = 1;

    const LossGrad lg = loss_and_grad(params, batch);
    const double h = 1e-5;
    double max_err = 0.0;
    auto grad_it = lg.grad.entries.begin();
    for (auto& [name, t] : params.entries) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double keep = t.data[i];
            t.data[i] = keep + h;
            const double up = loss_and_grad(params, batch).loss;
            t.data[i] = keep - h;
            const double dn = loss_and_grad(params, batch).loss;
            t.data[i] = keep;
            const double numeric = (up - dn) / (2.0 * h);
            const double analytic = grad_it->second.data[i];
            max_err = std::max(max_err, std::fabs(analytic - numeric) / (std::fabs(analytic) + 1e-8));
        }
        ++grad_it;
    }
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "max normalized error " << max_err << " on V=8,d=3,h=4,L=3 (" << elapsed << " s)";
    report(4, max_err < 1e-5 && elapsed < 5.0, d.str());
}

TEST_CASE("criterion 5: merging identities and drop-rescale unbiasedness") {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t m = 64, draws = 20000;
    TaskVector d = fixed_tau(m, 1005);

    bool ok = true;
    // TA single-model identity at k=1
    {
        const auto out = flatten(merge_ta({d}, {1.0}).delta);
        const auto in = flatten(d.delta);
        for (std::size_t j = 0; j < m; ++j) ok = ok && out[j] == in[j];
    }
    // MB with beta=gamma=0 equals TA; DARE with drop 0 equals TA
    {
        const auto ta = flatten(merge_ta({d}, {1.0}).delta);
        const auto mb = flatten(merge_breadcrumbs({d}, {1.0}, 0.0, 0.0).delta);
        const auto dare = flatten(merge_dare({d}, {1.0}, 0.0, 9).delta);
        for (std::size_t j = 0; j < m; ++j) ok = ok && mb[j] == ta[j] && dare[j] == ta[j];
    }
    // Monte-Carlo unbiasedness of DARE and DELLA
    const std::vector<double> truth = flatten(d.delta);
    auto mc_ok = [&](auto&& draw) {
        std::vector<double> sum(m, 0.0), sumsq(m, 0.0);
        for (std::size_t k = 0; k < draws; ++k) {
            const std::vector<double> out = draw(k);
            for (std::size_t j = 0; j < m; ++j) {
                sum[j] += out[j];
                sumsq[j] += out[j] * out[j];
            }
        }
        for (std::size_t j = 0; j < m; ++j) {
            const double mean = sum[j] / draws;
            const double se = std::sqrt((sumsq[j] / draws - mean * mean) / draws);
            if (std::fabs(mean - truth[j]) >= 4.0 * se) return false;
        }
        return true;
    };
    const bool dare_ok =
        mc_ok([&](std::size_t k) { return flatten(merge_dare({d}, {1.0}, 0.2, derive_seed(71, k)).delta); });
    const bool della_ok = mc_ok(
        [&](std::size_t k) { return flatten(merge_della({d}, {1.0}, 0.8, 0.1, derive_seed(72, k)).delta); });
    const double elapsed = seconds_since(t0);
    std::ostringstream msg;
    msg << "identities exact, DARE unbiased: " << dare_ok << ", DELLA unbiased: " << della_ok
        << " over " << draws << " draws (" << elapsed << " s)";
    report(5, ok && dare_ok && della_ok && elapsed < 30.0, msg.str());
}

TEST_CASE("criterion 6: default end-to-end attack succeeds while utility holds") {
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult& run = default_run();
    bool ok = true;
    std::ostringstream d;
    for (const std::string& task : run.report.task_order) {
        const TaskMetrics& tm = run.report.tasks.at(task);
        ok = ok && tm.asr >= 0.90 && std::fabs(tm.bp - tm.cp) <= 0.05;
        d << task << "(cp " << tm.cp << ", bp " << tm.bp << ", asr " << tm.asr << ") ";
    }
    ok = ok && std::fabs(run.report.asr_v) <= 0.05 && std::fabs(run.report.bp_v) <= 0.05;
    const double elapsed = seconds_since(t0);
    d << "asr_v " << run.report.asr_v << ", bp_v " << run.report.bp_v << " (" << elapsed << " s)";
    report(6, ok && elapsed < 300.0, d.str());
}

TEST_CASE("criterion 7: surrogate ASR is non-decreasing in lambda") {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg = default_experiment_config(kSeed);
    SweepSpec spec;
    spec.parameter = "attack.lambda";
    spec.values = {1.0, 1.5, 2.0, 3.0};
    const std::string csv = sweep(cfg, spec, "");

    std::vector<double> asr, cp;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::istringstream hs(line);
        std::string col;
        while (std::getline(hs, col, ',')) header.push_back(col);
    }
    const auto col_of = [&](const std::string& name) {
        return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    };
    const std::size_t cp_col = col_of("task0.cp");
    const std::size_t asr_col = col_of("task0.asr");
    REQUIRE(cp_col < header.size());
    REQUIRE(asr_col < header.size());
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        cp.push_back(std::stod(fields.at(cp_col)));
        asr.push_back(std::stod(fields.at(asr_col)));
    }
    bool ok = asr.size() == 4;
    for (std::size_t i = 1; i < asr.size() && ok; ++i) ok = asr[i - 1] <= asr[i] + 1e-12;
    bool cp_fixed = true;
    for (std::size_t i = 1; i < cp.size(); ++i) cp_fixed = cp_fixed && cp[i] == cp[0];
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "surrogate ASR over lambda {1,1.5,2,3} = [";
    for (double v : asr) d << " " << v;
    d << " ], CP fixed: " << cp_fixed << " (" << elapsed << " s)";
    report(7, ok && cp_fixed && elapsed < 1200.0, d.str());
}

TEST_CASE("criterion 8: the all-clean merge never fires the trigger") {
    const RunResult& run = default_run();
    const ExperimentConfig cfg = default_experiment_config(kSeed);
    bool ok = true;
    std::ostringstream d;
    d << "clean-merge ASR:";
    for (std::size_t t = 0; t < run.test_sets.size(); ++t) {
        const double asr = attack_success_rate(run.merged_clean, run.test_sets[t], cfg.attack.trigger,
                                               derive_seed(derive_seed(kSeed, "eval"), "asr", t));
        ok = ok && asr <= 0.02;
        d << " " << asr;
    }
    report(8, ok, d.str());
}

TEST_CASE("criterion 9: fine-pruning fails to remove the backdoor") {
    const RunResult& run = default_run();
    const ExperimentConfig cfg = default_experiment_config(kSeed);
    DefenseConfig dc;
    dc.method = DefenseMethod::fine_prune; // ratio 0.2, 100 calib samples per task
    const auto j = evaluate_defense(dc, cfg, run.merged_malicious, run.reference_model,
                                    run.train_sets, run.test_sets);
    bool ok = true;
    std::ostringstream d;
    d << "post-defense ASR:";
    for (const auto& [task, v] : j["tasks"].items()) {
        const double asr = v["asr"].get<double>();
        ok = ok && asr >= 0.80;
        d << " " << task << "=" << asr;
    }
    report(9, ok, d.str());
}

TEST_CASE("criterion 10: the suspicion filter stops the fixed-target attack at a utility cost") {
    const RunResult& run = default_run();
    const ExperimentConfig cfg = default_experiment_config(kSeed);
    DefenseConfig dc;
    dc.method = DefenseMethod::suspicion_filter; // alpha = 20
    const auto j = evaluate_defense(dc, cfg, run.merged_malicious, run.reference_model,
                                    run.train_sets, run.test_sets);
    bool ok = true;
    std::ostringstream d;
    for (const std::string& task : run.report.task_order) {
        const double asr = j["tasks"][task]["asr"].get<double>();
        const double bp_drop = run.report.tasks.at(task).bp - j["tasks"][task]["bp"].get<double>();
        ok = ok && asr <= 0.05 && bp_drop >= 0.01;
        d << task << "(asr " << asr << ", bp drop " << bp_drop << ") ";
    }
    report(10, ok, d.str());
}

TEST_CASE("criterion 11: paraphrasing leaves the residual ASR near 40%") {
    const RunResult& run = default_run();
    const ExperimentConfig cfg = default_experiment_config(kSeed);
    DefenseConfig dc;
    dc.method = DefenseMethod::paraphrase_sim; // q_remove = 0.6
    const auto j = evaluate_defense(dc, cfg, run.merged_malicious, run.reference_model,
                                    run.train_sets, run.test_sets);
    bool ok = true;
    std::ostringstream d;
    d << "post-defense ASR:";
    for (const auto& [task, v] : j["tasks"].items()) {
        const double asr = v["asr"].get<double>();
        ok = ok && asr >= 0.30 && asr <= 0.50;
        d << " " << task << "=" << asr;
    }
    report(11, ok, d.str());
}

TEST_CASE("criterion 12: same-seed runs are byte-identical") {
    const fs::path root =
        fs::temp_directory_path() / ("mhj_accept_" + std::to_string(::getpid()));
    fs::remove_all(root);
    ExperimentConfig cfg = default_experiment_config(kSeed);
    cfg.output_dir = (root / "a").string();
    const RunResult a = run_experiment(cfg);
    cfg.output_dir = (root / "b").string();
    const RunResult b = run_experiment(cfg);

    bool ok = a.report_json == b.report_json;
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const fs::path rel = fs::relative(entry.path(), root / "a");
        std::ifstream fa(entry.path(), std::ios::binary), fb(root / "b" / rel, std::ios::binary);
        std::stringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        if (sa.str() != sb.str()) ok = false;
    }
    std::error_code ec;
    fs::remove_all(root, ec);
    std::ostringstream d;
    d << "two seed-" << kSeed << " runs, " << files << " artifact files compared byte-for-byte";
    report(12, ok && files > 10, d.str());
}
