#include <doctest.h>

#include <bit>
#include <cmath>
#include <numeric>

#include "mhj/eval.hpp"
#include "mhj/experiment.hpp"
#include "mhj/hijack.hpp"
#include "mhj/rng.hpp"

using namespace mhj;

namespace {

TaskVector vec(std::vector<double> vals) {
    ParamSet p;
    p.entries.emplace("w", Tensor{{vals.size()}, std::move(vals)});
    return TaskVector{p};
}

TaskVector random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> vals(n);
    for (double& v : vals) v = rng.uniform(-1.0, 1.0);
    return vec(std::move(vals));
}

bool bit_equal(const ParamSet& a, const ParamSet& b) {
    if (!a.shape_compatible(b)) return false;
    auto ib = b.entries.begin();
    for (const auto& [name, t] : a.entries) {
        for (std::size_t i = 0; i < t.data.size(); ++i)
            if (std::bit_cast<std::uint64_t>(t.data[i]) !=
                std::bit_cast<std::uint64_t>(ib->second.data[i]))
                return false;
        ++ib;
    }
    return true;
}

} // namespace

TEST_CASE("rank_normalize hand example") {
    const auto rhat = rank_normalize(vec({0.1, -0.4, 0.3}));
    REQUIRE(rhat.size() == 3);
    CHECK(rhat[0] == 0.0);
    CHECK(rhat[1] == 1.0);
    CHECK(rhat[2] == 0.5);
}

TEST_CASE("rank_normalize degenerate and structural cases") {
    SUBCASE("all-tied magnitudes map to 0.5") {
        for (double v : rank_normalize(vec({0.3, -0.3, 0.3, 0.3}))) CHECK(v == 0.5);
    }
    SUBCASE("single coordinate maps to 0.5") {
        CHECK(rank_normalize(vec({2.0}))[0] == 0.5);
    }
    SUBCASE("distinct magnitudes yield exactly {0, 1/(m-1), ..., 1}") {
        const std::size_t m = 17;
        const auto rhat = rank_normalize(random_vec(m, 3));
        std::vector<double> sorted = rhat;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < m; ++i)
            CHECK(sorted[i] == static_cast<double>(i) / static_cast<double>(m - 1));
    }
    SUBCASE("ranks are a permutation with index tie-break") {
        const TaskVector tau = vec({0.5, -0.5, 0.1, 0.5});
        const auto ranks = magnitude_ranks(tau);
        std::vector<std::size_t> sorted = ranks;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < ranks.size(); ++i) CHECK(sorted[i] == i);
        CHECK(ranks[2] == 0);  // smallest magnitude
        CHECK(ranks[0] < ranks[1]);
        CHECK(ranks[1] < ranks[3]);  // ties in |0.5| ordered by index
    }
}

TEST_CASE("keep_probabilities") {
    SUBCASE("paper defaults on the hand example") {
        const auto p = keep_probabilities({0.0, 0.5, 1.0}, 0.7, 0.2);
        CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(0.7).epsilon(1e-12));
        CHECK(p[2] == doctest::Approx(0.9).epsilon(1e-12));
    }
    SUBCASE("epsilon 0 collapses to delta") {
        for (double v : keep_probabilities({0.0, 0.25, 1.0}, 0.7, 0.0)) CHECK(v == 0.7);
    }
    SUBCASE("mean probability equals delta for distinct magnitudes") {
        const TaskVector tau = random_vec(257, 5);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        const double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
        CHECK(mean == doctest::Approx(0.7).epsilon(1e-12));
    }
    SUBCASE("window containment and monotonicity") {
        const TaskVector tau = random_vec(400, 6);
        const std::vector<double> flat = flatten(tau.delta);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        const double lo = 0.7 - 0.2, hi = 0.7 + 0.2;
        for (double v : p) {
            CHECK(v >= lo);
            CHECK(v <= hi);
        }
        for (std::size_t a = 0; a < 40; ++a)
            for (std::size_t b = 0; b < 40; ++b)
                if (std::fabs(flat[a]) > std::fabs(flat[b])) CHECK(p[a] > p[b]);
    }
    SUBCASE("invalid windows are rejected") {
        CHECK_THROWS_AS(keep_probabilities({0.5}, 0.2, 0.3), ConfigError);
        CHECK_THROWS_AS(keep_probabilities({0.5}, 0.9, 0.2), ConfigError);
    }
}

TEST_CASE("sparsify") {
    SUBCASE("all-one probabilities keep tau exactly") {
        const TaskVector tau = random_vec(64, 7);
        auto [sparse, trace] = sparsify(tau, std::vector<double>(64, 1.0), 3);
        CHECK(bit_equal(sparse.delta, tau.delta));
        CHECK(trace.kept_count() == 64);
    }
    SUBCASE("hand example with every coordinate kept") {
        const TaskVector tau = vec({0.1, -0.4, 0.3});
        const std::vector<double> p = {0.5, 0.9, 0.7};
        // deterministic search for a draw that keeps all three coordinates
        std::uint64_t all_kept_seed = 0;
        bool found = false;
        for (std::uint64_t s = 0; s < 100 && !found; ++s) {
            auto [sparse, trace] = sparsify(tau, p, s);
            if (trace.kept_count() == 3) {
                all_kept_seed = s;
                found = true;
            }
        }
        REQUIRE(found);
        auto [sparse, trace] = sparsify(tau, p, all_kept_seed);
        const auto& out = sparse.delta.at("w").data;
        CHECK(out[0] == doctest::Approx(0.2).epsilon(1e-4));
        CHECK(out[1] == doctest::Approx(-0.4444).epsilon(1e-3));
        CHECK(out[2] == doctest::Approx(0.42857).epsilon(1e-3));
    }
    SUBCASE("dropped coordinates are exactly zero, kept ones rescaled") {
        const TaskVector tau = random_vec(512, 8);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        auto [sparse, trace] = sparsify(tau, p, 11);
        const std::vector<double> in = flatten(tau.delta);
        const std::vector<double> out = flatten(sparse.delta);
        for (std::size_t j = 0; j < out.size(); ++j) {
            if (trace.keep_mask[j])
                CHECK(out[j] == in[j] / p[j]);
            else
                CHECK(out[j] == 0.0);
        }
        CHECK(trace.keep_prob == p);
        CHECK(trace.ranks == magnitude_ranks(tau));
    }
    SUBCASE("identical tau gives an identical trace") {
        const TaskVector tau = random_vec(128, 9);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        auto [s1, t1] = sparsify(tau, p, 21);
        auto [s2, t2] = sparsify(tau, p, 21);
        CHECK(bit_equal(s1.delta, s2.delta));
        CHECK(t1.keep_mask == t2.keep_mask);
    }
    SUBCASE("unbiasedness across draws") {
        const std::size_t m = 64, n_draws = 5000;
        const TaskVector tau = random_vec(m, 10);
        const std::vector<double> truth = flatten(tau.delta);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        std::vector<double> sum(m, 0.0), sumsq(m, 0.0);
        for (std::size_t d = 0; d < n_draws; ++d) {
            auto [sparse, trace] = sparsify(tau, p, derive_seed(1234, d));
            const std::vector<double> out = flatten(sparse.delta);
            for (std::size_t j = 0; j < m; ++j) {
                sum[j] += out[j];
                sumsq[j] += out[j] * out[j];
            }
        }
        std::size_t ok = 0;
        for (std::size_t j = 0; j < m; ++j) {
            const double mean = sum[j] / n_draws;
            const double var = sumsq[j] / n_draws - mean * mean;
            const double se = std::sqrt(var / n_draws);
            if (std::fabs(mean - truth[j]) < 4.0 * se) ++ok;
        }
        CHECK(ok >= static_cast<std::size_t>(0.98 * m));
    }
    SUBCASE("realized density concentrates on delta") {
        const std::size_t m = 16384;
        const TaskVector tau = random_vec(m, 12);
        const auto p = keep_probabilities(rank_normalize(tau), 0.7, 0.2);
        auto [sparse, trace] = sparsify(tau, p, 77);
        const double density = static_cast<double>(trace.kept_count()) / static_cast<double>(m);
        CHECK(std::fabs(density - 0.7) <= 5.0 * std::sqrt(0.7 * 0.3 / static_cast<double>(m)));
    }
    SUBCASE("probabilities outside (0,1] are rejected") {
        const TaskVector tau = random_vec(4, 13);
        CHECK_THROWS_AS(sparsify(tau, {0.5, 0.5, 0.5, 0.0}, 1), ConfigError);
        CHECK_THROWS_AS(sparsify(tau, {0.5, 0.5, 0.5, 1.5}, 1), ConfigError);
    }
}

TEST_CASE("build_malicious_base matches apply_delta bit-exactly") {
    ExperimentConfig cfg = default_experiment_config(5);
    const ParamSet base = init_model(cfg.model, 4);
    const TaskVector tau = task_vector(init_model(cfg.model, 6), base);
    CHECK(bit_equal(build_malicious_base(base, tau, 2.0), apply_delta(base, tau, 2.0)));

    const TaskVector zero = task_vector(base, base);
    CHECK(bit_equal(build_malicious_base(base, zero, 5.0), base));
    CHECK_THROWS_AS(build_malicious_base(base, tau, 0.0), ConfigError);
}

TEST_CASE("derive_backdoor_vector") {
    ExperimentConfig cfg = default_experiment_config(42);
    const ParamSet base = init_model(cfg.model, derive_seed(42, "init"));
    AttackConfig atk = cfg.attack;
    atk.train_cfg.seed = 9001;
    const Dataset shadow = gen_shadow(atk.shadow_specs, atk.shadow_per_task_n, 123);

    SUBCASE("rho 0 yields an exactly zero vector") {
        AttackConfig clean = atk;
        clean.rho = 0.0;
        const BackdoorDerivation der = derive_backdoor_vector(base, shadow, clean);
        CHECK(l2_norm(der.tau.delta) == 0.0);
        CHECK(bit_equal(der.shadow_clean, der.shadow_backdoored));
    }
    SUBCASE("default rho yields a nonzero vector and a working shadow backdoor") {
        const BackdoorDerivation der = derive_backdoor_vector(base, shadow, atk);
        CHECK(l2_norm(der.tau.delta) > 0.0);
        Dataset shadow_test;
        for (const TaskSpec& s : atk.shadow_specs) {
            Dataset part = gen_task(s, 2, 50, 321).second;
            shadow_test.samples.insert(shadow_test.samples.end(), part.samples.begin(),
                                       part.samples.end());
        }
        shadow_test.split = Split::test;
        CHECK(attack_success_rate(der.shadow_backdoored, shadow_test, atk.trigger, 3) >= 0.95);
    }
}

TEST_CASE("mask_finetune with rho 0 from the clean base equals the clean finetune") {
    ExperimentConfig cfg = default_experiment_config(7);
    const ParamSet base = init_model(cfg.model, 14);
    const Dataset surrogate = gen_dataset(cfg.tasks[0], 200, 15, Split::train);
    AttackConfig atk = cfg.attack;
    atk.rho = 0.0;
    atk.surrogate_train_cfg = TrainConfig{0.1, 4, 10, 333};
    const ParamSet via_attack = mask_finetune(base, surrogate, atk);
    const ParamSet clean = train(base, surrogate, TrainConfig{0.1, 4, 10, 333});
    CHECK(bit_equal(via_attack, clean));
}

TEST_CASE("build_upload_model end to end") {
    ExperimentConfig cfg = default_experiment_config(42);
    const ParamSet base = init_model(cfg.model, derive_seed(42, "init"));

    SUBCASE("fixed seed reproduces the upload bit-exactly") {
        auto [up1, art1] = build_upload_model(base, cfg.attack, 5150);
        auto [up2, art2] = build_upload_model(base, cfg.attack, 5150);
        CHECK(bit_equal(up1, up2));
        CHECK(art1.trace.keep_mask == art2.trace.keep_mask);
    }
    SUBCASE("upload model carries the backdoor and keeps its utility") {
        auto [upload, art] = build_upload_model(base, cfg.attack, 5150);
        const auto [sur_train, sur_test] = gen_task(cfg.tasks[0], 100, 400, 777);
        CHECK(attack_success_rate(upload, sur_test, cfg.attack.trigger, 5) >= 0.95);

        TrainConfig tc = cfg.train;
        tc.seed = 999;
        const ParamSet clean_sur = train(base, art.surrogate_train, tc);
        const double clean_acc = accuracy(clean_sur, sur_test);
        const double upload_acc = accuracy(upload, sur_test);
        CHECK(std::fabs(upload_acc - clean_acc) <= 0.05);
    }
    SUBCASE("keep probabilities of the real tau stay inside the window") {
        auto [upload, art] = build_upload_model(base, cfg.attack, 5150);
        for (double p : art.trace.keep_prob) {
            CHECK(p >= cfg.attack.delta - cfg.attack.epsilon);
            CHECK(p <= cfg.attack.delta + cfg.attack.epsilon);
        }
    }
}

TEST_CASE("a weak rescaling factor collapses the merged attack") {
    ExperimentConfig weak = default_experiment_config(42);
    weak.attack.lambda = 1.0;
    const RunResult run = run_experiment(weak);
    // trigger response at 1/lambda of the default operating point: the
    // merged model barely ever emits the target label
    for (const std::string& task : run.report.task_order)
        CHECK(run.report.tasks.at(task).asr <= 0.2);
}

TEST_CASE("attack config validation") {
    ExperimentConfig cfg = default_experiment_config(2);
    SUBCASE("window") {
        AttackConfig bad = cfg.attack;
        bad.delta = 0.2;
        bad.epsilon = 0.3;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SUBCASE("lambda") {
        AttackConfig bad = cfg.attack;
        bad.lambda = 0.0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
    SUBCASE("trigger outside the reserved band") {
        AttackConfig bad = cfg.attack;
        bad.trigger.trigger_tokens = {0, 1};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
}
