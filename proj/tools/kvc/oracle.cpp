#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "commands.hpp"
#include "kvc/policies.hpp"
#include "kvc/stats.hpp"
#include "kvc/tensor.hpp"
#include "options.hpp"

namespace kvc::cli {

namespace {

struct MgfOptions {
    std::vector<std::size_t> dims{1, 2, 4, 8};
    std::size_t trials = 20;
    std::size_t samples = 1'000'000;
    std::uint64_t seed = 0;
    double tolerance = 0.02;
    double sigmas = 3.0;
};

/// Closed form exp(μᵀk/√d + kᵀΣk/2d) against sampling, per dimension.
int run_mgf(const MgfOptions& o) {
    if (o.tolerance < 0.0 || o.sigmas < 0.0 || o.samples < 2) {
        throw UsageError("--tolerance and --sigmas must be >= 0 and --samples >= 2");
    }
    std::size_t total = 0;
    std::size_t failed = 0;
    double worst = 0.0;
    for (std::size_t d : o.dims) {
        if (d == 0) throw UsageError("--dims entries must be positive");
        std::size_t dim_failed = 0;
        for (std::size_t t = 0; t < o.trials; ++t) {
            std::mt19937_64 rng(o.seed * 1000003 + d * 1009 + t);
            std::normal_distribution<double> nd;
            std::uniform_real_distribution<double> target(0.1, 1.5);
            std::vector<double> mu(d), k(d), a(d * d), cov(d * d, 0.0);
            for (auto& x : mu) x = 0.5 * nd(rng);
            for (auto& x : k) x = nd(rng);
            for (auto& x : a) x = nd(rng);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    for (std::size_t r = 0; r < d; ++r) cov[i * d + j] += a[i * d + r] * a[j * d + r];
            double quad = 0.0;
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) quad += k[i] * cov[i * d + j] * k[j];
            quad /= static_cast<double>(d);
            const double scale = quad > 0.0 ? target(rng) / quad : 1.0;
            for (auto& x : cov) x *= scale;

            const double analytic = std::exp(expected_log_score(k, mu, cov));
            const auto mc = mgf_oracle(mu, cov, k, o.samples, rng());
            const double err = std::abs(mc.mean - analytic);
            worst = std::max(worst, err / analytic);
            ++total;
            if (err > std::max(o.tolerance * analytic, o.sigmas * mc.std_error)) ++dim_failed;
        }
        std::printf("%s mgf d=%zu: %zu/%zu triples within tolerance\n", dim_failed ? "FAIL" : "PASS", d,
                    o.trials - dim_failed, o.trials);
        failed += dim_failed;
    }
    print_summary({{"command", "oracle mgf"},
                   {"dims", o.dims},
                   {"trials", o.trials},
                   {"samples", o.samples},
                   {"seed", o.seed},
                   {"tolerance", o.tolerance},
                   {"sigmas", o.sigmas},
                   {"checked", total},
                   {"failed", failed},
                   {"worst_relative_error", worst}});
    return failed ? kExitVerification : kExitOk;
}

struct AllocOptions {
    std::size_t max_entries = 8;
    std::size_t values = 3;
};

/// Every score assignment over every heads x entries shape up to max_entries,
/// every budget and min_keep, against exhaustive subset search.
int run_alloc(const AllocOptions& o) {
    if (o.max_entries == 0 || o.max_entries > 12 || o.values == 0) {
        throw UsageError("--max-entries must be in [1, 12] and --values positive");
    }
    std::size_t checked = 0;
    std::size_t failed = 0;
    for (std::size_t heads = 1; heads <= o.max_entries; ++heads) {
        for (std::size_t len = 1; heads * len <= o.max_entries; ++len) {
            const std::size_t cells = heads * len;
            std::size_t combos = 1;
            for (std::size_t i = 0; i < cells; ++i) combos *= o.values;
            std::size_t shape_failed = 0;
            for (std::size_t code = 0; code < combos; ++code) {
                std::vector<ScoreVector> s(heads, ScoreVector(len));
                std::size_t c = code;
                for (auto& h : s)
                    for (auto& x : h) {
                        x = static_cast<float>(c % o.values);
                        c /= o.values;
                    }
                for (std::size_t mk = 0; mk <= std::min<std::size_t>(len, 2); ++mk) {
                    for (std::size_t budget = heads * mk; budget <= cells; ++budget) {
                        ++checked;
                        if (allocate_head_adaptive(s, budget, mk) != brute_force_allocation(s, budget, mk)) {
                            ++shape_failed;
                        }
                    }
                }
            }
            if (shape_failed) {
                std::printf("FAIL alloc %zux%zu: %zu mismatches\n", heads, len, shape_failed);
            }
            failed += shape_failed;
        }
    }
    std::printf("%s alloc: %zu instances, %zu mismatches\n", failed ? "FAIL" : "PASS", checked, failed);
    print_summary({{"command", "oracle alloc"},
                   {"max_entries", o.max_entries},
                   {"values", o.values},
                   {"checked", checked},
                   {"failed", failed}});
    return failed ? kExitVerification : kExitOk;
}

struct MatmulOptions {
    std::vector<std::size_t> sizes{1, 7, 32, 65};
    std::size_t trials = 3;
    std::uint64_t seed = 0;
    double tolerance = 1e-5;
};

/// matmul against a double-precision triple loop; the error of each output is
/// measured relative to sum_k |a_ik b_kj|.
int run_matmul(const MatmulOptions& o) {
    if (o.tolerance < 0.0) {
        throw UsageError("--tolerance must be >= 0");
    }
    std::size_t failed = 0;
    double worst = 0.0;
    for (std::size_t n : o.sizes) {
        if (n == 0) throw UsageError("--sizes entries must be positive");
        for (std::size_t t = 0; t < o.trials; ++t) {
            std::mt19937_64 rng(o.seed * 7919 + n * 31 + t);
            std::normal_distribution<float> nd;
            const std::size_t m = n + t, k = n + 2 * t + 1;
            Tensor a({m, k}), b({k, n});
            for (auto& x : a.data()) x = nd(rng);
            for (auto& x : b.data()) x = nd(rng);
            const Tensor c = matmul(a, b);
            double rel = 0.0;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    double ref = 0.0, mag = 0.0;
                    for (std::size_t r = 0; r < k; ++r) {
                        const double p = static_cast<double>(a.at(i, r)) * b.at(r, j);
                        ref += p;
                        mag += std::abs(p);
                    }
                    rel = std::max(rel, std::abs(c.at(i, j) - ref) / std::max(mag, 1e-30));
                }
            worst = std::max(worst, rel);
            const bool ok = rel <= o.tolerance;
            failed += !ok;
            std::printf("%s matmul %zux%zu * %zux%zu: relative error %.3g\n", ok ? "PASS" : "FAIL", m, k, k, n, rel);
        }
    }
    print_summary({{"command", "oracle matmul"},
                   {"sizes", o.sizes},
                   {"trials", o.trials},
                   {"seed", o.seed},
                   {"tolerance", o.tolerance},
                   {"failed", failed},
                   {"worst_relative_error", worst}});
    return failed ? kExitVerification : kExitOk;
}

} // namespace

void add_oracle(CLI::App& app, Action& action) {
    auto* oracle = app.add_subcommand("oracle", "Brute-force verification of core numerics; exit 2 on mismatch");
    oracle->require_subcommand(1);

    auto mgf = std::make_shared<MgfOptions>();
    auto* m = oracle->add_subcommand("mgf", "Gaussian moment-generating function against sampling");
    m->add_option("--dims", mgf->dims, "Dimensions")->delimiter(',');
    m->add_option("--trials", mgf->trials, "Random triples per dimension");
    m->add_option("--samples", mgf->samples, "Monte-Carlo samples per triple");
    m->add_option("--seed", mgf->seed, "Seed");
    m->add_option("--tolerance", mgf->tolerance, "Relative tolerance");
    m->add_option("--sigmas", mgf->sigmas, "Standard errors also accepted");
    m->callback([mgf, &action] { action = [mgf] { return run_mgf(*mgf); }; });

    auto alloc = std::make_shared<AllocOptions>();
    auto* a = oracle->add_subcommand("alloc", "Head-adaptive allocation against exhaustive subset search");
    a->add_option("--max-entries", alloc->max_entries, "Largest heads x entries shape");
    a->add_option("--values", alloc->values, "Distinct score values");
    a->callback([alloc, &action] { action = [alloc] { return run_alloc(*alloc); }; });

    auto mm = std::make_shared<MatmulOptions>();
    auto* x = oracle->add_subcommand("matmul", "Matrix product against a double-precision loop");
    x->add_option("--sizes", mm->sizes, "Output widths")->delimiter(',');
    x->add_option("--trials", mm->trials, "Shapes per size");
    x->add_option("--seed", mm->seed, "Seed");
    x->add_option("--tolerance", mm->tolerance, "Relative tolerance");
    x->callback([mm, &action] { action = [mm] { return run_matmul(*mm); }; });
}

} // namespace kvc::cli
