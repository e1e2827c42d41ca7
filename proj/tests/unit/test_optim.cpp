// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#include <rayvis/optim.hpp>
#include <rayvis/parallel.hpp>
#include <rayvis/pipeline.hpp>

#include <gradient_check.hpp>
#include <test_support.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

using namespace rayvis;

namespace {

bool maps_identical(const std::vector<DistributionMap> &a, const std::vector<DistributionMap> &b) {
    if (a.size() != b.size())
        return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].data().size() != b[i].data().size() ||
            std::memcmp(a[i].data().data(), b[i].data().data(), a[i].data().size() * sizeof(float)) != 0)
            return false;
    return true;
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.batch_rays = 24;
    cfg.seed = 5;
    cfg.render.k_coarse = 16;
    cfg.render.working_views = 3;
    cfg.render.sh_degree = 1;
    cfg.adam.learning_rate = 5e-3;
    return cfg;
}

const PreparedScene &small_scene() {
    static const PreparedScene ps = [] {
        InitOptions init;
        init.noise_fraction = 0.02;
        init.seed = 3;
        return prepare_scene(make_two_sphere_scene(6, 12, 1), init);
    }();
    return ps;
}

double textbook_bce(double a, double b) { return -a * std::log(b) - (1.0 - a) * std::log(1.0 - b); }

} // namespace

TEST(RenderLoss, SumOfSquares) {
    const std::vector<Eigen::Vector3d> r{{1, 0, 0}, {0.5, 0.5, 0.5}}, t{{0, 0, 0}, {0.5, 0.5, 1.0}};
    const ColorLoss l = render_loss(r, t);
    EXPECT_DOUBLE_EQ(l.value, 1.25);
    EXPECT_EQ(l.grad[0], Eigen::Vector3d(2, 0, 0));
    EXPECT_EQ(l.grad[1], Eigen::Vector3d(0, 0, -1));
    EXPECT_THROW(render_loss(r, std::span(t).first(1)), std::invalid_argument);
}

TEST(ConsistencyLoss, BinaryExamples) {
    const std::vector<double> one{1.0}, half{0.5};
    EXPECT_NEAR(consistency_loss(one, half, 1e-5).value, 0.693147, 1e-6);
    EXPECT_NEAR(consistency_loss(half, half, 1e-5).value, std::log(2.0), 1e-12);
    // prediction clamped at 1 - eps
    const double clamped = consistency_loss(std::vector<double>{0.0}, std::vector<double>{1.0}, 1e-5).value;
    EXPECT_NEAR(clamped, -std::log(1e-5), 1e-9);
    EXPECT_EQ(consistency_loss(std::vector<double>{0.0}, std::vector<double>{1.0}, 1e-5).grad_second[0], 0.0);
}

TEST(ConsistencyLoss, BinaryMatchesTextbookAndDerivatives) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(7), b(7);
        for (auto &x : a)
            x = u(rng);
        for (auto &x : b)
            x = u(rng);
        const PairLoss l = binary_cross_entropy(a, b, 1e-5);
        double expected = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            expected += textbook_bce(a[i], b[i]);
        EXPECT_NEAR(l.value, expected / 7.0, 1e-12);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double h = 1e-6;
            auto at = [&](std::vector<double> &v, double x) {
                const double keep = v[i];
                v[i] = x;
                const double r = binary_cross_entropy(a, b, 1e-5).value;
                v[i] = keep;
                return r;
            };
            EXPECT_LT(testutil::rel_error(l.grad_first[i], (at(a, a[i] + h) - at(a, a[i] - h)) / (2 * h)), 1e-6);
            EXPECT_LT(testutil::rel_error(l.grad_second[i], (at(b, b[i] + h) - at(b, b[i] - h)) / (2 * h)), 1e-6);
        }
    }
}

TEST(ConsistencyLoss, CategoricalExample) {
    const std::vector<double> a{1.0, 1.0}, b{1.0, 3.0};
    const PairLoss l = categorical_cross_entropy(a, b, 1e-5);
    EXPECT_NEAR(l.value, -(0.5 * std::log(0.25) + 0.5 * std::log(0.75)), 1e-12);
    EXPECT_NEAR(consistency_loss(a, b, 1e-5, ConsistencyForm::categorical).value, l.value, 1e-15);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 2; ++i) {
        auto bp = b, bm = b;
        bp[i] += h;
        bm[i] -= h;
        const double fd =
            (categorical_cross_entropy(a, bp, 1e-5).value - categorical_cross_entropy(a, bm, 1e-5).value) / (2 * h);
        EXPECT_LT(testutil::rel_error(l.grad_second[i], fd), 1e-6);
    }
}

TEST(DepthLoss, ExampleAndGradient) {
    const DepthRange range{1, 3};
    DepthMap depth(2, 1, 2.0);
    const DistributionMap map = init_from_depth(depth, 0.005, 2, range, 0);
    DepthMap target(2, 1, 1.5);
    const std::vector<std::uint32_t> pixels{0, 1, 1};
    const DepthLoss l = depth_loss(map, target, pixels, range);
    EXPECT_NEAR(l.value, 0.75, 1e-5);
    EXPECT_NEAR(depth_loss(map, target, std::vector<std::uint32_t>{0}, range).value, 0.25, 1e-6);
    // mu_1 only: the scale, logit and second mean entries receive nothing
    DistributionMap probe = map;
    testutil::GradStats stats;
    MapGradients dense = zero_gradients(std::span(&probe, 1));
    accumulate(dense, l.grads);
    for (std::size_t i = 0; i < probe.data().size(); ++i) {
        const double fd = testutil::float_central_difference(
            probe.data()[i], [&] { return depth_loss(probe, target, pixels, range).value; });
        stats.add(dense[0][i], fd, "depth " + std::to_string(i));
        if (i % 6 != 0) {
            EXPECT_EQ(dense[0][i], 0.0);
        }
    }
    EXPECT_EQ(stats.failures, 0) << stats.first_failure;
    EXPECT_GT(stats.checked, 0);
}

TEST(InitFromDepth, MeansAndVisibility) {
    const DepthRange range{2, 6};
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(2.2, 5.8);
    DepthMap depth(8, 8);
    for (Eigen::Index i = 0; i < depth.depth.size(); ++i)
        depth.depth(i) = u(rng);
    depth.at(3, 3) = 7.0; // beyond far: the ray is empty
    const DistributionMap map = init_from_depth(depth, 0.005, 2, range, 4);
    EXPECT_EQ(map.view(), 4);
    const double sigma = 0.005 * range.span();
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const auto d = decode(map.raw(x, y), range);
            if (x == 3 && y == 3) {
                // clamped to far: empty inside the range
                EXPECT_GT(visibility(d, range.far - 5 * sigma), 0.99);
                continue;
            }
            const double z = depth.at(x, y);
            for (int k = 0; k < 2; ++k) {
                EXPECT_NEAR(d.means[k], z, 1e-6 * range.span());
                EXPECT_NEAR(d.scales[k], sigma, 1e-3 * sigma);
                EXPECT_NEAR(d.weights[k], 0.5, 1e-9);
            }
            EXPECT_GT(visibility(d, z - 5 * sigma), 0.99);
            EXPECT_LT(visibility(d, z + 5 * sigma), 0.01);
            EXPECT_NEAR(visibility(d, z), 0.5, 1e-5);
        }
}

TEST(Adam, FirstStepAndZeroGradient) {
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    AdamMoments m(3);
    std::vector<double> p{1.0, 2.0, 3.0};
    const std::vector<double> g{0.5, 0.0, -1e3};
    adam_update<double>(cfg, 0, m, p, g);
    EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-9);
    EXPECT_EQ(p[1], 2.0);
    EXPECT_NEAR(p[2], 3.0 + 0.01, 1e-9);
    EXPECT_DOUBLE_EQ(cfg.rate_at(99999), 0.01);
    EXPECT_DOUBLE_EQ(cfg.rate_at(100000), 0.005);
    EXPECT_DOUBLE_EQ(cfg.rate_at(250000), 0.0025);
}

TEST(Adam, MatchesIndependentImplementation) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    AdamConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.beta1 = 0.8;
    cfg.beta2 = 0.95;
    const std::size_t dim = 6;
    std::vector<double> p(dim), q(dim), m(dim, 0.0), v(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
        p[i] = q[i] = n(rng);
    AdamMoments moments(dim);
    for (int t = 1; t <= 100; ++t) {
        std::vector<double> g(dim);
        for (auto &x : g)
            x = n(rng);
        adam_update<double>(cfg, t - 1, moments, p, g);
        for (std::size_t i = 0; i < dim; ++i) {
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(cfg.beta1, t));
            const double vh = v[i] / (1 - std::pow(cfg.beta2, t));
            q[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
        }
    }
    for (std::size_t i = 0; i < dim; ++i)
        EXPECT_NEAR(p[i], q[i], 1e-10);
}

TEST(Adam, ShapeMismatchRejected) {
    AdamMoments m(2);
    std::vector<double> p(3), g(3);
    EXPECT_THROW(adam_update<double>(AdamConfig{}, 0, m, p, g), std::invalid_argument);
}

TEST(Memorization, ConsistencyAloneMatchesFrozenHits) {
    const DepthRange range{2, 6};
    std::mt19937_64 rng(4);
    TrainConfig cfg;
    cfg.adam.learning_rate = 0.05;
    std::vector<double> depths, widths;
    for (int i = 0; i < 24; ++i) {
        depths.push_back(2.0 + 4.0 * i / 24);
        widths.push_back(4.0 / 24);
    }
    for (int trial = 0; trial < 10; ++trial) {
        // frozen target: hits of another mixture on the same bins
        RawRayParams<double> other = testutil::random_raw(rng, 2);
        const auto target = own_hit_probs(other, depths, widths, range).hits;
        RawRayParams<double> raw = raw_from_depth(2.5 + 3.0 * std::uniform_real_distribution<double>()(rng), 0.2,
                                                  2, range);
        raw[0] -= 0.3;
        raw[1] += 0.3;
        const auto trace = memorize_hits(raw, depths, widths, target, range, cfg, 1000);
        ASSERT_EQ(trace.size(), 1000u);
        EXPECT_LT(trace.back(), 0.05) << "trial " << trial;
        auto window = [&](std::size_t end) {
            return std::accumulate(trace.begin() + long(end) - 10, trace.begin() + long(end), 0.0) / 10.0;
        };
        EXPECT_LT(window(1000), window(100));
    }
}

TEST(Memorization, IdenticalComponentsStayIdentical) {
    const DepthRange range{2, 6};
    std::vector<double> depths, widths;
    for (int i = 0; i < 16; ++i) {
        depths.push_back(2.0 + 4.0 * i / 16);
        widths.push_back(4.0 / 16);
    }
    std::mt19937_64 rng(9);
    const auto target = own_hit_probs(testutil::random_raw(rng, 3), depths, widths, range).hits;
    RawRayParams<double> raw = raw_from_depth(4.0, 0.2, 3, range);
    TrainConfig cfg;
    cfg.adam.learning_rate = 0.05;
    memorize_hits(raw, depths, widths, target, range, cfg, 50);
    for (int k = 1; k < 3; ++k) {
        EXPECT_EQ(raw[k], raw[0]);
        EXPECT_EQ(raw[3 + k], raw[3]);
        EXPECT_EQ(raw[6 + k], raw[6]);
    }
}

TEST(SampleBatch, Deterministic) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    const RayBatch a = sample_batch(ps.inputs, cfg, 17), b = sample_batch(ps.inputs, cfg, 17);
    EXPECT_EQ(a.view, b.view);
    EXPECT_EQ(a.pixels, b.pixels);
    const RayBatch c = sample_batch(ps.inputs, cfg, 18);
    EXPECT_NE(a.pixels, c.pixels);
    for (auto p : a.pixels)
        EXPECT_LT(p, 144u);
}

TEST(EvaluateBatch, TotalBookkeeping) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    cfg.weights = {0.9, 0.3, 0.2};
    for (std::int64_t step = 0; step < 5; ++step) {
        const BatchEvaluation e = evaluate_batch(ps.inputs, ps.depths, sample_batch(ps.inputs, cfg, step), cfg);
        const LossReport &r = e.report;
        EXPECT_EQ(r.total, 0.9 * r.render_loss + 0.3 * r.consistency_loss + 0.2 * r.depth_loss);
        EXPECT_GT(r.render_loss, 0.0);
        EXPECT_GT(r.consistency_loss, 0.0);
    }
}

TEST(EvaluateBatch, ZeroWeightsDisableTerms) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    const RayBatch batch = sample_batch(ps.inputs, cfg, 2);
    cfg.weights = {1.0, 0.25, 0.0};
    const auto with_depths = evaluate_batch(ps.inputs, ps.depths, batch, cfg);
    const auto without = evaluate_batch(ps.inputs, {}, batch, cfg);
    EXPECT_EQ(with_depths.grads, without.grads);
    cfg.weights = {1.0, 0.0, 0.0};
    const auto render_only = evaluate_batch(ps.inputs, {}, batch, cfg);
    cfg.symmetric_consistency = true;
    cfg.consistency_form = ConsistencyForm::categorical;
    EXPECT_EQ(evaluate_batch(ps.inputs, ps.depths, batch, cfg).grads, render_only.grads);
    cfg.weights = {0.0, 0.0, 0.0};
    for (const auto &g : evaluate_batch(ps.inputs, ps.depths, batch, cfg).grads)
        for (double x : g)
            ASSERT_EQ(x, 0.0);
}

TEST(EvaluateBatch, FiniteDifferences) {
    std::mt19937_64 rng(6);
    testutil::GradStats all;
    for (int i = 0; i < 12; ++i) {
        const auto form = i % 2 == 0 ? ConsistencyForm::binary : ConsistencyForm::categorical;
        all.merge(testutil::check_batch(rng, form, (i / 2) % 2 == 0));
    }
    EXPECT_GT(all.checked, 200);
    EXPECT_EQ(all.failures, 0) << all.first_failure << " worst " << all.worst;
}

TEST(EvaluateBatch, RejectsNonFinite) {
    auto in = small_scene().inputs;
    in.images[0].rgb.setConstant(std::nan(""));
    TrainConfig cfg = small_config();
    RayBatch batch{0, {0, 1, 2}};
    EXPECT_THROW(evaluate_batch(in, {}, batch, cfg), NumericalError);
}

TEST(TrainStep, DeterministicAndThreadIndependent) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    auto run = [&](int threads) {
        const int saved = thread_limit().load();
        thread_limit() = threads;
        SceneInputs in = ps.inputs;
        OptimState st = OptimState::for_maps(in.maps);
        std::vector<LossReport> reports;
        for (int i = 0; i < 6; ++i)
            reports.push_back(train_step(in, ps.depths, cfg, st));
        thread_limit() = saved;
        return std::make_pair(in.maps, reports);
    };
    const auto a = run(1), b = run(1), c = run(3);
    EXPECT_EQ(a.second, b.second);
    EXPECT_TRUE(maps_identical(a.first, b.first));
    EXPECT_EQ(a.second, c.second);
    EXPECT_TRUE(maps_identical(a.first, c.first));
    EXPECT_FALSE(maps_identical(a.first, ps.inputs.maps));
}

TEST(OptimizeScene, ZeroStepsLeavesMaps) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    cfg.steps = 0;
    SceneInputs in = ps.inputs;
    OptimizeOptions opt;
    opt.eval_render = cfg.render;
    const auto r = optimize_scene(in, ps.depths, ps.held_out, cfg, opt, {});
    EXPECT_TRUE(maps_identical(in.maps, ps.inputs.maps));
    EXPECT_TRUE(r.history.empty());
}

TEST(OptimizeScene, ResumeFromCheckpointIsExact) {
    const auto &ps = small_scene();
    TrainConfig cfg = small_config();
    cfg.steps = 12;
    OptimizeOptions opt;
    opt.eval_interval = 5;
    opt.eval_render = cfg.render;

    SceneInputs straight = ps.inputs;
    const auto full = optimize_scene(straight, ps.depths, ps.held_out, cfg, opt, {});
    ASSERT_EQ(full.history.size(), 12u);
    EXPECT_EQ(full.evals.front().step, 0);
    EXPECT_EQ(full.evals.back().step, 12);

    const auto dir = testutil::scratch_dir("resume");
    SceneInputs first = ps.inputs;
    TrainConfig part = cfg;
    part.steps = 7;
    const auto head = optimize_scene(first, ps.depths, ps.held_out, part, opt, {});
    write_checkpoint(dir, first.maps, head.state);

    SceneInputs resumed = ps.inputs;
    for (auto &m : resumed.maps)
        m = read_distribution_map(dir / "maps" / view_filename(m.view(), "nray"));
    OptimState state = read_optim_state(dir / "optim_state.bin");
    EXPECT_EQ(state, head.state);
    const auto tail = optimize_scene(resumed, ps.depths, ps.held_out, cfg, opt, state);
    EXPECT_TRUE(maps_identical(resumed.maps, straight.maps));
    ASSERT_EQ(tail.history.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_EQ(tail.history[i], full.history[7 + i]);
}

TEST(OptimizeScene, MetricsLineFormat) {
    EvalRecord rec{500, LossReport{0.5, 0.25, 0.125, 0.6, 500}, 27.5};
    const std::string header = format_metrics_header();
    const std::string line = format_metrics_line(rec);
    EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(line.begin(), line.end(), ','));
    EXPECT_EQ(line.rfind("500,", 0), 0u);
}
