#include "bilevel/solvers.hpp"

#include <random>

#include <gtest/gtest.h>

#include "bilevel/problems.hpp"
#include "test_util.hpp"

using namespace bilevel;
using testing_util::benign_quadratic;
using testing_util::benign_schedule;
using testing_util::make_toy;
using testing_util::random_vector;

namespace {

const SampleKey kFull = SampleKey::full_batch();

FslaState initial_state(const BilevelOracle& oracle, const Vector& lambda0,
                        const Vector& omega0, std::uint64_t seed, int batch) {
  FslaState st;
  st.k = 0;
  st.lambda = lambda0;
  st.omega = omega0;
  st.v = Vector::Zero(oracle.inner_dim());
  const auto key = [&](std::uint64_t slot) {
    return batch <= 0 ? kFull : SampleKey::mini_batch(derive_seed(seed, 0, slot), batch);
  };
  st.d = hypergrad_from_v(oracle, lambda0, omega0, st.v, key(4), key(5));
  st.prev_lambda = lambda0;
  st.prev_omega = omega0;
  st.prev_v = st.v;
  return st;
}

TEST(Schedule, DerivedRatesAndValidation) {
  Schedule s{2.0, 0.5, 0.25, 3.0};
  EXPECT_DOUBLE_EQ(s.alpha(0), 2.0);
  EXPECT_DOUBLE_EQ(s.alpha(3), 1.0);
  EXPECT_DOUBLE_EQ(s.tau(3), 0.5);
  EXPECT_DOUBLE_EQ(s.beta(3), 0.25);
  EXPECT_DOUBLE_EQ(s.eta(3), 1.0);  // clamped
  EXPECT_DOUBLE_EQ(s.eta(143), 0.5);
  EXPECT_THROW((Schedule{0.0, 1, 1, 1}).validate(), InvalidSchedule);
  EXPECT_THROW(s.validate_against(10.0), InvalidSchedule);  // beta_1 = 0.5 > 1/10
  EXPECT_NO_THROW(s.validate_against(1.0));
}

TEST(Schedule, ReferenceCleaningDefaultsAccepted) {
  // delta=1000, c_tau=1e-3, c_beta=1e-4, c_eta=9e-4 against the cleaning
  // task's smoothness constant.
  const CleaningProblem p = gen_cleaning(3, 500, 500, 10, 0.4, 3.0, 0.1);
  const CleaningOracle oracle = cleaning_oracle(p);
  const Schedule reference{1000.0, 0.001, 1e-4, 9e-4};
  EXPECT_NO_THROW(reference.validate_against(oracle.smoothness_L()));
}

TEST(FslaStep, PerStepOracleBudgetIsExact) {
  const QuadraticBilevel q = benign_quadratic(5, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  CountingOracle counting(oracle);
  std::mt19937_64 rng(6);
  FslaState st = initial_state(counting, random_vector(rng, 5), random_vector(rng, 5), 42, 0);
  const long long gol0 = counting.grad_outer_lambda_calls;
  const long long cross0 = counting.cross_jvp_calls;
  for (int step = 0; step < 3; ++step) {
    const long long hvp = counting.hvp_calls;
    const long long cross = counting.cross_jvp_calls;
    const long long gol = counting.grad_outer_lambda_calls;
    const long long goo = counting.grad_outer_omega_calls;
    const long long gio = counting.grad_inner_omega_calls;
    st = fsla_step(st, benign_schedule(), counting, 0, 42);
    EXPECT_EQ(counting.hvp_calls - hvp, 1);
    EXPECT_EQ(counting.cross_jvp_calls - cross, 2);
    EXPECT_EQ(counting.grad_outer_lambda_calls - gol, 2);
    EXPECT_EQ(counting.grad_outer_omega_calls - goo, 1);
    EXPECT_EQ(counting.grad_inner_omega_calls - gio, 1);
  }
  // Initialization itself costs one outer gradient and one cross product.
  EXPECT_EQ(gol0, 1);
  EXPECT_EQ(cross0, 1);
}

TEST(FslaStep, VanishingRatesFreezeTheState) {
  const testing_util::ToyBilevel toy = make_toy(7, 4, 3);
  std::mt19937_64 rng(8);
  FslaState st = initial_state(toy, random_vector(rng, 3), random_vector(rng, 4), 1, 0);
  const Schedule frozen{1e-30, 1.0, 1.0, 1.0};
  const FslaState next = fsla_step(st, frozen, toy, 0, 1);
  EXPECT_LT((next.lambda - st.lambda).norm(), 1e-12);
  EXPECT_LT((next.omega - st.omega).norm(), 1e-12);
  EXPECT_LT((next.v - st.v).norm(), 1e-12);
  EXPECT_LT((next.d - st.d).norm(), 1e-12);
  EXPECT_EQ(next.k, st.k + 1);
}

TEST(FslaStep, PrevFieldsHoldTheProducingPoint) {
  const testing_util::ToyBilevel toy = make_toy(9, 4, 3);
  std::mt19937_64 rng(10);
  FslaState st = initial_state(toy, random_vector(rng, 3), random_vector(rng, 4), 2, 0);
  const FslaState next = fsla_step(st, Schedule{0.1, 1.0, 1.0, 1.0}, toy, 0, 2);
  EXPECT_EQ(next.prev_lambda, st.lambda);
  EXPECT_EQ(next.prev_omega, st.omega);
  EXPECT_EQ(next.prev_v, st.v);
}

TEST(FslaStep, GradientNormDecreasesOverEarlySteps) {
  // Trivial inner map (inner optimum equals the outer variable); the true
  // gradient monitor must shrink once the v state has warmed up.
  const Index n = 4;
  QuadraticBilevel q;
  q.A_iw = Matrix::Identity(n, n);
  q.A_il = -Matrix::Identity(n, n);
  q.b_i = Vector::Zero(n);
  std::mt19937_64 rng(11);
  q.A_o = Matrix::Identity(n, n) +
          0.1 * Matrix::NullaryExpr(n, n, [&]() { return std::normal_distribution<>()(rng); });
  q.b_o = random_vector(rng, n);
  q.finalize();
  QuadraticOracle oracle(q);

  FslaState st = initial_state(oracle, random_vector(rng, n), random_vector(rng, n), 3, 0);
  const Schedule sched{0.2, 2.0, 1.8, 2.0};
  double prev = quadratic_exact_hypergrad(q, st.lambda).norm();
  for (int k = 0; k < 12; ++k) {
    st = fsla_step(st, sched, oracle, 0, 3);
    const double cur = quadratic_exact_hypergrad(q, st.lambda).norm();
    if (k >= 1) EXPECT_LT(cur, prev) << "step " << k;  // step 0 moves on a cold d
    prev = cur;
  }
}

TEST(FslaStep, FirstStepIsPlainHypergradDescentAtFullMomentumRate) {
  const testing_util::ToyBilevel toy = make_toy(12, 4, 3);
  std::mt19937_64 rng(13);
  const Vector lambda0 = random_vector(rng, 3);
  const Vector omega0 = random_vector(rng, 4);
  FslaState st = initial_state(toy, lambda0, omega0, 4, 0);
  const Schedule sched{0.3, 1.0, 1.0, 100.0};  // eta clamps to 1
  const FslaState next = fsla_step(st, sched, toy, 0, 4);
  // lambda moved along the fresh initial hyper-gradient.
  EXPECT_EQ(next.lambda, Vector(lambda0 - sched.alpha(0) * st.d));
  // With eta = 1 the correction vanishes and d equals the new estimate.
  const Vector expect =
      hypergrad_from_v(toy, next.lambda, next.omega, next.v, kFull, kFull);
  EXPECT_EQ(next.d, expect);
}

TEST(FslaStep, MomentumEqualsFreshEstimateWheneverEtaIsOne) {
  const QuadraticBilevel q = benign_quadratic(14, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(15);
  FslaState st = initial_state(oracle, random_vector(rng, 5), random_vector(rng, 5), 5, 0);
  const Schedule sched{0.4, 2.0, 2.0, 1e9};  // eta pinned at 1 for all k
  for (int k = 0; k < 20; ++k) {
    st = fsla_step(st, sched, oracle, 0, 5);
    const Vector fresh = hypergrad_from_v(oracle, st.lambda, st.omega, st.v, kFull, kFull);
    EXPECT_EQ(st.d, fresh) << "step " << k;
  }
}

TEST(FslaStep, RejectsRecursionRateAboveCurvatureCap) {
  const QuadraticBilevel q = benign_quadratic(16, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(17);
  FslaState st = initial_state(oracle, random_vector(rng, 5), random_vector(rng, 5), 6, 0);
  const Schedule bad{1.0, 1.0, 100.0, 1.0};
  EXPECT_THROW(fsla_step(st, bad, oracle, 0, 6), InvalidSchedule);
}

TEST(FslaRun, QuadraticGradientDropsThreeOrders) {
  const QuadraticBilevel q = benign_quadratic(101, 5, 20, std::sqrt(0.1));
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(102);
  RunMonitor mon;
  mon.true_hypergrad = [&](const Vector& l) { return quadratic_exact_hypergrad(q, l); };
  const RunTrace tr = fsla_run(oracle, benign_schedule(), random_vector(rng, 5),
                               random_vector(rng, 5), 2000, 0, 101, mon);
  ASSERT_EQ(tr.rows.size(), 2000u);
  const double g0 = tr.rows.front().true_grad_norm;
  const double gT = quadratic_exact_hypergrad(q, tr.final_lambda).norm();
  EXPECT_LE(gT, 1e-3 * g0);
}

TEST(FslaRun, RunningMeanOfSquaredGradientNonIncreasing) {
  const QuadraticBilevel q = benign_quadratic(202, 5, 20, std::sqrt(0.1));
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(203);
  RunMonitor mon;
  mon.true_hypergrad = [&](const Vector& l) { return quadratic_exact_hypergrad(q, l); };
  const RunTrace tr = fsla_run(oracle, benign_schedule(), random_vector(rng, 5),
                               random_vector(rng, 5), 600, 0, 202, mon);
  double acc = 0.0, prev_mean = 0.0;
  for (std::size_t k = 0; k < tr.rows.size(); ++k) {
    acc += tr.rows[k].true_grad_norm * tr.rows[k].true_grad_norm;
    const double mean = acc / static_cast<double>(k + 1);
    if (k >= 50) EXPECT_LE(mean, prev_mean * (1.0 + 1e-12)) << "k=" << k;
    prev_mean = mean;
  }
}

TEST(FslaRun, TracesAreBitIdenticalAcrossRuns) {
  const QuadraticBilevel q = benign_quadratic(303, 5, 256, std::sqrt(0.1));
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(304);
  const Vector lambda0 = random_vector(rng, 5);
  const Vector omega0 = random_vector(rng, 5);
  const RunTrace a = fsla_run(oracle, benign_schedule(), lambda0, omega0, 50, 32, 99);
  const RunTrace b = fsla_run(oracle, benign_schedule(), lambda0, omega0, 50, 32, 99);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].val_loss, b.rows[i].val_loss);
    EXPECT_EQ(a.rows[i].hvp_calls, b.rows[i].hvp_calls);
    EXPECT_EQ(a.rows[i].cross_jvp_calls, b.rows[i].cross_jvp_calls);
  }
  EXPECT_EQ(a.final_lambda, b.final_lambda);
  EXPECT_EQ(a.total_hvp_calls, b.total_hvp_calls);

  const RunTrace c = fsla_run(oracle, benign_schedule(), lambda0, omega0, 50, 32, 100);
  EXPECT_NE(a.final_lambda, c.final_lambda);  // different seed, different run
}

TEST(FslaRun, CallCountersFollowTheAnalyticBudget) {
  const QuadraticBilevel q = benign_quadratic(404, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(405);
  const RunTrace tr = fsla_run(oracle, benign_schedule(), random_vector(rng, 5),
                               random_vector(rng, 5), 40, 0, 404);
  for (std::size_t k = 0; k < tr.rows.size(); ++k) {
    EXPECT_EQ(tr.rows[k].hvp_calls, static_cast<long long>(k));
    EXPECT_EQ(tr.rows[k].cross_jvp_calls, static_cast<long long>(2 * k + 1));
  }
  EXPECT_EQ(tr.total_hvp_calls, 40);
  EXPECT_EQ(tr.total_cross_jvp_calls, 2 * 40 + 1);
}

TEST(FslaRun, DivergenceCarriesTheFailingIteration) {
  const QuadraticBilevel q = benign_quadratic(505, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(506);
  const Schedule wild{1e11, 1e-12, 1e-12, 1.0};  // huge outer steps, valid caps
  try {
    fsla_run(oracle, wild, random_vector(rng, 5), random_vector(rng, 5), 200, 0, 505);
    FAIL() << "expected divergence";
  } catch (const Diverged& e) {
    EXPECT_NE(std::string(e.what()).find("k="), std::string::npos);
  }
}

TEST(BaselineRun, RejectsInvalidConfig) {
  const QuadraticBilevel q = benign_quadratic(606, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  BaselineConfig cfg;
  cfg.T = 0;
  EXPECT_THROW(cfg.validate(), InvalidConfig);
  cfg.T = 1;
  cfg.K = 0;
  EXPECT_THROW(
      baseline_run(oracle, cfg, Vector::Zero(5), Vector::Zero(5), 10, 0, 1), InvalidConfig);
}

TEST(BaselineRun, MethodLabels) {
  BaselineConfig cfg;
  cfg.estimator = Estimator::NS;
  cfg.T = 1;
  cfg.K = 10;
  EXPECT_EQ(cfg.name(), "NS-1-10");
  cfg.estimator = Estimator::CG;
  cfg.T = 4;
  cfg.K = 2;
  EXPECT_EQ(cfg.name(), "CG-4-2");
}

TEST(BaselineRun, NsStepCostsKPlusOneHvpCalls) {
  const QuadraticBilevel q = benign_quadratic(707, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  BaselineConfig cfg;
  cfg.estimator = Estimator::NS;
  cfg.T = 1;
  cfg.K = 10;
  cfg.sched = benign_schedule();
  std::mt19937_64 rng(708);
  const RunTrace tr = baseline_run(oracle, cfg, random_vector(rng, 5), random_vector(rng, 5),
                                   20, 0, 707);
  for (std::size_t k = 1; k < tr.rows.size(); ++k) {
    EXPECT_EQ(tr.rows[k].hvp_calls - tr.rows[k - 1].hvp_calls, cfg.K + 1);
    EXPECT_EQ(tr.rows[k].cross_jvp_calls - tr.rows[k - 1].cross_jvp_calls, 1);
  }
}

TEST(BaselineRun, CgWithDeepInnerSolveTracksExactHypergrad) {
  const QuadraticBilevel q = benign_quadratic(808, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(809);
  const Vector lambda = random_vector(rng, 5);
  // Deep inner solve followed by a full-dimension estimator reproduces the
  // closed-form hyper-gradient at that outer state.
  const InnerSolution sol =
      solve_inner(oracle, lambda, Vector::Zero(5), 1.0 / oracle.smoothness_L(), 1e-12, 5000);
  const Vector est = cg_hypergrad(oracle, lambda, sol.omega_star, 5, 1e-14);
  EXPECT_LT((est - quadratic_exact_hypergrad(q, lambda)).norm(), 1e-6);
}

TEST(BaselineRun, WarmStartReusesAndColdStartResets) {
  const QuadraticBilevel q = benign_quadratic(909, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(910);
  const Vector lambda0 = random_vector(rng, 5);
  const Vector omega0 = Vector::Zero(5);
  BaselineConfig warm;
  warm.estimator = Estimator::NS;
  warm.T = 1;
  warm.K = 3;
  warm.warm_start = true;
  warm.sched = benign_schedule();
  BaselineConfig cold = warm;
  cold.warm_start = false;
  const RunTrace tw = baseline_run(oracle, warm, lambda0, omega0, 80, 0, 909);
  const RunTrace tc = baseline_run(oracle, cold, lambda0, omega0, 80, 0, 909);
  // One inner step per iteration: the warm-started inner iterate reaches a
  // much lower stationarity residual than the cold-started one.
  const double res_w =
      oracle.grad_inner_omega(tw.final_lambda, tw.final_omega, kFull).norm();
  const double res_c =
      oracle.grad_inner_omega(tc.final_lambda, tc.final_omega, kFull).norm();
  EXPECT_LT(res_w, 0.2 * res_c);
}

// The one-step estimate of the single-loop solver coincides with the NS
// baseline's 2-term series when the persistent state is pre-seeded with the
// first series term and the v refresh reads the fresh inner iterate.
TEST(BaselineRun, SingleLoopStateMatchesTwoTermSeriesOnFirstIteration) {
  const QuadraticBilevel q = benign_quadratic(111, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(112);
  const Vector lambda = random_vector(rng, 5);
  const Vector omega = random_vector(rng, 5);
  const double beta = 0.8 / oracle.smoothness_L();

  const Vector p = oracle.grad_outer_omega(lambda, omega, kFull);
  const Vector v1 = v_update(oracle, lambda, omega, Vector(beta * p), beta, kFull, kFull);
  const Vector single_loop = hypergrad_from_v(oracle, lambda, omega, v1, kFull, kFull);
  const Vector series = ns_hypergrad(oracle, lambda, omega, 1, beta);
  EXPECT_LT((single_loop - series).norm(), 1e-12);
}

TEST(FslaOptions, FreshInnerOrderingUsesUpdatedInnerState) {
  const QuadraticBilevel q = benign_quadratic(113, 5, 20, 0.3);
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(114);
  FslaState st = initial_state(oracle, random_vector(rng, 5), random_vector(rng, 5), 7, 0);

  FslaOptions stale;  // default
  FslaOptions fresh;
  fresh.v_point = VUpdatePoint::CurrentInner;
  const Schedule sched = benign_schedule();
  const FslaState a = fsla_step(st, sched, oracle, 0, 7, stale);
  const FslaState b = fsla_step(st, sched, oracle, 0, 7, fresh);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.omega, b.omega);
  // The quadratic Hessian is state-independent, but grad_outer_omega is not:
  // the two orderings produce different v states.
  EXPECT_NE(a.v, b.v);
  const Vector expect_fresh = v_update(oracle, b.lambda, b.omega, st.v,
                                       sched.beta(0), kFull, kFull);
  EXPECT_EQ(b.v, expect_fresh);
}

TEST(StochasticRun, MiniBatchTraceConvergesInRunningMean) {
  const QuadraticBilevel q = benign_quadratic(115, 5, 512, std::sqrt(0.1));
  QuadraticOracle oracle(q);
  std::mt19937_64 rng(116);
  RunMonitor mon;
  mon.true_hypergrad = [&](const Vector& l) { return quadratic_exact_hypergrad(q, l); };
  const RunTrace tr = fsla_run(oracle, benign_schedule(), random_vector(rng, 5),
                               random_vector(rng, 5), 600, 64, 115, mon);
  double acc_head = 0.0, acc_all = 0.0;
  for (std::size_t k = 0; k < tr.rows.size(); ++k) {
    const double g2 = tr.rows[k].true_grad_norm * tr.rows[k].true_grad_norm;
    if (k < 50) acc_head += g2;
    acc_all += g2;
  }
  EXPECT_LT(acc_all / 600.0, 0.5 * (acc_head / 50.0));
}

}  // namespace
