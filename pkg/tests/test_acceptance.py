"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
complete.  Every tolerance is pinned here, not configurable.
"""

import functools
import time
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import linprog as scipy_linprog

from conftest import make_table
from mechtest import inference, mc
from mechtest.bounds import ade_bounds, nu_lower_bounds, sharp_null_slack
from mechtest.ident import (
    correct_measurement_error,
    iv_relabel_comparison,
    misclassify_mediator,
)
from mechtest.probtab import (
    delta_sup,
    discretize_outcome,
    support_from_values,
)
from mechtest.sharpcons import construct_sharp_distribution, eta_over_theta, verify_consistency
from mechtest.typeshares import (
    RestrictionSet,
    build_identified_set,
    closed_form_theta_min,
    joint_theta_min_exists,
    max_type_share,
    theta_in_identified_set,
    theta_kk_min,
)

warnings.simplefilter("ignore", inference.CellCountWarning)


def criterion(num, label):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            try:
                fn()
            except BaseException:
                print(f"ACCEPTANCE {num:02d} [{label}]: FAIL")
                raise
            print(f"ACCEPTANCE {num:02d} [{label}]: PASS")

        return run

    return wrap


def marginals_table(p0, p1):
    K = len(p0)
    mass = np.zeros((2, K, 1))
    mass[0, :, 0] = p0
    mass[1, :, 0] = p1
    return make_table(mass)


def random_monotone_table(rng, K=None, Q=None):
    K = K or int(rng.integers(2, 5))
    Q = Q or int(rng.integers(2, 5))
    theta = np.triu(rng.uniform(0.05, 1.0, (K, K)))
    theta /= theta.sum()
    p0, p1 = theta.sum(axis=1), theta.sum(axis=0)
    mass = np.empty((2, K, Q))
    for k in range(K):
        mass[0, k] = p0[k] * rng.dirichlet(np.ones(Q))
        mass[1, k] = p1[k] * rng.dirichlet(np.ones(Q))
    mass[0] /= mass[0].sum()
    mass[1] /= mass[1].sum()
    return make_table(mass)


@criterion(1, "closed form vs LP")
def test_criterion_01_closed_form_vs_lp():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for _ in range(200):
        K = int(rng.integers(2, 7))
        theta = np.triu(rng.uniform(0.0, 1.0, (K, K)))
        theta /= theta.sum()
        table = marginals_table(theta.sum(axis=1), theta.sum(axis=0))
        spec = build_identified_set(table, RestrictionSet.monotone(table.support))
        cascade = joint_theta_min_exists(spec)
        assert theta_in_identified_set(spec, cascade, tol=1e-9)
        for k in range(K):
            lp_min = theta_kk_min(spec, k)
            closed = closed_form_theta_min(spec.p0, spec.p1, k)
            assert abs(lp_min - closed) <= 1e-9
            assert abs(cascade[k, k] - closed) <= 1e-9  # simultaneously minimal
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"ran in {elapsed:.1f}s"


@criterion(2, "three-point marginals fixture")
def test_criterion_02_fig2_fixture():
    table = marginals_table([0.5, 0.3, 0.2], [0.3, 0.3, 0.4])
    spec = build_identified_set(table, RestrictionSet.monotone(table.support))
    mins = [theta_kk_min(spec, k) for k in range(3)]
    assert_allclose(mins, [0.3, 0.1, 0.2], atol=1e-12)
    jump = np.array([
        [0.3, 0.0, 0.2],
        [0.0, 0.3, 0.0],
        [0.0, 0.0, 0.2],
    ])
    assert theta_in_identified_set(spec, jump)


@criterion(3, "defier share fixture")
def test_criterion_03_defier_footnote():
    table = marginals_table([0.7, 0.3], [0.5, 0.5])
    spec = build_identified_set(table, RestrictionSet.unrestricted(table.support))
    assert abs(max_type_share(spec, [(1, 0)]) - 0.3) <= 1e-12


@criterion(4, "sharpness round-trip")
def test_criterion_04_sharpness_round_trip():
    rng = np.random.default_rng(104)
    start = time.perf_counter()
    for _ in range(100):
        K = int(rng.integers(2, 5))
        Q = int(rng.integers(2, 5))
        theta = rng.uniform(0, 1, (K, K)) * (rng.random((K, K)) < 0.75)
        theta[rng.integers(0, K), rng.integers(0, K)] += 0.15
        theta /= theta.sum()
        p0, p1 = theta.sum(axis=1), theta.sum(axis=0)
        mass = np.empty((2, K, Q))
        for k in range(K):
            mass[0, k] = p0[k] * rng.dirichlet(np.ones(Q))
            mass[1, k] = p1[k] * rng.dirichlet(np.ones(Q))
        mass[0] /= mass[0].sum()
        mass[1] /= mass[1].sum()
        table = make_table(mass)
        dist = construct_sharp_distribution(table, theta)
        report = verify_consistency(dist, table)
        assert report.max_abs_deviation < 1e-9
        assert_allclose(report.disagreement, eta_over_theta(table, theta), atol=1e-9)
        assert report.complier_disagreement == 0.0
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"ran in {elapsed:.1f}s"


def _coupling_oracle(table, theta, k):
    """Transport LP: minimal always-taker disagreement mass at k."""
    Q = table.n_outcomes
    f1, f0 = table.mass[1, k], table.mass[0, k]
    comp_in = theta[:, k].sum() - theta[k, k]
    comp_out = theta[k, :].sum() - theta[k, k]
    n = Q * Q + 2 * Q
    cost = (1.0 - np.eye(Q)).reshape(-1)
    cost = np.concatenate([cost, np.zeros(2 * Q)])
    A_eq, b_eq = [], []
    for i in range(Q):
        row = np.zeros(n)
        row[i * Q: (i + 1) * Q] = 1.0
        row[Q * Q + i] = 1.0
        A_eq.append(row)
        b_eq.append(f1[i])
    for j in range(Q):
        row = np.zeros(n)
        row[j: Q * Q: Q] = 1.0
        row[Q * Q + Q + j] = 1.0
        A_eq.append(row)
        b_eq.append(f0[j])
    for sl, total in ((slice(Q * Q, Q * Q + Q), comp_in),
                      (slice(Q * Q + Q, None), comp_out)):
        row = np.zeros(n)
        row[sl] = 1.0
        A_eq.append(row)
        b_eq.append(total)
    res = scipy_linprog(cost, A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                        bounds=[(0, None)] * n, method="highs")
    assert res.status == 0
    return res.fun


@criterion(5, "coupling oracle")
def test_criterion_05_coupling_oracle():
    rng = np.random.default_rng(105)
    for _ in range(50):
        table = random_monotone_table(rng, K=2)
        r = RestrictionSet.monotone(table.support)
        nu = nu_lower_bounds(table, r)
        # binary + monotone: shares are point identified
        p0, p1 = table.marginal_m(0), table.marginal_m(1)
        theta = np.array([[p1[0], p0[0] - p1[0]], [0.0, p0[1]]])
        for k in range(2):
            oracle = _coupling_oracle(table, theta, k)
            assert abs(nu[k] * theta[k, k] - oracle) <= 1e-9


@criterion(6, "slack iff zero bounds")
def test_criterion_06_slack_equivalence():
    rng = np.random.default_rng(106)
    checked = 0
    while checked < 500:
        K = int(rng.integers(2, 5))
        Q = int(rng.integers(1, 4))
        p0 = rng.dirichlet(np.ones(K))
        p1 = rng.dirichlet(np.ones(K))
        mass = np.empty((2, K, Q))
        for k in range(K):
            mass[0, k] = p0[k] * rng.dirichlet(np.ones(Q))
            mass[1, k] = p1[k] * rng.dirichlet(np.ones(Q))
        mass[0] /= mass[0].sum()
        mass[1] /= mass[1].sum()
        table = make_table(mass)
        choice = rng.integers(0, 3)
        if choice == 0:
            r = RestrictionSet.monotone(table.support)
        elif choice == 1:
            r = RestrictionSet.defier_budget(table.support, float(rng.uniform(0, 0.5)))
        else:
            r = RestrictionSet.unrestricted(table.support)
        if not build_identified_set(table, r).feasible:
            continue
        slack = sharp_null_slack(table, r)
        nu = nu_lower_bounds(table, r)
        assert (slack <= 1e-9) == bool((nu <= 1e-9).all()), (slack, nu)
        checked += 1


@criterion(7, "discretization monotone")
def test_criterion_07_discretization_monotone():
    rng = np.random.default_rng(107)
    for _ in range(100):
        table = random_monotone_table(rng, K=2, Q=6)
        coarse = discretize_outcome(table, (2.5,))
        fine = discretize_outcome(table, (0.5, 2.5, 4.5))
        for k in range(table.n_mediators):
            assert delta_sup(coarse, k) <= delta_sup(fine, k) + 1e-12
            assert delta_sup(fine, k) <= delta_sup(table, k) + 1e-12
        # cutpoints separating every sign change keep the gap exactly
        diff = table.mass[1] - table.mass[0]
        cuts = sorted({
            q + 0.5
            for k in range(table.n_mediators)
            for q in range(5)
            if np.sign(diff[k, q]) != np.sign(diff[k, q + 1])
        })
        if cuts:
            exact = discretize_outcome(table, tuple(cuts))
            for k in range(table.n_mediators):
                assert abs(delta_sup(exact, k) - delta_sup(table, k)) <= 1e-12


def _trim_oracle(levels, pmf, share, maximize):
    Q = len(levels)
    cost = np.array(levels, dtype=float) * (-1.0 if maximize else 1.0)
    res = scipy_linprog(
        cost, A_ub=np.eye(Q) * share, b_ub=np.asarray(pmf, dtype=float),
        A_eq=np.ones((1, Q)), b_eq=[1.0], bounds=[(0, None)] * Q, method="highs",
    )
    assert res.status == 0
    return -res.fun if maximize else res.fun


@criterion(8, "trimming-bound oracle")
def test_criterion_08_ade_oracle():
    rng = np.random.default_rng(108)
    for _ in range(60):
        Q = int(rng.integers(2, 4))  # two- and three-point outcome grids
        table = random_monotone_table(rng, K=2, Q=Q)
        r = RestrictionSet.monotone(table.support)
        spec = build_identified_set(table, r)
        for k in range(2):
            tmin = theta_kk_min(spec, k)
            if tmin <= 1e-9:
                continue
            lb, ub = ade_bounds(table, r, k)
            parts = {}
            for d in (0, 1):
                share = min(tmin / table.marginal_m(d)[k], 1.0)
                pmf = table.cond_outcome(d, k)
                parts[d] = (
                    _trim_oracle(table.outcome_levels, pmf, share, False),
                    _trim_oracle(table.outcome_levels, pmf, share, True),
                )
            assert abs(lb - (parts[1][0] - parts[0][1])) <= 1e-9
            assert abs(ub - (parts[1][1] - parts[0][0])) <= 1e-9
    # binary outcome: the average-effect lower bound is the response-share bound
    hits = 0
    for _ in range(300):
        table = random_monotone_table(rng, K=2, Q=2)
        r = RestrictionSet.monotone(table.support)
        nu = nu_lower_bounds(table, r)
        for k in range(2):
            if nu[k] <= 1e-9:
                continue
            lb, ub = ade_bounds(table, r, k)
            assert abs(max(lb, -ub) - nu[k]) <= 1e-9
            hits += 1
    assert hits >= 30


def _run_test(records, method, alpha, seed):
    support = support_from_values(records.m)
    r = RestrictionSet.monotone(support)
    bins = 5 if len(set(records.y.tolist())) > 5 else None
    system = inference.build_moment_system(records, r, bins=bins, min_cell=0)
    if method == "lf-boot":
        return inference.test_least_favorable_bootstrap(
            system, alpha, b_draws=999, seed=seed
        )
    return inference.test_conditional_chisq(system, alpha)


@criterion(9, "size control")
def test_criterion_09_size_control():
    cp, tp = mc.cluster_pools()
    dgp = mc.MixtureDgp(control_pool=cp, treated_pool=tp, t=0.0,
                        n_control=1000, n_treated=1000)
    start = time.perf_counter()
    rates = {}
    for method in ("lf-boot", "cond-chisq"):
        rejections = 0
        for s in range(300):
            rec = mc.draw_sample(dgp, mc._derive(109, s))
            res = _run_test(rec, method, 0.05, mc._derive(109, s, 1))
            rejections += res.reject
        rates[method] = rejections / 300
    elapsed = time.perf_counter() - start
    print(f"  size rates: {rates} ({elapsed:.0f}s)")
    for method, rate in rates.items():
        assert 0.005 <= rate <= 0.08, (method, rate)
    assert elapsed < 1200.0


@criterion(10, "power monotone in t")
def test_criterion_10_power_monotonicity():
    cp, tp = mc.binary_pools()
    n_sims = 300
    rates = {}
    for t in (0.0, 0.5, 1.0):
        dgp = mc.MixtureDgp(control_pool=cp, treated_pool=tp, t=t,
                            n_control=150, n_treated=150)
        rejections = 0
        for s in range(n_sims):
            rec = mc.draw_sample(dgp, mc._derive(110, s))
            res = _run_test(rec, "cond-chisq", 0.05, 0)
            rejections += res.reject
        rates[t] = rejections / n_sims
    print(f"  power rates: {rates}")
    # the designed alternative has pooled violation share 0.25 at t=1
    table = mc.draw_sample(
        mc.MixtureDgp(control_pool=cp, treated_pool=tp, t=1.0,
                      n_control=200000, n_treated=200000),
        seed=1,
    )
    from mechtest.bounds import nu_pooled_lower_bound
    from mechtest.probtab import from_records

    big = from_records(table)
    pooled = nu_pooled_lower_bound(big, RestrictionSet.monotone(big.support))
    assert abs(pooled - 0.25) < 0.02

    def se(p):
        return np.sqrt(max(p * (1 - p), 1e-4) / n_sims)

    assert rates[1.0] - rates[0.5] > 3 * max(se(rates[1.0]), se(rates[0.5]))
    assert rates[0.5] - rates[0.0] > 3 * max(se(rates[0.5]), se(rates[0.0]))


@criterion(11, "IV route equivalence")
def test_criterion_11_iv_equivalence():
    rng = np.random.default_rng(111)
    from test_ident import counterexample_records, random_iv_population

    for _ in range(50):
        rec = random_iv_population(rng, monotone_m=True, n_units=30)
        support = support_from_values(rec.m)
        report = iv_relabel_comparison(rec, RestrictionSet.monotone(support))
        assert report.agree, report
    rec = counterexample_records()
    support = support_from_values(rec.m)
    report = iv_relabel_comparison(rec, RestrictionSet.unrestricted(support))
    assert report.reject_direct and not report.reject_relabel


@criterion(12, "measurement-error round-trip")
def test_criterion_12_measurement_error_round_trip():
    rng = np.random.default_rng(112)
    done = 0
    while done < 50:
        K = int(rng.integers(2, 4))
        Q = int(rng.integers(2, 4))
        table = random_monotone_table(rng, K=K, Q=Q)
        raw = rng.uniform(0, 1, (K, K))
        L = 0.7 * np.eye(K) + 0.3 * (raw / raw.sum(axis=0, keepdims=True))
        if np.linalg.cond(L) > 50:
            continue
        noisy = misclassify_mediator(table, L)
        recovered = correct_measurement_error(noisy, L)
        assert np.abs(recovered.mass - table.mass).max() <= 1e-9
        done += 1


@criterion(13, "cell counts fall with bins")
def test_criterion_13_bin_count_diagnostic():
    cp, tp = mc.cluster_pools()
    dgp = mc.MixtureDgp(control_pool=cp, treated_pool=tp, t=0.0,
                        cluster_mode=True, clusters_per_arm=20)
    meds = {b: [] for b in (2, 5, 10)}
    for s in range(40):
        rec = mc.draw_sample(dgp, mc._derive(113, s))
        for b in (2, 5, 10):
            meds[b].append(mc.median_cell_count(rec, bins=b))
    avg = {b: float(np.mean(v)) for b, v in meds.items()}
    print(f"  average median cell counts: {avg}")
    assert avg[2] > avg[5] > avg[10]
