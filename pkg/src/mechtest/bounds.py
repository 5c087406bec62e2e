"""Identification outputs: response-share lower bounds, feasibility slack,
trimming bounds on always-taker average effects, and breakdown budgets.

For each mediator value k, ``nu_k`` is the fraction of k-always-takers
(units whose mediator sits at m_k under both arms) whose outcome still
responds to treatment.  The full-mediation null forces every ``nu_k`` to
zero, so a positive lower bound quantifies how much work other channels
must be doing.  All bounds are sharp given the declared restriction set.
"""

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, SolverFailureError, UnsupportedCaseError
from .linprog import OPTIMAL, LinearProgram, solve_lp, solve_lfp
from .probtab import DistTable, delta_sup
from .typeshares import (
    DEFIER_BUDGET,
    ELEMENTWISE,
    ELEMENTWISE_DEFIER_BUDGET,
    MONOTONE,
    IdentifiedSetSpec,
    RestrictionSet,
    _require_feasible,
    build_identified_set,
    joint_theta_min_exists,
    min_defier_budget,
    theta_kk_min,
)

ZERO_TOL = 1e-9


@dataclass(frozen=True)
class BoundsReport:
    """Bundle of the identification outputs for one table + restriction."""

    nu_lb: tuple
    nu_pooled_lb: float
    slack: float
    theta: np.ndarray
    eta: tuple
    restriction: str
    ade: dict = None
    ade_informative: dict = None
    auto_relaxed_dbar: float = None
    pooled_degenerate: bool = False
    nu_max: float = 0.0
    within_bin_consistent: bool = None

    def to_json_dict(self):
        out = {
            "nu_lb": list(self.nu_lb),
            "nu_pooled_lb": self.nu_pooled_lb,
            "slack": self.slack,
            "theta": np.asarray(self.theta).tolist(),
            "eta": list(self.eta),
            "restriction": self.restriction,
            "ade": None
            if self.ade is None
            else {str(k): [v[0], v[1]] for k, v in self.ade.items()},
            "auto_relaxed_dbar": self.auto_relaxed_dbar,
        }
        if self.ade_informative is not None:
            out["ade_informative"] = {str(k): bool(v) for k, v in self.ade_informative.items()}
        if self.nu_max > 0.0:
            out["nu_max"] = self.nu_max
            out["within_bin_consistent"] = self.within_bin_consistent
        if self.pooled_degenerate:
            out["pooled_degenerate"] = True
        return out


def _auto_relaxed_restriction(spec: IdentifiedSetSpec):
    """Minimal defier-budget relaxation of an infeasible order restriction."""
    dbar = min_defier_budget(spec)
    if spec.support.totally_ordered:
        r = RestrictionSet.defier_budget(spec.support, dbar)
    else:
        r = RestrictionSet.elementwise_defier_budget(spec.support, dbar)
    return r, dbar


def resolve_identified_set(table: DistTable, r: RestrictionSet, auto_relax=False):
    """Identified set for ``table``; optionally substitute the minimal
    defier-budget relaxation when an order restriction is empirically empty.

    Returns ``(spec, relaxed_dbar_or_None)``.
    """
    spec = build_identified_set(table, r)
    if spec.feasible:
        return spec, None
    if auto_relax and r.kind in (MONOTONE, DEFIER_BUDGET, ELEMENTWISE,
                                 ELEMENTWISE_DEFIER_BUDGET):
        relaxed, dbar = _auto_relaxed_restriction(spec)
        spec = build_identified_set(table, relaxed)
        if spec.feasible:
            return spec, dbar
    _require_feasible(spec)  # raises IdentificationError with suggestion


def nu_lower_bounds(table: DistTable, r: RestrictionSet, auto_relax=False) -> np.ndarray:
    """Sharp per-k lower bounds on the always-taker response share.

    For each k this plugs the minimal always-taker share into
    ``(gap_k - complier mass into k)_+ / share`` and is zero whenever the
    data allow no k-always-takers at all.
    """
    spec, _ = resolve_identified_set(table, r, auto_relax)
    return _nu_lower_bounds(table, spec)


def _nu_lower_bounds(table: DistTable, spec: IdentifiedSetSpec) -> np.ndarray:
    p1 = spec.p1
    out = np.zeros(spec.k)
    for k in range(spec.k):
        tmin = theta_kk_min(spec, k)
        if tmin <= ZERO_TOL:
            continue
        gap = delta_sup(table, k)
        out[k] = max(gap - (p1[k] - tmin), 0.0) / tmin
    return out


def _slack_lp(table: DistTable, spec: IdentifiedSetSpec, nu_ub):
    """LP ``min s`` s.t. gap_k <= P(M=m_k|1) - (1 - nu_ub_k) theta_kk + s``."""
    K = spec.k
    nu_ub = np.broadcast_to(np.asarray(nu_ub, dtype=float), (K,))
    n = K * K + 1
    eq = np.hstack([spec.eq_matrix, np.zeros((2 * K, 1))])
    r = spec.restriction
    ub_rows = [np.hstack([r.matrix, np.zeros((r.matrix.shape[0], 1))])]
    ub_rhs = [r.rhs]
    for k in range(K):
        row = np.zeros(n)
        row[k * K + k] = 1.0 - nu_ub[k]
        row[-1] = -1.0
        ub_rows.append(row[None, :])
        ub_rhs.append(np.array([spec.p1[k] - delta_sup(table, k)]))
    lp = LinearProgram(
        objective=np.concatenate([np.zeros(K * K), [1.0]]),
        eq_matrix=eq,
        eq_rhs=spec.eq_rhs,
        ub_matrix=np.vstack(ub_rows),
        ub_rhs=np.concatenate(ub_rhs),
        bounds=tuple([(0.0, np.inf)] * (K * K) + [(-np.inf, np.inf)]),
    )
    sol = solve_lp(lp)
    if sol.status != OPTIMAL:
        raise SolverFailureError("slack LP did not solve on a feasible set")
    theta = sol.point[: K * K].reshape(K, K)
    return float(sol.value), theta


def sharp_null_slack(table: DistTable, r: RestrictionSet, auto_relax=False) -> float:
    """Minimal uniform relaxation s* of the full-mediation implications.

    ``s* <= 0`` exactly when the table is consistent with the null under
    the restriction set.
    """
    spec, _ = resolve_identified_set(table, r, auto_relax)
    value, _ = _slack_lp(table, spec, 0.0)
    return value


def within_bin_slack(table: DistTable, r: RestrictionSet, nu_max: float,
                     auto_relax=False) -> float:
    """Slack of the coarsened-mediator test allowing within-bin response
    shares up to ``nu_max``; nonpositive means consistent."""
    spec, _ = resolve_identified_set(table, r, auto_relax)
    value, _ = _slack_lp(table, spec, nu_max)
    return value


def _pooled_lfp(table: DistTable, spec: IdentifiedSetSpec):
    """Linear-fractional program for the pooled bound.

    Variables are ``(theta, t_k := theta_kk nu_k)``; the objective is
    ``sum_k t_k / sum_k theta_kk``.  Returns (value, theta, t, degenerate).
    """
    K = spec.k
    n = K * K + K
    diag_idx = [k * K + k for k in range(K)]
    den = np.zeros(n)
    den[diag_idx] = 1.0
    num = np.zeros(n)
    num[K * K:] = 1.0
    eq = np.hstack([spec.eq_matrix, np.zeros((2 * K, K))])
    r = spec.restriction
    ub_rows = [np.hstack([r.matrix, np.zeros((r.matrix.shape[0], K))])]
    ub_rhs = [r.rhs]
    for k in range(K):
        # t_k >= gap_k - sum_{l != k} theta_lk
        row = np.zeros(n)
        row[K * K + k] = -1.0
        for l in range(K):
            if l != k:
                row[l * K + k] = -1.0
        ub_rows.append(row[None, :])
        ub_rhs.append(np.array([-delta_sup(table, k)]))
        # t_k <= theta_kk
        row = np.zeros(n)
        row[K * K + k] = 1.0
        row[k * K + k] = -1.0
        ub_rows.append(row[None, :])
        ub_rhs.append(np.array([0.0]))
    feas = LinearProgram(
        objective=np.zeros(n),
        eq_matrix=eq,
        eq_rhs=spec.eq_rhs,
        ub_matrix=np.vstack(ub_rows),
        ub_rhs=np.concatenate(ub_rhs),
        bounds=tuple([(0.0, np.inf)] * n),
    )
    probe = solve_lp(LinearProgram(
        objective=den, eq_matrix=eq, eq_rhs=spec.eq_rhs,
        ub_matrix=np.vstack(ub_rows), ub_rhs=np.concatenate(ub_rhs),
        bounds=tuple([(0.0, np.inf)] * n),
    ))
    if probe.status != OPTIMAL:
        raise SolverFailureError("pooled-bound feasibility probe failed")
    if probe.value <= ZERO_TOL:
        return 0.0, probe.point[: K * K].reshape(K, K), np.zeros(K), True
    sol = solve_lfp((num, 0.0), (den, 0.0), feas)
    if sol.status != OPTIMAL:
        raise SolverFailureError("pooled-bound program did not solve")
    theta = sol.point[: K * K].reshape(K, K)
    return max(float(sol.value), 0.0), theta, sol.point[K * K:], False


def nu_pooled_lower_bound(table: DistTable, r: RestrictionSet, auto_relax=False) -> float:
    """Sharp lower bound on the pooled always-taker response share.

    Returns 0 (degenerate) when the identified set allows the total
    always-taker mass to vanish.
    """
    spec, _ = resolve_identified_set(table, r, auto_relax)
    value, _, _, _ = _pooled_lfp(table, spec)
    return value


def _trimmed_mean(levels, pmf, share, upper):
    """Mean of the top/bottom ``share`` of a discrete distribution.

    Exact partial sums with a fractional cell at the cut, matching the
    quantile-integral definition ``(1/share) * int F^{-1}(u) du``.
    """
    if share <= 0.0:
        raise StructuralError("trimming share must be positive")
    share = min(share, 1.0)
    order = range(len(levels)) if not upper else range(len(levels) - 1, -1, -1)
    remaining = share
    acc = 0.0
    for i in order:
        take = min(pmf[i], remaining)
        acc += levels[i] * take
        remaining -= take
        if remaining <= 1e-15:
            break
    return acc / share


def ade_bounds(table: DistTable, r: RestrictionSet, k: int, auto_relax=False):
    """Sharp trimming bounds on the average treated-vs-untreated outcome
    difference for k-always-takers.

    The always-taker share within each arm's M = m_k stratum is bounded
    below by ``theta_kk_min / P(M=m_k | arm)``; best and worst cases place
    the always-takers in the top or bottom of the stratum's outcome
    distribution.  A zero minimal share yields the vacuous +/- outcome-span
    interval.
    """
    if not 0 <= k < table.n_mediators:
        raise StructuralError(f"mediator index {k} out of range")
    spec, _ = resolve_identified_set(table, r, auto_relax)
    tmin = theta_kk_min(spec, k)
    levels = np.asarray(table.outcome_levels)
    if tmin <= ZERO_TOL:
        span = float(levels.max() - levels.min())
        return -span, span
    lo_hi = {}
    for d in (0, 1):
        share = tmin / spec.p1[k] if d == 1 else tmin / spec.p0[k]
        share = min(share, 1.0)
        pmf = table.cond_outcome(d, k)
        lo_hi[d] = (
            _trimmed_mean(levels, pmf, share, upper=False),
            _trimmed_mean(levels, pmf, share, upper=True),
        )
    lb = lo_hi[1][0] - lo_hi[0][1]
    ub = lo_hi[1][1] - lo_hi[0][0]
    return float(lb), float(ub)


def breakdown_defier_budget(table: DistTable, tol=1e-6) -> float:
    """Largest defier budget at which the pooled bound stays positive.

    The pooled bound is monotone nonincreasing in the budget, so bisection
    applies; the reported value is the last positive point on the grid of
    width ``tol``.  Returns 0 when there is no violation evidence at any
    feasible budget.
    """
    if not table.support.totally_ordered:
        raise UnsupportedCaseError("breakdown budget needs a scalar ordered mediator")

    def g(dbar):
        r = RestrictionSet.defier_budget(table.support, dbar)
        spec = build_identified_set(table, r)
        if not spec.feasible:
            return None
        value, _, _, _ = _pooled_lfp(table, spec)
        return value

    probe = build_identified_set(table, RestrictionSet.defier_budget(table.support, 0.0))
    lo = 0.0 if probe.feasible else min_defier_budget(probe)
    g_lo = g(lo)
    if g_lo is None or g_lo <= ZERO_TOL:
        return 0.0
    if (g_hi := g(1.0)) is not None and g_hi > ZERO_TOL:
        return 1.0
    hi = 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        val = g(mid)
        if val is not None and val > ZERO_TOL:
            lo = mid
        else:
            hi = mid
    return lo


def bounds_report(table: DistTable, r: RestrictionSet, auto_relax=False,
                  with_ade=False, nu_max=0.0) -> BoundsReport:
    """Full identification report for one table and restriction set."""
    spec, relaxed = resolve_identified_set(table, r, auto_relax)
    nu_lb = _nu_lower_bounds(table, spec)
    slack, theta_slack = _slack_lp(table, spec, 0.0)
    pooled, theta_pooled, _, degenerate = _pooled_lfp(table, spec)
    # The reported allocation is the pooled-program minimizer, so the pooled
    # bound equals sum(eta)/sum(diag) at it and dominates the diagonal-
    # weighted per-k bounds there.
    theta = theta_slack if degenerate else theta_pooled
    eta = np.empty(spec.k)
    for k in range(spec.k):
        compliers_in = theta[:, k].sum() - theta[k, k]
        eta[k] = max(delta_sup(table, k) - compliers_in, 0.0)
    ade = None
    ade_informative = None
    if with_ade:
        ade = {}
        ade_informative = {}
        for k in range(spec.k):
            ade[k] = ade_bounds(table, r, k, auto_relax=auto_relax)
            ade_informative[k] = theta_kk_min(spec, k) > ZERO_TOL
    label = spec.restriction.kind
    if spec.restriction.params:
        label += ":" + ",".join(f"{p:g}" for p in spec.restriction.params)
    consistent = None
    if nu_max > 0.0:
        consistent = _slack_lp(table, spec, nu_max)[0] <= 0.0
    return BoundsReport(
        nu_lb=tuple(float(v) for v in nu_lb),
        nu_pooled_lb=float(pooled),
        slack=float(slack),
        theta=theta,
        eta=tuple(float(v) for v in eta),
        restriction=label,
        ade=ade,
        ade_informative=ade_informative,
        auto_relaxed_dbar=relaxed,
        pooled_degenerate=degenerate,
        nu_max=float(nu_max),
        within_bin_consistent=consistent,
    )
