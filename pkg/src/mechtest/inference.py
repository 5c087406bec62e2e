"""Finite-sample tests of the full-mediation null via moment inequalities.

The null is expressed as ``exists omega with C1 omega - C2 p >= 0`` where p
stacks the conditional cell probabilities ``P(Y=y_q, M=m_k | arm)`` and the
mediator marginals, and omega holds the nuisance type shares plus one
auxiliary coordinate per (mediator, outcome) cell that linearizes the
positive-part gap.  Two tests are provided:

* a least-favorable nonparametric bootstrap of the studentized max
  statistic (conservative but fully specified), and
* a conditional chi-squared test whose statistic is a minimized quadratic
  form and whose degrees of freedom come from the binding-constraint
  gradients at the solution.

Rows that involve no sampled probabilities (nonnegativity, restriction
rows, and the marginal-matching equalities with the estimate substituted)
are handled as exact constraints on omega; everything else is studentized
with its own standard deviation.  Covariances are influence-function based
at the independent-unit level (clusters when present), so the clustered
and iid paths share one formula.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import EstimationError, SolverFailureError, StructuralError
from .linprog import INFEASIBLE, OPTIMAL, UNBOUNDED, LinearProgram, solve_lp, solve_qp
from .probtab import RecordSet, bin_index, quantile_cutpoints, support_from_values
from .rng import substream
from .typeshares import MONOTONE, RestrictionSet, marginal_equalities

HARD_SD_FLOOR = 1e-12
CELL_COUNT_FLOOR = 15

LF_BOOT = "lf-boot"
COND_CHISQ = "cond-chisq"


class CellCountWarning(UserWarning):
    """Median independent observations per cell below the reliability floor."""


@dataclass(frozen=True)
class MomentRow:
    kind: str
    k: int = None
    q: int = None
    hard: bool = False


@dataclass(frozen=True)
class MomentSystem:
    """``H0: exists omega, C1 omega - C2 p >= 0`` with sampling metadata.

    ``p_hat`` stacks joint cells for arm 1, joint cells for arm 0, then the
    mediator marginals for arms 1 and 0.  ``cluster_cells[g, d, k, q]``
    counts observations so the bootstrap can recompute ``p_hat`` under
    resampling; ``cluster_arm`` is 0/1 for arm-pure clusters and -1 for
    clusters spanning both arms.
    """

    c1: np.ndarray
    c2: np.ndarray
    p_hat: np.ndarray
    sigma_hat: np.ndarray
    n_eff: int
    rows: tuple
    n_mediators: int
    n_outcomes: int
    outcome_levels: tuple
    cluster_cells: np.ndarray
    cluster_arm: np.ndarray
    restriction: str

    @property
    def n_omega(self):
        return self.c1.shape[1]

    @property
    def n_rows(self):
        return self.c1.shape[0]

    def moment_sds(self):
        """Per-row sd of sqrt(N) times the sampled part of the moment."""
        return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", self.c2, self.sigma_hat, self.c2), 0.0, None))

    def hard_mask(self):
        sds = self.moment_sds()
        return np.array([r.hard or sds[j] < HARD_SD_FLOOR for j, r in enumerate(self.rows)])


@dataclass(frozen=True)
class TestResult:
    statistic: float
    critical_value: float
    p_value: float
    reject: bool
    method: str
    alpha: float
    b_draws: int = 0
    seed: int = None
    df: int = None

    def to_json_dict(self):
        out = {
            "statistic": _json_float(self.statistic),
            "critical_value": _json_float(self.critical_value),
            "p_value": self.p_value,
            "reject": self.reject,
            "method": self.method,
            "alpha": self.alpha,
            "b_draws": self.b_draws,
            "seed": self.seed,
        }
        if self.df is not None:
            out["df"] = self.df
        return out


def _json_float(x):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


def _p_layout(K, Q):
    """Index helpers into the stacked probability vector."""
    joint1 = lambda k, q: k * Q + q
    joint0 = lambda k, q: K * Q + k * Q + q
    marg1 = lambda k: 2 * K * Q + k
    marg0 = lambda k: 2 * K * Q + K + k
    return joint1, joint0, marg1, marg0, 2 * K * Q + 2 * K


def _cluster_cells(records: RecordSet, support, levels):
    """Per-cluster counts over (arm, mediator, outcome) cells."""
    K, Q = support.k, len(levels)
    if records.cluster is None:
        ids = np.arange(records.n)
    else:
        uniq = {c: i for i, c in enumerate(dict.fromkeys(records.cluster.tolist()))}
        ids = np.array([uniq[c] for c in records.cluster.tolist()])
    G = int(ids.max()) + 1
    level_of = {y: q for q, y in enumerate(levels)}
    k_of = np.array([support.index(row) for row in records.m])
    q_of = np.array([level_of[y] for y in records.y.tolist()])
    cells = np.zeros((G, 2, K, Q), dtype=np.int64)
    np.add.at(cells, (ids, records.d, k_of, q_of), 1)
    arm_counts = cells.sum(axis=(2, 3))
    arm = np.where(arm_counts[:, 1] == 0, 0, np.where(arm_counts[:, 0] == 0, 1, -1))
    return cells, arm.astype(int)


def p_from_cells(cells):
    """Stacked probability vector from an aggregated (2, K, Q) count array."""
    totals = cells.sum(axis=(1, 2))
    if totals.min() <= 0:
        raise EstimationError("a treatment arm is empty")
    joint1 = cells[1].reshape(-1) / totals[1]
    joint0 = cells[0].reshape(-1) / totals[0]
    marg1 = cells[1].sum(axis=1) / totals[1]
    marg0 = cells[0].sum(axis=1) / totals[0]
    return np.concatenate([joint1, joint0, marg1, marg0])


def _influence_covariance(cluster_cells):
    """Covariance of sqrt(G) (p_hat - p) from cluster-level linearization."""
    G = cluster_cells.shape[0]
    totals = cluster_cells.sum(axis=(2, 3))  # (G, 2)
    arm_totals = totals.sum(axis=0)
    p_hat = p_from_cells(cluster_cells.sum(axis=0))
    K, Q = cluster_cells.shape[2], cluster_cells.shape[3]
    a = np.concatenate(
        [
            cluster_cells[:, 1].reshape(G, -1),
            cluster_cells[:, 0].reshape(G, -1),
            cluster_cells[:, 1].sum(axis=2),
            cluster_cells[:, 0].sum(axis=2),
        ],
        axis=1,
    ).astype(float)
    arm_of_comp = np.concatenate(
        [np.ones(K * Q), np.zeros(K * Q), np.ones(K), np.zeros(K)]
    ).astype(int)
    b = totals[:, arm_of_comp]  # (G, n_p)
    psi = G * (a - p_hat[None, :] * b) / arm_totals[arm_of_comp][None, :]
    return (psi.T @ psi) / G, p_hat


def median_cluster_cell_count(records: RecordSet, bins=None):
    """Median count of distinct independent units per nonempty
    (arm, mediator, outcome-bin) cell."""
    levels, y_mapped = _discretize_records(records, bins)
    mapped = RecordSet(y=y_mapped, m=records.m, d=records.d, cluster=records.cluster)
    support = support_from_values(records.m)
    cells, _ = _cluster_cells(mapped, support, levels)
    occupied = (cells > 0).sum(axis=0)  # distinct clusters per (d, k, q)
    counts = occupied[occupied > 0]
    if counts.size == 0:
        raise EstimationError("no occupied cells")
    return float(np.median(counts))


def _discretize_records(records: RecordSet, bins):
    """Outcome levels after optional binning; returns (levels, y_mapped)."""
    if bins is None:
        levels = tuple(sorted(set(records.y.tolist())))
        return levels, records.y
    if isinstance(bins, int):
        cuts = quantile_cutpoints(records.y, bins)
    else:
        cuts = tuple(float(c) for c in bins)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise StructuralError("cutpoints must be strictly increasing")
    if len(cuts) == 0:
        raise StructuralError("empty interval set")
    y = bin_index(records.y, cuts).astype(float)
    levels = tuple(sorted(set(y.tolist())))
    return levels, y


def build_moment_system(records: RecordSet, r: RestrictionSet, bins=None,
                        nu_ub=0.0, min_cell=CELL_COUNT_FLOOR) -> MomentSystem:
    """Assemble the moment-inequality system for the null that at most a
    ``nu_ub`` share of each always-taker group responds (0 = sharp null).

    For a binary mediator under monotonicity with ``nu_ub = 0`` the system
    reduces to the nuisance-free two-direction cell comparisons.  Otherwise
    omega = (type shares, gap linearizers) and the rows comprise, per
    mediator value: one budget row, the per-cell gap rows, the linearizer
    nonnegativity rows; then the marginal-matching equalities as paired
    inequalities, restriction rows, and share nonnegativity.  Constants in
    restriction rows are expressed through the arm-1 cell probabilities,
    which sum to one identically.

    A median independent-unit count per occupied cell below ``min_cell``
    triggers :class:`CellCountWarning`.
    """
    levels, y_mapped = _discretize_records(records, bins)
    mapped = RecordSet(
        y=y_mapped, m=records.m, d=records.d,
        cluster=records.cluster, z=records.z, pscore=records.pscore,
    )
    support = support_from_values(records.m)
    if r.n_support != support.k:
        raise StructuralError(
            f"restriction built for K={r.n_support} but records have K={support.k}"
        )
    K, Q = support.k, len(levels)
    cells, arm = _cluster_cells(mapped, support, levels)
    if (cells.sum(axis=(0, 2, 3)) == 0).any():
        raise EstimationError("need observations in both arms")
    sigma, p_hat = _influence_covariance(cells)
    occupied = (cells > 0).sum(axis=0)
    med = float(np.median(occupied[occupied > 0]))
    if med < min_cell:
        warnings.warn(
            f"median independent observations per cell is {med:.1f} (< {min_cell}); "
            "moment-based inference may be unreliable at this discretization",
            CellCountWarning,
            stacklevel=2,
        )
    joint1, joint0, marg1, marg0, n_p = _p_layout(K, Q)
    nu_ub = np.broadcast_to(np.asarray(nu_ub, dtype=float), (K,)).copy()
    if nu_ub.min() < 0 or nu_ub.max() > 1:
        raise StructuralError("nu_ub must lie in [0, 1]")
    rows = []
    c1_rows = []
    c2_rows = []
    binary_special = K == 2 and r.kind == MONOTONE and not nu_ub.any()
    if binary_special:
        n_omega = 0
        for q in range(Q):
            c2 = np.zeros(n_p)
            c2[joint1(0, q)] = 1.0
            c2[joint0(0, q)] = -1.0
            c1_rows.append(np.zeros(0))
            c2_rows.append(c2)
            rows.append(MomentRow("gap_low", k=0, q=q))
            c2 = np.zeros(n_p)
            c2[joint0(1, q)] = 1.0
            c2[joint1(1, q)] = -1.0
            c1_rows.append(np.zeros(0))
            c2_rows.append(c2)
            rows.append(MomentRow("gap_high", k=1, q=q))
    else:
        n_theta = K * K
        n_omega = n_theta + K * Q
        delta = lambda k, q: n_theta + k * Q + q
        for k in range(K):
            c1 = np.zeros(n_omega)
            c1[k * K + k] = -(1.0 - nu_ub[k])
            for q in range(Q):
                c1[delta(k, q)] = -1.0
            c2 = np.zeros(n_p)
            c2[marg1(k)] = -1.0
            c1_rows.append(c1)
            c2_rows.append(c2)
            rows.append(MomentRow("budget", k=k))
            for q in range(Q):
                c1 = np.zeros(n_omega)
                c1[delta(k, q)] = 1.0
                c2 = np.zeros(n_p)
                c2[joint1(k, q)] = 1.0
                c2[joint0(k, q)] = -1.0
                c1_rows.append(c1)
                c2_rows.append(c2)
                rows.append(MomentRow("gap", k=k, q=q))
            for q in range(Q):
                c1 = np.zeros(n_omega)
                c1[delta(k, q)] = 1.0
                c1_rows.append(c1)
                c2_rows.append(np.zeros(n_p))
                rows.append(MomentRow("delta_nonneg", k=k, q=q, hard=True))
        eq_a, _ = marginal_equalities(support, np.zeros(K), np.zeros(K))
        for k in range(K):
            for sign, tag in ((1.0, "lo"), (-1.0, "hi")):
                # row sums match the arm-0 marginal
                c1 = np.zeros(n_omega)
                c1[:n_theta] = sign * eq_a[k]
                c2 = np.zeros(n_p)
                c2[marg0(k)] = sign
                c1_rows.append(c1)
                c2_rows.append(c2)
                rows.append(MomentRow(f"match_m0_{tag}", k=k, hard=True))
                # column sums match the arm-1 marginal
                c1 = np.zeros(n_omega)
                c1[:n_theta] = sign * eq_a[K + k]
                c2 = np.zeros(n_p)
                c2[marg1(k)] = sign
                c1_rows.append(c1)
                c2_rows.append(c2)
                rows.append(MomentRow(f"match_m1_{tag}", k=k, hard=True))
        for j in range(r.matrix.shape[0]):
            c1 = np.zeros(n_omega)
            c1[:n_theta] = -r.matrix[j]
            c2 = np.zeros(n_p)
            for k in range(K):
                for q in range(Q):
                    c2[joint1(k, q)] = -r.rhs[j]
            c1_rows.append(c1)
            c2_rows.append(c2)
            rows.append(MomentRow("restriction", k=j, hard=True))
        for i in range(n_theta):
            c1 = np.zeros(n_omega)
            c1[i] = 1.0
            c1_rows.append(c1)
            c2_rows.append(np.zeros(n_p))
            rows.append(MomentRow("theta_nonneg", k=i // K, q=i % K, hard=True))
    label = r.kind + (":" + ",".join(f"{p:g}" for p in r.params) if r.params else "")
    return MomentSystem(
        c1=np.array(c1_rows).reshape(len(rows), n_omega),
        c2=np.array(c2_rows),
        p_hat=p_hat,
        sigma_hat=sigma,
        n_eff=cells.shape[0],
        rows=tuple(rows),
        n_mediators=K,
        n_outcomes=Q,
        outcome_levels=levels,
        cluster_cells=cells,
        cluster_arm=arm,
        restriction=label,
    )


def _minmax_statistic(system: MomentSystem, p_vec, shift, sds, hard):
    """``min over omega of max over soft rows`` of the studentized moments.

    Soft row j contributes ``((C2 p)_j - shift_j - (C1 omega)_j) / sd_j``;
    hard rows constrain omega.  Returns +inf when the hard rows are jointly
    infeasible at ``p_vec`` and -inf when the soft maximum is unbounded
    below.
    """
    mom = system.c2 @ p_vec - shift
    soft = ~hard
    if system.n_omega == 0:
        if hard.any() and (mom[hard] > 1e-10).any():
            return np.inf, None
        return float(np.max(mom[soft] / sds[soft])), np.zeros(0)
    n = system.n_omega + 1
    ub_rows = []
    ub_rhs = []
    for j in range(system.n_rows):
        row = np.zeros(n)
        if hard[j]:
            row[:-1] = -system.c1[j]
            ub_rows.append(row)
            ub_rhs.append(-mom[j])
        else:
            row[:-1] = -system.c1[j]
            row[-1] = -sds[j]
            ub_rows.append(row)
            ub_rhs.append(-mom[j])
    lp = LinearProgram(
        objective=np.concatenate([np.zeros(system.n_omega), [1.0]]),
        ub_matrix=np.array(ub_rows),
        ub_rhs=np.array(ub_rhs),
        bounds=tuple([(-np.inf, np.inf)] * n),
    )
    sol = solve_lp(lp)
    if sol.status == INFEASIBLE:
        return np.inf, None
    if sol.status == UNBOUNDED:
        return -np.inf, None
    return float(sol.value), sol.point[:-1]


def _make_resampler(system: MomentSystem):
    """Nonparametric bootstrap of independent units, within arm when
    clusters are arm-pure (always the case for unit-level data).

    Unit-level records resample as a per-arm multinomial over the observed
    cells, which is distributionally identical to redrawing rows and much
    faster.  Mixed-arm clusters fall back to whole-dataset resampling with
    a deterministic retry when a draw empties an arm.
    """
    cells = system.cluster_cells
    arm = system.cluster_arm
    shape = cells.shape[1:]
    if (cells.sum(axis=(1, 2, 3)) == 1).all():
        agg = cells.sum(axis=0)
        totals = agg.sum(axis=(1, 2))
        probs = [agg[d].reshape(-1) / totals[d] for d in (0, 1)]

        def draw_units(rng):
            out = np.empty(shape, dtype=np.int64)
            for d in (0, 1):
                out[d] = rng.multinomial(totals[d], probs[d]).reshape(shape[1:])
            return out

        return draw_units
    if (arm >= 0).all():
        pools = [np.nonzero(arm == d)[0] for d in (0, 1)]

        def draw_clusters(rng):
            out = np.zeros(shape, dtype=np.int64)
            for d in (0, 1):
                pool = pools[d]
                out += cells[pool[rng.integers(0, pool.size, pool.size)]].sum(axis=0)
            return out

        return draw_clusters

    def draw_mixed(rng):
        for _ in range(100):
            out = cells[rng.integers(0, cells.shape[0], cells.shape[0])].sum(axis=0)
            if out.sum(axis=(1, 2)).min() > 0:
                return out
        raise EstimationError("bootstrap could not produce both arms")

    return draw_mixed


def test_least_favorable_bootstrap(system: MomentSystem, alpha: float,
                                   b_draws: int = 999, seed: int = 0) -> TestResult:
    """Studentized max test with least-favorable bootstrap critical values.

    The statistic is ``sqrt(N) * (min over omega of the max studentized
    moment)_+``.  Bootstrap draws resample independent units, recenter each
    soft moment at its sample value at the minimizing omega (so every
    moment binds, the least-favorable configuration), and re-solve.
    Conservative by construction; deterministic given the seed.
    """
    if not 0 < alpha < 1:
        raise StructuralError("alpha must be in (0, 1)")
    if b_draws < 200:
        raise StructuralError("need at least 200 bootstrap draws")
    sds = system.moment_sds()
    hard = system.hard_mask()
    if not (~hard).any():
        raise EstimationError("degenerate data: no stochastic moment rows remain")
    t0, omega_hat = _minmax_statistic(system, system.p_hat, np.zeros(system.n_rows), sds, hard)
    root_n = np.sqrt(system.n_eff)
    statistic = root_n * max(t0, 0.0) if np.isfinite(t0) else np.inf
    if omega_hat is not None:
        shift = system.c2 @ system.p_hat - system.c1 @ omega_hat
    else:
        shift = np.zeros(system.n_rows)
    resample = _make_resampler(system)
    draws = np.empty(b_draws)
    for b in range(b_draws):
        rng = substream(seed, b)
        p_star = p_from_cells(resample(rng))
        t_b, _ = _minmax_statistic(system, p_star, shift, sds, hard)
        draws[b] = root_n * max(t_b, 0.0) if np.isfinite(t_b) else np.inf
    order = np.sort(draws)
    idx = min(max(int(np.ceil((1.0 - alpha) * b_draws)) - 1, 0), b_draws - 1)
    critical = float(order[idx])
    p_value = float(np.mean(draws >= statistic - 1e-12))
    return TestResult(
        statistic=float(statistic),
        critical_value=critical,
        p_value=p_value,
        reject=bool(statistic > critical),
        method=LF_BOOT,
        alpha=float(alpha),
        b_draws=int(b_draws),
        seed=int(seed),
    )


def _chisq_solution(system: MomentSystem, ridge=1e-10):
    """Minimized quadratic form and the binding-row df for the CS-style test.

    Whitens the deviation ``u = mu - p_hat`` with the ridge-regularized
    covariance so the QP is perfectly conditioned, then reads the active
    rows off the solution.
    """
    sigma = system.sigma_hat + ridge * np.eye(system.p_hat.size)
    lam, U = np.linalg.eigh(sigma)
    lam = np.clip(lam, ridge, None)
    half = U @ np.diag(np.sqrt(lam))  # u = half @ w  =>  u'inv(sigma)u = w'w
    n_w = system.p_hat.size
    n = n_w + system.n_omega
    # rows: C2 (p_hat + half w) - C1 omega <= 0
    ub = np.hstack([system.c2 @ half, -system.c1])
    rhs = -(system.c2 @ system.p_hat)
    feas = LinearProgram(
        objective=np.zeros(n),
        ub_matrix=ub,
        ub_rhs=rhs,
        bounds=tuple([(-np.inf, np.inf)] * n),
    )
    Q = np.zeros((n, n))
    Q[:n_w, :n_w] = 2.0 * np.eye(n_w)
    sol = solve_qp(Q, np.zeros(n), feas)
    if sol.status != OPTIMAL:
        raise SolverFailureError(f"conditional chi-squared QP ended with status {sol.status}")
    statistic = system.n_eff * float(sol.value)
    resid = rhs - ub @ sol.point
    active = np.nonzero(resid <= 1e-7 * (1.0 + np.abs(rhs)))[0]
    if active.size == 0:
        return statistic, 0
    grad = np.hstack([-system.c2[active], system.c1[active]])
    if system.n_omega:
        df = int(np.linalg.matrix_rank(grad) - np.linalg.matrix_rank(system.c1[active]))
    else:
        df = int(np.linalg.matrix_rank(system.c2[active]))
    return statistic, max(df, 0)


def test_conditional_chisq(system: MomentSystem, alpha: float) -> TestResult:
    """Conditional chi-squared test: minimized quadratic distance from
    ``p_hat`` to the null set, compared to a chi-squared quantile whose
    degrees of freedom equal the rank of the binding-row gradient system
    (after profiling out the nuisance directions).  Zero binding rows means
    never reject."""
    if not 0 < alpha < 1:
        raise StructuralError("alpha must be in (0, 1)")
    statistic, df = _chisq_solution(system)
    if df == 0:
        critical = np.inf
        p_value = 1.0
    else:
        critical = float(chi2.ppf(1.0 - alpha, df))
        p_value = float(chi2.sf(statistic, df))
    return TestResult(
        statistic=float(statistic),
        critical_value=critical,
        p_value=p_value,
        reject=bool(statistic > critical),
        method=COND_CHISQ,
        alpha=float(alpha),
        df=df,
    )


# the test_* operation names follow the public API contract; keep pytest
# from collecting them as test cases when imported into test modules
test_least_favorable_bootstrap.__test__ = False
test_conditional_chisq.__test__ = False


def p_value_curve(system: MomentSystem, method: str, grid, b_draws=999, seed=0):
    """Evaluate the chosen test over an alpha grid.

    Returns ``(rejections, smallest_rejecting_alpha)`` where the second
    element is the 1.0 sentinel if no grid point rejects.  Bootstrap draws
    are shared across the grid so rejection is monotone in alpha by
    construction.
    """
    grid = sorted(float(a) for a in grid)
    if any(not 0 < a < 1 for a in grid):
        raise StructuralError("alpha grid must lie inside (0, 1)")
    rejections = {}
    if method == COND_CHISQ:
        statistic, df = _chisq_solution(system)
        for a in grid:
            rejections[a] = bool(df > 0 and statistic > chi2.ppf(1.0 - a, df))
    elif method == LF_BOOT:
        # One set of draws shared across the grid; per-alpha order statistics.
        sds = system.moment_sds()
        hard = system.hard_mask()
        t0, omega_hat = _minmax_statistic(system, system.p_hat, np.zeros(system.n_rows), sds, hard)
        root_n = np.sqrt(system.n_eff)
        statistic = root_n * max(t0, 0.0) if np.isfinite(t0) else np.inf
        shift = (system.c2 @ system.p_hat - system.c1 @ omega_hat
                 if omega_hat is not None else np.zeros(system.n_rows))
        resample = _make_resampler(system)
        draws = np.empty(b_draws)
        for b in range(b_draws):
            rng = substream(seed, b)
            p_star = p_from_cells(resample(rng))
            t_b, _ = _minmax_statistic(system, p_star, shift, sds, hard)
            draws[b] = root_n * max(t_b, 0.0) if np.isfinite(t_b) else np.inf
        order = np.sort(draws)
        for a in grid:
            idx = min(max(int(np.ceil((1.0 - a) * b_draws)) - 1, 0), b_draws - 1)
            rejections[a] = bool(statistic > order[idx])
    else:
        raise StructuralError(f"unknown test method '{method}'")
    smallest = next((a for a in grid if rejections[a]), 1.0)
    return rejections, smallest
