"""Small dense solvers for LPs, linear-fractional programs, and convex QPs.

All problems here are tiny (at most a few hundred variables), so the
implementation favors robustness and verifiable certificates over speed:

* ``solve_lp`` is a two-phase tableau simplex with Bland's anti-cycling
  rule.  Optimal solutions carry a dual vector proving the value; infeasible
  ones carry a Farkas ray proving emptiness.  Both certificates are checked
  before returning.
* ``solve_lfp`` minimizes a ratio of affine forms through the
  Charnes-Cooper change of variables, after an auxiliary LP has verified
  that the denominator is strictly positive on the feasible set.
* ``solve_qp`` is a primal active-set method for convex (PSD) objectives,
  warm-started from a phase-1 vertex, reporting the exact active set.

Everything is deterministic: identical inputs give bit-identical outputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SolverFailureError, StructuralError

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-9
_MAX_PIVOTS = 20000

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


def _as_matrix(a, ncols):
    if a is None:
        return np.zeros((0, ncols))
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != ncols:
        raise StructuralError(
            f"constraint matrix has shape {a.shape}, expected (*, {ncols})"
        )
    return a


def _as_vector(v, n, name):
    if v is None:
        v = np.zeros(0)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (n,):
        raise StructuralError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


@dataclass(frozen=True)
class LinearProgram:
    """``min c'x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lo <= x <= hi``.

    ``bounds`` holds one ``(lo, hi)`` pair per variable; use ``-np.inf`` /
    ``np.inf`` for free sides (default is ``x >= 0``).  The same object
    doubles as a feasible-set description for :func:`solve_lfp` and
    :func:`solve_qp`, which ignore ``objective``.
    """

    objective: np.ndarray
    eq_matrix: np.ndarray = None
    eq_rhs: np.ndarray = None
    ub_matrix: np.ndarray = None
    ub_rhs: np.ndarray = None
    bounds: tuple = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.objective, dtype=float))
        if c.ndim != 1:
            raise StructuralError("objective must be a vector")
        n = c.shape[0]
        aeq = _as_matrix(self.eq_matrix, n)
        beq = _as_vector(self.eq_rhs, aeq.shape[0], "eq_rhs")
        aub = _as_matrix(self.ub_matrix, n)
        bub = _as_vector(self.ub_rhs, aub.shape[0], "ub_rhs")
        if self.bounds is None:
            bnds = tuple((0.0, np.inf) for _ in range(n))
        else:
            bnds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            if len(bnds) != n:
                raise StructuralError(f"{len(bnds)} bounds for {n} variables")
        for lo, hi in bnds:
            if np.isnan(lo) or np.isnan(hi):
                raise StructuralError("bounds may not be NaN")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "eq_matrix", aeq)
        object.__setattr__(self, "eq_rhs", beq)
        object.__setattr__(self, "ub_matrix", aub)
        object.__setattr__(self, "ub_rhs", bub)
        object.__setattr__(self, "bounds", bnds)

    @property
    def n_vars(self):
        return self.objective.shape[0]


@dataclass(frozen=True)
class StandardForm:
    """``min c'z s.t. Az = b, z >= 0`` plus the recipe to map z back to x."""

    matrix: np.ndarray
    rhs: np.ndarray
    cost: np.ndarray
    offset: float
    var_map: tuple  # per original variable: (kind, z column(s), shift)
    n_rows_eq: int


@dataclass(frozen=True)
class LpSolution:
    """Outcome of an LP/LFP/QP solve.

    ``point`` and ``value`` are populated iff ``status == "optimal"``.
    ``dual`` holds row multipliers for the standardized system proving the
    optimum; ``farkas`` is a ray proving infeasibility.  ``standard``
    retains the standardized system so certificates can be re-verified
    externally.  ``active`` lists binding inequality rows (QP solves only).
    """

    status: str
    value: float = np.nan
    point: np.ndarray = None
    dual: np.ndarray = None
    farkas: np.ndarray = None
    standard: StandardForm = None
    active: tuple = ()

    @property
    def optimal(self):
        return self.status == OPTIMAL


def standard_form(lp: LinearProgram) -> StandardForm:
    """Rewrite ``lp`` as ``min c'z s.t. Az = b, z >= 0``."""
    n = lp.n_vars
    var_map = []
    sub_cols = []  # (original index, sign) per z column
    shifts = np.zeros(n)  # x = shifts + T z
    extra_ub = []  # (z column, rhs) rows encoding two-sided bounds
    for i, (lo, hi) in enumerate(lp.bounds):
        if np.isinf(lo) and np.isinf(hi):
            var_map.append(("split", (len(sub_cols), len(sub_cols) + 1), 0.0))
            sub_cols.append((i, 1.0))
            sub_cols.append((i, -1.0))
        elif np.isinf(hi):
            var_map.append(("shift", (len(sub_cols),), lo))
            shifts[i] = lo
            sub_cols.append((i, 1.0))
        elif np.isinf(lo):
            var_map.append(("mirror", (len(sub_cols),), hi))
            shifts[i] = hi
            sub_cols.append((i, -1.0))
        else:
            var_map.append(("shift", (len(sub_cols),), lo))
            shifts[i] = lo
            sub_cols.append((i, 1.0))
            extra_ub.append((len(sub_cols) - 1, hi - lo))
    nz = len(sub_cols)
    T = np.zeros((n, nz))
    for j, (i, s) in enumerate(sub_cols):
        T[i, j] = s
    a_eq = lp.eq_matrix @ T
    b_eq = lp.eq_rhs - lp.eq_matrix @ shifts
    a_ub = lp.ub_matrix @ T
    b_ub = lp.ub_rhs - lp.ub_matrix @ shifts
    for col, rhs in extra_ub:
        row = np.zeros((1, nz))
        row[0, col] = 1.0
        a_ub = np.vstack([a_ub, row])
        b_ub = np.append(b_ub, rhs)
    n_ub = a_ub.shape[0]
    A = np.zeros((a_eq.shape[0] + n_ub, nz + n_ub))
    A[: a_eq.shape[0], :nz] = a_eq
    A[a_eq.shape[0]:, :nz] = a_ub
    A[a_eq.shape[0]:, nz:] = np.eye(n_ub)
    b = np.concatenate([b_eq, b_ub])
    cost = np.concatenate([lp.objective @ T, np.zeros(n_ub)])
    offset = float(lp.objective @ shifts)
    return StandardForm(A, b, cost, offset, tuple(var_map), a_eq.shape[0])


def _recover_point(sf: StandardForm, z):
    x = np.empty(len(sf.var_map))
    for i, (kind, cols, shift) in enumerate(sf.var_map):
        if kind == "shift":
            x[i] = shift + z[cols[0]]
        elif kind == "mirror":
            x[i] = shift - z[cols[0]]
        else:
            x[i] = z[cols[0]] - z[cols[1]]
    return x


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]
    basis[row] = col


def _simplex_phase(tab, basis, n_enter, n_pivots, force_out_from=None, stop_below=None):
    """Pivot until optimal or unbounded.

    ``tab`` rows 0..m-1 hold [B^-1 A | B^-1 b]; the last row holds reduced
    costs and the negated objective.  Columns ``>= n_enter`` never enter.
    Pricing is most-negative-reduced-cost until the objective stalls, then
    Bland's smallest-index rule takes over permanently, which guarantees
    termination on degenerate problems.  A column that looks improving but
    has no positive pivot entry is declared unbounded only when its reduced
    cost is decisively negative relative to the column scale; otherwise it
    is accumulated roundoff and gets zeroed out (final certificates
    re-verify every answer independently).  When ``force_out_from`` is set,
    a basic variable with index at or above it (an artificial, necessarily
    at level zero) is pivoted out as soon as the entering column touches
    its row.  ``stop_below`` ends the phase early once the objective is
    provably below it (used by phase 1, whose objective floor is zero).
    """
    m = tab.shape[0] - 1
    basis_arr = np.asarray(basis)
    bland = False
    stall = 0
    stall_limit = 10 * (m + 1)
    while True:
        if stop_below is not None and -tab[-1, -1] <= stop_below:
            return OPTIMAL, n_pivots
        rc = tab[-1, :n_enter]
        candidates = np.nonzero(rc < -PIVOT_TOL)[0]
        if candidates.size == 0:
            return OPTIMAL, n_pivots
        if bland:
            enter = int(candidates[0])
        else:
            enter = int(candidates[np.argmin(rc[candidates])])
        col = tab[:m, enter]
        leave = -1
        if force_out_from is not None:
            forced = np.nonzero((basis_arr >= force_out_from) & (np.abs(col) > PIVOT_TOL))[0]
            if forced.size:
                leave = int(forced[0])
        if leave < 0:
            pos = np.nonzero(col > PIVOT_TOL)[0]
            if pos.size == 0:
                col_scale = np.abs(col).max(initial=0.0)
                if rc[enter] > -1e-7 * (1.0 + col_scale):
                    tab[-1, enter] = 0.0
                    continue
                return UNBOUNDED, n_pivots
            ratios = tab[pos, -1] / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + PIVOT_TOL]
            if bland:
                leave = int(ties[np.argmin(basis_arr[ties])])
            else:
                leave = int(ties[np.argmax(col[ties])])
        before = tab[-1, -1]
        _pivot(tab, basis, leave, enter)
        basis_arr[leave] = basis[leave]
        if tab[-1, -1] > before + 1e-12 * (1.0 + abs(before)):
            stall = 0
        else:
            stall += 1
            if stall > stall_limit:
                bland = True
        n_pivots += 1
        if n_pivots > _MAX_PIVOTS:
            raise SolverFailureError("simplex exceeded the pivot budget")


def solve_lp(lp: LinearProgram) -> LpSolution:
    """Globally solve ``lp``; every status is backed by a verified certificate.

    Returns
    -------
    LpSolution
        ``optimal`` with point/value/dual, ``infeasible`` with a Farkas
        certificate, or ``unbounded``.

    Raises
    ------
    StructuralError
        If dimensions are inconsistent.
    SolverFailureError
        If numerical degeneracy defeats the pivot tolerances.
    """
    sf = standard_form(lp)
    A = sf.matrix.copy()
    b = sf.rhs.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    m, nz = A.shape
    # Column equilibration: badly scaled columns (common after whitening)
    # otherwise poison the pivot tolerances.  Scaling commutes with the
    # duals and certificates, so only the primal point needs unscaling.
    col_scale = np.abs(A).max(axis=0) if m else np.ones(nz)
    col_scale = np.where(col_scale > 0, col_scale, 1.0)
    A = A / col_scale
    cost_scaled = sf.cost / col_scale
    tab = np.zeros((m + 1, nz + m + 1))
    tab[:m, :nz] = A
    tab[:m, nz: nz + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :nz] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(nz, nz + m))
    status, piv = _simplex_phase(tab, basis, nz, 0, stop_below=0.5 * FEAS_TOL)
    if status != OPTIMAL:  # pragma: no cover - phase 1 cannot be unbounded
        raise SolverFailureError("phase 1 terminated without an optimum")
    if -tab[-1, -1] > FEAS_TOL:
        cb = np.array([1.0 if j >= nz else 0.0 for j in basis])
        y = cb @ tab[:m, nz: nz + m]
        y[neg] *= -1.0
        if not (np.all(y @ sf.matrix <= 1e-7) and y @ sf.rhs > FEAS_TOL / 2):
            raise SolverFailureError("failed to certify infeasibility")
        return LpSolution(INFEASIBLE, farkas=y, standard=sf)
    # Pivot artificials out of the basis where a real column is available;
    # those that remain sit at level zero in redundant rows and are ejected
    # lazily by the force-out rule below.
    for i in range(m):
        if basis[i] >= nz:
            for j in range(nz):
                if abs(tab[i, j]) > 1e-7:
                    _pivot(tab, basis, i, j)
                    break
    tab[-1, :] = 0.0
    tab[-1, :nz] = cost_scaled
    for i in range(m):
        if basis[i] < nz and cost_scaled[basis[i]] != 0.0:
            tab[-1] -= cost_scaled[basis[i]] * tab[i]
    status, piv = _simplex_phase(tab, basis, nz, piv, force_out_from=nz)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, value=-np.inf, standard=sf)
    z = np.zeros(nz)
    for i in range(m):
        if basis[i] < nz:
            z[basis[i]] = max(tab[i, -1], 0.0)
    z /= col_scale
    x = _recover_point(sf, z)
    value = float(sf.cost @ z + sf.offset)
    # Dual vector: solve B'y = c_B against the sign-corrected rows, undo the
    # sign flips, then verify feasibility and the zero duality gap.
    B = np.empty((m, m))
    cb = np.empty(m)
    for i, j in enumerate(basis):
        if j < nz:
            B[:, i] = A[:, j]
            cb[i] = cost_scaled[j]
        else:
            B[:, i] = np.eye(m)[:, j - nz]
            cb[i] = 0.0
    try:
        y = np.linalg.solve(B.T, cb)
    except np.linalg.LinAlgError as exc:
        raise SolverFailureError("singular basis at the optimum") from exc
    y[neg] *= -1.0
    reduced = sf.cost - y @ sf.matrix
    gap = abs(y @ sf.rhs - (value - sf.offset))
    primal = np.abs(sf.matrix @ z - sf.rhs).max() if m else 0.0
    if reduced.min() < -1e-7 or gap > 1e-7 * (1.0 + abs(value)) or primal > 1e-7:
        raise SolverFailureError("failed to certify the LP optimum")
    return LpSolution(OPTIMAL, value=value, point=x, dual=y, standard=sf)


def _feasible_set_rows(lp: LinearProgram):
    """All inequality rows (ub rows, then finite bounds) as ``G x <= h``."""
    n = lp.n_vars
    rows = [lp.ub_matrix]
    rhs = [lp.ub_rhs]
    for i, (lo, hi) in enumerate(lp.bounds):
        if np.isfinite(hi):
            e = np.zeros((1, n))
            e[0, i] = 1.0
            rows.append(e)
            rhs.append(np.array([hi]))
        if np.isfinite(lo):
            e = np.zeros((1, n))
            e[0, i] = -1.0
            rows.append(e)
            rhs.append(np.array([-lo]))
    return np.vstack(rows), np.concatenate(rhs)


def solve_lfp(numerator, denominator, feasible: LinearProgram) -> LpSolution:
    """Minimize ``(n'x + n0) / (d'x + d0)`` over the feasible set of ``feasible``.

    Parameters
    ----------
    numerator, denominator : tuple
        Affine forms ``(coefficients, constant)``.
    feasible : LinearProgram
        Only the constraint part is used; the objective is ignored.

    The denominator must be strictly positive everywhere on the feasible
    set (checked with an auxiliary LP; violations raise ``DomainError``).
    The Charnes-Cooper homogenizing variable is internal: the returned
    ``point`` is in original coordinates.
    """
    n = feasible.n_vars
    ncoef = _as_vector(np.asarray(numerator[0], dtype=float), n, "numerator")
    dcoef = _as_vector(np.asarray(denominator[0], dtype=float), n, "denominator")
    nconst, dconst = float(numerator[1]), float(denominator[1])
    aux = LinearProgram(
        objective=dcoef,
        eq_matrix=feasible.eq_matrix,
        eq_rhs=feasible.eq_rhs,
        ub_matrix=feasible.ub_matrix,
        ub_rhs=feasible.ub_rhs,
        bounds=feasible.bounds,
    )
    denom_min = solve_lp(aux)
    if denom_min.status == INFEASIBLE:
        return denom_min
    if denom_min.status == UNBOUNDED or denom_min.value + dconst <= FEAS_TOL:
        raise DomainError("denominator is not strictly positive on the feasible set")
    G, h = _feasible_set_rows(feasible)
    neq = feasible.eq_matrix.shape[0]
    eq = np.zeros((neq + 1, n + 1))
    eq[:neq, :n] = feasible.eq_matrix
    eq[:neq, n] = -feasible.eq_rhs
    eq[neq, :n] = dcoef
    eq[neq, n] = dconst
    eq_rhs = np.zeros(neq + 1)
    eq_rhs[neq] = 1.0
    ub = np.hstack([G, -h[:, None]])
    cc = LinearProgram(
        objective=np.append(ncoef, nconst),
        eq_matrix=eq,
        eq_rhs=eq_rhs,
        ub_matrix=ub,
        ub_rhs=np.zeros(G.shape[0]),
        bounds=tuple([(-np.inf, np.inf)] * n + [(0.0, np.inf)]),
    )
    sol = solve_lp(cc)
    if sol.status != OPTIMAL:
        return sol
    t = sol.point[n]
    if t <= 1e-12:
        raise SolverFailureError(
            "Charnes-Cooper scale collapsed to zero (recession direction)"
        )
    return LpSolution(
        OPTIMAL, value=sol.value, point=sol.point[:n] / t,
        dual=sol.dual, standard=sol.standard,
    )


def _nullspace(a, rtol=1e-11):
    if a.shape[0] == 0:
        return np.eye(a.shape[1])
    u, s, vt = np.linalg.svd(a)
    tol = max(a.shape) * (s[0] if s.size else 0.0) * rtol
    rank = int(np.sum(s > tol))
    return vt[rank:].T


def solve_qp(quadratic, linear, feasible: LinearProgram) -> LpSolution:
    """Minimize ``0.5 x'Qx + c'x`` over the polyhedron described by ``feasible``.

    ``quadratic`` must be symmetric positive semidefinite (zero curvature
    directions are handled).  A primal active-set method is warm-started
    from a phase-1 simplex vertex, so the binding inequality rows at the
    optimum are reported exactly in ``active`` (indices into the ub rows
    followed by the finite-bound rows).
    """
    n = feasible.n_vars
    Q = np.asarray(quadratic, dtype=float)
    c = _as_vector(np.asarray(linear, dtype=float), n, "linear")
    if Q.shape != (n, n):
        raise StructuralError("quadratic matrix does not match variable count")
    if not np.allclose(Q, Q.T, atol=1e-8 * max(1.0, np.abs(Q).max())):
        raise DomainError("quadratic matrix must be symmetric")
    Q = 0.5 * (Q + Q.T)
    eigs = np.linalg.eigvalsh(Q)
    if eigs.size and eigs.min() < -1e-8 * max(1.0, abs(eigs).max()):
        raise DomainError("quadratic matrix must be positive semidefinite")
    start = solve_lp(
        LinearProgram(
            objective=np.zeros(n),
            eq_matrix=feasible.eq_matrix,
            eq_rhs=feasible.eq_rhs,
            ub_matrix=feasible.ub_matrix,
            ub_rhs=feasible.ub_rhs,
            bounds=feasible.bounds,
        )
    )
    if start.status != OPTIMAL:
        return start
    G, h = _feasible_set_rows(feasible)
    Aeq = feasible.eq_matrix
    x = start.point.copy()
    m = G.shape[0]
    work = [j for j in range(m) if h[j] - G[j] @ x <= 1e-9]
    scale = max(1.0, np.abs(Q).max(), np.abs(c).max())
    max_iter = 200 + 50 * (n + m)
    for _ in range(max_iter):
        g = Q @ x + c
        A_w = np.vstack([Aeq, G[work]])
        Z = _nullspace(A_w)
        ray = False
        if Z.shape[1] == 0:
            p = np.zeros(n)
        else:
            H = Z.T @ Q @ Z
            lam, V = np.linalg.eigh(H)
            dd = V.T @ (Z.T @ g)
            curv = lam > 1e-11 * max(1.0, lam.max() if lam.size else 0.0)
            flat_slope = (~curv) & (np.abs(dd) > 1e-9 * scale)
            if flat_slope.any():
                i = int(np.argmax(flat_slope))
                p = Z @ (-np.sign(dd[i]) * V[:, i])
                ray = True
            else:
                v = np.zeros_like(dd)
                v[curv] = -dd[curv] / lam[curv]
                p = Z @ (V @ v)
        if not ray and np.linalg.norm(p) <= 1e-10 * max(1.0, np.linalg.norm(x)):
            mult, *_ = np.linalg.lstsq(A_w.T, -g, rcond=None)
            ineq_mult = mult[Aeq.shape[0]:]
            bad = [k for k, v in enumerate(ineq_mult) if v < -1e-8 * scale]
            if not bad:
                value = float(0.5 * x @ Q @ x + c @ x)
                return LpSolution(
                    OPTIMAL, value=value, point=x, dual=mult,
                    active=tuple(sorted(work)),
                )
            drop = min(bad, key=lambda k: work[k])
            work.pop(drop)
            continue
        cap = np.inf if ray else 1.0
        alpha = cap
        block = -1
        for j in range(m):
            if j in work:
                continue
            gp = G[j] @ p
            if gp > 1e-12 * scale:
                r = max(h[j] - G[j] @ x, 0.0) / gp
                if r < alpha - 1e-12 or (
                    r < alpha + 1e-12 and (block < 0 or j < block)
                ):
                    alpha = r
                    block = j
        if ray and block < 0:
            return LpSolution(UNBOUNDED, value=-np.inf)
        alpha = min(alpha, cap)
        x = x + alpha * p
        if block >= 0 and (ray or alpha < cap - 1e-12):
            work.append(block)
            work.sort()
    raise SolverFailureError("active-set QP exceeded the iteration budget")
