"""Constructive sharpness oracle.

Given an observable table and any feasible type-share allocation, this
module builds an explicit primitive distribution over potential outcomes
and mediators that (a) reproduces the observable table exactly, (b) gives
compliers and off-support mediator arguments zero treatment response, and
(c) makes the share of responding k-always-takers exactly
``eta_k / theta_kk``.  Its existence is what makes the lower bounds sharp,
so round-tripping through :func:`verify_consistency` is the executable form
of that claim.

Everything is finite and discrete, so the density algebra of the general
argument becomes exact pmf arithmetic over the outcome grid.  Four cases
per mediator value: no always-takers at all; an excess with disjoint arm
supports; an excess with overlapping supports (a two-component mixture for
the always-takers); and no excess (always-takers sit on the overlap
density, scaled compliers absorb the rest).
"""

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .probtab import DistTable
from .typeshares import marginal_equalities
from .probtab import delta_sup

_TOL = 1e-12


@dataclass(frozen=True)
class Coupling:
    """Joint pmf over (Y, Y') with prescribed marginals."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise StructuralError("coupling matrix must be square")
        if m.min() < -_TOL:
            raise StructuralError("coupling has negative mass")
        object.__setattr__(self, "matrix", m)

    @property
    def row_marginal(self):
        return self.matrix.sum(axis=1)

    @property
    def col_marginal(self):
        return self.matrix.sum(axis=0)

    @property
    def disagreement(self):
        off = self.matrix[~np.eye(self.matrix.shape[0], dtype=bool)].sum()
        return float(max(off, 0.0))


def _check_pmf(f, name):
    f = np.asarray(f, dtype=float)
    if f.ndim != 1:
        raise StructuralError(f"{name} must be a vector")
    if f.min() < -1e-10 or abs(f.sum() - 1.0) > 1e-8:
        raise StructuralError(f"{name} is not a proper pmf")
    return np.clip(f, 0.0, None)


def tv_distance(f, g):
    """Total variation distance and a minimal-disagreement coupling.

    Returns ``(tv, Coupling)`` where the coupling keeps ``min(f, g)`` on the
    diagonal and matches the excesses off-diagonal greedily, so its
    off-diagonal mass equals the TV distance exactly.
    """
    f = _check_pmf(f, "f")
    g = _check_pmf(g, "g")
    if f.shape != g.shape:
        raise StructuralError("pmfs live on different grids")
    overlap = np.minimum(f, g)
    tv = float(np.clip(f - g, 0.0, None).sum())
    q = len(f)
    mat = np.zeros((q, q))
    np.fill_diagonal(mat, overlap)
    r = f - overlap
    s = (g - overlap).copy()
    j = 0
    for i in range(q):
        need = r[i]
        while need > _TOL and j < q:
            put = min(need, s[j])
            if put > 0.0:
                mat[i, j] += put
                s[j] -= put
                need -= put
            if s[j] <= _TOL:
                j += 1
        if need > _TOL and j >= q:  # pragma: no cover - excesses always balance
            raise StructuralError("coupling excess mass did not balance")
    return tv, Coupling(mat)


@dataclass(frozen=True)
class PrimitiveDistribution:
    """Explicit distribution over types and potential outcomes.

    ``joints[(l, k)][c]`` is the joint pmf of ``(Y(1, m_c), Y(0, m_c))``
    given type (l, k), over the outcome grid; the treatment indicator is
    independent of everything by construction.
    """

    support: object
    outcome_levels: tuple
    theta: np.ndarray
    joints: dict

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        K = theta.shape[0]
        if theta.shape != (K, K) or theta.min() < -1e-10 or abs(theta.sum() - 1.0) > 1e-8:
            raise StructuralError("type shares are not a proper simplex point")
        q = len(self.outcome_levels)
        for g, coords in self.joints.items():
            for c, mat in coords.items():
                m = np.asarray(mat, dtype=float)
                if m.shape != (q, q) or m.min() < -1e-10 or abs(m.sum() - 1.0) > 1e-8:
                    raise StructuralError(f"joint for type {g} at coordinate {c} is not a pmf")
        object.__setattr__(self, "theta", theta)

    def disagreement(self, k):
        """P(Y(1, m_k) != Y(0, m_k) | G = kk)."""
        return Coupling(self.joints[(k, k)][k]).disagreement


def _diag(f):
    m = np.zeros((len(f), len(f)))
    np.fill_diagonal(m, f)
    return m


def _degenerate(q):
    m = np.zeros((q, q))
    m[0, 0] = 1.0
    return m


def _normalized(f, fallback_q):
    total = f.sum()
    if total <= _TOL:
        out = np.zeros(fallback_q)
        out[0] = 1.0
        return out
    return f / total


def construct_sharp_distribution(table: DistTable, theta) -> PrimitiveDistribution:
    """Build a primitive distribution matching ``table`` with shares ``theta``.

    ``theta`` must satisfy the marginal-matching equalities of the table
    (checked; violations raise ``StructuralError`` naming the constraint).
    The always-taker disagreement at each k equals
    ``(gap_k - complier mass into k)_+ / theta_kk``; compliers and
    off-support coordinates never respond.  Free copulas are fixed to the
    diagonal (comonotone) choice, and off-support coordinates are
    degenerate at the lowest grid point.
    """
    K = table.n_mediators
    Q = table.n_outcomes
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (K, K):
        raise StructuralError("theta must be K x K")
    A, b = marginal_equalities(table.support, table.marginal_m(0), table.marginal_m(1))
    resid = A @ theta.reshape(-1) - b
    if theta.min() < -1e-9 or np.abs(resid).max() > 1e-9:
        bad = int(np.abs(resid).argmax())
        raise StructuralError(
            f"theta is outside the identified set (marginal constraint {bad}, "
            f"residual {resid[bad]:+.3g})"
        )
    f1_all = table.mass[1]
    f0_all = table.mass[0]
    p1 = table.marginal_m(1)
    p0 = table.marginal_m(0)
    # Marginal pmfs per coordinate and type: y1_density[k][l] is the pmf of
    # Y(1, m_k) | G = lk; y0_density[k][l] is the pmf of Y(0, m_k) | G = kl.
    y1_density = [[None] * K for _ in range(K)]
    y0_density = [[None] * K for _ in range(K)]
    for k in range(K):
        f1 = f1_all[k]
        f0 = f0_all[k]
        base1 = _normalized(f1, Q)
        base0 = _normalized(f0, Q)
        t_kk = theta[k, k]
        compliers_in = theta[:, k].sum() - t_kk
        gap = float(np.clip(f1 - f0, 0.0, None).sum())
        eta = max(gap - compliers_in, 0.0)
        fmin = np.minimum(f1, f0)
        if t_kk <= _TOL or (eta > _TOL and fmin.sum() <= _TOL):
            # No always-takers, or an excess with disjoint arm supports:
            # every type shares the raw conditional distribution.
            for l in range(K):
                y1_density[k][l] = base1
                y0_density[k][l] = base0
        elif eta > _TOL and (f0 - fmin).sum() > _TOL:
            nu_star = min(eta / t_kk, 1.0)
            fmin_n = fmin / fmin.sum()
            g1 = _normalized(f1 - fmin, Q)
            g0 = _normalized(f0 - fmin, Q)
            for l in range(K):
                if l == k:
                    y1_density[k][l] = (1 - nu_star) * fmin_n + nu_star * g1
                    y0_density[k][l] = (1 - nu_star) * fmin_n + nu_star * g0
                else:
                    y1_density[k][l] = g1
                    y0_density[k][l] = g0
        else:
            # No excess: always-takers sit on the normalized overlap.
            fmin_n = fmin / fmin.sum()
            spill1 = np.clip(f1 - t_kk * fmin_n, 0.0, None)
            spill0 = np.clip(f0 - t_kk * fmin_n, 0.0, None)
            g1 = _normalized(spill1, Q)
            g0 = _normalized(spill0, Q)
            for l in range(K):
                if l == k:
                    y1_density[k][l] = fmin_n
                    y0_density[k][l] = fmin_n
                else:
                    y1_density[k][l] = g1
                    y0_density[k][l] = g0
    joints = {}
    for l in range(K):
        for k in range(K):
            coords = {}
            for c in range(K):
                if c == k and l == k:
                    if theta[k, k] <= _TOL:
                        # zero-mass type: any proper joint works; stay diagonal
                        coords[c] = _diag(y1_density[k][k])
                    else:
                        _, coupling = tv_distance(y1_density[k][k], y0_density[k][k])
                        coords[c] = coupling.matrix
                elif c == k:
                    coords[c] = _diag(y1_density[k][l])
                elif c == l:
                    coords[c] = _diag(y0_density[l][k])
                else:
                    coords[c] = _degenerate(Q)
            joints[(l, k)] = coords
    return PrimitiveDistribution(
        support=table.support,
        outcome_levels=table.outcome_levels,
        theta=theta,
        joints=joints,
    )


@dataclass(frozen=True)
class ConsistencyReport:
    """Cellwise comparison of a primitive distribution to a table."""

    max_abs_deviation: float
    implied_mass: np.ndarray
    disagreement: tuple
    complier_disagreement: float


def verify_consistency(p: PrimitiveDistribution, table: DistTable) -> ConsistencyReport:
    """Marginalize ``p`` back to observables and compare cellwise.

    Also reports the per-k always-taker disagreement probabilities and the
    largest disagreement across complier types and off-support coordinates
    (which should be exactly zero by construction).
    """
    K = table.n_mediators
    Q = table.n_outcomes
    implied = np.zeros((2, K, Q))
    for k in range(K):
        for l in range(K):
            joint_k = np.asarray(p.joints[(l, k)][k])
            implied[1, k] += p.theta[l, k] * joint_k.sum(axis=1)
            joint_l = np.asarray(p.joints[(k, l)][k])
            implied[0, k] += p.theta[k, l] * joint_l.sum(axis=0)
    dev = float(np.abs(implied - table.mass).max())
    disagreement = tuple(p.disagreement(k) for k in range(K))
    worst_complier = 0.0
    for (l, k), coords in p.joints.items():
        for c, mat in coords.items():
            if l == k and c == k:
                continue
            worst_complier = max(worst_complier, Coupling(mat).disagreement)
    return ConsistencyReport(
        max_abs_deviation=dev,
        implied_mass=implied,
        disagreement=disagreement,
        complier_disagreement=worst_complier,
    )


def eta_over_theta(table: DistTable, theta) -> np.ndarray:
    """Target always-taker disagreement ``eta_k / theta_kk`` (0 when empty)."""
    K = table.n_mediators
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(K)
    for k in range(K):
        t_kk = theta[k, k]
        if t_kk <= _TOL:
            continue
        compliers_in = theta[:, k].sum() - t_kk
        out[k] = max(delta_sup(table, k) - compliers_in, 0.0) / t_kk
    return out
