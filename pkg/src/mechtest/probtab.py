"""Joint (outcome, mediator) distributions under each treatment arm.

The central object is :class:`DistTable`, the conditional pmf of ``(Y, M)``
given each arm over a finite mediator support and a discrete outcome grid.
Outcome values are compared exactly, so continuous outcomes must pass
through :func:`discretize_outcome` before anything downstream touches them.
Cells that receive no data carry mass zero rather than being dropped, which
keeps indices stable for the moment-system builder.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, StructuralError

MASS_TOL = 1e-9


@dataclass(frozen=True)
class MediatorSupport:
    """Ordered registry of the K mediator support points (each p-dimensional).

    ``totally_ordered`` marks a scalar support sorted strictly increasing;
    multi-dimensional supports use the elementwise partial order.
    """

    points: tuple
    totally_ordered: bool = False

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in np.atleast_1d(p)) for p in self.points)
        if not pts:
            raise StructuralError("mediator support is empty")
        dim = len(pts[0])
        if any(len(p) != dim for p in pts):
            raise StructuralError("mediator points have mixed dimensions")
        if len(set(pts)) != len(pts):
            raise StructuralError("mediator support points must be distinct")
        if self.totally_ordered:
            if dim != 1:
                raise StructuralError("total order requires scalar mediators")
            vals = [p[0] for p in pts]
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise StructuralError("totally ordered support must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def k(self):
        return len(self.points)

    @property
    def dim(self):
        return len(self.points[0])

    def index(self, point):
        key = tuple(float(v) for v in np.atleast_1d(point))
        try:
            return self.points.index(key)
        except ValueError:
            raise StructuralError(f"mediator value {key} is not registered in the support")

    def elementwise_leq(self, l, k):
        a, b = self.points[l], self.points[k]
        return all(x <= y for x, y in zip(a, b))

    def distance(self, l, k):
        a, b = np.asarray(self.points[l]), np.asarray(self.points[k])
        return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class DistTable:
    """``mass[d, k, q] = P(Y = y_q, M = m_k | arm d)`` plus sample sizes.

    ``n_units``/``n_clusters`` record how many independent observations per
    arm produced the estimate (None for population-level tables).
    """

    support: MediatorSupport
    outcome_levels: tuple
    mass: np.ndarray
    n_units: tuple = None
    n_clusters: tuple = None

    def __post_init__(self):
        levels = tuple(float(y) for y in self.outcome_levels)
        if len(set(levels)) != len(levels):
            raise StructuralError("outcome levels must be distinct")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise StructuralError("outcome levels must be sorted increasing")
        mass = np.asarray(self.mass, dtype=float)
        if mass.shape != (2, self.support.k, len(levels)):
            raise StructuralError(
                f"mass has shape {mass.shape}, expected {(2, self.support.k, len(levels))}"
            )
        if mass.min() < -1e-12:
            raise StructuralError("negative probability mass")
        mass = np.clip(mass, 0.0, None)
        for d in (0, 1):
            total = mass[d].sum()
            if abs(total - 1.0) > MASS_TOL:
                raise StructuralError(f"arm {d} mass sums to {total}, not 1")
        mass.flags.writeable = False
        object.__setattr__(self, "outcome_levels", levels)
        object.__setattr__(self, "mass", mass)

    @property
    def n_mediators(self):
        return self.support.k

    @property
    def n_outcomes(self):
        return len(self.outcome_levels)

    def marginal_m(self, d):
        """P(M = m_k | arm d) for all k."""
        return self.mass[d].sum(axis=1)

    def cond_outcome(self, d, k):
        """pmf of Y | M = m_k, arm d (zeros if the cell is empty)."""
        cell = self.mass[d, k]
        total = cell.sum()
        if total <= 0.0:
            return np.zeros_like(cell)
        return cell / total


@dataclass(frozen=True)
class RecordSet:
    """Unit records ``(y, m, d)`` with optional cluster / instrument / pscore."""

    y: np.ndarray
    m: np.ndarray
    d: np.ndarray
    cluster: np.ndarray = None
    z: np.ndarray = None
    pscore: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        m = np.asarray(self.m, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        d = np.asarray(self.d)
        n = y.shape[0]
        if y.ndim != 1 or m.shape[0] != n or d.shape != (n,):
            raise StructuralError("record arrays have inconsistent lengths")
        if not np.isin(d, (0, 1)).all():
            raise StructuralError("treatment column must be binary 0/1")
        d = d.astype(int)
        cluster = self.cluster
        if cluster is not None:
            cluster = np.asarray(cluster)
            if cluster.shape != (n,):
                raise StructuralError("cluster column length mismatch")
        z = self.z
        if z is not None:
            z = np.asarray(z)
            if z.shape != (n,) or not np.isin(z, (0, 1)).all():
                raise StructuralError("instrument column must be binary 0/1")
            z = z.astype(int)
        pscore = self.pscore
        if pscore is not None:
            pscore = np.asarray(pscore, dtype=float)
            if pscore.shape != (n,):
                raise StructuralError("pscore column length mismatch")
        for name, arr in (("y", y), ("m", m), ("pscore", pscore)):
            if arr is not None and not np.isfinite(arr).all():
                raise StructuralError(f"non-finite values in column {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "pscore", pscore)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def mediator_dim(self):
        return self.m.shape[1]

    def subset(self, mask):
        return RecordSet(
            y=self.y[mask],
            m=self.m[mask],
            d=self.d[mask],
            cluster=None if self.cluster is None else self.cluster[mask],
            z=None if self.z is None else self.z[mask],
            pscore=None if self.pscore is None else self.pscore[mask],
        )


def read_csv(path) -> RecordSet:
    """Load records from a CSV file.

    Header row required.  Columns: ``y``, ``d`` (mandatory), mediators
    ``m1..mp``, optional ``cluster``, ``z``, ``pscore``.  Any malformed row
    is a hard error naming the offending line.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StructuralError(f"{path}: empty file")
        header = [h.strip() for h in header]
        for col in ("y", "d"):
            if col not in header:
                raise StructuralError(f"{path}: missing required column '{col}'")
        m_cols = sorted(
            (h for h in header if h.startswith("m") and h[1:].isdigit()),
            key=lambda h: int(h[1:]),
        )
        if not m_cols:
            raise StructuralError(f"{path}: no mediator columns m1..mp found")
        expected = [f"m{i + 1}" for i in range(len(m_cols))]
        if m_cols != expected:
            raise StructuralError(f"{path}: mediator columns must be contiguous m1..mp, got {m_cols}")
        idx = {h: header.index(h) for h in header}
        rows_y, rows_m, rows_d = [], [], []
        rows_c, rows_z, rows_p = [], [], []
        has_cluster = "cluster" in header
        has_z = "z" in header
        has_p = "pscore" in header
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise StructuralError(f"{path}: line {ln}: expected {len(header)} fields, got {len(row)}")
            try:
                rows_y.append(float(row[idx["y"]]))
                rows_d.append(int(float(row[idx["d"]])))
                rows_m.append([float(row[idx[c]]) for c in m_cols])
                if has_cluster:
                    rows_c.append(row[idx["cluster"]].strip())
                if has_z:
                    rows_z.append(int(float(row[idx["z"]])))
                if has_p:
                    rows_p.append(float(row[idx["pscore"]]))
            except ValueError as exc:
                raise StructuralError(f"{path}: line {ln}: {exc}")
    try:
        return RecordSet(
            y=np.array(rows_y),
            m=np.array(rows_m),
            d=np.array(rows_d),
            cluster=np.array(rows_c) if has_cluster else None,
            z=np.array(rows_z) if has_z else None,
            pscore=np.array(rows_p) if has_p else None,
        )
    except StructuralError as exc:
        raise StructuralError(f"{path}: {exc}")


def support_from_values(m, totally_ordered=None) -> MediatorSupport:
    """Common support registry for observed mediator rows.

    Scalar supports are sorted increasing and flagged totally ordered
    (mediator values seen in only one arm are registered in the same common
    sorted support); vector supports keep lexicographic order and rely on
    the elementwise partial order.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    uniq = sorted({tuple(row) for row in m})
    if totally_ordered is None:
        totally_ordered = m.shape[1] == 1
    return MediatorSupport(points=tuple(uniq), totally_ordered=totally_ordered)


def from_records(records: RecordSet, support=None, outcome_levels=None) -> DistTable:
    """Empirical DistTable: cell frequencies within each arm.

    Raises ``EstimationError`` if either arm has no rows and
    ``StructuralError`` if a mediator value is missing from a caller-supplied
    support.
    """
    n1 = int((records.d == 1).sum())
    n0 = records.n - n1
    if n0 == 0 or n1 == 0:
        raise EstimationError(f"need rows in both arms (n0={n0}, n1={n1})")
    if support is None:
        support = support_from_values(records.m)
    if outcome_levels is None:
        outcome_levels = tuple(sorted(set(records.y.tolist())))
    levels = {y: q for q, y in enumerate(outcome_levels)}
    mass = np.zeros((2, support.k, len(outcome_levels)))
    k_of = np.array([support.index(row) for row in records.m])
    for i in range(records.n):
        try:
            q = levels[records.y[i]]
        except KeyError:
            raise StructuralError(f"outcome value {records.y[i]} not in outcome levels")
        mass[records.d[i], k_of[i], q] += 1.0
    mass[0] /= n0
    mass[1] /= n1
    n_clusters = None
    if records.cluster is not None:
        n_clusters = (
            len(set(records.cluster[records.d == 0].tolist())),
            len(set(records.cluster[records.d == 1].tolist())),
        )
    return DistTable(
        support=support,
        outcome_levels=outcome_levels,
        mass=mass,
        n_units=(n0, n1),
        n_clusters=n_clusters,
    )


def delta_sup(table: DistTable, k: int) -> float:
    """Largest treatment-arm gap in P(Y in A, M = m_k) over outcome sets A.

    Equals the positive-part sum over outcome cells, which attains the sup
    at A = {y : cell gap > 0}.
    """
    if not 0 <= k < table.n_mediators:
        raise StructuralError(f"mediator index {k} out of range")
    diff = table.mass[1, k] - table.mass[0, k]
    return float(np.clip(diff, 0.0, None).sum())


def quantile_cutpoints(values, n_bins: int):
    """Cutpoints at pooled empirical quantiles i/n_bins (duplicates merged)."""
    if n_bins < 1:
        raise StructuralError("need at least one bin")
    vals = np.sort(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise StructuralError("no values to compute quantiles from")
    cuts = []
    for i in range(1, n_bins):
        u = i / n_bins
        # Left-continuous inverse cdf: smallest value with F(y) >= u.
        idx = int(np.ceil(u * vals.size)) - 1
        cuts.append(vals[max(idx, 0)])
    cuts = sorted(set(cuts))
    return tuple(float(c) for c in cuts)


def bin_index(values, cutpoints):
    """Right-closed binning: y goes to bin #{c in cutpoints : y > c}."""
    return np.searchsorted(np.asarray(cutpoints, dtype=float), np.asarray(values, dtype=float), side="left")


def discretize_outcome(table: DistTable, cutpoints) -> DistTable:
    """Collapse outcome levels into the intervals cut at ``cutpoints``.

    Intervals are right-closed (ties land in the lower bin) and each
    nonempty interval is labeled by the smallest original level it
    contains, so re-discretizing with the same cutpoints is a no-op.
    """
    cuts = tuple(float(c) for c in cutpoints)
    if len(cuts) == 0:
        raise StructuralError("empty interval set")
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise StructuralError("cutpoints must be strictly increasing")
    levels = np.asarray(table.outcome_levels)
    bins = bin_index(levels, cuts)
    new_levels = []
    new_cols = []
    for b in sorted(set(bins.tolist())):
        members = np.nonzero(bins == b)[0]
        new_levels.append(float(levels[members].min()))
        new_cols.append(table.mass[:, :, members].sum(axis=2))
    mass = np.stack(new_cols, axis=2)
    return DistTable(
        support=table.support,
        outcome_levels=tuple(new_levels),
        mass=mass,
        n_units=table.n_units,
        n_clusters=table.n_clusters,
    )


def bin_mediator(table: DistTable, assignment: dict, nu_max: float):
    """Coarsen the mediator into bins; returns ``(binned table, nu_max)``.

    ``assignment`` maps every support point (tuple) to a bin index.
    ``nu_max`` is the allowed within-bin response share; it is passed
    through so downstream reports can compare coarsened lower bounds
    against it rather than against zero.
    """
    if not 0.0 <= nu_max <= 1.0:
        raise StructuralError("nu_max must lie in [0, 1]")
    norm = {}
    for key, b in assignment.items():
        norm[tuple(float(v) for v in np.atleast_1d(key))] = int(b)
    for p in table.support.points:
        if p not in norm:
            raise StructuralError(f"support point {p} has no bin assignment")
    bins = sorted(set(norm.values()))
    pos = {b: i for i, b in enumerate(bins)}
    mass = np.zeros((2, len(bins), table.n_outcomes))
    for k, p in enumerate(table.support.points):
        mass[:, pos[norm[p]], :] += table.mass[:, k, :]
    order_ok = table.support.totally_ordered
    if order_ok:
        seq = [norm[p] for p in table.support.points]
        order_ok = all(a <= b for a, b in zip(seq, seq[1:]))
    support = MediatorSupport(
        points=tuple((float(b),) for b in bins),
        totally_ordered=order_ok,
    )
    binned = DistTable(
        support=support,
        outcome_levels=table.outcome_levels,
        mass=mass,
        n_units=table.n_units,
        n_clusters=table.n_clusters,
    )
    return binned, float(nu_max)
