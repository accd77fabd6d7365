"""Numerical checks on the margin loss over the (D_same, D_diff) plane.

``L(D_same, D_diff) = D_same**2 + max(0, m - D_diff**2)``.  At the hinge kink
``D_diff**2 == m`` the derivative of the inactive branch (0) is used.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode_batched

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class LossSurfacePoint:
    d_same: float
    d_diff: float
    value: float
    grad: tuple[float, float]


def same_term(d: float) -> float:
    return d * d


def diff_term(d: float, m: float) -> float:
    sq = d * d
    return m - sq if sq < m else 0.0


def surface(d_same: float, d_diff: float, m: float) -> LossSurfacePoint:
    if d_same < 0 or d_diff < 0:
        raise ValueError("distances must be non-negative")
    g_diff = -2.0 * d_diff if d_diff * d_diff < m else 0.0
    return LossSurfacePoint(d_same, d_diff, same_term(d_same) + diff_term(d_diff, m), (2.0 * d_same, g_diff))


# ---------------------------------------------------------------------------
# boundary gradient condition
# ---------------------------------------------------------------------------

@dataclass
class BoundaryCheck:
    passed: bool
    worst: float  # smallest (-grad) . (-1, 1) over the grid
    worst_point: tuple[float, float]
    points: int


def boundary_grid(m: float, m_sep: float, size: int = 100) -> np.ndarray:
    """``size`` points on D_diff = D_same + m_sep with D_same in (0, 3 sqrt(m)]."""
    d_same = 3.0 * math.sqrt(m) * np.arange(1, size + 1) / size
    return np.stack([d_same, d_same + m_sep], axis=1)


def boundary_gradient_check(m: float, m_sep: float, size: int = 100) -> BoundaryCheck:
    """The negative loss gradient must point into the separated side: (-g) . (-1, 1) > 0."""
    if not (m > 0 and m_sep > 0):
        raise ValueError("m and m_sep must be positive")
    worst, where = math.inf, (math.nan, math.nan)
    pts = boundary_grid(m, m_sep, size)
    for ds, dd in pts:
        gs, gd = surface(float(ds), float(dd), m).grad
        dot = gs - gd  # (-gs, -gd) . (-1, 1)
        if dot < worst:
            worst, where = dot, (float(ds), float(dd))
    return BoundaryCheck(worst > 0, worst, where, len(pts))


# ---------------------------------------------------------------------------
# minimiser along the boundary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Minimizer:
    d_star: float
    value: float
    closed_form: float | None  # sqrt(m) - m_sep when m > m_sep**2


def restricted_loss(d: float, m: float, m_sep: float) -> float:
    return same_term(d) + diff_term(d + m_sep, m)


def _golden(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def boundary_minimizer(m: float, m_sep: float, grid: int = 2001) -> Minimizer:
    """Grid search then golden-section refinement of L(D, D + m_sep) over D >= 0."""
    if not (m > 0 and m_sep > 0):
        raise ValueError("feasible range is empty: m and m_sep must be positive")
    hi = 3.0 * math.sqrt(m) + m_sep
    xs = np.linspace(0.0, hi, grid)
    vals = [restricted_loss(float(x), m, m_sep) for x in xs]
    k = int(np.argmin(vals))
    lo_b, hi_b = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]
    d = _golden(lambda x: restricted_loss(x, m, m_sep), float(lo_b), float(hi_b))
    if restricted_loss(0.0, m, m_sep) <= restricted_loss(d, m, m_sep) and k == 0:
        d = 0.0
    closed = math.sqrt(m) - m_sep if m > m_sep * m_sep else None
    return Minimizer(d, restricted_loss(d, m, m_sep), closed)


# ---------------------------------------------------------------------------
# convexity probe
# ---------------------------------------------------------------------------

@dataclass
class ConvexityProbe:
    violation_fraction: float
    samples: int
    witnesses: list[tuple[tuple[float, float], tuple[float, float], float, float]] = field(default_factory=list)


def _component(component: str, m: float):
    if component == "full":
        return lambda p: same_term(p[0]) + diff_term(p[1], m)
    if component == "same":
        return lambda p: same_term(p[0])
    if component == "diff":
        return lambda p: diff_term(p[1], m)
    raise ValueError(f"unknown component {component!r}")


def midpoint_gap(p, q, m: float, component: str = "full") -> tuple[float, float]:
    """(L(midpoint), mean of endpoint values); convexity needs the first <= the second."""
    f = _component(component, m)
    mid = ((p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0)
    return f(mid), (f(p) + f(q)) / 2.0


def convexity_probe(m: float, samples: int = 10000, seed: int = 0, component: str = "full",
                    extent: float | None = None, max_witnesses: int = 10) -> ConvexityProbe:
    """Monte-Carlo midpoint-convexity test on random point pairs in [0, extent]^2."""
    if not m > 0:
        raise ValueError("m must be positive")
    extent = 2.0 * math.sqrt(m) if extent is None else extent
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, extent, size=(samples, 2, 2))
    bad, witnesses = 0, []
    for p, q in pts:
        p, q = (float(p[0]), float(p[1])), (float(q[0]), float(q[1]))
        mid, avg = midpoint_gap(p, q, m, component)
        if mid > avg + 1e-12 * max(1.0, abs(avg)):
            bad += 1
            if len(witnesses) < max_witnesses:
                witnesses.append((p, q, mid, avg))
    return ConvexityProbe(bad / samples, samples, witnesses)


# ---------------------------------------------------------------------------
# separation on real codes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Feasibility:
    max_same: float
    min_diff: float
    m_sep: float | None  # None when undefined (no positives or no negatives)

    @property
    def feasible(self) -> bool:
        return self.m_sep is not None and self.m_sep > 0


def separation_margin(codes: np.ndarray, labels, template_codes: np.ndarray) -> Feasibility:
    """min over negatives of D_diff minus max over positives of D_same."""
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels)
    tc = np.asarray(template_codes, dtype=np.float64)
    if not len(codes):
        return Feasibility(math.nan, math.nan, None)
    dist = np.sqrt(((codes[:, None, :] - tc[None]) ** 2).sum(-1))
    own = np.zeros(dist.shape, dtype=bool)
    own[np.arange(len(labels)), labels] = True
    present = np.unique(labels)
    neg = ~own & np.isin(np.arange(tc.shape[0]), present)[None, :]
    max_same = float(dist[own].max())
    if len(present) < 2 or not neg.any():
        return Feasibility(max_same, math.nan, None)
    min_diff = float(dist[neg].min())
    return Feasibility(max_same, min_diff, min_diff - max_same)


def constraint1_feasibility(encoder, codebook, images) -> Feasibility:
    """Empirical separation margin of a trained encoder on a sample of images.

    Negatives are the templates of the other classes present in the sample.
    """
    if not images:
        return Feasibility(math.nan, math.nan, None)
    codes = encode_batched(encoder, np.stack([im.pixels for im in images]))
    return separation_margin(codes, [im.class_id for im in images], codebook.codes)


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

M_GRID = (1.0, 6.25, 25.0)
SEP_GRID = (0.1, 0.5, 1.0)


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: str
    informational: bool = False


def surface_fd_error(m: float, points, h: float = 1e-6) -> float:
    """Worst absolute gap between analytic gradients and central differences."""
    worst = 0.0
    for ds, dd in points:
        g = surface(ds, dd, m).grad
        num_s = (surface(ds + h, dd, m).value - surface(ds - h, dd, m).value) / (2 * h)
        num_d = (surface(ds, dd + h, m).value - surface(ds, dd - h, m).value) / (2 * h)
        worst = max(worst, abs(g[0] - num_s), abs(g[1] - num_d))
    return worst


def theory_suite(grid: int = 100, seed: int = 0) -> list[CheckOutcome]:
    out = []
    for m in M_GRID:
        for s in SEP_GRID:
            res = boundary_gradient_check(m, s, grid)
            out.append(CheckOutcome(f"boundary_gradient[m={m:g},m_sep={s:g}]", res.passed,
                                    f"worst dot={res.worst:.6g} at {res.worst_point}"))
            mini = boundary_minimizer(m, s)
            if mini.closed_form is not None:
                err = abs(mini.d_star - mini.closed_form)
                out.append(CheckOutcome(f"boundary_minimizer[m={m:g},m_sep={s:g}]", err <= 1e-6,
                                        f"D*={mini.d_star:.9f} closed form={mini.closed_form:.9f} err={err:.2e}"))
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < 200:
        ds, dd = rng.uniform(0.05, 5.0, size=2)
        if abs(dd * dd - 6.25) > 1e-2:
            pts.append((float(ds), float(dd)))
    err = surface_fd_error(6.25, pts)
    out.append(CheckOutcome("surface_gradient_fd", err <= 1e-8, f"worst abs error {err:.2e}"))
    mid, avg = midpoint_gap((0.0, 0.0), (0.0, 2.5), 6.25, "diff")
    out.append(CheckOutcome("convexity_witness[D=0,2.5,m=6.25]", mid > avg,
                            f"f(midpoint)={mid:g} > mean={avg:g}"))
    same = convexity_probe(6.25, 2000, seed, "same")
    out.append(CheckOutcome("convexity_same_term", same.violation_fraction == 0.0,
                            f"violations={same.violation_fraction:.4f}"))
    full = convexity_probe(6.25, 5000, seed, "full")
    out.append(CheckOutcome("convexity_probe_full", full.violation_fraction > 0.0,
                            f"violation fraction={full.violation_fraction:.4f} (convexity premise fails; informational)",
                            informational=True))
    return out
