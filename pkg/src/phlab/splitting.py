"""Pointwise invariant splitting E^uu + E^c + E^ss and expansion rates.

The three line bundles are recovered by power iteration of the tangent
cocycle: E^uu from pushing a seed vector forward along a backward orbit,
E^ss from pulling a seed backward along a forward orbit, and E^c as the
intersection of the forward-iterated (uu,c) 2-plane with the
backward-iterated (c,ss) 2-plane.  Everything is batch-first: `points` may
be shaped (B, 3) and the per-point results come back as arrays.

Seeds are fixed, not random, so repeated runs give identical frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateFrameError,
    NoSeparationError,
    NotDominatedError,
    ScaleExceededError,
)
from .torus import TorusMap, wrap

# deterministic, intentionally generic seeds for the power iteration
_SEED_VEC = np.array([0.862, 0.443, 0.247])
_SEED_PLANE = np.array([[0.862, -0.31], [0.443, 0.77], [0.247, 0.41]])

_MIN_FRAME_DET = 0.1
_CONVERGENCE_ANGLE = 1e-12


def line_angle(u, v):
    """Angle between the lines spanned by u and v (sign-insensitive).

    Uses atan2 of the cross/dot pair, which stays accurate down to angles
    of order machine epsilon, unlike arccos.
    """
    un = u / np.linalg.norm(u, axis=-1, keepdims=True)
    vn = v / np.linalg.norm(v, axis=-1, keepdims=True)
    dot = np.abs(np.sum(un * vn, axis=-1))
    crs = np.linalg.norm(np.cross(un, vn), axis=-1)
    return np.arctan2(crs, dot)


@dataclass(frozen=True)
class FrameBatch:
    """Splitting data at a batch of points (arrays share leading shape)."""

    points: np.ndarray      # (B,3) wrapped base points
    e_uu: np.ndarray        # (B,3) unit vectors
    e_c: np.ndarray
    e_ss: np.ndarray
    rates: np.ndarray       # (B,3) one-step factors |Df e_*|, order uu,c,ss
    frame_det: np.ndarray   # (B,) det [e_uu e_c e_ss]
    last_angle_step: float  # convergence indicator of the final sweep

    @property
    def rate_uu(self):
        return self.rates[..., 0]

    @property
    def rate_c(self):
        return self.rates[..., 1]

    @property
    def rate_ss(self):
        return self.rates[..., 2]


@dataclass(frozen=True)
class SplittingFrame:
    """Splitting at a single point, with the invariance defect measured."""

    base: np.ndarray
    e_uu: np.ndarray
    e_c: np.ndarray
    e_ss: np.ndarray
    rate_uu: float
    rate_c: float
    rate_ss: float
    residual: float


@dataclass(frozen=True)
class DominationReport:
    n: int
    worst_ratio_uu_c: float
    worst_ratio_c_ss: float
    sample_size: int


@dataclass(frozen=True)
class RateBounds:
    """Empirical sup/inf of the one-step rates over a sample.

    ss_sup bounds the stable contraction from above, uu_inf the strong
    expansion from below, and (c_inf, c_sup) bracket the center factor.
    """

    ss_sup: float
    c_inf: float
    c_sup: float
    uu_inf: float

    def as_tuple(self):
        return (self.ss_sup, self.c_inf, self.c_sup, self.uu_inf)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _batched_matvec(m, v):
    return np.einsum("...ij,...j->...i", m, v)


def _batched_matvec_t(m, v):
    return np.einsum("...ji,...j->...i", m, v)


def _orient(tmap, vec, col):
    """Fix the sign of a direction field against the reference eigenframe."""
    ref = tmap.reference_directions
    sgn = np.sign(np.sum(vec * ref[:, col], axis=-1))
    sgn = np.where(sgn == 0.0, 1.0, sgn)
    return vec * sgn[..., None]


def compute_directions(tmap: TorusMap, points, budget: int, need=("uu", "c", "ss")):
    """Power-iterated bundle directions, computing only what is asked for.

    e_uu pushes a seed forward along the backward orbit; e_ss pulls one
    backward along the forward orbit; e_c is the intersection of the cu and
    cs planes, obtained through their normal covectors (annihilators), which
    are themselves power iterates of the adjoint cocycle.  Returns a dict
    mapping names to (B,3) unit fields, plus '_last_uu_step' when uu is
    requested.
    """
    pts = wrap(np.atleast_2d(np.asarray(points, dtype=float)))
    n = budget
    shape = pts.shape[:-1]
    seed = np.broadcast_to(_SEED_VEC, shape + (3,)).copy()
    out = {}

    jac_bwd = []
    if "uu" in need or "c" in need:
        q = pts
        for _ in range(n):
            q = tmap.apply_inverse(q)
            jac_bwd.append(tmap.jacobian(q))
    jac_fwd = []
    if "ss" in need or "c" in need:
        q = pts
        for _ in range(n):
            jac_fwd.append(tmap.jacobian(q))
            q = tmap.apply(q)

    if "uu" in need:
        v = seed.copy()
        prev = None
        for k in range(n - 1, -1, -1):
            v = _normalize(_batched_matvec(jac_bwd[k], v))
            if k == 1:
                prev = v.copy()
        out["_last_uu_step"] = (
            float(np.max(line_angle(prev, v))) if prev is not None else np.inf
        )
        out["uu"] = _orient(tmap, v, 0)

    if "ss" in need:
        w = seed.copy()
        for k in range(n - 1, -1, -1):
            w = _normalize(_batched_matvec(tmap_jac_inv(jac_fwd[k]), w))
        out["ss"] = _orient(tmap, w, 2)

    if "c" in need:
        # annihilator of the cs-plane: dominant covector of the adjoint
        # cocycle pulled back along the forward orbit
        n_cs = seed.copy()
        for k in range(n - 1, -1, -1):
            n_cs = _normalize(_batched_matvec_t(jac_fwd[k], n_cs))
        # annihilator of the cu-plane: dominant covector of the inverse
        # adjoint pushed forward along the backward orbit
        n_cu = seed.copy()
        for k in range(n - 1, -1, -1):
            n_cu = _normalize(_batched_matvec_t(tmap_jac_inv(jac_bwd[k]), n_cu))
        e_c = np.cross(n_cu, n_cs)
        norm_c = np.linalg.norm(e_c, axis=-1)
        if np.any(norm_c < 1e-8):
            raise DegenerateFrameError("cu/cs plane intersection is ill-defined")
        out["c"] = _orient(tmap, e_c / norm_c[..., None], 1)

    out["_points"] = pts
    out["_jac0"] = jac_fwd[0] if jac_fwd else tmap.jacobian(pts)
    return out


def tmap_jac_inv(jac):
    """Inverse of a (...,3,3) Jacobian stack via the adjugate (det == 1)."""
    from .torus import _adjugate_batch, jacobian_det

    return _adjugate_batch(jac) / jacobian_det(jac)[..., None, None]


def bundle_frames(tmap: TorusMap, points, budget: int = 32) -> FrameBatch:
    """Compute the full splitting at each point by cocycle power iteration.

    `budget` is the number of forward and backward orbit steps.  The sweep
    always runs the full budget; the returned `last_angle_step` reports how
    much the uu direction still moved on the final step (converged frames
    sit at ~1e-15).
    """
    if budget < 8:
        raise ValueError("power-iteration budget must be >= 8")
    d = compute_directions(tmap, points, budget, need=("uu", "c", "ss"))
    v_uu, e_c, v_ss = d["uu"], d["c"], d["ss"]
    jac0 = d["_jac0"]
    rates = np.stack(
        [
            np.linalg.norm(_batched_matvec(jac0, v_uu), axis=-1),
            np.linalg.norm(_batched_matvec(jac0, e_c), axis=-1),
            np.linalg.norm(_batched_matvec(jac0, v_ss), axis=-1),
        ],
        axis=-1,
    )
    frame = np.stack([v_uu, e_c, v_ss], axis=-1)
    det = np.linalg.det(frame)
    return FrameBatch(
        points=d["_points"],
        e_uu=v_uu,
        e_c=e_c,
        e_ss=v_ss,
        rates=rates,
        frame_det=det,
        last_angle_step=d["_last_uu_step"],
    )


def frame_residuals(tmap: TorusMap, points, budget: int = 32):
    """Invariance defect: angle between Df(x) e_*(x) and e_*(f(x)).

    Returns an (B,3) array of angles in radians (order uu, c, ss).
    """
    pts = wrap(np.atleast_2d(np.asarray(points, dtype=float)))
    here = bundle_frames(tmap, pts, budget)
    there = bundle_frames(tmap, tmap.apply(pts), budget)
    jac = tmap.jacobian(pts)
    res = []
    for a, b in ((here.e_uu, there.e_uu), (here.e_c, there.e_c), (here.e_ss, there.e_ss)):
        res.append(line_angle(_batched_matvec(jac, a), b))
    return np.stack(res, axis=-1)


def splitting_at(tmap: TorusMap, p, budget: int = 64) -> SplittingFrame:
    """Full splitting frame at one point, including the invariance residual.

    Raises DegenerateFrameError when the three directions nearly align and
    NoSeparationError when the rate ordering ss < c < uu (with ss < 1 < uu)
    fails after the budget.
    """
    p = wrap(np.asarray(p, dtype=float).reshape(3))
    fb = bundle_frames(tmap, p[None, :], budget)
    det = float(fb.frame_det[0])
    if abs(det) <= _MIN_FRAME_DET:
        raise DegenerateFrameError(f"frame determinant {det:.3e} below threshold")
    r_uu, r_c, r_ss = (float(fb.rates[0, k]) for k in range(3))
    if not (r_ss < r_c < r_uu and r_ss < 1.0 < r_uu):
        raise NoSeparationError(
            f"rates not separated after budget {budget}: "
            f"ss={r_ss:.4f} c={r_c:.4f} uu={r_uu:.4f}"
        )
    res = float(frame_residuals(tmap, p[None, :], budget).max())
    return SplittingFrame(
        base=p,
        e_uu=fb.e_uu[0],
        e_c=fb.e_c[0],
        e_ss=fb.e_ss[0],
        rate_uu=r_uu,
        rate_c=r_c,
        rate_ss=r_ss,
        residual=res,
    )


def certify_domination(tmap: TorusMap, sample, n_max: int, budget: int = 32) -> DominationReport:
    """Smallest power N <= n_max with both consecutive-bundle ratios <= 1/2.

    The ratios compare |Df^N v| for unit vectors in neighboring bundles;
    domination asks the weaker bundle to fall behind by a factor 2.
    """
    pts = wrap(np.atleast_2d(np.asarray(sample, dtype=float)))
    if pts.size == 0:
        raise ValueError("sample must be nonempty")
    if n_max < 1:
        raise NotDominatedError(f"no power N <= {n_max} available")
    fb = bundle_frames(tmap, pts, budget)
    v = {"uu": fb.e_uu.copy(), "c": fb.e_c.copy(), "ss": fb.e_ss.copy()}
    log_growth = {k: np.zeros(pts.shape[0]) for k in v}
    cur = pts
    for n in range(1, n_max + 1):
        jac = tmap.jacobian(cur)
        for k in v:
            img = _batched_matvec(jac, v[k])
            nrm = np.linalg.norm(img, axis=-1)
            log_growth[k] += np.log(nrm)
            v[k] = img / nrm[..., None]
        cur = tmap.apply(cur)
        ratio_uu_c = float(np.exp(log_growth["c"] - log_growth["uu"]).max())
        ratio_c_ss = float(np.exp(log_growth["ss"] - log_growth["c"]).max())
        if ratio_uu_c <= 0.5 and ratio_c_ss <= 0.5:
            return DominationReport(
                n=n,
                worst_ratio_uu_c=ratio_uu_c,
                worst_ratio_c_ss=ratio_c_ss,
                sample_size=pts.shape[0],
            )
    raise NotDominatedError(
        f"ratios still ({ratio_uu_c:.3f}, {ratio_c_ss:.3f}) at N={n_max}"
    )


def rate_bounds(tmap: TorusMap, sample, budget: int = 32) -> RateBounds:
    """Empirical rate envelope over the sample points."""
    pts = wrap(np.atleast_2d(np.asarray(sample, dtype=float)))
    if pts.size == 0:
        raise ValueError("sample must be nonempty")
    fb = bundle_frames(tmap, pts, budget)
    return RateBounds(
        ss_sup=float(fb.rate_ss.max()),
        c_inf=float(fb.rate_c.min()),
        c_sup=float(fb.rate_c.max()),
        uu_inf=float(fb.rate_uu.min()),
    )


def grid_sample(grid_n: int = 32):
    """Deterministic grid of points filling [0,1)^3."""
    xs = np.linspace(0.0, 1.0, grid_n, endpoint=False)
    gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def verify_partial_hyperbolicity(tmap: TorusMap, grid_n: int = 32, budget: int = 32) -> dict:
    """Grid check that the splitting survives: used as the admissibility gate.

    Returns a report dict; raises NoSeparationError or DegenerateFrameError
    when the rate ordering, the frame determinant, or the equivariance of the
    computed bundles fails anywhere on the grid.
    """
    pts = grid_sample(grid_n)
    fb = bundle_frames(tmap, pts, budget)
    det_min = float(np.abs(fb.frame_det).min())
    if det_min <= _MIN_FRAME_DET:
        raise DegenerateFrameError(f"min |det| on grid = {det_min:.3e}")
    r = fb.rates
    ok = (r[:, 2] < r[:, 1]) & (r[:, 1] < r[:, 0]) & (r[:, 2] < 1.0) & (1.0 < r[:, 0])
    if not bool(ok.all()):
        bad = int((~ok).sum())
        raise NoSeparationError(f"rate ordering fails at {bad}/{len(pts)} grid points")
    # equivariance probe on a sub-grid (the full grid would double the cost)
    sub = pts[:: max(1, len(pts) // 512)]
    res = frame_residuals(tmap, sub, budget)
    worst = float(res.max())
    if worst > 1e-3:
        raise NoSeparationError(f"bundle equivariance defect {worst:.2e} on grid")
    return {
        "grid_n": grid_n,
        "budget": budget,
        "min_frame_det": det_min,
        "rate_ss_sup": float(r[:, 2].max()),
        "rate_c_inf": float(r[:, 1].min()),
        "rate_c_sup": float(r[:, 1].max()),
        "rate_uu_inf": float(r[:, 0].min()),
        "worst_residual": worst,
    }


def distortion_estimate(tmap: TorusMap, plaque, k: int, eps0: float = 0.05) -> float:
    """Endpoint-derivative ratio along k iterates of a center plaque.

    Measured directly: each polyline segment's length quotient after k steps
    estimates the derivative of f^k along the curve, and the returned value
    is (max over segments) / (min over segments).  Raises ScaleExceededError
    if an iterate grows beyond eps0.
    """
    nodes = np.asarray(plaque.nodes, dtype=float)
    if nodes.shape[0] < 3:
        raise ValueError("plaque needs at least 3 nodes")
    if k == 0:
        return 1.0
    seg0 = np.linalg.norm(np.diff(nodes, axis=0), axis=-1)
    cur = nodes
    for step in range(1, k + 1):
        cur = tmap.apply_lift(cur)
        length = float(np.linalg.norm(np.diff(cur, axis=0), axis=-1).sum())
        if length > eps0:
            raise ScaleExceededError(
                f"iterate {step} has length {length:.4f} > eps0={eps0}"
            )
    seg_k = np.linalg.norm(np.diff(cur, axis=0), axis=-1)
    quot = seg_k / seg0
    return float(quot.max() / quot.min())


def fit_distortion_constants(tmap: TorusMap, plaque, k: int, eps0: float = 0.05):
    """Fit (C, theta) so that exp(C sum_i len_i^theta) tracks measured c_k.

    Returns (C, theta, predicted c_k).  The lengths are those of the first k
    iterates of the plaque, capped at eps0, matching the measured product
    structure of the one-step stretches.
    """
    nodes = np.asarray(plaque.nodes, dtype=float)
    lengths = []
    cur = nodes
    for _ in range(k):
        lengths.append(float(np.linalg.norm(np.diff(cur, axis=0), axis=-1).sum()))
        cur = tmap.apply_lift(cur)
    lengths = np.minimum(np.asarray(lengths), eps0)
    targets = np.array(
        [np.log(distortion_estimate(tmap, plaque, i, eps0)) for i in range(1, k + 1)]
    )
    best = None
    for theta in np.linspace(0.05, 1.0, 96):
        basis = np.array([np.sum(lengths[:i] ** theta) for i in range(1, k + 1)])
        denom = float(basis @ basis)
        if denom == 0.0:
            continue
        c = float(basis @ targets) / denom
        err = float(np.sum((c * basis - targets) ** 2))
        if best is None or err < best[0]:
            best = (err, c, theta, float(np.exp(c * basis[-1])))
    _, c, theta, pred = best
    return c, theta, pred
